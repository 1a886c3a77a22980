"""Fit orchestration: multi-chain runs, post-processing, and K selection.

Chains run in separate processes when possible (fork start method, one worker
per chain) and fall back to a serial loop if the pool cannot be created.
Either path produces bit-identical draws because every chain consumes only its
own derived seed stream.

Seed derivation from the single user seed:

    master = SeedSequence(seed)
    chain c     <- master child c              (c = 0..chains-1)
    PPC stream  <- master child `chains`
    select-k    <- SeedSequence(seed, spawn_key=(K,)) per candidate K
"""

from __future__ import annotations

import multiprocessing
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from concurrent.futures.process import BrokenProcessPool
from dataclasses import dataclass, replace
from typing import Mapping, Optional

import numpy as np

from .config import ConfigError, ModelConfig, PriorHyperparams, build_priors, validate_config
from .data import Dataset, build_designs
from .metrics import select_K
from .postprocess import (ClusteringResult, RelabeledDraws, bayes_pvalue, ppc_pass,
                          relabel_stephens, summarize)
from .sampler import PosteriorDraws, merge_draws, run_chain


@dataclass
class FitResult:
    """A complete fit: relabeled draws, summary, and the PPC discrepancies."""

    relabeled: RelabeledDraws
    result: ClusteringResult
    T_obs: np.ndarray
    T_rep: np.ndarray
    seed: object

    @property
    def draws(self) -> PosteriorDraws:
        return self.relabeled.draws


def _chain_worker(payload):
    data, config, priors, ss, idx = payload
    designs = build_designs(data, config.design_spec())
    return run_chain(data, designs, config, priors, ss, chain_index=idx)


def run_chains(data: Dataset, config: ModelConfig, priors: PriorHyperparams,
               master: np.random.SeedSequence, parallel: bool = True) -> PosteriorDraws:
    """Run the configured number of chains off `master` and merge the draws."""
    n = config.mcmc.chains
    seeds = master.spawn(n)
    parts = None
    if parallel and n > 1:
        try:
            mp_ctx = None
            if "fork" in multiprocessing.get_all_start_methods():
                mp_ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(max_workers=min(n, os.cpu_count() or 1),
                                     mp_context=mp_ctx) as pool:
                futures = [pool.submit(_chain_worker, (data, config, priors, seeds[c], c))
                           for c in range(n)]
                parts = [f.result() for f in futures]
        except (BrokenProcessPool, OSError, PermissionError):
            warnings.warn("process pool unavailable; running chains serially")
            parts = None
    if parts is None:
        designs = build_designs(data, config.design_spec())
        parts = [run_chain(data, designs, config, priors, seeds[c], chain_index=c)
                 for c in range(n)]
    return merge_draws(parts)


def fit_dataset(data: Dataset, config: ModelConfig,
                prior_overrides: Optional[Mapping] = None, seed=0,
                parallel: bool = True) -> FitResult:
    """End-to-end fit: validate, sample, relabel, summarize, PPC."""
    priors = build_priors(config, prior_overrides)
    errs = validate_config(config, priors, data)
    if errs:
        raise ConfigError("; ".join(errs))
    master = (seed if isinstance(seed, np.random.SeedSequence)
              else np.random.SeedSequence(seed))
    draws = run_chains(data, config, priors, master, parallel=parallel)
    relabeled = relabel_stephens(draws)
    result = summarize(relabeled)
    designs = build_designs(data, config.design_spec())
    ppc_rng = np.random.default_rng(master.spawn(1)[0])
    T_obs, T_rep = ppc_pass(relabeled.draws, data, designs, ppc_rng)
    result.bayes_p = bayes_pvalue(T_obs, T_rep)
    return FitResult(relabeled=relabeled, result=result,
                     T_obs=T_obs, T_rep=T_rep, seed=seed)


@dataclass
class SelectKResult:
    """Adherence scan over candidate K."""

    table: dict              # K -> mean adjusted adherence
    K_hat: int
    tied: bool
    errors: dict             # K -> annotated failure message
    fits: dict               # K -> FitResult


def select_k_scan(data: Dataset, base_config: ModelConfig, k_values,
                  prior_overrides: Optional[Mapping] = None, seed=0,
                  parallel: bool = True, keep_fits: bool = True) -> SelectKResult:
    """Fit each candidate K and pick the one with maximum mean adjusted adherence.

    Per-K randomness is derived as SeedSequence(seed, spawn_key=(K,)) so adding
    or removing candidates does not perturb the others.  Failures are recorded
    per K and skipped; at least one candidate must succeed.
    """
    ks = sorted({int(k) for k in k_values})
    if not ks:
        raise ConfigError("select-k: empty candidate range")
    table, errors, fits = {}, {}, {}
    for K in ks:
        cfg = replace(base_config, K=K)
        master = np.random.SeedSequence(entropy=seed, spawn_key=(K,))
        try:
            fr = fit_dataset(data, cfg, prior_overrides, seed=master, parallel=parallel)
        except Exception as exc:
            errors[K] = f"fit failed for K={K}: {exc}"
            continue
        table[K] = float(fr.result.mean_alpha_star)
        if keep_fits:
            fits[K] = fr
    if not table:
        raise RuntimeError("all candidate K failed: " + "; ".join(errors.values()))
    K_hat, tied = select_K(table)
    return SelectKResult(table=table, K_hat=K_hat, tied=tied, errors=errors, fits=fits)
