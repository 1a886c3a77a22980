"""Synthetic-data generator for the clustering model, plus recovery scoring.

The default scenario produces three markers (gaussian, poisson, binomial)
observed at four visits per subject: a baseline at t=0 and one uniform draw
from each of the windows (0,15), (15,25), (25,30), sorted as a guard.  Global
clusters are contiguous subject blocks; each local label equals the global
label with probability alpha_r and is uniform over the other labels
otherwise; responses are generated from the family observation model at the
local cluster's parameters.  Random effects are multivariate normal or
multivariate t with 5 degrees of freedom rescaled so their covariance still
equals Sigma.

Shipped default true-parameter tables exist for K in {2, 3, 4}.  Separations
follow the generator's design rules: gaussian intercepts at least 2 residual
SDs apart, poisson log-intercepts at least 0.7 apart, binomial logit
intercepts at least 2 apart, with modest diagonal Sigma.  For K >= 3 the
low/mid/high roles are permuted across markers so that no two markers share
the same closest cluster pair.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from importlib import resources
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import families as fam
from .config import MarkerConfig, McmcControls, ModelConfig
from .data import Dataset, MarkerSeries

DEFAULT_WINDOWS = ((0.0, 0.0), (0.0, 15.0), (15.0, 25.0), (25.0, 30.0))


class SimulationError(ValueError):
    pass


@dataclass
class TrueParams:
    """Generating parameters for one scenario."""

    marker_names: tuple
    families: tuple
    fixed_terms: tuple     # per marker
    random_terms: tuple    # per marker
    gamma: list            # [r] (K, p_r)
    Sigma: list            # [r] (K, q_r, q_r)
    sigma2: np.ndarray     # (K, R); 1.0 where not gaussian

    @property
    def K(self) -> int:
        return self.gamma[0].shape[0]

    @property
    def R(self) -> int:
        return len(self.marker_names)

    def marker_configs(self) -> tuple:
        return tuple(
            MarkerConfig(name=self.marker_names[r], family=self.families[r],
                         fixed=self.fixed_terms[r], random=self.random_terms[r])
            for r in range(self.R)
        )


def default_true_params(K: int) -> TrueParams:
    """Shipped true-parameter table for K in {2, 3, 4}."""
    text = resources.files("longcc").joinpath("_data/true_params.json").read_text()
    tables = json.loads(text)
    key = str(int(K))
    if key not in tables:
        raise SimulationError(
            f"default true parameters exist only for K in {sorted(map(int, tables))}, got {K}"
        )
    markers = tables[key]["markers"]
    names, fams_, fixed, random, gamma, Sigma = [], [], [], [], [], []
    sigma2 = np.ones((int(K), len(markers)))
    for r, m in enumerate(markers):
        names.append(m["name"])
        fams_.append(m["family"])
        fixed.append(tuple(m["fixed"]))
        random.append(tuple(m["random"]))
        gamma.append(np.asarray(m["gamma"], dtype=float))
        Sigma.append(np.asarray(m["Sigma"], dtype=float))
        if m["sigma2"] is not None:
            sigma2[:, r] = float(m["sigma2"])
    return TrueParams(
        marker_names=tuple(names), families=tuple(fams_),
        fixed_terms=tuple(fixed), random_terms=tuple(random),
        gamma=gamma, Sigma=Sigma, sigma2=sigma2,
    )


@dataclass
class ScenarioSpec:
    """One simulation setting.

    sizes defaults to 100 subjects per cluster; alpha has one entry per
    marker; re_law is "normal" or "t5"; windows has one (lo, hi) pair per
    visit, degenerate pairs meaning a fixed time.
    """

    K: int
    alpha: tuple
    params: Optional[TrueParams] = None
    sizes: Optional[tuple] = None
    re_law: str = "normal"
    windows: tuple = DEFAULT_WINDOWS
    seed: int = 0

    def resolved(self) -> "ScenarioSpec":
        params = self.params if self.params is not None else default_true_params(self.K)
        sizes = self.sizes if self.sizes is not None else (100,) * self.K
        spec = replace(self, params=params, sizes=tuple(int(s) for s in sizes))
        _validate_scenario(spec)
        return spec


def _validate_scenario(spec: ScenarioSpec) -> None:
    p = spec.params
    if spec.K < 2:
        raise SimulationError("K must be >= 2")
    if p.K != spec.K:
        raise SimulationError(f"params are for K={p.K}, scenario says K={spec.K}")
    if len(spec.sizes) != spec.K or any(s < 1 for s in spec.sizes):
        raise SimulationError("sizes must give a positive count per cluster")
    if len(spec.alpha) != p.R:
        raise SimulationError(f"alpha needs one entry per marker ({p.R})")
    for a in spec.alpha:
        if not (1.0 / spec.K <= a <= 1.0):
            raise SimulationError(f"alpha entries must lie in [1/K, 1], got {a}")
    if spec.re_law not in ("normal", "t5"):
        raise SimulationError(f"re_law must be 'normal' or 't5', got {spec.re_law!r}")
    if len(spec.windows) < 1:
        raise SimulationError("need at least one visit window")
    for lo, hi in spec.windows:
        if hi < lo:
            raise SimulationError(f"window ({lo}, {hi}) is inverted")


@dataclass
class SimulatedTruth:
    """Generated dataset together with everything that generated it."""

    dataset: Dataset
    C: np.ndarray          # (N,) global labels, 0-based
    L: np.ndarray          # (N, R) local labels, 0-based
    beta: list             # [r] (N, q_r) generated random effects
    spec: ScenarioSpec


def _draw_random_effects(rng, Sigma: np.ndarray, law: str) -> np.ndarray:
    q = Sigma.shape[0]
    if q == 0:
        return np.zeros(0)
    z = np.linalg.cholesky(Sigma) @ rng.standard_normal(q)
    if law == "t5":
        w = rng.chisquare(5)
        # multivariate t(5) with shape (3/5) Sigma has covariance Sigma
        z = z * np.sqrt(3.0 / max(w, 1e-12))
    return z


def simulate_dataset(spec: ScenarioSpec) -> SimulatedTruth:
    """Generate one dataset; fully determined by the scenario (incl. seed)."""
    spec = spec.resolved()
    p = spec.params
    K, R = spec.K, p.R
    N = int(sum(spec.sizes))
    seed = spec.seed
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    rng = np.random.default_rng(ss)

    C = np.repeat(np.arange(K), spec.sizes)
    L = np.empty((N, R), dtype=np.int64)
    for r in range(R):
        agree = rng.random(N) < spec.alpha[r]
        shift = rng.integers(0, K - 1, size=N)
        other = shift + (shift >= C)         # uniform over the K-1 other labels
        L[:, r] = np.where(agree, C, other)

    times = np.empty((N, len(spec.windows)))
    for j, (lo, hi) in enumerate(spec.windows):
        times[:, j] = lo if hi == lo else rng.uniform(lo, hi, size=N)
    times.sort(axis=1)                        # guard against window overlap

    from .data import BUILDERS
    beta_all = []
    series = {}
    subject_ids = tuple(f"S{i + 1:04d}" for i in range(N))
    for r in range(R):
        q = len(p.random_terms[r])
        B = np.empty((N, q))
        for i in range(N):
            B[i] = _draw_random_effects(rng, p.Sigma[r][L[i, r]], spec.re_law)
        beta_all.append(B)
        for i in range(N):
            t = times[i]
            X = np.column_stack([BUILDERS[name](t) for name in p.fixed_terms[r]])
            Z = np.column_stack([BUILDERS[name](t) for name in p.random_terms[r]]) \
                if q > 0 else np.zeros((t.size, 0))
            k = L[i, r]
            eta = X @ p.gamma[r][k] + (Z @ B[i] if q > 0 else 0.0)
            family = p.families[r]
            if family == fam.GAUSSIAN:
                y = eta + rng.normal(0.0, np.sqrt(p.sigma2[k, r]), size=eta.size)
            elif family == fam.POISSON:
                y = rng.poisson(fam.inverse_link(family, eta)).astype(float)
            else:
                y = rng.binomial(1, fam.inverse_link(family, eta)).astype(float)
            series[(i, r)] = MarkerSeries(subject=i, marker=r, times=t.copy(), values=y)

    dataset = Dataset(subject_ids=subject_ids, marker_names=p.marker_names,
                      families=p.families, series=series)
    return SimulatedTruth(dataset=dataset, C=C, L=L, beta=beta_all, spec=spec)


def scenario_model_config(spec: ScenarioSpec, K_fit: Optional[int] = None,
                          mcmc: Optional[McmcControls] = None,
                          sigma_common: bool = True) -> ModelConfig:
    """ModelConfig whose markers/designs match the scenario's generator."""
    spec = spec.resolved()
    return ModelConfig(
        K=K_fit if K_fit is not None else spec.K,
        markers=spec.params.marker_configs(),
        sigma_common=sigma_common,
        mcmc=mcmc if mcmc is not None else McmcControls(),
    )


# ---------------------------------------------------------------------------
# scenario JSON (CLI surface)

def scenario_from_json(obj: Mapping) -> tuple:
    """Parse {"K", "alpha", "replicates", ...}; returns (ScenarioSpec, replicates)."""
    if not isinstance(obj, Mapping):
        raise SimulationError("scenario: expected a JSON object")
    for key in ("K", "alpha"):
        if key not in obj:
            raise SimulationError(f"scenario.{key}: missing required key")
    known = {"K", "alpha", "sizes", "re_law", "replicates", "seed", "windows"}
    for key in obj:
        if key not in known:
            raise SimulationError(f"scenario.{key}: unknown key")
    spec = ScenarioSpec(
        K=int(obj["K"]),
        alpha=tuple(float(a) for a in obj["alpha"]),
        sizes=tuple(int(s) for s in obj["sizes"]) if obj.get("sizes") else None,
        re_law=str(obj.get("re_law", "normal")),
        windows=tuple((float(lo), float(hi)) for lo, hi in obj.get("windows", DEFAULT_WINDOWS)),
        seed=int(obj.get("seed", 0)),
    )
    replicates = int(obj.get("replicates", 1))
    if replicates < 1:
        raise SimulationError("scenario.replicates: must be >= 1")
    spec.resolved()     # validate eagerly, including the K table lookup
    return spec, replicates


def replicate_seeds(master_seed: int, n: int) -> list:
    """Per-replicate SeedSequences: SeedSequence(master).spawn(n)."""
    return np.random.SeedSequence(master_seed).spawn(n)


def truth_to_json(truth: SimulatedTruth) -> dict:
    """truth.json payload: labels are written 1-based."""
    spec = truth.spec
    p = spec.params
    return {
        "K": spec.K,
        "alpha": [float(a) for a in spec.alpha],
        "sizes": [int(s) for s in spec.sizes],
        "re_law": spec.re_law,
        "subject_ids": list(truth.dataset.subject_ids),
        "C": [int(c) + 1 for c in truth.C],
        "L": {p.marker_names[r]: [int(v) + 1 for v in truth.L[:, r]]
              for r in range(p.R)},
        "params": {
            p.marker_names[r]: {
                "family": p.families[r],
                "fixed": list(p.fixed_terms[r]),
                "random": list(p.random_terms[r]),
                "gamma": p.gamma[r].tolist(),
                "Sigma": p.Sigma[r].tolist(),
                "sigma2": (p.sigma2[:, r].tolist()
                           if p.families[r] == fam.GAUSSIAN else None),
            }
            for r in range(p.R)
        },
    }


# ---------------------------------------------------------------------------
# recovery scoring

def align_to_truth(truth: TrueParams, est_gamma: Sequence[np.ndarray]) -> np.ndarray:
    """Permutation perm with perm[k_true] = matching estimated cluster index.

    Minimizes the total squared gamma difference over cluster assignments;
    the cost decomposes per (true, estimated) pair, so the linear-assignment
    solution is the exact minimizer.
    """
    K = truth.K
    cost = np.zeros((K, K))
    for r in range(truth.R):
        gt = truth.gamma[r]
        ge = np.asarray(est_gamma[r])
        diff = gt[:, None, :] - ge[None, :, :]
        cost += np.sum(diff ** 2, axis=2)
    row, col = linear_sum_assignment(cost)
    perm = np.empty(K, dtype=np.int64)
    perm[row] = col
    return perm


def posterior_mean_estimates(draws) -> dict:
    """Posterior means of the cluster parameters from (relabeled) draws."""
    return {
        "gamma": [g.mean(axis=0) for g in draws.gamma],
        "Sigma": [s.mean(axis=0) for s in draws.Sigma],
        "sigma2": draws.sigma2.mean(axis=0),
    }


def rmse_tables(truth: TrueParams, estimates: Sequence[Mapping]) -> dict:
    """Root-mean-square errors across replicates, after per-replicate alignment.

    estimates: one mapping per replicate with keys gamma ([r] (K, p_r)),
    Sigma ([r] (K, q_r, q_r)), sigma2 ((K, R)).  Returns per-parameter RMSE
    arrays in the truth's cluster order plus the alignment permutations.
    """
    if not estimates:
        raise ValueError("need at least one replicate estimate")
    K, R = truth.K, truth.R
    perms = []
    sq_gamma = [np.zeros_like(truth.gamma[r]) for r in range(R)]
    sq_Sigma = [np.zeros_like(truth.Sigma[r]) for r in range(R)]
    sq_sigma2 = np.zeros_like(truth.sigma2)
    for est in estimates:
        perm = align_to_truth(truth, est["gamma"])
        perms.append(perm)
        for r in range(R):
            ge = np.asarray(est["gamma"][r])[perm]
            sq_gamma[r] += (ge - truth.gamma[r]) ** 2
            se = np.asarray(est["Sigma"][r])[perm]
            sq_Sigma[r] += (se - truth.Sigma[r]) ** 2
        sq_sigma2 += (np.asarray(est["sigma2"])[perm] - truth.sigma2) ** 2
    n = float(len(estimates))
    return {
        "gamma": [np.sqrt(s / n) for s in sq_gamma],
        "Sigma": [np.sqrt(s / n) for s in sq_Sigma],
        "sigma2": np.sqrt(sq_sigma2 / n),
        "permutations": perms,
    }
