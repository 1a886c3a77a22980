"""Post-processing: relabeling, point estimates, convergence, predictive checks.

The mixture posterior is invariant to permuting cluster indices, so raw chains
can switch labels mid-run.  relabel_stephens() fixes this by minimizing the
Kullback-Leibler divergence between each draw's classification probability
matrix and a running average: alternating between updating the average and
re-solving one optimal permutation per draw (a linear assignment problem)
decreases the objective monotonically, so the loop terminates.

Also here: modal point estimates with tie flags, the Geweke early/late-segment
z statistic with batch-means variances, posterior predictive replication with
a chi-square discrepancy, and posterior summaries (means and equal-tailed 95%
intervals by linear-interpolation quantiles).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import xlogy

from . import families as fam
from .data import Dataset, DesignMatrices, MarkerSeries
from .sampler import PosteriorDraws

_EPS = 1e-300


class PostprocessError(RuntimeError):
    pass


class GewekeError(PostprocessError):
    pass


# ---------------------------------------------------------------------------
# relabeling

@dataclass
class RelabeledDraws:
    """Draws with per-draw label permutations applied consistently.

    permutations[s, k] is the new index of the draw's original cluster k;
    applying the recorded permutations to the raw draws reproduces `draws`.
    """

    draws: PosteriorDraws
    permutations: np.ndarray      # (S, K)
    n_rounds: int
    objective: List[float] = field(default_factory=list)


def _apply_permutations(draws: PosteriorDraws, perms: np.ndarray) -> PosteriorDraws:
    S, K = perms.shape
    out = copy.copy(draws)
    rows = np.arange(S)[:, None]
    out.C = perms[rows, draws.C].astype(draws.C.dtype)
    out.L = perms[np.arange(S)[:, None, None], draws.L].astype(draws.L.dtype)
    out.pi = np.empty_like(draws.pi)
    np.put_along_axis(out.pi, perms, draws.pi, axis=1)
    out.sigma2 = np.empty_like(draws.sigma2)
    np.put_along_axis(out.sigma2, perms[:, :, None], draws.sigma2, axis=1)
    out.probC = np.empty_like(draws.probC)
    np.put_along_axis(out.probC, np.broadcast_to(perms[:, None, :], draws.probC.shape),
                      draws.probC, axis=2)
    out.gamma = []
    out.Sigma = []
    for r in range(draws.R):
        g = np.empty_like(draws.gamma[r])
        np.put_along_axis(g, perms[:, :, None], draws.gamma[r], axis=1)
        out.gamma.append(g)
        s = np.empty_like(draws.Sigma[r])
        np.put_along_axis(s, perms[:, :, None, None], draws.Sigma[r], axis=1)
        out.Sigma.append(s)
    out.beta = [b.copy() for b in draws.beta]   # subject-indexed, unchanged
    return out


def relabel_stephens(draws: PosteriorDraws, max_rounds: int = 100) -> RelabeledDraws:
    """Iterative KL relabeling of the classification probability matrices.

    Each round averages the permuted (S, N, K) probability arrays into Q and
    then finds, per draw, the label permutation minimizing
    sum_i sum_k P[i,k] (log P[i,k] - log Q[i, perm(k)]); the assignment
    solution is exact because the objective separates over columns.
    """
    P = draws.probC
    S, N, K = P.shape
    perms = np.tile(np.arange(K), (S, 1))
    const = float(np.sum(xlogy(P, P)))       # sum P log P, permutation-invariant
    objective = []
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        inv = np.argsort(perms, axis=1)
        P_perm = np.take_along_axis(P, inv[:, None, :], axis=2)
        Q = P_perm.mean(axis=0)
        logQ = np.log(np.clip(Q, _EPS, None))
        # cross[s, j, l] = sum_i P[s,i,j] log Q[i,l]
        cross = np.einsum("snj,nl->sjl", P, logQ)
        new_perms = np.empty_like(perms)
        total_cross = 0.0
        for s in range(S):
            row, col = linear_sum_assignment(-cross[s])
            new_perms[s, row] = col
            total_cross += cross[s][row, col].sum()
        objective.append(const - total_cross)
        if np.array_equal(new_perms, perms):
            break
        perms = new_perms
    return RelabeledDraws(
        draws=_apply_permutations(draws, perms),
        permutations=perms,
        n_rounds=rounds,
        objective=objective,
    )


# ---------------------------------------------------------------------------
# point estimates

@dataclass
class ModeEstimates:
    """Per-subject modal labels across draws, with tie diagnostics."""

    C_hat: np.ndarray       # (N,)
    C_tie: np.ndarray       # (N,) bool
    C_prob: np.ndarray      # (N,) modal-label relative frequency
    L_hat: np.ndarray       # (N, R)
    L_tie: np.ndarray       # (N, R) bool


def _modal(labels: np.ndarray, K: int):
    """Mode along axis 0 with smallest-label tie-break; returns (mode, tie, freq)."""
    S = labels.shape[0]
    counts = np.stack([(labels == k).sum(axis=0) for k in range(K)])
    mode = np.argmax(counts, axis=0)       # first (= smallest) argmax
    mx = counts.max(axis=0)
    tie = (counts == mx).sum(axis=0) > 1
    return mode, tie, mx / float(S)


def point_estimate_mode(relabeled: RelabeledDraws) -> ModeEstimates:
    d = relabeled.draws
    C_hat, C_tie, C_prob = _modal(d.C, d.K)
    L_hat = np.empty((d.N, d.R), dtype=np.int64)
    L_tie = np.empty((d.N, d.R), dtype=bool)
    for r in range(d.R):
        L_hat[:, r], L_tie[:, r], _ = _modal(d.L[:, :, r], d.K)
    return ModeEstimates(C_hat=C_hat, C_tie=C_tie, C_prob=C_prob,
                         L_hat=L_hat, L_tie=L_tie)


# ---------------------------------------------------------------------------
# Geweke diagnostic

def _batch_means_variance(seg: np.ndarray) -> float:
    """Variance of the segment mean via non-overlapping batch means."""
    n = seg.size
    nb = int(np.floor(np.sqrt(n)))
    bs = n // nb
    means = seg[:nb * bs].reshape(nb, bs).mean(axis=1)
    if nb < 2:
        return 0.0
    return float(np.var(means, ddof=1) / nb)


def geweke_z(chain, first: float = 0.1, last: float = 0.5) -> float:
    """Early-vs-late mean comparison z statistic.

    Compares the first `first` fraction against the last `last` fraction of
    the chain; each segment mean's variance comes from non-overlapping batch
    means with floor(sqrt(segment length)) batches.

    Raises
    ------
    GewekeError
        "chain too short" below 100 points; "degenerate chain" when both
        segments have zero variance.
    """
    x = np.asarray(chain, dtype=float).ravel()
    if x.size < 100:
        raise GewekeError("chain too short")
    nA = int(np.floor(first * x.size))
    nB = int(np.floor(last * x.size))
    segA = x[:nA]
    segB = x[x.size - nB:]
    vA = _batch_means_variance(segA)
    vB = _batch_means_variance(segB)
    if vA + vB <= 0.0:
        raise GewekeError("degenerate chain")
    return float((segA.mean() - segB.mean()) / np.sqrt(vA + vB))


# ---------------------------------------------------------------------------
# posterior predictive checks

@dataclass
class DrawSnapshot:
    """One retained draw's parameters, as needed for predictive replication."""

    L: np.ndarray        # (N, R)
    gamma: list          # [r] (K, p_r)
    beta: list           # [r] (N, q_r)
    sigma2: np.ndarray   # (K, R)

    @classmethod
    def from_draws(cls, draws: PosteriorDraws, s: int) -> "DrawSnapshot":
        return cls(
            L=np.asarray(draws.L[s], dtype=np.int64),
            gamma=[draws.gamma[r][s] for r in range(draws.R)],
            beta=[draws.beta[r][s] for r in range(draws.R)],
            sigma2=draws.sigma2[s],
        )


def _snapshot_eta(snap: DrawSnapshot, data: Dataset, designs: DesignMatrices,
                  i: int, r: int) -> np.ndarray:
    k = int(snap.L[i, r])
    eta = designs.X[(i, r)] @ snap.gamma[r][k]
    if snap.beta[r].shape[1] > 0:
        eta = eta + designs.Z[(i, r)] @ snap.beta[r][i]
    return eta


def ppc_replicate(snap: DrawSnapshot, data: Dataset, designs: DesignMatrices,
                  rng) -> Dataset:
    """Replicate the dataset from one draw's parameters.

    The draw's local labels and random effects are treated as observed; new
    responses are generated from the per-family observation model at the
    draw's linear predictors.
    """
    series = {}
    for (i, r), s in data.series.items():
        eta = _snapshot_eta(snap, data, designs, i, r)
        family = data.families[r]
        if family == fam.GAUSSIAN:
            k = int(snap.L[i, r])
            y = eta + rng.normal(0.0, np.sqrt(snap.sigma2[k, r]), size=eta.size)
        elif family == fam.POISSON:
            y = rng.poisson(fam.inverse_link(family, eta)).astype(float)
        else:
            y = rng.binomial(1, fam.inverse_link(family, eta)).astype(float)
        series[(i, r)] = MarkerSeries(subject=i, marker=r, times=s.times.copy(), values=y)
    return Dataset(subject_ids=data.subject_ids, marker_names=data.marker_names,
                   families=data.families, series=series)


def chi2_discrepancy(snap: DrawSnapshot, data: Dataset, designs: DesignMatrices) -> float:
    """Chi-square discrepancy sum_{i,r,j} (y - mu)^2 / Var(y) at the draw.

    Each observation is scored under its subject's local cluster for that
    marker; the variance is sigma^2_{k,r} for gaussian markers and the
    per-observation variance function otherwise.
    """
    total = 0.0
    for (i, r), s in data.series.items():
        eta = _snapshot_eta(snap, data, designs, i, r)
        mu = fam.inverse_link(data.families[r], eta)
        if data.families[r] == fam.GAUSSIAN:
            k = int(snap.L[i, r])
            v = np.full(eta.size, snap.sigma2[k, r])
        else:
            v = fam.variance_function(data.families[r], eta)
        total += float(np.sum((s.values - mu) ** 2 / v))
    return total


def bayes_pvalue(t_obs, t_rep) -> float:
    """Fraction of draws where the replicated discrepancy strictly exceeds the observed."""
    t_obs = np.asarray(t_obs, dtype=float)
    t_rep = np.asarray(t_rep, dtype=float)
    if t_obs.shape != t_rep.shape or t_obs.size == 0:
        raise ValueError("need equal-length non-empty discrepancy sequences")
    return float(np.mean(t_rep > t_obs))


def ppc_pass(draws: PosteriorDraws, data: Dataset, designs: DesignMatrices, rng):
    """Vectorized PPC over all retained draws: returns (T_obs, T_rep) arrays."""
    from .sampler import build_marker_data
    markers = build_marker_data(data, designs)
    S = draws.S
    T_obs = np.zeros(S)
    T_rep = np.zeros(S)
    for r, md in enumerate(markers):
        family = md.family
        obs_idx = np.arange(md.n_obs)
        for s in range(S):
            kvec = np.asarray(draws.L[s, :, r], dtype=np.int64)
            kobs = kvec[md.subj]
            eta = (md.X @ draws.gamma[r][s].T)[obs_idx, kobs]
            if md.q > 0:
                eta = eta + np.einsum("mq,mq->m", md.Z, draws.beta[r][s][md.subj])
            mu = fam.inverse_link(family, eta)
            if family == fam.GAUSSIAN:
                v = draws.sigma2[s][kobs, r]
                y_rep = mu + rng.standard_normal(md.n_obs) * np.sqrt(v)
            elif family == fam.POISSON:
                v = mu
                y_rep = rng.poisson(mu).astype(float)
            else:
                v = mu * (1.0 - mu)
                y_rep = rng.binomial(1, mu).astype(float)
            v = np.maximum(v, _EPS)
            T_obs[s] += float(np.sum((md.y - mu) ** 2 / v))
            T_rep[s] += float(np.sum((y_rep - mu) ** 2 / v))
    return T_obs, T_rep


# ---------------------------------------------------------------------------
# summaries

def summary_interval(x: np.ndarray):
    """(mean, 2.5%, 97.5%) with numpy's default linear-interpolation quantiles."""
    x = np.asarray(x, dtype=float)
    lo, hi = np.quantile(x, [0.025, 0.975])
    return float(np.mean(x)), float(lo), float(hi)


@dataclass
class ParamSummary:
    name: str
    mean: float
    lo: float
    hi: float
    geweke: dict            # chain index -> z (float) or error string


@dataclass
class ClusteringResult:
    """Everything a fit report needs, computed from relabeled draws."""

    K: int
    marker_names: tuple
    families: tuple
    subject_ids: tuple
    modes: ModeEstimates
    proportions: np.ndarray          # (K,) share of subjects per modal global cluster
    alpha_mean: np.ndarray           # (R,)
    alpha_star: np.ndarray           # (R,) adjusted adherence of the posterior means
    mean_alpha_star: float
    params: List[ParamSummary]
    accept_gamma: np.ndarray
    accept_beta: np.ndarray
    relabel_rounds: int
    relabel_objective: List[float]
    bayes_p: Optional[float] = None


def _per_chain(values: np.ndarray, chain: np.ndarray) -> dict:
    out = {}
    for c in np.unique(chain):
        seg = values[chain == c]
        try:
            out[int(c)] = geweke_z(seg)
        except GewekeError as e:
            out[int(c)] = str(e)
    return out


def summarize(relabeled: RelabeledDraws) -> ClusteringResult:
    """Posterior means, 95% intervals, per-chain Geweke z, and point estimates."""
    d = relabeled.draws
    K, R = d.K, d.R
    modes = point_estimate_mode(relabeled)
    proportions = np.bincount(modes.C_hat, minlength=K) / float(modes.C_hat.size)

    params: List[ParamSummary] = []

    def add(name, series):
        mean, lo, hi = summary_interval(series)
        params.append(ParamSummary(name=name, mean=mean, lo=lo, hi=hi,
                                   geweke=_per_chain(series, d.chain)))

    for r in range(R):
        add(f"alpha[{d.marker_names[r]}]", d.alpha[:, r])
    for k in range(K):
        add(f"pi[{k + 1}]", d.pi[:, k])
    for r in range(R):
        name = d.marker_names[r]
        terms = d.fixed_terms[r]
        for k in range(K):
            for j, term in enumerate(terms):
                add(f"gamma[{name}][k={k + 1}][{term}]", d.gamma[r][:, k, j])
        q = d.Sigma[r].shape[-1]
        rterms = d.random_terms[r]
        for k in range(K):
            for a in range(q):
                for b in range(a + 1):
                    label = (f"Sigma[{name}][k={k + 1}][{rterms[a]},{rterms[b]}]")
                    add(label, d.Sigma[r][:, k, a, b])
        if d.families[r] == fam.GAUSSIAN:
            if d.sigma_common:
                add(f"sigma2[{name}]", d.sigma2[:, 0, r])
            else:
                for k in range(K):
                    add(f"sigma2[{name}][k={k + 1}]", d.sigma2[:, k, r])

    alpha_mean = d.alpha.mean(axis=0)
    alpha_star = (K * alpha_mean - 1.0) / (K - 1.0)
    return ClusteringResult(
        K=K,
        marker_names=d.marker_names,
        families=d.families,
        subject_ids=d.subject_ids,
        modes=modes,
        proportions=proportions,
        alpha_mean=alpha_mean,
        alpha_star=alpha_star,
        mean_alpha_star=float(alpha_star.mean()),
        params=params,
        accept_gamma=d.accept_gamma,
        accept_beta=d.accept_beta,
        relabel_rounds=relabeled.n_rounds,
        relabel_objective=list(relabeled.objective),
        bayes_p=None,
    )
