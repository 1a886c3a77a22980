"""Gibbs/Metropolis-Hastings sampler for consensus clustering of longitudinal markers.

Model.  Each subject i carries one global cluster label C_i in 0..K-1 and one
local label L_{i,r} per marker r.  Local labels adhere to the global label
through

    P(L_{i,r} = k | C_i = c, alpha_r) = vartheta(k, c, alpha_r)
                                      = alpha_r            if k == c
                                        (1-alpha_r)/(K-1)  otherwise,

with alpha_r in [1/K, 1].  Given L_{i,r} = k, marker r follows a canonical-link
GLMM with linear predictor eta = X gamma_{k,r} + Z beta_{i,r}, cluster-level
coefficients gamma_{k,r}, and subject-level random effects
beta_{i,r} ~ MVN(0, Sigma_{k,r}).

One sweep updates, in order: L, alpha, C, pi, then per marker the cluster
parameters gamma, Sigma, beta, sigma^2.  alpha, pi, Sigma, sigma^2 (and, for
Gaussian markers, gamma and beta) have conjugate full conditionals and are
drawn exactly.  Non-Gaussian gamma and beta use Metropolis-Hastings with a
quadratic-approximation proposal: with G the score and H the curvature of the
log likelihood at the current point and P0 the prior precision,

    Vt   = (P0 + H)^{-1}
    mean = current + Vt (G - P0 current)
    proposal ~ MVN(mean, tau * Vt),

accepted with probability min{1, f(proposal)/f(current)} (the proposal-density
ratio is treated as 1).  For Gaussian markers the same algebra lands exactly on
the conjugate conditional and the ratio is identically 1, so those steps are
taken as exact Gibbs draws and excluded from step-size adaptation.

All randomness flows from one seed: numpy SeedSequence children are spawned
per chain, and within a chain one child per step type in a fixed order, so
results are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy import stats
from scipy.linalg import solve_triangular

from . import families as fam
from .config import ModelConfig, PriorHyperparams, validate_config
from .data import Dataset, DesignMatrices

STEP_STREAMS = ("init", "L", "alpha", "C", "pi", "gamma", "Sigma", "beta", "sigma2")

_MIN_VAR = 1e-12
_MAX_VAR = 1e12


class SamplerError(RuntimeError):
    """Numerical failure inside the sampler (e.g. likelihood underflow)."""


# ---------------------------------------------------------------------------
# distribution primitives

def sample_truncated_beta(rng, a: float, b: float, lower: float, size=None):
    """Draw Beta(a, b) conditioned on [lower, 1] by upper-tail inverse CDF.

    Uses the survival function so that draws stay accurate when nearly all
    Beta mass lies below the truncation point.
    """
    sf_lo = stats.beta.sf(lower, a, b)
    if sf_lo <= 0.0:
        # conditional mass numerically concentrated at the boundary
        if size is None:
            return float(lower)
        return np.full(size, float(lower))
    u = rng.random(size)
    x = stats.beta.isf(u * sf_lo, a, b)
    return np.clip(x, lower, 1.0)


def sample_inverse_gamma(rng, a: float, b: float, size=None):
    """Draw from IG(a, b) with density ∝ x^{-a-1} e^{-b/x} (mean b/(a-1)).

    Equals 1/Gamma(shape=a, rate=b).  Guarded against Gamma-sampler underflow
    for very small shapes (vague empty-cluster conditionals).
    """
    g = rng.gamma(shape=a, scale=1.0 / b, size=size)
    g = np.maximum(g, 1.0 / _MAX_VAR)
    return np.clip(1.0 / g, _MIN_VAR, _MAX_VAR)


def sample_wishart(rng, df: float, scale: np.ndarray) -> np.ndarray:
    """Draw a Wishart(df, scale) matrix (E = df * scale)."""
    d = scale.shape[0]
    w = stats.wishart.rvs(df=df, scale=scale, random_state=rng)
    return np.atleast_2d(w).reshape(d, d)


def _safe_cholesky(mat: np.ndarray) -> np.ndarray:
    """Cholesky with escalating diagonal jitter on failure."""
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        pass
    d = mat.shape[-1]
    base = np.mean(np.abs(np.diagonal(mat, axis1=-2, axis2=-1))) + 1e-30
    for scale in (1e-10, 1e-8, 1e-6):
        try:
            return np.linalg.cholesky(mat + scale * base * np.eye(d))
        except np.linalg.LinAlgError:
            continue
    raise SamplerError("covariance factorization failed")


def sample_mvn_from_precision(rng, prec: np.ndarray, lin: np.ndarray):
    """Draw MVN with precision `prec` and mean prec^{-1} lin; returns (draw, mean)."""
    L = _safe_cholesky(prec)
    mean = np.linalg.solve(prec, lin)
    z = rng.standard_normal(prec.shape[0])
    # x = mean + L^{-T} z has covariance prec^{-1}
    draw = mean + solve_triangular(L, z, lower=True, trans="T")
    return draw, mean


def sample_mvn(rng, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    L = _safe_cholesky(cov)
    return mean + L @ rng.standard_normal(mean.shape[0])


# ---------------------------------------------------------------------------
# dependence function

def vartheta(k: int, c: int, alpha: float, K: int) -> float:
    """P(L = k | C = c, alpha): alpha on match, (1-alpha)/(K-1) otherwise."""
    if K < 2:
        raise ValueError("K must be >= 2")
    if not (1.0 / K <= alpha <= 1.0):
        raise ValueError(f"alpha must lie in [1/K, 1] = [{1.0 / K:.4g}, 1], got {alpha}")
    if not (0 <= k < K and 0 <= c < K):
        raise ValueError("labels out of range")
    return alpha if k == c else (1.0 - alpha) / (K - 1)


def _log_vartheta_rows(match_col: np.ndarray, alpha: float, K: int) -> np.ndarray:
    """(N, K) matrix of log vartheta(k, match_col[i], alpha) over all k."""
    n = match_col.shape[0]
    with np.errstate(divide="ignore"):
        log_miss = np.log((1.0 - alpha) / (K - 1))
        log_hit = np.log(alpha)
    out = np.full((n, K), log_miss)
    out[np.arange(n), match_col] = log_hit
    return out


# ---------------------------------------------------------------------------
# packed per-marker data

@dataclass
class MarkerData:
    """Flat per-marker observation arrays, subject-major, time-ordered."""

    family: str
    y: np.ndarray        # (M,)
    X: np.ndarray        # (M, p)
    Z: np.ndarray        # (M, q)
    subj: np.ndarray     # (M,) subject index per observation
    counts: np.ndarray   # (N,) observations per subject
    offsets: np.ndarray  # (N,) segment starts for reduceat
    ZZt: np.ndarray      # (M, q, q) per-observation outer products
    ZtZ_subj: np.ndarray  # (N, q, q) per-subject Z^T Z

    @property
    def n_obs(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.Z.shape[1]

    def seg_sum(self, values: np.ndarray) -> np.ndarray:
        """Per-subject segment sums along axis 0 (works for 1-d, 2-d, 3-d)."""
        return np.add.reduceat(values, self.offsets, axis=0)


def build_marker_data(data: Dataset, designs: DesignMatrices) -> List[MarkerData]:
    out = []
    N = data.n_subjects
    for r in range(data.n_markers):
        ys, Xs, Zs, subj = [], [], [], []
        counts = np.zeros(N, dtype=np.int64)
        for i in range(N):
            s = data.series[(i, r)]
            ys.append(s.values)
            Xs.append(designs.X[(i, r)])
            Zs.append(designs.Z[(i, r)])
            subj.append(np.full(s.n_obs, i, dtype=np.int64))
            counts[i] = s.n_obs
        y = np.concatenate(ys)
        X = np.vstack(Xs)
        Z = np.vstack(Zs)
        sidx = np.concatenate(subj)
        offsets = np.concatenate(([0], np.cumsum(counts)[:-1]))
        ZZt = Z[:, :, None] * Z[:, None, :]
        ZtZ_subj = np.add.reduceat(ZZt, offsets, axis=0)
        out.append(MarkerData(
            family=data.families[r], y=y, X=X, Z=Z, subj=sidx,
            counts=counts, offsets=offsets, ZZt=ZZt, ZtZ_subj=ZtZ_subj,
        ))
    return out


@dataclass
class SamplerContext:
    """Immutable bundle of data, configuration, priors, and precomputations."""

    data: Dataset
    config: ModelConfig
    priors: PriorHyperparams
    markers: List[MarkerData]
    V0inv: list           # [k][r] (p_r, p_r)

    @classmethod
    def build(cls, data: Dataset, designs: DesignMatrices,
              config: ModelConfig, priors: PriorHyperparams) -> "SamplerContext":
        markers = build_marker_data(data, designs)
        K, R = config.K, config.n_markers
        V0inv = [[np.linalg.inv(np.asarray(priors.V0[k][r])) for r in range(R)]
                 for k in range(K)]
        return cls(data=data, config=config, priors=priors,
                   markers=markers, V0inv=V0inv)

    @property
    def N(self) -> int:
        return self.data.n_subjects

    @property
    def K(self) -> int:
        return self.config.K

    @property
    def R(self) -> int:
        return self.config.n_markers


# ---------------------------------------------------------------------------
# chain state

@dataclass
class ChainState:
    """All latent quantities updated by the sweep, plus MH tuning state."""

    L: np.ndarray          # (N, R) int
    C: np.ndarray          # (N,) int
    alpha: np.ndarray      # (R,)
    pi: np.ndarray         # (K,)
    gamma: list            # [r] (K, p_r)
    Sigma: list            # [r] (K, q_r, q_r)
    sigma2: np.ndarray     # (K, R); 1.0 where the marker is not gaussian
    beta: list             # [r] (N, q_r)
    tau_gamma: np.ndarray  # (K, R)
    tau_beta: np.ndarray   # (K, R)
    win_prop_gamma: np.ndarray = None
    win_acc_gamma: np.ndarray = None
    win_prop_beta: np.ndarray = None
    win_acc_beta: np.ndarray = None
    tot_prop_gamma: np.ndarray = None
    tot_acc_gamma: np.ndarray = None
    tot_prop_beta: np.ndarray = None
    tot_acc_beta: np.ndarray = None

    def __post_init__(self):
        K, R = self.tau_gamma.shape
        for name in ("win_prop_gamma", "win_acc_gamma", "win_prop_beta", "win_acc_beta",
                     "tot_prop_gamma", "tot_acc_gamma", "tot_prop_beta", "tot_acc_beta"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros((K, R)))

    def reset_window_counters(self):
        for a in (self.win_prop_gamma, self.win_acc_gamma,
                  self.win_prop_beta, self.win_acc_beta):
            a[:] = 0.0

    def reset_total_counters(self):
        for a in (self.tot_prop_gamma, self.tot_acc_gamma,
                  self.tot_prop_beta, self.tot_acc_beta):
            a[:] = 0.0


def check_state(state: ChainState, ctx: SamplerContext) -> None:
    """Cheap invariants asserted after every sweep."""
    K = ctx.K
    if not np.isclose(state.pi.sum(), 1.0, atol=1e-8) or np.any(state.pi < 0):
        raise SamplerError("pi must be a probability vector")
    if np.any(state.alpha < 1.0 / K - 1e-12) or np.any(state.alpha > 1.0 + 1e-12):
        raise SamplerError("alpha out of [1/K, 1]")
    if np.any(state.L < 0) or np.any(state.L >= K):
        raise SamplerError("local labels out of range")
    if np.any(state.C < 0) or np.any(state.C >= K):
        raise SamplerError("global labels out of range")
    if np.any(state.sigma2 <= 0):
        raise SamplerError("sigma2 must be positive")
    if np.any(state.tau_gamma <= 0) or np.any(state.tau_beta <= 0):
        raise SamplerError("tau must be positive")


def init_state(data: Dataset, config: ModelConfig, priors: PriorHyperparams,
               rng, designs: Optional[DesignMatrices] = None) -> ChainState:
    """Data-driven, deterministic initialization.

    Each marker's local labels come from rank-binning subject mean responses
    into K equal-frequency groups; the first marker's bins seed the global
    labels.  gamma starts at a per-cluster least-squares fit (log / sign
    transformed responses for count / binary markers); beta at 0; Sigma at
    0.1 I; sigma^2 at the sample residual variance; alpha at the midpoint
    (1/K + 1)/2; pi uniform; proposal scales tau at 1.  The rng argument is
    accepted for interface symmetry with the update steps but unused: chains
    differentiate through their sampling streams, not the starting point.
    """
    del rng
    if designs is None:
        designs = _build_designs_from_config(data, config)
    ctx = SamplerContext.build(data, designs, config, priors)
    N, K, R = ctx.N, ctx.K, ctx.R

    L = np.zeros((N, R), dtype=np.int64)
    for r in range(R):
        md = ctx.markers[r]
        means = md.seg_sum(md.y) / md.counts
        order = np.argsort(means, kind="stable")
        ranks = np.empty(N, dtype=np.int64)
        ranks[order] = np.arange(N)
        L[:, r] = (ranks * K) // N

    C = L[:, 0].copy()

    alpha = np.full(R, (1.0 / K + 1.0) / 2.0)
    if config.mcmc.alpha_fixed is not None:
        alpha[:] = config.mcmc.alpha_fixed
    pi = np.full(K, 1.0 / K)

    gamma, Sigma, beta = [], [], []
    sigma2 = np.ones((K, R))
    for r in range(R):
        md = ctx.markers[r]
        g = np.zeros((K, md.p))
        for k in range(K):
            w = L[md.subj, r] == k
            if np.count_nonzero(w) > md.p:
                yk = md.y[w]
                if md.family == fam.POISSON:
                    yk = np.log(yk + 0.5)
                elif md.family == fam.BINOMIAL:
                    yk = np.where(yk > 0.5, 1.0, -1.0)
                g[k] = np.linalg.lstsq(md.X[w], yk, rcond=None)[0]
        gamma.append(g)
        if md.family == fam.GAUSSIAN:
            resid = md.y - np.einsum("mp,mp->m", md.X, g[L[md.subj, r]])
            sigma2[:, r] = max(float(np.var(resid)), 1e-6)
        q = md.q
        Sigma.append(np.broadcast_to(0.1 * np.eye(q), (K, q, q)).copy())
        beta.append(np.zeros((N, q)))

    return ChainState(
        L=L, C=C, alpha=alpha, pi=pi, gamma=gamma, Sigma=Sigma,
        sigma2=sigma2, beta=beta,
        tau_gamma=np.ones((K, R)), tau_beta=np.ones((K, R)),
    )


def _build_designs_from_config(data: Dataset, config: ModelConfig) -> DesignMatrices:
    from .data import build_designs
    return build_designs(data, config.design_spec())


# ---------------------------------------------------------------------------
# label updates

def _sample_rows_from_log_weights(logw: np.ndarray, rng) -> tuple:
    """Sample one category per row of an (n, K) log-weight matrix.

    Returns (indices, probabilities).  Rows whose weights are all -inf raise
    a likelihood-underflow error.
    """
    mx = np.max(logw, axis=1)
    bad = ~np.isfinite(mx)
    if np.any(bad):
        raise SamplerError("likelihood underflow: all label weights vanished "
                           f"for {int(bad.sum())} subject(s)")
    w = np.exp(logw - mx[:, None])
    total = w.sum(axis=1)
    probs = w / total[:, None]
    cum = np.cumsum(probs, axis=1)
    u = rng.random(logw.shape[0])
    idx = np.sum(cum < u[:, None], axis=1)
    return np.minimum(idx, logw.shape[1] - 1), probs


def _eta_matrix(state: ChainState, ctx: SamplerContext, r: int) -> np.ndarray:
    """(M, K) linear predictors under each candidate cluster.

    The random-effect contribution Z beta_{i,r} enters only the incumbent
    column k = current L_{i,r}; candidate clusters use beta = 0, its
    conditional-prior mean.
    """
    md = ctx.markers[r]
    etas = md.X @ state.gamma[r].T
    if md.q > 0:
        zb = np.einsum("mq,mq->m", md.Z, state.beta[r][md.subj])
        etas[np.arange(md.n_obs), state.L[md.subj, r]] += zb
    return etas


def _local_label_logliks(state: ChainState, ctx: SamplerContext, r: int) -> np.ndarray:
    """(N, K) per-subject log likelihood of marker r under each cluster."""
    md = ctx.markers[r]
    K = ctx.K
    etas = _eta_matrix(state, ctx, r)
    ll = np.empty((md.n_obs, K))
    for k in range(K):
        ll[:, k] = fam.pointwise_log_likelihood(
            md.family, md.y, etas[:, k], phi=state.sigma2[k, r])
    return md.seg_sum(ll)


def local_label_probs(state: ChainState, ctx: SamplerContext, r: int) -> np.ndarray:
    """(N, K) full-conditional P(L_{i,r} = k | ...) combining vartheta and likelihood."""
    logw = _local_label_logliks(state, ctx, r)
    logw += _log_vartheta_rows(state.C, state.alpha[r], ctx.K)
    mx = np.max(logw, axis=1)
    if np.any(~np.isfinite(mx)):
        raise SamplerError("likelihood underflow in local label update")
    w = np.exp(logw - mx[:, None])
    return w / w.sum(axis=1)[:, None]


def step_update_L(state: ChainState, ctx: SamplerContext, rng) -> None:
    for r in range(ctx.R):
        logw = _local_label_logliks(state, ctx, r)
        logw += _log_vartheta_rows(state.C, state.alpha[r], ctx.K)
        newL, _ = _sample_rows_from_log_weights(logw, rng)
        state.L[:, r] = newL


def alpha_posterior_params(state: ChainState, ctx: SamplerContext):
    """Truncated-beta full-conditional parameters.

    Per marker: (delta1 + tau_r, delta2 + N - tau_r) with tau_r the count of
    subjects whose local label matches the global label.  Shared adherence
    pools tau over markers against N*R.
    """
    pri = ctx.priors
    taus = np.sum(state.L == state.C[:, None], axis=0)
    if ctx.config.alpha_shared:
        tau = float(taus.sum())
        return (float(pri.delta1[0]) + tau,
                float(pri.delta2[0]) + ctx.N * ctx.R - tau)
    return pri.delta1 + taus, pri.delta2 + ctx.N - taus


def step_update_alpha(state: ChainState, ctx: SamplerContext, rng) -> None:
    if ctx.config.mcmc.alpha_fixed is not None:
        state.alpha[:] = ctx.config.mcmc.alpha_fixed
        return
    lower = 1.0 / ctx.K
    if ctx.config.alpha_shared:
        a, b = alpha_posterior_params(state, ctx)
        state.alpha[:] = sample_truncated_beta(rng, a, b, lower)
    else:
        a, b = alpha_posterior_params(state, ctx)
        for r in range(ctx.R):
            state.alpha[r] = sample_truncated_beta(rng, a[r], b[r], lower)


def global_label_probs(state: ChainState, ctx: SamplerContext) -> np.ndarray:
    """(N, K) full-conditional P(C_i = k | ...) ∝ pi_k prod_r vartheta(L_{i,r}, k, alpha_r)."""
    with np.errstate(divide="ignore"):
        logw = np.tile(np.log(state.pi), (ctx.N, 1))
    for r in range(ctx.R):
        logw += _log_vartheta_rows(state.L[:, r], state.alpha[r], ctx.K)
    mx = np.max(logw, axis=1)
    if np.any(~np.isfinite(mx)):
        raise SamplerError("underflow in global label update")
    w = np.exp(logw - mx[:, None])
    return w / w.sum(axis=1)[:, None]


def step_update_C(state: ChainState, ctx: SamplerContext, rng) -> np.ndarray:
    """Update C in place; returns the (N, K) classification probability matrix."""
    with np.errstate(divide="ignore"):
        logw = np.tile(np.log(state.pi), (ctx.N, 1))
    for r in range(ctx.R):
        logw += _log_vartheta_rows(state.L[:, r], state.alpha[r], ctx.K)
    newC, probs = _sample_rows_from_log_weights(logw, rng)
    state.C[:] = newC
    return probs


def step_update_pi(state: ChainState, ctx: SamplerContext, rng) -> None:
    counts = np.bincount(state.C, minlength=ctx.K)
    state.pi[:] = rng.dirichlet(ctx.priors.varphi0 + counts)


# ---------------------------------------------------------------------------
# cluster-parameter updates

def gamma_full_conditional(state: ChainState, ctx: SamplerContext, r: int, k: int):
    """Gaussian-marker exact conditional for gamma_{k,r}: returns (mean, cov)."""
    md = ctx.markers[r]
    if md.family != fam.GAUSSIAN:
        raise ValueError("exact gamma conditional exists only for gaussian markers")
    w = state.L[md.subj, r] == k
    Xm = md.X[w]
    phi = state.sigma2[k, r]
    if md.q > 0:
        zb = np.einsum("mq,mq->m", md.Z[w], state.beta[r][md.subj[w]])
    else:
        zb = 0.0
    prec = ctx.V0inv[k][r] + Xm.T @ Xm / phi
    lin = Xm.T @ (md.y[w] - zb) / phi
    cov = np.linalg.inv(prec)
    return cov @ lin, cov


def gamma_log_target(state: ChainState, ctx: SamplerContext, r: int, k: int,
                     gamma_k: np.ndarray) -> float:
    """Unnormalized log full conditional of gamma_{k,r} at gamma_k."""
    md = ctx.markers[r]
    w = state.L[md.subj, r] == k
    if md.q > 0:
        zb = np.einsum("mq,mq->m", md.Z[w], state.beta[r][md.subj[w]])
    else:
        zb = 0.0
    eta = md.X[w] @ gamma_k + zb
    ll = fam.log_likelihood(md.family, md.y[w], eta, phi=state.sigma2[k, r])
    return ll - 0.5 * gamma_k @ ctx.V0inv[k][r] @ gamma_k


def step_update_gamma(state: ChainState, ctx: SamplerContext, rng) -> None:
    for r in range(ctx.R):
        md = ctx.markers[r]
        for k in range(ctx.K):
            if md.family == fam.GAUSSIAN:
                w = state.L[md.subj, r] == k
                Xm = md.X[w]
                phi = state.sigma2[k, r]
                if md.q > 0:
                    zb = np.einsum("mq,mq->m", md.Z[w], state.beta[r][md.subj[w]])
                    resid = md.y[w] - zb
                else:
                    resid = md.y[w]
                prec = ctx.V0inv[k][r] + Xm.T @ Xm / phi
                lin = Xm.T @ resid / phi
                draw, _ = sample_mvn_from_precision(rng, prec, lin)
                state.gamma[r][k] = draw
                for prop_a, acc_a in ((state.win_prop_gamma, state.win_acc_gamma),
                                      (state.tot_prop_gamma, state.tot_acc_gamma)):
                    prop_a[k, r] += 1
                    acc_a[k, r] += 1
                continue

            w = state.L[md.subj, r] == k
            cur = state.gamma[r][k]
            if not np.any(w):
                # empty cluster: the conditional is the prior
                state.gamma[r][k] = sample_mvn(
                    rng, np.zeros(md.p), np.asarray(ctx.priors.V0[k][r]))
                for prop_a, acc_a in ((state.win_prop_gamma, state.win_acc_gamma),
                                      (state.tot_prop_gamma, state.tot_acc_gamma)):
                    prop_a[k, r] += 1
                    acc_a[k, r] += 1
                continue
            Xm = md.X[w]
            ym = md.y[w]
            if md.q > 0:
                zb = np.einsum("mq,mq->m", md.Z[w], state.beta[r][md.subj[w]])
            else:
                zb = 0.0
            Vinv = ctx.V0inv[k][r]
            eta = Xm @ cur + zb
            G, H = fam.score_and_curvature(md.family, ym, Xm, eta)
            Vt = np.linalg.inv(Vinv + H)
            Vt = 0.5 * (Vt + Vt.T)
            mean = cur + Vt @ (G - Vinv @ cur)
            prop = sample_mvn(rng, mean, state.tau_gamma[k, r] * Vt)

            ll_cur = fam.log_likelihood(md.family, ym, eta)
            ll_prop = fam.log_likelihood(md.family, ym, Xm @ prop + zb)
            delta = (ll_prop - 0.5 * prop @ Vinv @ prop) - (ll_cur - 0.5 * cur @ Vinv @ cur)
            accept = np.log(rng.random()) < delta
            if accept:
                state.gamma[r][k] = prop
            state.win_prop_gamma[k, r] += 1
            state.tot_prop_gamma[k, r] += 1
            if accept:
                state.win_acc_gamma[k, r] += 1
                state.tot_acc_gamma[k, r] += 1


def step_update_Sigma(state: ChainState, ctx: SamplerContext, rng) -> None:
    pri = ctx.priors
    for r in range(ctx.R):
        md = ctx.markers[r]
        q = md.q
        if q == 0:
            continue
        for k in range(ctx.K):
            members = np.flatnonzero(state.L[:, r] == k)
            Bm = state.beta[r][members]
            n_k = members.size
            if ctx.config.sigma_structure == "full":
                lam0 = pri.lambda0[k][r]
                S = lam0 * np.asarray(pri.Lambda0[k][r]) + Bm.T @ Bm
                scale = np.linalg.inv(S)
                scale = 0.5 * (scale + scale.T)
                prec_draw = sample_wishart(rng, lam0 + n_k, scale)
                cov = np.linalg.inv(prec_draw + 1e-12 * np.eye(q))
                state.Sigma[r][k] = 0.5 * (cov + cov.T)
            else:
                diag = np.empty(q)
                for j in range(q):
                    c_t = pri.c0[k][r] + 0.5 * n_k
                    d_t = pri.d0[k][r] + 0.5 * float(np.sum(Bm[:, j] ** 2))
                    diag[j] = sample_inverse_gamma(rng, c_t, d_t)
                state.Sigma[r][k] = np.diag(diag)


def sigma_diag_posterior_params(state: ChainState, ctx: SamplerContext,
                                r: int, k: int) -> list:
    """Diagonal-structure IG(c, d) parameters per random-effect coordinate."""
    members = np.flatnonzero(state.L[:, r] == k)
    Bm = state.beta[r][members]
    pri = ctx.priors
    return [(pri.c0[k][r] + 0.5 * members.size,
             pri.d0[k][r] + 0.5 * float(np.sum(Bm[:, j] ** 2)))
            for j in range(ctx.markers[r].q)]


def beta_full_conditionals(state: ChainState, ctx: SamplerContext, r: int):
    """Gaussian-marker exact conditionals for all beta_{i,r}: (means, covs)."""
    md = ctx.markers[r]
    if md.family != fam.GAUSSIAN:
        raise ValueError("exact beta conditional exists only for gaussian markers")
    kvec = state.L[:, r]
    Sinv = _sigma_inverses(state, ctx, r)
    phi = state.sigma2[kvec, r]
    etaX = (md.X @ state.gamma[r].T)[np.arange(md.n_obs), kvec[md.subj]]
    resid = md.y - etaX
    lin = md.seg_sum(md.Z * resid[:, None]) / phi[:, None]
    prec = Sinv[kvec] + md.ZtZ_subj / phi[:, None, None]
    covs = np.linalg.inv(prec)
    means = np.einsum("nab,nb->na", covs, lin)
    return means, covs


def beta_log_targets(state: ChainState, ctx: SamplerContext, r: int,
                     B: np.ndarray) -> np.ndarray:
    """(N,) unnormalized log full conditionals of beta_{i,r} at rows of B."""
    md = ctx.markers[r]
    kvec = state.L[:, r]
    Sinv = _sigma_inverses(state, ctx, r)
    etaX = (md.X @ state.gamma[r].T)[np.arange(md.n_obs), kvec[md.subj]]
    eta = etaX + np.einsum("mq,mq->m", md.Z, B[md.subj])
    if md.family == fam.GAUSSIAN:
        phi_obs = state.sigma2[kvec[md.subj], r]
        ll = (md.y * eta - 0.5 * eta ** 2) / phi_obs \
            - 0.5 * np.log(2.0 * np.pi * phi_obs) - md.y ** 2 / (2.0 * phi_obs)
    else:
        ll = fam.pointwise_log_likelihood(md.family, md.y, eta)
    ll_sub = md.seg_sum(ll)
    quad = 0.5 * np.einsum("nq,nqp,np->n", B, Sinv[kvec], B)
    return ll_sub - quad


def _sigma_inverses(state: ChainState, ctx: SamplerContext, r: int) -> np.ndarray:
    q = ctx.markers[r].q
    Sinv = np.empty((ctx.K, q, q))
    for k in range(ctx.K):
        Sinv[k] = np.linalg.inv(state.Sigma[r][k] + 1e-12 * np.eye(q))
    return Sinv


def step_update_beta(state: ChainState, ctx: SamplerContext, rng) -> None:
    N, K = ctx.N, ctx.K
    for r in range(ctx.R):
        md = ctx.markers[r]
        q = md.q
        if q == 0:
            continue
        kvec = state.L[:, r]
        if md.family == fam.GAUSSIAN:
            means, covs = beta_full_conditionals(state, ctx, r)
            chol = _batched_cholesky(covs)
            z = rng.standard_normal((N, q))
            state.beta[r] = means + np.einsum("nab,nb->na", chol, z)
            props = np.bincount(kvec, minlength=K).astype(float)
            state.win_prop_beta[:, r] += props
            state.win_acc_beta[:, r] += props
            state.tot_prop_beta[:, r] += props
            state.tot_acc_beta[:, r] += props
            continue

        Sinv = _sigma_inverses(state, ctx, r)
        B = state.beta[r]
        etaX = (md.X @ state.gamma[r].T)[np.arange(md.n_obs), kvec[md.subj]]
        eta = etaX + np.einsum("mq,mq->m", md.Z, B[md.subj])
        mu = fam.inverse_link(md.family, eta)
        kappa = fam.variance_function(md.family, eta)
        G = md.seg_sum(md.Z * (md.y - mu)[:, None])
        H = md.seg_sum(kappa[:, None, None] * md.ZZt)
        prec = Sinv[kvec] + H
        Vt = np.linalg.inv(prec)
        Vt = 0.5 * (Vt + np.transpose(Vt, (0, 2, 1)))
        SinvB = np.einsum("nab,nb->na", Sinv[kvec], B)
        means = B + np.einsum("nab,nb->na", Vt, G - SinvB)
        chol = _batched_cholesky(Vt)
        z = rng.standard_normal((N, q))
        prop = means + np.sqrt(state.tau_beta[kvec, r])[:, None] \
            * np.einsum("nab,nb->na", chol, z)

        ll_cur = md.seg_sum(fam.pointwise_log_likelihood(md.family, md.y, eta))
        eta_prop = etaX + np.einsum("mq,mq->m", md.Z, prop[md.subj])
        ll_prop = md.seg_sum(fam.pointwise_log_likelihood(md.family, md.y, eta_prop))
        quad_cur = 0.5 * np.einsum("nq,nqp,np->n", B, Sinv[kvec], B)
        quad_prop = 0.5 * np.einsum("nq,nqp,np->n", prop, Sinv[kvec], prop)
        delta = (ll_prop - quad_prop) - (ll_cur - quad_cur)
        accept = np.log(rng.random(N)) < delta
        state.beta[r] = np.where(accept[:, None], prop, B)

        props = np.bincount(kvec, minlength=K).astype(float)
        accs = np.bincount(kvec[accept], minlength=K).astype(float)
        state.win_prop_beta[:, r] += props
        state.win_acc_beta[:, r] += accs
        state.tot_prop_beta[:, r] += props
        state.tot_acc_beta[:, r] += accs


def _batched_cholesky(mats: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(mats)
    except np.linalg.LinAlgError:
        d = mats.shape[-1]
        base = np.mean(np.abs(np.diagonal(mats, axis1=-2, axis2=-1))) + 1e-30
        return np.linalg.cholesky(mats + 1e-8 * base * np.eye(d))


def sigma2_posterior_params(state: ChainState, ctx: SamplerContext, r: int):
    """Gaussian residual-variance IG parameters; (a, b) scalars if sigma_common,
    else per-cluster arrays.  The common variant literally sums the per-cluster
    shapes and rates over k."""
    md = ctx.markers[r]
    if md.family != fam.GAUSSIAN:
        raise ValueError("sigma2 exists only for gaussian markers")
    pri = ctx.priors
    kvec = state.L[:, r]
    kobs = kvec[md.subj]
    etaX = (md.X @ state.gamma[r].T)[np.arange(md.n_obs), kobs]
    if md.q > 0:
        eta = etaX + np.einsum("mq,mq->m", md.Z, state.beta[r][md.subj])
    else:
        eta = etaX
    res2 = (md.y - eta) ** 2
    n_obs_k = np.bincount(kobs, minlength=ctx.K).astype(float)
    ssr_k = np.bincount(kobs, weights=res2, minlength=ctx.K)
    a_k = np.array([pri.a0[k][r] for k in range(ctx.K)]) + 0.5 * n_obs_k
    b_k = np.array([pri.b0[k][r] for k in range(ctx.K)]) + 0.5 * ssr_k
    if ctx.config.sigma_common:
        return float(a_k.sum()), float(b_k.sum())
    return a_k, b_k


def step_update_sigma2(state: ChainState, ctx: SamplerContext, rng) -> None:
    for r in range(ctx.R):
        if ctx.markers[r].family != fam.GAUSSIAN:
            continue
        if ctx.config.sigma_common:
            a, b = sigma2_posterior_params(state, ctx, r)
            state.sigma2[:, r] = sample_inverse_gamma(rng, a, b)
        else:
            a_k, b_k = sigma2_posterior_params(state, ctx, r)
            for k in range(ctx.K):
                state.sigma2[k, r] = sample_inverse_gamma(rng, a_k[k], b_k[k])


def adapt_tuning(state: ChainState, ctx: SamplerContext) -> None:
    """Rescale MH step sizes toward the target acceptance band (burn-in only).

    Acceptance decreases as tau grows, so rates below the band shrink tau by
    e^{1/2} and rates above it inflate tau by e^{1/2}.  Gaussian-marker steps
    are exact draws and are left untouched.
    """
    lo = ctx.config.mcmc.accept_low
    hi = ctx.config.mcmc.accept_high
    factor = float(np.exp(0.5))
    for r in range(ctx.R):
        if ctx.markers[r].family == fam.GAUSSIAN:
            continue
        for k in range(ctx.K):
            for prop, acc, tau in ((state.win_prop_gamma, state.win_acc_gamma,
                                    state.tau_gamma),
                                   (state.win_prop_beta, state.win_acc_beta,
                                    state.tau_beta)):
                if prop[k, r] > 0:
                    rate = acc[k, r] / prop[k, r]
                    if rate < lo:
                        tau[k, r] /= factor
                    elif rate > hi:
                        tau[k, r] *= factor
    state.reset_window_counters()


# ---------------------------------------------------------------------------
# chain driver

@dataclass
class PosteriorDraws:
    """Retained draws of every sampled quantity, one row per kept iteration."""

    K: int
    marker_names: tuple
    families: tuple
    subject_ids: tuple
    fixed_terms: tuple     # per marker, design term names for gamma
    random_terms: tuple    # per marker, design term names for beta/Sigma
    sigma_common: bool
    alpha: np.ndarray      # (S, R)
    pi: np.ndarray         # (S, K)
    sigma2: np.ndarray     # (S, K, R)
    gamma: list            # [r] (S, K, p_r)
    Sigma: list            # [r] (S, K, q_r, q_r)
    beta: list             # [r] (S, N, q_r)
    L: np.ndarray          # (S, N, R)
    C: np.ndarray          # (S, N)
    probC: np.ndarray      # (S, N, K)
    chain: np.ndarray      # (S,)
    accept_gamma: np.ndarray  # (K, R) post-burn-in acceptance rates
    accept_beta: np.ndarray   # (K, R)
    tau_gamma: np.ndarray     # (K, R) final step sizes
    tau_beta: np.ndarray      # (K, R)

    @property
    def S(self) -> int:
        return self.alpha.shape[0]

    @property
    def R(self) -> int:
        return self.alpha.shape[1]

    @property
    def N(self) -> int:
        return self.C.shape[1]


def run_chain(data: Dataset, designs: DesignMatrices, config: ModelConfig,
              priors: PriorHyperparams, seed, chain_index: int = 0) -> PosteriorDraws:
    """Run one MCMC chain and return the retained draws.

    `seed` may be an int or a numpy SeedSequence (the latter is how derived
    per-chain seeds arrive).  Step types draw from independent child streams
    in a fixed order, so results are bit-reproducible.
    """
    errs = validate_config(config, priors, data)
    if errs:
        raise ValueError("invalid configuration: " + "; ".join(errs))
    ctx = SamplerContext.build(data, designs, config, priors)
    mc = config.mcmc
    N, K, R = ctx.N, ctx.K, ctx.R

    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    streams = dict(zip(STEP_STREAMS, (np.random.default_rng(c) for c in ss.spawn(len(STEP_STREAMS)))))

    state = init_state(data, config, priors, streams["init"], designs=designs)

    S = mc.n_retained
    draws = PosteriorDraws(
        K=K,
        marker_names=data.marker_names,
        families=data.families,
        subject_ids=data.subject_ids,
        fixed_terms=designs.spec.fixed,
        random_terms=designs.spec.random,
        sigma_common=config.sigma_common,
        alpha=np.empty((S, R)),
        pi=np.empty((S, K)),
        sigma2=np.empty((S, K, R)),
        gamma=[np.empty((S, K, ctx.markers[r].p)) for r in range(R)],
        Sigma=[np.empty((S, K, ctx.markers[r].q, ctx.markers[r].q)) for r in range(R)],
        beta=[np.empty((S, N, ctx.markers[r].q)) for r in range(R)],
        L=np.empty((S, N, R), dtype=np.int16),
        C=np.empty((S, N), dtype=np.int16),
        probC=np.empty((S, N, K)),
        chain=np.full(S, chain_index, dtype=np.int16),
        accept_gamma=np.full((K, R), np.nan),
        accept_beta=np.full((K, R), np.nan),
        tau_gamma=np.empty((K, R)),
        tau_beta=np.empty((K, R)),
    )

    kept = 0
    for it in range(1, mc.iterations + 1):
        step_update_L(state, ctx, streams["L"])
        step_update_alpha(state, ctx, streams["alpha"])
        probC = step_update_C(state, ctx, streams["C"])
        step_update_pi(state, ctx, streams["pi"])
        step_update_gamma(state, ctx, streams["gamma"])
        step_update_Sigma(state, ctx, streams["Sigma"])
        step_update_beta(state, ctx, streams["beta"])
        step_update_sigma2(state, ctx, streams["sigma2"])
        check_state(state, ctx)

        if it <= mc.burnin and it % mc.adapt_window == 0:
            adapt_tuning(state, ctx)
        if it == mc.burnin:
            state.reset_total_counters()
        if it > mc.burnin and (it - mc.burnin) % mc.thin == 0:
            draws.alpha[kept] = state.alpha
            draws.pi[kept] = state.pi
            draws.sigma2[kept] = state.sigma2
            for r in range(R):
                draws.gamma[r][kept] = state.gamma[r]
                draws.Sigma[r][kept] = state.Sigma[r]
                draws.beta[r][kept] = state.beta[r]
            draws.L[kept] = state.L
            draws.C[kept] = state.C
            draws.probC[kept] = probC
            kept += 1

    assert kept == S
    with np.errstate(invalid="ignore"):
        draws.accept_gamma = np.where(state.tot_prop_gamma > 0,
                                      state.tot_acc_gamma / np.maximum(state.tot_prop_gamma, 1),
                                      np.nan)
        draws.accept_beta = np.where(state.tot_prop_beta > 0,
                                     state.tot_acc_beta / np.maximum(state.tot_prop_beta, 1),
                                     np.nan)
    draws.tau_gamma = state.tau_gamma.copy()
    draws.tau_beta = state.tau_beta.copy()
    return draws


def chain_seeds(master_seed: int, n_chains: int) -> list:
    """Derived per-chain SeedSequences: SeedSequence(master).spawn(n_chains)."""
    return np.random.SeedSequence(master_seed).spawn(n_chains)


def merge_draws(parts: Sequence[PosteriorDraws]) -> PosteriorDraws:
    """Concatenate chains (in the given order) into one draw set."""
    if len(parts) == 1:
        return parts[0]
    first = parts[0]
    R = first.R
    return PosteriorDraws(
        K=first.K,
        marker_names=first.marker_names,
        families=first.families,
        subject_ids=first.subject_ids,
        fixed_terms=first.fixed_terms,
        random_terms=first.random_terms,
        sigma_common=first.sigma_common,
        alpha=np.concatenate([p.alpha for p in parts]),
        pi=np.concatenate([p.pi for p in parts]),
        sigma2=np.concatenate([p.sigma2 for p in parts]),
        gamma=[np.concatenate([p.gamma[r] for p in parts]) for r in range(R)],
        Sigma=[np.concatenate([p.Sigma[r] for p in parts]) for r in range(R)],
        beta=[np.concatenate([p.beta[r] for p in parts]) for r in range(R)],
        L=np.concatenate([p.L for p in parts]),
        C=np.concatenate([p.C for p in parts]),
        probC=np.concatenate([p.probC for p in parts]),
        chain=np.concatenate([p.chain for p in parts]),
        accept_gamma=np.nanmean(np.stack([p.accept_gamma for p in parts]), axis=0),
        accept_beta=np.nanmean(np.stack([p.accept_beta for p in parts]), axis=0),
        tau_gamma=np.mean(np.stack([p.tau_gamma for p in parts]), axis=0),
        tau_beta=np.mean(np.stack([p.tau_beta for p in parts]), axis=0),
    )
