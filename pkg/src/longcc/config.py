"""Model configuration, prior hyperparameters, validation, JSON round trip.

The model couples one global clustering (K clusters) with per-marker local
clusterings through adherence parameters alpha_r.  Configuration covers the
marker designs, the variance options (shared adherence, common gaussian
residual variance, diagonal vs full random-effect covariance), the MCMC
controls, and every prior hyperparameter, stored per cluster-marker pair so
that informative, cluster-specific priors remain possible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .data import Dataset, DesignSpec, FAMILIES


class ConfigError(ValueError):
    """Malformed configuration object or JSON."""


@dataclass(frozen=True)
class MarkerConfig:
    """One marker: name, family, and fixed/random design term names."""

    name: str
    family: str
    fixed: tuple = ("intercept", "time")
    random: tuple = ("intercept", "time")

    def __post_init__(self):
        object.__setattr__(self, "fixed", tuple(self.fixed))
        object.__setattr__(self, "random", tuple(self.random))


@dataclass(frozen=True)
class McmcControls:
    """Chain-length, thinning, adaptation, and seeding controls."""

    iterations: int = 30000
    burnin: int = 10000
    thin: int = 20
    chains: int = 2
    seed: int = 0
    accept_low: float = 0.2
    accept_high: float = 0.5
    adapt_window: int = 50
    alpha_fixed: Optional[float] = None

    @property
    def n_retained(self) -> int:
        return (self.iterations - self.burnin) // self.thin


@dataclass(frozen=True)
class ModelConfig:
    """Full model specification (everything except the data and priors)."""

    K: int
    markers: tuple
    alpha_shared: bool = False
    sigma_common: bool = True
    sigma_structure: str = "diagonal"
    mcmc: McmcControls = field(default_factory=McmcControls)

    def __post_init__(self):
        object.__setattr__(self, "markers", tuple(self.markers))

    @property
    def n_markers(self) -> int:
        return len(self.markers)

    @property
    def families(self) -> tuple:
        return tuple(m.family for m in self.markers)

    def design_spec(self) -> DesignSpec:
        return DesignSpec(
            fixed=tuple(m.fixed for m in self.markers),
            random=tuple(m.random for m in self.markers),
        )


@dataclass
class PriorHyperparams:
    """Prior hyperparameters, indexed per marker r and per (cluster k, marker r).

    delta1, delta2 : (R,) truncated-beta parameters for alpha_r
    varphi0        : (K,) Dirichlet concentration for pi
    V0             : [k][r] (p_r, p_r) gaussian prior covariance for gamma_{k,r}
    lambda0        : [k][r] Wishart degrees of freedom for Sigma_{k,r}^{-1}
    Lambda0        : [k][r] (q_r, q_r) Wishart prior scale parameter
    c0, d0         : [k][r] inverse-gamma parameters for diagonal Sigma entries
    a0, b0         : [k][r] inverse-gamma parameters for gaussian sigma^2_{k,r}
    """

    delta1: np.ndarray
    delta2: np.ndarray
    varphi0: np.ndarray
    V0: list
    lambda0: list
    Lambda0: list
    c0: list
    d0: list
    a0: list
    b0: list


def default_vague_priors(config: ModelConfig, data: Optional[Dataset] = None) -> PriorHyperparams:
    """Vague defaults: TBeta(1,1), Dirichlet(1,...,1), V0 = 25 I, IG(0.001, 0.001),
    Wishart(q_r + 1, ((q_r + 1) I)^{-1})."""
    if data is not None and data.n_markers != config.n_markers:
        raise ConfigError(
            f"config has {config.n_markers} markers, dataset has {data.n_markers}"
        )
    spec = config.design_spec()
    K, R = config.K, config.n_markers
    V0 = [[25.0 * np.eye(spec.p(r)) for r in range(R)] for _ in range(K)]
    lambda0 = [[float(spec.q(r) + 1) for r in range(R)] for _ in range(K)]
    Lambda0 = [[np.eye(spec.q(r)) for r in range(R)] for _ in range(K)]
    c0 = [[0.001 for _ in range(R)] for _ in range(K)]
    d0 = [[0.001 for _ in range(R)] for _ in range(K)]
    a0 = [[0.001 for _ in range(R)] for _ in range(K)]
    b0 = [[0.001 for _ in range(R)] for _ in range(K)]
    return PriorHyperparams(
        delta1=np.ones(R),
        delta2=np.ones(R),
        varphi0=np.ones(K),
        V0=V0,
        lambda0=lambda0,
        Lambda0=Lambda0,
        c0=c0,
        d0=d0,
        a0=a0,
        b0=b0,
    )


def build_priors(config: ModelConfig, overrides: Optional[Mapping] = None) -> PriorHyperparams:
    """Default priors with optional scalar/per-index overrides applied.

    Recognized override keys: delta1, delta2 (scalar or length-R list),
    varphi0 (scalar or length-K list), v0_scale, lambda0 (scalar or length-R),
    lambda0_scale (Lambda0 = scale * I), c0, d0, a0, b0 (scalars).
    """
    pri = default_vague_priors(config)
    if not overrides:
        return pri
    K, R = config.K, config.n_markers
    spec = config.design_spec()
    known = {"delta1", "delta2", "varphi0", "v0_scale", "lambda0",
             "lambda0_scale", "c0", "d0", "a0", "b0"}
    for key in overrides:
        if key not in known:
            raise ConfigError(f"priors.{key}: unknown override")

    def per_r(val, name):
        arr = np.asarray(val, dtype=float)
        if arr.ndim == 0:
            return np.full(R, float(arr))
        if arr.shape != (R,):
            raise ConfigError(f"priors.{name}: expected scalar or length-{R} list")
        return arr

    if "delta1" in overrides:
        pri.delta1 = per_r(overrides["delta1"], "delta1")
    if "delta2" in overrides:
        pri.delta2 = per_r(overrides["delta2"], "delta2")
    if "varphi0" in overrides:
        arr = np.asarray(overrides["varphi0"], dtype=float)
        if arr.ndim == 0:
            arr = np.full(K, float(arr))
        elif arr.shape != (K,):
            raise ConfigError(f"priors.varphi0: expected scalar or length-{K} list")
        pri.varphi0 = arr
    if "v0_scale" in overrides:
        s = float(overrides["v0_scale"])
        pri.V0 = [[s * np.eye(spec.p(r)) for r in range(R)] for _ in range(K)]
    if "lambda0" in overrides:
        lam = per_r(overrides["lambda0"], "lambda0")
        pri.lambda0 = [[float(lam[r]) for r in range(R)] for _ in range(K)]
    if "lambda0_scale" in overrides:
        s = float(overrides["lambda0_scale"])
        pri.Lambda0 = [[s * np.eye(spec.q(r)) for r in range(R)] for _ in range(K)]
    for key in ("c0", "d0", "a0", "b0"):
        if key in overrides:
            v = float(overrides[key])
            setattr(pri, key, [[v for _ in range(R)] for _ in range(K)])
    return pri


def _is_spd(m: np.ndarray) -> bool:
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        return False
    if m.shape[0] == 0:
        return True
    if not np.allclose(m, m.T):
        return False
    try:
        np.linalg.cholesky(m)
        return True
    except np.linalg.LinAlgError:
        return False


def validate_config(config: ModelConfig, priors: PriorHyperparams,
                    data: Optional[Dataset] = None) -> list:
    """Return a list of human-readable violations (empty list == valid)."""
    errs = []
    K, R = config.K, config.n_markers
    if K < 2:
        errs.append("K: must be >= 2 (a single cluster has no clustering to infer)")
    if R < 1:
        errs.append("markers: at least one marker is required")
    for r, m in enumerate(config.markers):
        if m.family not in FAMILIES:
            errs.append(f"markers[{r}].family: unknown family {m.family!r}")
    try:
        spec = config.design_spec()
    except Exception as e:  # bad builder names, random not sublist of fixed
        errs.append(f"markers.design: {e}")
        spec = None
    if config.sigma_structure not in ("diagonal", "full"):
        errs.append(
            f"sigma_structure: must be 'diagonal' or 'full', got {config.sigma_structure!r}"
        )

    mc = config.mcmc
    if mc.iterations <= 0:
        errs.append("mcmc.iterations: must be positive")
    if mc.burnin < 0:
        errs.append("mcmc.burnin: must be non-negative")
    if mc.thin < 1:
        errs.append("mcmc.thin: must be >= 1")
    if mc.iterations <= mc.burnin:
        errs.append("mcmc.iterations: must exceed mcmc.burnin")
    elif mc.thin >= 1 and (mc.iterations - mc.burnin) % mc.thin != 0:
        errs.append("mcmc.thin: must divide iterations - burnin")
    if mc.chains < 1:
        errs.append("mcmc.chains: must be >= 1")
    if not (0.0 < mc.accept_low < mc.accept_high < 1.0):
        errs.append("mcmc.accept_low/accept_high: need 0 < low < high < 1")
    if mc.adapt_window < 1:
        errs.append("mcmc.adapt_window: must be >= 1")
    if mc.alpha_fixed is not None and K >= 2:
        if not (1.0 / K <= mc.alpha_fixed <= 1.0):
            errs.append(f"mcmc.alpha_fixed: must lie in [1/K, 1] = [{1.0 / K:.4g}, 1]")

    if priors.delta1.shape != (R,) or priors.delta2.shape != (R,):
        errs.append("priors.delta1/delta2: expected one entry per marker")
    else:
        for r in range(R):
            if priors.delta1[r] <= 0 or priors.delta2[r] <= 0:
                errs.append(f"priors.delta[r={r}]: truncated-beta parameters must be positive")
    if priors.varphi0.shape != (K,):
        errs.append(f"priors.varphi0: expected length {K}")
    elif np.any(priors.varphi0 <= 0):
        errs.append("priors.varphi0: concentrations must be positive")

    if spec is not None:
        for k in range(K):
            for r in range(R):
                p, q = spec.p(r), spec.q(r)
                V0 = np.asarray(priors.V0[k][r])
                if V0.shape != (p, p) or not _is_spd(V0):
                    errs.append(f"priors.V0[k={k}][r={r}]: expected SPD ({p}, {p}) matrix")
                lam = priors.lambda0[k][r]
                if lam < q:
                    errs.append(
                        f"priors.lambda0[k={k}][r={r}]: Wishart df {lam} < dimension {q}"
                    )
                L0 = np.asarray(priors.Lambda0[k][r])
                if L0.shape != (q, q) or not _is_spd(L0):
                    errs.append(f"priors.Lambda0[k={k}][r={r}]: expected SPD ({q}, {q}) matrix")
                for name in ("c0", "d0", "a0", "b0"):
                    v = getattr(priors, name)[k][r]
                    if v <= 0:
                        errs.append(f"priors.{name}[k={k}][r={r}]: must be positive")

    if data is not None:
        if data.n_markers != R:
            errs.append(f"markers: config has {R}, dataset has {data.n_markers}")
        else:
            for r, m in enumerate(config.markers):
                if data.marker_names[r] != m.name:
                    errs.append(
                        f"markers[{r}].name: config says {m.name!r}, "
                        f"dataset says {data.marker_names[r]!r}"
                    )
                if data.families[r] != m.family:
                    errs.append(
                        f"markers[{r}].family: config says {m.family!r}, "
                        f"dataset says {data.families[r]!r}"
                    )
        if config.K > data.n_subjects:
            errs.append(f"K: {K} exceeds number of subjects {data.n_subjects}")
    return errs


# ---------------------------------------------------------------------------
# JSON round trip

def config_to_json(config: ModelConfig, prior_overrides: Optional[Mapping] = None) -> dict:
    """Serialize to the JSON object layout accepted by config_from_json."""
    obj = {
        "K": config.K,
        "markers": [
            {"name": m.name, "family": m.family,
             "fixed": list(m.fixed), "random": list(m.random)}
            for m in config.markers
        ],
        "alpha_shared": config.alpha_shared,
        "sigma_common": config.sigma_common,
        "sigma_structure": config.sigma_structure,
        "mcmc": {
            "iterations": config.mcmc.iterations,
            "burnin": config.mcmc.burnin,
            "thin": config.mcmc.thin,
            "chains": config.mcmc.chains,
            "seed": config.mcmc.seed,
            "accept_low": config.mcmc.accept_low,
            "accept_high": config.mcmc.accept_high,
            "adapt_window": config.mcmc.adapt_window,
        },
    }
    if config.mcmc.alpha_fixed is not None:
        obj["mcmc"]["alpha_fixed"] = config.mcmc.alpha_fixed
    if prior_overrides:
        obj["priors"] = dict(prior_overrides)
    return obj


def config_from_json(obj: Mapping):
    """Parse a configuration JSON object.

    Returns (ModelConfig, prior_overrides dict).  Raises ConfigError naming
    the missing or malformed field.
    """
    if not isinstance(obj, Mapping):
        raise ConfigError("config: expected a JSON object")
    for key in ("K", "markers"):
        if key not in obj:
            raise ConfigError(f"config.{key}: missing required key")
    try:
        K = int(obj["K"])
    except (TypeError, ValueError):
        raise ConfigError("config.K: expected an integer") from None
    markers = []
    if not isinstance(obj["markers"], Sequence) or isinstance(obj["markers"], (str, bytes)):
        raise ConfigError("config.markers: expected a list of marker objects")
    for i, m in enumerate(obj["markers"]):
        if not isinstance(m, Mapping):
            raise ConfigError(f"config.markers[{i}]: expected an object")
        for key in ("name", "family"):
            if key not in m:
                raise ConfigError(f"config.markers[{i}].{key}: missing required key")
        markers.append(MarkerConfig(
            name=str(m["name"]),
            family=str(m["family"]),
            fixed=tuple(m.get("fixed", ("intercept", "time"))),
            random=tuple(m.get("random", ("intercept", "time"))),
        ))
    mc_obj = obj.get("mcmc", {})
    if not isinstance(mc_obj, Mapping):
        raise ConfigError("config.mcmc: expected an object")
    defaults = McmcControls()
    known_mc = {"iterations", "burnin", "thin", "chains", "seed",
                "accept_low", "accept_high", "adapt_window", "alpha_fixed"}
    for key in mc_obj:
        if key not in known_mc:
            raise ConfigError(f"config.mcmc.{key}: unknown key")
    mcmc = McmcControls(
        iterations=int(mc_obj.get("iterations", defaults.iterations)),
        burnin=int(mc_obj.get("burnin", defaults.burnin)),
        thin=int(mc_obj.get("thin", defaults.thin)),
        chains=int(mc_obj.get("chains", defaults.chains)),
        seed=int(mc_obj.get("seed", defaults.seed)),
        accept_low=float(mc_obj.get("accept_low", defaults.accept_low)),
        accept_high=float(mc_obj.get("accept_high", defaults.accept_high)),
        adapt_window=int(mc_obj.get("adapt_window", defaults.adapt_window)),
        alpha_fixed=(float(mc_obj["alpha_fixed"])
                     if mc_obj.get("alpha_fixed") is not None else None),
    )
    config = ModelConfig(
        K=K,
        markers=tuple(markers),
        alpha_shared=bool(obj.get("alpha_shared", False)),
        sigma_common=bool(obj.get("sigma_common", True)),
        sigma_structure=str(obj.get("sigma_structure", "diagonal")),
        mcmc=mcmc,
    )
    overrides = obj.get("priors", {})
    if overrides and not isinstance(overrides, Mapping):
        raise ConfigError("config.priors: expected an object of overrides")
    return config, dict(overrides)
