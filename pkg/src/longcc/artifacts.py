"""On-disk artifact layout: draw tables, summaries, manifests, and loaders.

A fit directory contains:

    summary.json      parameter summaries, adherence, proportions, Geweke z,
                      Bayesian p-value
    clusters.csv      per-subject modal labels, tie flags, modal probability
    draws_alpha.csv   trace tables, one row per (chain, draw, indices)
    draws_pi.csv
    draws_gamma.csv
    draws_Sigma.csv
    draws_sigma2.csv
    draws_labels.csv  (chain, draw, subject, C, L_<marker>...)
    draws_probC.csv   (chain, draw, subject, p_1..p_K)
    ppc_t.csv         (draw, chain, T_obs, T_rep)
    draws.npz         full arrays (incl. per-subject random effects and the
                      relabeling permutations) plus the data needed to rerun
                      diagnostics without the original CSV
    manifest.json     config/data hashes, seed, versions, outputs, timestamp

All CSV/JSON outputs are byte-deterministic given (data, config, seed); the
npz archive is array-deterministic but carries zip timestamps.  Cluster
labels in CSV/JSON files are 1-based; arrays inside draws.npz stay 0-based.
"""

from __future__ import annotations

import csv
import datetime
import hashlib
import json
import sys
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .config import ModelConfig, config_to_json
from .data import Dataset, DesignSpec, MarkerSeries, build_designs
from .postprocess import ClusteringResult, RelabeledDraws, PostprocessError
from .sampler import PosteriorDraws


def _fmt(x) -> str:
    """Shortest round-trip decimal representation (deterministic)."""
    return repr(float(x))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(canonical_json(obj))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def sha256_config(config: ModelConfig, prior_overrides: Optional[Mapping] = None) -> str:
    payload = json.dumps(config_to_json(config, prior_overrides),
                         sort_keys=True, separators=(",", ":"))
    return sha256_bytes(payload.encode())


def _versions() -> dict:
    import scipy
    from . import __version__
    return {
        "longcc": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": sys.version.split()[0],
    }


def write_manifest(out_dir, command: str, *, seed, outputs, config_hash=None,
                   data_hash=None, chains=None, extra=None,
                   filename: str = "manifest.json") -> dict:
    manifest = {
        "command": command,
        "seed": seed,
        "config_hash": config_hash,
        "data_hash": data_hash,
        "chains": chains,
        "outputs": sorted(outputs),
        "versions": _versions(),
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    if extra:
        manifest.update(extra)
    write_json(Path(out_dir) / filename, manifest)
    return manifest


# ---------------------------------------------------------------------------
# summary / clusters

def result_to_json(result: ClusteringResult, *, chains: int, n_draws: int) -> dict:
    modes = result.modes
    return {
        "K": result.K,
        "n_subjects": len(result.subject_ids),
        "chains": chains,
        "draws": n_draws,
        "markers": [{"name": n, "family": f}
                    for n, f in zip(result.marker_names, result.families)],
        "adherence": {
            "alpha_mean": {n: float(v) for n, v in
                           zip(result.marker_names, result.alpha_mean)},
            "alpha_star": {n: float(v) for n, v in
                           zip(result.marker_names, result.alpha_star)},
            "mean_alpha_star": float(result.mean_alpha_star),
        },
        "proportions": [float(p) for p in result.proportions],
        "parameters": [
            {
                "name": p.name,
                "mean": float(p.mean),
                "q025": float(p.lo),
                "q975": float(p.hi),
                "geweke": {str(c): (float(z) if isinstance(z, (int, float)) else z)
                           for c, z in sorted(p.geweke.items())},
            }
            for p in result.params
        ],
        "point_estimate_ties": {
            "C": int(np.sum(modes.C_tie)),
            "L": int(np.sum(modes.L_tie)),
        },
        "relabel": {
            "rounds": int(result.relabel_rounds),
            "objective": [float(v) for v in result.relabel_objective],
        },
        "acceptance": {
            "gamma": _nan_to_none(result.accept_gamma),
            "beta": _nan_to_none(result.accept_beta),
        },
        "bayes_pvalue": (float(result.bayes_p)
                         if result.bayes_p is not None else None),
    }


def _nan_to_none(arr: np.ndarray):
    return [[None if np.isnan(v) else float(v) for v in row] for row in np.asarray(arr)]


def write_clusters_csv(path, result: ClusteringResult) -> None:
    modes = result.modes
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["subject_id", "C_hat", "prob_C_hat", "tie_C"]
        for name in result.marker_names:
            header += [f"L_hat_{name}", f"tie_L_{name}"]
        w.writerow(header)
        for i, sid in enumerate(result.subject_ids):
            row = [sid, int(modes.C_hat[i]) + 1, _fmt(modes.C_prob[i]),
                   int(modes.C_tie[i])]
            for r in range(len(result.marker_names)):
                row += [int(modes.L_hat[i, r]) + 1, int(modes.L_tie[i, r])]
            w.writerow(row)


# ---------------------------------------------------------------------------
# draw tables

def write_draw_csvs(out_dir, draws: PosteriorDraws) -> list:
    """Write the per-parameter trace tables; returns the file names written."""
    out_dir = Path(out_dir)
    names = []
    chain = draws.chain
    # per-chain draw index
    draw_idx = np.zeros(draws.S, dtype=np.int64)
    for c in np.unique(chain):
        m = chain == c
        draw_idx[m] = np.arange(int(m.sum()))

    def openw(name):
        names.append(name)
        fh = open(out_dir / name, "w", newline="")
        return fh, csv.writer(fh, lineterminator="\n")

    fh, w = openw("draws_alpha.csv")
    w.writerow(["chain", "draw", "marker", "value"])
    for s in range(draws.S):
        for r, name in enumerate(draws.marker_names):
            w.writerow([int(chain[s]), int(draw_idx[s]), name, _fmt(draws.alpha[s, r])])
    fh.close()

    fh, w = openw("draws_pi.csv")
    w.writerow(["chain", "draw", "cluster", "value"])
    for s in range(draws.S):
        for k in range(draws.K):
            w.writerow([int(chain[s]), int(draw_idx[s]), k + 1, _fmt(draws.pi[s, k])])
    fh.close()

    fh, w = openw("draws_gamma.csv")
    w.writerow(["chain", "draw", "marker", "cluster", "term", "value"])
    for s in range(draws.S):
        for r, name in enumerate(draws.marker_names):
            for k in range(draws.K):
                for j, term in enumerate(draws.fixed_terms[r]):
                    w.writerow([int(chain[s]), int(draw_idx[s]), name, k + 1, term,
                                _fmt(draws.gamma[r][s, k, j])])
    fh.close()

    fh, w = openw("draws_Sigma.csv")
    w.writerow(["chain", "draw", "marker", "cluster", "row", "col", "value"])
    for s in range(draws.S):
        for r, name in enumerate(draws.marker_names):
            q = draws.Sigma[r].shape[-1]
            for k in range(draws.K):
                for a in range(q):
                    for b in range(a + 1):
                        w.writerow([int(chain[s]), int(draw_idx[s]), name, k + 1,
                                    a + 1, b + 1, _fmt(draws.Sigma[r][s, k, a, b])])
    fh.close()

    fh, w = openw("draws_sigma2.csv")
    w.writerow(["chain", "draw", "marker", "cluster", "value"])
    for s in range(draws.S):
        for r, name in enumerate(draws.marker_names):
            if draws.families[r] != "gaussian":
                continue
            if draws.sigma_common:
                w.writerow([int(chain[s]), int(draw_idx[s]), name, "all",
                            _fmt(draws.sigma2[s, 0, r])])
            else:
                for k in range(draws.K):
                    w.writerow([int(chain[s]), int(draw_idx[s]), name, k + 1,
                                _fmt(draws.sigma2[s, k, r])])
    fh.close()

    fh, w = openw("draws_labels.csv")
    w.writerow(["chain", "draw", "subject", "C"]
               + [f"L_{name}" for name in draws.marker_names])
    for s in range(draws.S):
        for i, sid in enumerate(draws.subject_ids):
            w.writerow([int(chain[s]), int(draw_idx[s]), sid, int(draws.C[s, i]) + 1]
                       + [int(draws.L[s, i, r]) + 1 for r in range(draws.R)])
    fh.close()

    fh, w = openw("draws_probC.csv")
    w.writerow(["chain", "draw", "subject"] + [f"p_{k + 1}" for k in range(draws.K)])
    for s in range(draws.S):
        for i, sid in enumerate(draws.subject_ids):
            w.writerow([int(chain[s]), int(draw_idx[s]), sid]
                       + [_fmt(v) for v in draws.probC[s, i]])
    fh.close()
    return names


def write_ppc_csv(path, chain, T_obs, T_rep) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["draw", "chain", "T_obs", "T_rep"])
        for s in range(len(T_obs)):
            w.writerow([s, int(chain[s]), _fmt(T_obs[s]), _fmt(T_rep[s])])


# ---------------------------------------------------------------------------
# npz round trip (self-contained diagnostics)

def save_draws_npz(path, relabeled: RelabeledDraws, data: Dataset,
                   *, seed, chains: int) -> None:
    draws = relabeled.draws
    meta = {
        "K": draws.K,
        "marker_names": list(draws.marker_names),
        "families": list(draws.families),
        "subject_ids": list(draws.subject_ids),
        "fixed_terms": [list(t) for t in draws.fixed_terms],
        "random_terms": [list(t) for t in draws.random_terms],
        "sigma_common": bool(draws.sigma_common),
        "seed": seed,
        "chains": chains,
    }
    arrays = {
        "meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
        "alpha": draws.alpha,
        "pi": draws.pi,
        "sigma2": draws.sigma2,
        "L": draws.L,
        "C": draws.C,
        "probC": draws.probC,
        "chain": draws.chain,
        "permutations": relabeled.permutations,
        "accept_gamma": draws.accept_gamma,
        "accept_beta": draws.accept_beta,
        "tau_gamma": draws.tau_gamma,
        "tau_beta": draws.tau_beta,
    }
    for r in range(draws.R):
        arrays[f"gamma_{r}"] = draws.gamma[r]
        arrays[f"Sigma_{r}"] = draws.Sigma[r]
        arrays[f"beta_{r}"] = draws.beta[r]
    # observed data, packed flat per marker, so diagnostics can rerun the PPC
    for r in range(draws.R):
        y, t, subj = [], [], []
        for i in range(len(draws.subject_ids)):
            s = data.series[(i, r)]
            y.append(s.values)
            t.append(s.times)
            subj.append(np.full(s.n_obs, i, dtype=np.int64))
        arrays[f"obs_y_{r}"] = np.concatenate(y)
        arrays[f"obs_t_{r}"] = np.concatenate(t)
        arrays[f"obs_subj_{r}"] = np.concatenate(subj)
    np.savez_compressed(path, **arrays)


def load_fit_dir(fit_dir):
    """Rebuild (RelabeledDraws, Dataset, DesignMatrices, meta) from draws.npz.

    Raises PostprocessError with a re-fit instruction when the archive or its
    classification probabilities are missing.
    """
    path = Path(fit_dir) / "draws.npz"
    if not path.exists():
        raise PostprocessError(
            f"{path} not found: fit artifacts are incomplete; re-run fit")
    with np.load(path) as z:
        if "probC" not in z.files:
            raise PostprocessError(
                "draws.npz lacks classification probabilities; re-run fit")
        meta = json.loads(bytes(z["meta"]).decode())
        R = len(meta["marker_names"])
        draws = PosteriorDraws(
            K=int(meta["K"]),
            marker_names=tuple(meta["marker_names"]),
            families=tuple(meta["families"]),
            subject_ids=tuple(meta["subject_ids"]),
            fixed_terms=tuple(tuple(t) for t in meta["fixed_terms"]),
            random_terms=tuple(tuple(t) for t in meta["random_terms"]),
            sigma_common=bool(meta["sigma_common"]),
            alpha=z["alpha"],
            pi=z["pi"],
            sigma2=z["sigma2"],
            gamma=[z[f"gamma_{r}"] for r in range(R)],
            Sigma=[z[f"Sigma_{r}"] for r in range(R)],
            beta=[z[f"beta_{r}"] for r in range(R)],
            L=z["L"],
            C=z["C"],
            probC=z["probC"],
            chain=z["chain"],
            accept_gamma=z["accept_gamma"],
            accept_beta=z["accept_beta"],
            tau_gamma=z["tau_gamma"],
            tau_beta=z["tau_beta"],
        )
        relabeled = RelabeledDraws(draws=draws, permutations=z["permutations"],
                                   n_rounds=0, objective=[])
        series = {}
        for r in range(R):
            y = z[f"obs_y_{r}"]
            t = z[f"obs_t_{r}"]
            subj = z[f"obs_subj_{r}"]
            for i in range(len(meta["subject_ids"])):
                m = subj == i
                series[(i, r)] = MarkerSeries(subject=i, marker=r,
                                              times=t[m], values=y[m])
    dataset = Dataset(
        subject_ids=tuple(meta["subject_ids"]),
        marker_names=tuple(meta["marker_names"]),
        families=tuple(meta["families"]),
        series=series,
    )
    spec = DesignSpec(fixed=tuple(tuple(t) for t in meta["fixed_terms"]),
                      random=tuple(tuple(t) for t in meta["random_terms"]))
    designs = build_designs(dataset, spec)
    return relabeled, dataset, designs, meta


def write_fit_dir(out_dir, *, relabeled: RelabeledDraws, result: ClusteringResult,
                  data: Dataset, T_obs, T_rep, seed, chains: int,
                  config_hash: str, data_hash: str) -> dict:
    """Write every fit artifact; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    draws = relabeled.draws
    outputs = ["summary.json", "clusters.csv", "ppc_t.csv", "draws.npz"]
    write_json(out / "summary.json",
               result_to_json(result, chains=chains, n_draws=draws.S))
    write_clusters_csv(out / "clusters.csv", result)
    outputs += write_draw_csvs(out, draws)
    write_ppc_csv(out / "ppc_t.csv", draws.chain, T_obs, T_rep)
    save_draws_npz(out / "draws.npz", relabeled, data, seed=seed, chains=chains)
    return write_manifest(out, "fit", seed=seed, outputs=outputs,
                          config_hash=config_hash, data_hash=data_hash,
                          chains=chains)
