"""Command-line front end.

Subcommands: fit, simulate, select-k, diagnose, metrics.  Exit codes:
0 success, 2 invalid input (data, config, scenario, arguments), 3 runtime
failure (sampler or post-processing).  Errors print one JSON object to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import artifacts
from .config import ConfigError, config_from_json
from .data import DataError, ingest_csv, write_csv
from .metrics import adjusted_rand, jaccard_pair
from .postprocess import PostprocessError, bayes_pvalue, ppc_pass, summarize
from .sampler import SamplerError
from .simulate import (SimulationError, replicate_seeds, scenario_from_json,
                       simulate_dataset, truth_to_json)
from .workflow import fit_dataset, select_k_scan


def _load_json(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})")


def _load_config(path):
    config, overrides = config_from_json(_load_json(path))
    return config, overrides


def _apply_chains(config, chains):
    if chains is None:
        return config
    return replace(config, mcmc=replace(config.mcmc, chains=int(chains)))


def _ingest(config, data_path):
    families = {m.name: m.family for m in config.markers}
    return ingest_csv(data_path, families)


def parse_k_range(text: str) -> list:
    """'2:5' (inclusive) or '2,3,5' or '3' -> sorted list of ints."""
    text = text.strip()
    try:
        if ":" in text:
            lo_s, hi_s = text.split(":", 1)
            lo, hi = int(lo_s), int(hi_s)
        else:
            lo = hi = None
            values = sorted({int(tok) for tok in text.split(",") if tok.strip()})
    except ValueError:
        raise ConfigError(f"--k-range: could not parse {text!r}; "
                          "use 'LO:HI' or a comma-separated list")
    if lo is not None:
        if hi < lo:
            raise ConfigError(f"--k-range: empty range {text!r}")
        return list(range(lo, hi + 1))
    return values


# ---------------------------------------------------------------------------
# subcommands

def cmd_fit(args) -> int:
    config, overrides = _load_config(args.config)
    config = _apply_chains(config, args.chains)
    data = _ingest(config, args.data)
    fr = fit_dataset(data, config, overrides, seed=args.seed)
    artifacts.write_fit_dir(
        args.out,
        relabeled=fr.relabeled, result=fr.result, data=data,
        T_obs=fr.T_obs, T_rep=fr.T_rep,
        seed=args.seed, chains=config.mcmc.chains,
        config_hash=artifacts.sha256_config(config, overrides),
        data_hash=artifacts.sha256_file(args.data))
    print(json.dumps({
        "out": str(args.out),
        "K": config.K,
        "draws": fr.draws.S,
        "mean_alpha_star": float(fr.result.mean_alpha_star),
        "bayes_pvalue": float(fr.result.bayes_p),
    }, sort_keys=True))
    return 0


def cmd_simulate(args) -> int:
    obj = _load_json(args.config)
    spec, replicates = scenario_from_json(obj)
    if args.replicates is not None:
        if args.replicates < 1:
            raise SimulationError("--replicates: must be >= 1")
        replicates = args.replicates
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for j, child in enumerate(replicate_seeds(spec.seed, replicates), start=1):
        truth = simulate_dataset(replace(spec, seed=child))
        data_name, truth_name = f"data_{j:04d}.csv", f"truth_{j:04d}.json"
        write_csv(truth.dataset, out / data_name)
        artifacts.write_json(out / truth_name, truth_to_json(truth))
        outputs += [data_name, truth_name]
    scenario_echo = dict(obj)
    scenario_echo["seed"] = spec.seed
    scenario_echo["replicates"] = replicates
    config_hash = artifacts.sha256_bytes(
        json.dumps(scenario_echo, sort_keys=True, separators=(",", ":")).encode())
    artifacts.write_manifest(out, "simulate", seed=spec.seed, outputs=outputs,
                             config_hash=config_hash,
                             extra={"replicates": replicates})
    print(json.dumps({"out": str(out), "replicates": replicates}, sort_keys=True))
    return 0


def cmd_select_k(args) -> int:
    config, overrides = _load_config(args.config)
    config = _apply_chains(config, args.chains)
    data = _ingest(config, args.data)
    ks = parse_k_range(args.k_range)
    scan = select_k_scan(data, config, ks, overrides, seed=args.seed,
                         keep_fits=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "candidates": ks,
        "table": {str(K): float(v) for K, v in sorted(scan.table.items())},
        "K_hat": scan.K_hat,
        "tied": scan.tied,
        "errors": {str(K): msg for K, msg in sorted(scan.errors.items())},
    }
    artifacts.write_json(out / "select_k.json", payload)
    with open(out / "select_k.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["K", "mean_alpha_star"])
        for K in sorted(scan.table):
            w.writerow([K, repr(scan.table[K])])
    artifacts.write_manifest(out, "select-k", seed=args.seed,
                             outputs=["select_k.json", "select_k.csv"],
                             config_hash=artifacts.sha256_config(config, overrides),
                             data_hash=artifacts.sha256_file(args.data))
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_diagnose(args) -> int:
    relabeled, dataset, designs, meta = artifacts.load_fit_dir(args.fit_dir)
    result = summarize(relabeled)
    master = np.random.SeedSequence(meta["seed"])
    ppc_key = master.spawn(meta["chains"] + 1)[meta["chains"]]
    T_obs, T_rep = ppc_pass(relabeled.draws, dataset, designs,
                            np.random.default_rng(ppc_key))
    p = bayes_pvalue(T_obs, T_rep)
    geweke = {
        prm.name: {str(c): (z if isinstance(z, str) else float(z))
                   for c, z in sorted(prm.geweke.items())}
        for prm in result.params
    }
    zs = [abs(z) for per in geweke.values() for z in per.values()
          if not isinstance(z, str)]
    payload = {
        "fit_dir": str(args.fit_dir),
        "draws": relabeled.draws.S,
        "chains": meta["chains"],
        "bayes_pvalue": float(p),
        "geweke": geweke,
        "n_scalar_parameters": len(result.params),
        "prop_abs_geweke_below_3.29": (
            float(sum(z < 3.29 for z in zs)) / len(zs) if zs else None),
    }
    out = Path(args.fit_dir)
    artifacts.write_json(out / "diagnostics.json", payload)
    artifacts.write_manifest(out, "diagnose", seed=meta["seed"],
                             outputs=["diagnostics.json"],
                             chains=meta["chains"],
                             filename="manifest_diagnose.json")
    brief = dict(payload)
    del brief["geweke"]
    print(json.dumps(brief, sort_keys=True))
    return 0


def _read_partition(path) -> dict:
    """(subject_id,label) CSV -> {id: label}; header required."""
    ids, labels = [], []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}")
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        cols = [h.strip().lower() for h in header[:2]]
        if cols != ["subject_id", "label"]:
            raise DataError(f"{path}: expected header 'subject_id,label', "
                            f"got {','.join(header)!r}")
        for n, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) < 2:
                raise DataError(f"{path}: line {n}: expected 2 columns")
            ids.append(row[0].strip())
            labels.append(row[1].strip())
    if len(set(ids)) != len(ids):
        seen, dups = set(), set()
        for sid in ids:
            (dups if sid in seen else seen).add(sid)
        raise DataError(f"{path}: duplicate subject ids: {', '.join(sorted(dups))}")
    if not ids:
        raise DataError(f"{path}: no rows")
    return dict(zip(ids, labels))


def cmd_metrics(args) -> int:
    a = _read_partition(args.partition_a)
    b = _read_partition(args.partition_b)
    only_a = sorted(set(a) - set(b))
    only_b = sorted(set(b) - set(a))
    if only_a or only_b:
        def clip(lst):
            return ", ".join(lst[:20]) + (", ..." if len(lst) > 20 else "")
        parts = []
        if only_a:
            parts.append(f"only in {args.partition_a}: {clip(only_a)}")
        if only_b:
            parts.append(f"only in {args.partition_b}: {clip(only_b)}")
        raise DataError("subject ids do not match; " + "; ".join(parts))
    ids = sorted(a)
    la = [a[i] for i in ids]
    lb = [b[i] for i in ids]
    print(json.dumps({"aRand": float(adjusted_rand(la, lb)),
                      "jaccard": float(jaccard_pair(la, lb))}, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser / entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="longcc",
        description="Bayesian consensus clustering of mixed-type longitudinal markers")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="run MCMC chains and write fit artifacts")
    f.add_argument("--data", required=True, help="long-format CSV")
    f.add_argument("--config", required=True, help="model config JSON")
    f.add_argument("--out", required=True, help="output directory")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--chains", type=int, default=None,
                   help="override the configured chain count")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="generate synthetic datasets with known truth")
    s.add_argument("--config", required=True, help="scenario JSON")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=None,
                   help="override the scenario seed")
    s.add_argument("--replicates", type=int, default=None,
                   help="override the scenario replicate count")
    s.set_defaults(func=cmd_simulate)

    k = sub.add_parser("select-k", help="scan candidate K by mean adjusted adherence")
    k.add_argument("--data", required=True)
    k.add_argument("--config", required=True)
    k.add_argument("--out", required=True)
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--chains", type=int, default=None)
    k.add_argument("--k-range", default="2:5",
                   help="'LO:HI' inclusive or comma-separated list (default 2:5)")
    k.set_defaults(func=cmd_select_k)

    d = sub.add_parser("diagnose", help="Geweke and posterior predictive checks for a fit")
    d.add_argument("fit_dir", help="directory written by fit")
    d.set_defaults(func=cmd_diagnose)

    m = sub.add_parser("metrics", help="compare two partitions (aRand, Jaccard)")
    m.add_argument("partition_a", help="CSV with columns subject_id,label")
    m.add_argument("partition_b", help="CSV with columns subject_id,label")
    m.set_defaults(func=cmd_metrics)
    return p


def _fail(kind: str, exc: Exception, code: int) -> int:
    print(json.dumps({"error": {"type": kind, "message": str(exc)}},
                     sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except np.linalg.LinAlgError as exc:
        return _fail("runtime", exc, 3)
    except (ConfigError, DataError, SimulationError, ValueError, OSError) as exc:
        return _fail("validation", exc, 2)
    except (SamplerError, PostprocessError, RuntimeError) as exc:
        return _fail("runtime", exc, 3)


if __name__ == "__main__":
    sys.exit(main())
