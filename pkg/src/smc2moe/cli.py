"""Command-line entry point: generate, fit, evaluate, psm, self-check.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure,
4 input/output failure (missing or malformed files, digest mismatch).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import rng as rngmod
from .config import SECTIONS, RunConfig, build_config
from .data_io import (
    GENERATORS,
    Dataset,
    generate,
    load_csv,
    normalize,
    read_normalization,
    write_csv,
    write_normalization,
)
from .errors import (
    ConfigError,
    DataFormatError,
    DegenerateDataError,
    DegenerateWeightsError,
    NumericalSingularityError,
)
from .eval_diagnostics import (
    density_distance,
    expert_count_posterior,
    ground_truth_density,
    median_distance,
    psm,
    write_distances_csv,
    write_histogram_csv,
    write_matrix_csv,
)
from .gating_prior import PriorSpec
from .is_baseline import OptimizerConfig, run_is
from .predictive import (
    PredictiveGrid,
    default_x_grid,
    default_y_grid,
    grid_median,
    predictive_density,
    predictive_median,
    read_grid_csv,
    write_grid_csv,
    write_summary_csv,
)
from .results import load_result, save_result
from .smc2_engine import SMC2Config, run_smc2

log = logging.getLogger("smc2moe")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# manifest helpers
# ---------------------------------------------------------------------------


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out: Path, payload: dict, files: list[str]) -> Path:
    payload = dict(payload)
    payload["code_version"] = __version__
    payload["rng"] = rngmod.ALGORITHM
    payload["files"] = {name: sha256(out / name) for name in sorted(files)}
    path = out / MANIFEST
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=True) + "\n")
    return path


def check_manifest(path) -> list[str]:
    """Names of files whose digest no longer matches (missing files included)."""
    path = Path(path)
    manifest = json.loads(path.read_text())
    bad = []
    for name, digest in manifest.get("files", {}).items():
        f = path.parent / name
        if not f.exists() or sha256(f) != digest:
            bad.append(name)
    return bad


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def load_dataset(cfg: RunConfig) -> tuple[Dataset, "object", str | None]:
    """Normalized dataset, its normalization record and the generator tag (if known)."""
    if cfg.csv:
        if cfg.generator:
            raise UsageError("give either --generator or --csv, not both")
        ds = load_csv(cfg.csv, cfg.D)
        if cfg.normalization:
            rec, payload = read_normalization(cfg.normalization)
            return ds, rec, payload.get("generator")
        nds, rec = normalize(ds)
        return nds, rec, None
    if not cfg.generator:
        raise UsageError("a data source is required: --generator or --csv")
    if cfg.generator not in GENERATORS:
        raise UsageError(f"unknown generator {cfg.generator!r}")
    if cfg.D != 1:
        raise UsageError("synthetic generators are one-dimensional (D = 1)")
    raw = generate(cfg.generator, cfg.N, cfg.effective_data_seed)
    nds, rec = normalize(raw)
    return nds, rec, cfg.generator


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_generate(cfg: RunConfig) -> int:
    if not cfg.generator:
        raise UsageError("generate needs --generator")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ds, rec, tag = load_dataset(cfg)
    prov = f"{tag} N={cfg.N} seed={cfg.effective_data_seed} normalized"
    write_csv(ds, out / "data.csv", prov)
    write_normalization(rec, out / "normalization.json",
                        {"generator": tag, "N": cfg.N, "seed": cfg.effective_data_seed})
    write_manifest(out, {"command": "generate", "config": cfg.echo()}, ["data.csv", "normalization.json"])
    return EXIT_OK


def _distances(grid: PredictiveGrid, median, tag, rec):
    truth = ground_truth_density(tag, grid.x_grid, grid.y_grid, rec)
    l1, l2 = density_distance(grid.density, truth.density)
    # both medians come from the same grid extraction, so a grid compared
    # with itself scores exactly zero
    return l1, l2, median_distance(median, grid_median(grid.y_grid, truth.density))


def cmd_fit(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ds, rec, tag = load_dataset(cfg)
    spec = PriorSpec.default(cfg.K, cfg.alpha, ds.D, float(ds.Y.max()))
    t0 = time.time()
    run_info: dict = {}
    if cfg.method == "smc2":
        scfg = SMC2Config(J=cfg.J, M=cfg.M, eta=cfg.eta, delta=cfg.delta, max_mcmc_steps=cfg.max_mcmc_steps,
                          seed=cfg.seed, proposal_scale=cfg.proposal_scale, workers=cfg.workers)
        ckpt = out / "checkpoint.json"
        try:
            res = run_smc2(ds.X, ds.Y, spec, scfg, checkpoint_path=ckpt)
        except Exception:
            if ckpt.exists():
                log.error("sampler aborted; last completed step saved in %s", ckpt)
            raise
        ckpt.unlink(missing_ok=True)
        d = res.diagnostics
        run_info = {
            "kappa_schedule": list(res.kappas),
            "likelihood_evaluations": d["likelihood_evaluations"],
            "nonempty_likelihood_evaluations": d["nonempty_likelihood_evaluations"],
            "failed_factorizations": d["failed_factorizations"],
            "support_rejections": d["support_rejections"],
            "steps": d["steps"],
            "warnings": d["warnings"],
        }
    else:
        opt = OptimizerConfig(cfg.map_starts, cfg.map_iter)
        if cfg.is_budget is not None:
            res = run_is(ds.X, ds.Y, spec, opt=opt, seed=cfg.seed, workers=cfg.workers, budget=cfg.is_budget)
        else:
            res = run_is(ds.X, ds.Y, spec, J=cfg.is_J, opt=opt, seed=cfg.seed, workers=cfg.workers)
        run_info = dict(res.diagnostics)
    wall = time.time() - t0

    files = ["particles.json", "normalization.json", "predictive_grid.csv", "predictive_summary.csv",
             "psm.csv", "expert_counts.csv"]
    save_result(res, out / "particles.json")
    write_normalization(rec, out / "normalization.json", {"generator": tag})
    xg = default_x_grid(ds.D, cfg.nx, cfg.x_dim)
    yg = default_y_grid(ds.Y, cfg.ny)
    grid = predictive_density(res, ds.X, ds.Y, xg, yg)
    med = predictive_median(grid)
    write_grid_csv(grid, out / "predictive_grid.csv")
    write_summary_csv(grid, med, out / "predictive_summary.csv")
    write_matrix_csv(psm(res), out / "psm.csv")
    hist = expert_count_posterior(res, cfg.K)
    write_histogram_csv(hist, out / "expert_counts.csv")
    mass = grid.mass()
    summary = {"mass_min": float(mass.min()), "mass_max": float(mass.max()),
               "mean_expert_count": float(np.dot(np.arange(1, cfg.K + 1), hist))}
    if tag is not None:
        l1, l2, md = _distances(grid, med, tag, rec)
        write_distances_csv(f"{cfg.method}-{tag}-seed{cfg.seed}", l1, l2, md, out / "distances.csv")
        files.append("distances.csv")
        summary.update({"l1": l1, "l2": l2, "median_l1": md})
    write_manifest(out, {
        "command": "fit",
        "config": cfg.echo(),
        "method": cfg.method,
        "wall_time_seconds": wall,
        "grid": {"nx": cfg.nx, "ny": cfg.ny, "y_min": float(yg[0]), "y_max": float(yg[-1])},
        "run": run_info,
        "summary": summary,
    }, files)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if not args.normalization:
        raise UsageError("evaluate needs --normalization")
    rec, payload = read_normalization(args.normalization)
    tag = args.generator or payload.get("generator")
    if not tag:
        raise UsageError("the normalization record names no generator; pass --generator")
    X, y, dens = read_grid_csv(args.grid)
    if X.shape[1] != len(rec.x_min):
        raise UsageError("grid input dimension does not match the normalization record")
    truth = ground_truth_density(tag, X, y, rec)
    if args.write_truth:
        write_grid_csv(PredictiveGrid(X, y, truth.density, truth.median), args.write_truth)
    l1, l2 = density_distance(dens, truth.density)
    md = median_distance(grid_median(y, dens), grid_median(y, truth.density))
    out = Path(args.out_file)
    write_distances_csv(args.run_id or Path(args.grid).stem, l1, l2, md, out)
    print(f"L1={l1:.17g} L2={l2:.17g} median_L1={md:.17g}")
    return EXIT_OK


def cmd_psm(args) -> int:
    res = load_result(args.particles)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(psm(res), out / "psm.csv")
    K = max(int(p.psi.K) for p in res.particles)
    write_histogram_csv(expert_count_posterior(res, K), out / "expert_counts.csv")
    return EXIT_OK


def cmd_self_check(args) -> int:
    bad = check_manifest(args.manifest)
    if bad:
        print("digest mismatch: " + ", ".join(bad), file=sys.stderr)
        return EXIT_IO
    print("all digests match")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="INI file; flags override its values")
    types = {"int": int, "float": float, "str": str}
    from dataclasses import fields

    for f in fields(RunConfig):
        base = str(f.type).split(" ")[0]
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=types.get(base, str), default=None,
                       help=f"[{next(s for s, keys in SECTIONS.items() if f.name in keys)}] default {f.default}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smc2moe", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run_flags(sub.add_parser("generate", help="write a normalized synthetic dataset"))
    _add_run_flags(sub.add_parser("fit", help="fit SMC2 or IS and write predictive outputs"))
    ev = sub.add_parser("evaluate", help="distances of a predictive grid to the generating law")
    ev.add_argument("--grid", required=True)
    ev.add_argument("--normalization")
    ev.add_argument("--generator", choices=GENERATORS)
    ev.add_argument("--run-id")
    ev.add_argument("--write-truth", help="also write the ground-truth grid CSV here")
    ev.add_argument("--out-file", default="distances.csv")
    ps = sub.add_parser("psm", help="posterior similarity matrix and expert counts from a particle file")
    ps.add_argument("--particles", required=True)
    ps.add_argument("--out", default=".")
    sc = sub.add_parser("self-check", help="verify manifest digests")
    sc.add_argument("--manifest", required=True)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in ("generate", "fit"):
            overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
            cfg = build_config(args.config, **overrides)
            return cmd_generate(cfg) if args.command == "generate" else cmd_fit(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(args)
        if args.command == "psm":
            return cmd_psm(args)
        return cmd_self_check(args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalSingularityError, DegenerateWeightsError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DataFormatError, DegenerateDataError, json.JSONDecodeError) as exc:
        print(f"input/output error: {exc}", file=sys.stderr)
        return EXIT_IO


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
