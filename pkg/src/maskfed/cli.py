"""Config-driven experiment runner.

Subcommands: train, sweep, stability, analyze.  Every command maps a config
file plus filesystem inputs to filesystem outputs; nothing depends on the
clock, locale, or environment, so rerunning a command reproduces its
artifacts byte for byte.

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 missing or
corrupt artifact.
"""

from __future__ import annotations

import argparse
import csv
import math
import struct
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .core import ConfigError, NumericError
from .data import ConstantsReport, estimate_constants, load_datasets, save_datasets
from .masking import derive_seed, full_plan
from .oracle import (
    MaskedObjectiveHandle,
    mask_objective_gradient,
    objective_gradient,
    objective_value,
    solve_masked_optimum,
    stationarity_bound,
)
from .stability import coupled_run, generalization_gap, loglog_slope, make_neighbor
from .trainer import TrainResult, run

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_ARTIFACT = 4

METRICS_COLUMNS = (
    "run_id", "seed", "round", "F_value", "Fmask_value",
    "grad_norm_sq_F", "grad_norm_sq_Fmask", "dist_to_wstar_mask",
)

_MODEL_MAGIC = b"MFW1"


class ArtifactError(RuntimeError):
    """A required run artifact is missing or fails its integrity check."""


def fmt(x: float) -> str:
    """Decimal with 17 significant digits; round-trips float64 exactly."""
    return format(float(x), ".17g")


def save_model(path, w: np.ndarray) -> None:
    payload = struct.pack("<IQ", 1, len(w)) + np.asarray(w, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC + payload + struct.pack("<I", zlib.crc32(payload)))


def load_model(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"missing model file: {path}")
    raw = path.read_bytes()
    if len(raw) < 20 or raw[:4] != _MODEL_MAGIC:
        raise ArtifactError(f"{path}: integrity check failed (bad magic)")
    payload, crc = raw[4:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(payload) != crc:
        raise ArtifactError(f"{path}: integrity check failed (checksum mismatch)")
    version, d = struct.unpack("<IQ", payload[:12])
    if version != 1 or len(payload) != 12 + 8 * d:
        raise ArtifactError(f"{path}: integrity check failed (bad layout)")
    return np.frombuffer(payload[12:], dtype="<f8").copy()


def write_metrics_csv(path, rows: list[dict]) -> None:
    rows = sorted(rows, key=lambda r: (r["run_id"], r["round"]))
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(METRICS_COLUMNS)
        for r in rows:
            out.writerow([
                r["run_id"], r["seed"], r["round"],
                fmt(r["F_value"]), fmt(r["Fmask_value"]),
                fmt(r["grad_norm_sq_F"]), fmt(r["grad_norm_sq_Fmask"]),
                fmt(r["dist_to_wstar_mask"]),
            ])


def metrics_rows(result: TrainResult, run_id: str, seed: int) -> list[dict]:
    return [
        {
            "run_id": run_id, "seed": seed, "round": m.round,
            "F_value": m.F_value, "Fmask_value": m.Fmask_value,
            "grad_norm_sq_F": m.grad_norm_sq_F,
            "grad_norm_sq_Fmask": m.grad_norm_sq_Fmask,
            "dist_to_wstar_mask": m.dist_to_wstar_mask,
        }
        for m in result.metrics
    ]


# --- train -------------------------------------------------------------------

def cmd_train(cfg: ExperimentConfig, out_dir: Path) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    datasets = cfg.datasets()
    tc = cfg.train_config(datasets=datasets)
    result = run(tc)
    write_metrics_csv(out_dir / "metrics.csv", metrics_rows(result, "train", tc.seed))
    save_model(out_dir / "model.bin", result.w_hat)
    (out_dir / "constants.txt").write_text(result.constants.to_text())
    save_datasets(out_dir / "datasets.bin", datasets)
    (out_dir / "config.yaml").write_text(cfg.to_yaml())
    print(f"train: wrote metrics.csv, model.bin, constants.txt under {out_dir}")
    return EXIT_OK


# --- sweep -------------------------------------------------------------------

def _sweep_cell(raw_cfg: dict, cell_index: int, value) -> tuple[list[dict], dict]:
    cfg = ExperimentConfig.from_dict(raw_cfg)
    param = cfg.raw["sweep"]["parameter"]
    seeds = cfg.raw["sweep"]["seeds"]
    cell_cfg = cfg.with_override(param, value)
    master = cfg.raw["trainer"]["seed"]
    data_seed = cfg.raw["data"]["seed"]

    rows: list[dict] = []
    gaps, grad_f, grad_fm, residuals = [], [], [], []
    for si in range(seeds):
        run_seed = derive_seed(master, cell_index, si)
        datasets = cell_cfg.datasets(seed=derive_seed(data_seed, si))
        tc = cell_cfg.train_config(datasets=datasets, seed=run_seed)
        result = run(tc)
        run_id = f"cell{cell_index:03d}_seed{si:02d}"
        rows.extend(metrics_rows(result, run_id, run_seed))

        spec, ball = cell_cfg.objective, cell_cfg.ball
        term = result.metrics[-1]
        grad_f.append(term.grad_norm_sq_F)
        grad_fm.append(term.grad_norm_sq_Fmask)
        try:
            full = MaskedObjectiveHandle(
                spec, datasets,
                type(tc.plan)(mode="full", p=np.ones(len(datasets))),
                eval_mode="closed_quadratic" if spec.kind == "quadratic" else "enum",
            )
            w_star = solve_masked_optimum(full, ball)
            f_star = objective_value(spec, datasets, w_star)
            gaps.append(objective_value(spec, datasets, result.w_hat) - f_star)
            handle = MaskedObjectiveHandle(
                spec, datasets, tc.plan,
                eval_mode="closed_quadratic" if spec.kind == "quadratic" else "enum",
            )
            w_star_mask = solve_masked_optimum(handle, ball)
            residuals.append(objective_value(spec, datasets, w_star_mask) - f_star)
        except ConfigError:
            gaps.append(float("nan"))
            residuals.append(float("nan"))

    summary = {
        "cell_index": cell_index,
        "parameter": param,
        "value": value,
        "seeds": seeds,
        "F_gap_mean": float(np.mean(gaps)),
        "grad_norm_sq_F_mean": float(np.mean(grad_f)),
        "grad_norm_sq_Fmask_mean": float(np.mean(grad_fm)),
        "residual_mean": float(np.mean(residuals)),
    }
    return rows, summary


def cmd_sweep(cfg: ExperimentConfig, out_dir: Path, workers: int) -> int:
    if "sweep" not in cfg.raw:
        raise ConfigError("sweep: block is required for the sweep command")
    out_dir.mkdir(parents=True, exist_ok=True)
    values = cfg.raw["sweep"]["values"]
    jobs = [(cfg.raw, ci, v) for ci, v in enumerate(values)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_cell_star, jobs))
    else:
        results = [_sweep_cell_star(j) for j in jobs]

    summaries = []
    for (rows, summary), (_, ci, _v) in zip(results, jobs):
        write_metrics_csv(out_dir / f"cell_{ci:03d}.csv", rows)
        summaries.append(summary)
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow([
            "cell_index", "parameter", "value", "seeds", "F_gap_mean",
            "grad_norm_sq_F_mean", "grad_norm_sq_Fmask_mean", "residual_mean",
        ])
        for s in summaries:
            out.writerow([
                s["cell_index"], s["parameter"], fmt(s["value"]) if isinstance(s["value"], (int, float)) else s["value"],
                s["seeds"], fmt(s["F_gap_mean"]), fmt(s["grad_norm_sq_F_mean"]),
                fmt(s["grad_norm_sq_Fmask_mean"]), fmt(s["residual_mean"]),
            ])
    (out_dir / "config.yaml").write_text(cfg.to_yaml())
    print(f"sweep: {len(values)} cells x {cfg.raw['sweep']['seeds']} seeds under {out_dir}")
    return EXIT_OK


def _sweep_cell_star(job):
    return _sweep_cell(*job)


# --- stability ---------------------------------------------------------------

def _stability_cell(raw_cfg: dict, n: int, p: float | None, seed_index: int, identity: bool) -> dict:
    cfg = ExperimentConfig.from_dict(raw_cfg)
    if p is not None:
        cfg = cfg.with_override("plan.p", p)
    st = cfg.raw["stability"]
    master = cfg.raw["trainer"]["seed"]
    data_seed = cfg.raw["data"]["seed"]
    run_seed = derive_seed(master, n, seed_index)
    datasets = cfg.datasets(seed=derive_seed(data_seed, n, seed_index), n=n)

    spec, ball = cfg.objective, cfg.ball
    N = len(datasets)
    rounds = st["rounds"]
    if rounds == "auto":
        plan_p = cfg.plan().p if cfg.plan().mode in ("random", "full") else np.ones(N)
        consts = estimate_constants(spec, datasets, ball, plan_p,
                                    trials=cfg.raw["trainer"]["constants_trials"], seed=run_seed ^ 0x5EED)
        rounds = max(1, math.ceil(2.0 * consts.L_tilde * math.sqrt(N * n)))

    pick = np.random.Generator(np.random.PCG64(np.random.SeedSequence(run_seed, spawn_key=(11,))))
    i = int(pick.integers(0, N))
    j = int(pick.integers(0, n))
    pair = make_neighbor(datasets, i, j, pick, identity=identity)

    tc = cfg.train_config(datasets=pair.base, seed=run_seed,
                          rounds=rounds, compute_mask_metrics=False)
    res = coupled_run(tc, pair)
    test = cfg.datasets(seed=derive_seed(data_seed, n, seed_index), n=st["test_samples"], split=1)
    gap = generalization_gap(spec, res.base.w_hat, pair.base, test)
    return {
        "seed": run_seed, "n": n, "N": N,
        "p": p if p is not None else float("nan"),
        "divergence": res.param_divergence, "gap": gap,
    }


def _stability_cell_star(job):
    return _stability_cell(*job)


def cmd_stability(cfg: ExperimentConfig, out_dir: Path, workers: int, identity: bool) -> int:
    if "stability" not in cfg.raw:
        raise ConfigError("stability: block is required for the stability command")
    out_dir.mkdir(parents=True, exist_ok=True)
    st = cfg.raw["stability"]
    p_values = st.get("p_values")
    if p_values is None:
        p_values = [None]
    jobs = [
        (cfg.raw, n, p, si, identity)
        for p in p_values
        for n in st["n_values"]
        for si in range(st["seeds"])
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_stability_cell_star, jobs))
    else:
        rows = [_stability_cell_star(j) for j in jobs]

    with open(out_dir / "stability_seeds.csv", "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["seed", "n", "N", "p", "divergence", "gap"])
        for r in rows:
            out.writerow([r["seed"], r["n"], r["N"], fmt(r["p"]), fmt(r["divergence"]), fmt(r["gap"])])

    with open(out_dir / "stability_summary.csv", "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["p", "n", "mean_divergence", "mean_gap", "slope"])
        for p in p_values:
            p_key = float("nan") if p is None else p
            sub = [r for r in rows if (math.isnan(r["p"]) if p is None else r["p"] == p)]
            means = {}
            for n in st["n_values"]:
                cell = [r for r in sub if r["n"] == n]
                means[n] = (
                    float(np.mean([r["divergence"] for r in cell])),
                    float(np.mean([r["gap"] for r in cell])),
                )
            if len(st["n_values"]) >= 2 and all(m[0] > 0 for m in means.values()):
                slope = loglog_slope(st["n_values"], [means[n][0] for n in st["n_values"]])
            else:
                slope = float("nan")
            for n in st["n_values"]:
                out.writerow([fmt(p_key), n, fmt(means[n][0]), fmt(means[n][1]), fmt(slope)])
    (out_dir / "config.yaml").write_text(cfg.to_yaml())
    print(f"stability: {len(jobs)} coupled pairs under {out_dir}")
    return EXIT_OK


# --- analyze -------------------------------------------------------------------

def cmd_analyze(run_dir: Path) -> int:
    for name in ("config.yaml", "model.bin", "constants.txt", "datasets.bin"):
        if not (run_dir / name).exists():
            raise ArtifactError(f"missing artifact: {run_dir / name}")
    cfg = ExperimentConfig.from_yaml(run_dir / "config.yaml")
    w_hat = load_model(run_dir / "model.bin")
    consts = ConstantsReport.from_text((run_dir / "constants.txt").read_text())
    datasets = load_datasets(run_dir / "datasets.bin")

    spec = cfg.objective
    plan = cfg.plan()
    if plan.mode == "rolling" or spec.kind == "quadratic":
        handle = MaskedObjectiveHandle(
            spec, datasets, plan,
            eval_mode="closed_quadratic" if spec.kind == "quadratic" else "enum",
        )
    else:
        dim = spec.param_dim(datasets[0].dim)
        mode = "enum" if dim <= 10 else "monte_carlo"
        handle = MaskedObjectiveHandle(spec, datasets, plan, eval_mode=mode,
                                       mc_seed=cfg.raw["trainer"]["seed"] ^ 0x0AC1E)

    g_f = objective_gradient(spec, datasets, w_hat)
    g_fm = mask_objective_gradient(handle, w_hat)
    eps_sq = float(g_fm @ g_fm)
    measured = float(g_f @ g_f)
    bound = stationarity_bound(handle, w_hat, eps_sq, consts.G, consts.L)
    margin = bound - measured
    verdict = "satisfied" if margin >= 0 else "violated"

    report = "\n".join([
        f"grad_norm_sq_F = {fmt(measured)}",
        f"grad_norm_sq_Fmask = {fmt(eps_sq)}",
        f"stationarity_bound = {fmt(bound)}",
        f"margin = {fmt(margin)}",
        f"verdict = {verdict}",
    ]) + "\n"
    (run_dir / "analysis.txt").write_text(report)
    print(report, end="")
    return EXIT_OK


# --- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="maskfed", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("train", "sweep", "stability"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--out", type=Path, default=None)
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--seed", type=int, default=None, help="override trainer.seed")
        if name == "stability":
            sp.add_argument("--debug-identity-perturbation", action="store_true")
    sp = sub.add_parser("analyze")
    sp.add_argument("run_dir", type=Path)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "analyze":
            return cmd_analyze(args.run_dir)
        cfg = ExperimentConfig.from_yaml(args.config)
        if args.seed is not None:
            cfg = cfg.with_override("trainer.seed", args.seed)
        out_dir = args.out
        if out_dir is None:
            out_dir = Path(cfg.raw.get("output", {}).get("dir", "out"))
        if args.command == "train":
            return cmd_train(cfg, out_dir)
        if args.command == "sweep":
            return cmd_sweep(cfg, out_dir, args.workers)
        return cmd_stability(cfg, out_dir, args.workers, args.debug_identity_perturbation)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ArtifactError as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT


if __name__ == "__main__":
    sys.exit(main())
