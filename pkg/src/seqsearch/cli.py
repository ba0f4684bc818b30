"""Command line entry point: search, grid, report, simulate, gradcheck."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .bloch import robustness_map, simulate
from .categorize import RunRecord, aggregate, classify_with_timing
from .gradcheck import run_gradcheck
from .gridsearch import GridBudgetExceeded, grid_preset, run_grid, success_threshold
from .losses import default_weights, evaluate_sequence, relative_rf_energy
from .optim import TrainConfig, train, write_history
from .population import (DEFAULT_TABLE, SAME_T1_TABLE, TISSUES, TissueTable, nominal_voxels,
                         sample_population)
from .scheduler import discretize, init_search_space
from .sequence import InvalidSequence, describe, load, save

log = logging.getLogger("seqsearch")

EXPERIMENTS = ("E1", "E2-sameT1", "E2-diffT1", "E3")
DESK = dict(population=10_000, batch=100, epochs=200)
FULL = dict(population=100_000, batch=1000, epochs=1000)
WEIGHT_NAMES = ("sig", "null", "cont", "rf_energy", "rf_number")


class UsageError(Exception):
    pass


def tissue_table(experiment: str, path=None) -> TissueTable:
    if path:
        return TissueTable.load(path)
    return SAME_T1_TABLE if experiment == "E2-sameT1" else DEFAULT_TABLE


def run_seeds(campaign_seed: int, n: int) -> list[int]:
    """Independent per-run seeds split from one campaign seed."""
    children = np.random.SeedSequence(campaign_seed).spawn(n)
    return [int(c.generate_state(1)[0]) for c in children]


# ---------------------------------------------------------------------------
# metrics shared by search and report


def tissue_signals(seq, batch) -> dict:
    mag = simulate(seq, batch).magnitude
    return {name: float(mag[batch.tissue == i].mean()) for i, name in enumerate(TISSUES) if np.any(batch.tissue == i)}


def robustness_metrics(seq, table: TissueTable, tissue: str = "GM", n: int = 11):
    b1 = np.linspace(0.8, 1.2, n)
    db0 = np.linspace(-50.0, 50.0, n)
    vox = nominal_voxels([tissue], table)
    _, _, mag = robustness_map(seq, vox, db0=db0, b1=b1)
    ref = float(simulate(seq, vox).magnitude[0])
    norm = mag / ref if ref > 0 else np.full_like(mag, np.nan)
    dev = np.abs(norm - 1.0)
    summary = {"tissue": tissue, "on_resonance": ref, "max_abs_deviation": float(np.max(dev)),
               "mean_abs_deviation": float(np.mean(dev))}
    return b1, db0, norm, summary


def write_map_csv(path, b1, db0, norm):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["b1", "db0_hz", "normalized_signal"])
        for i, b in enumerate(b1):
            for j, d in enumerate(db0):
                w.writerow([f"{b:.6g}", f"{d:.6g}", f"{norm[i, j]:.8g}"])


# ---------------------------------------------------------------------------
# search


def _weights_from_args(args) -> dict:
    return {k: getattr(args, f"w_{k}") for k in WEIGHT_NAMES if getattr(args, f"w_{k}", None) is not None}


def search_one(exp: str, seed: int, args, run_dir: Path) -> dict:
    run_dir.mkdir(parents=True, exist_ok=True)
    table = tissue_table(exp, args.tissue_table)
    pop_seed, init_seed, train_seed = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(3))
    cfg = TrainConfig(experiment=exp, epochs=args.epochs, batch=args.batch, population=args.population,
                      seed=train_seed, weights=_weights_from_args(args), lr_weights=args.lr_weights,
                      lr_arch=args.lr_arch, iters_per_epoch=args.iters_per_epoch,
                      gate_estimator=args.gate_estimator, checkpoint_every=args.checkpoint_every,
                      checkpoint_dir=str(run_dir) if args.checkpoint_every else None)
    (run_dir / "config.json").write_text(json.dumps({"seed": seed, "train": cfg.to_dict(),
                                                      "table": table.to_dict(), "version": __version__}, indent=2))
    t0 = time.perf_counter()
    pop = sample_population(cfg.population, pop_seed, table)
    space = init_search_space(init_seed)
    result = train(space, pop, cfg)
    write_history(result.history, run_dir / "history.csv")
    metrics = {"seed": seed, "failed": result.failed, "message": result.message}
    if not result.failed:
        try:
            seq = discretize(result.space)
        except InvalidSequence as exc:
            metrics.update(failed=True, message=str(exc))
        else:
            save(seq, run_dir / "sequence.txt")
            nominal = nominal_voxels(TISSUES, table)
            readout = simulate(seq, nominal, sample_dt=args.sample_dt)
            readout.trajectory.to_csv(run_dir / "trajectory.csv", nominal)
            b1, db0, norm, rob = robustness_metrics(seq, table, n=args.map_size)
            write_map_csv(run_dir / "robustness_map.csv", b1, db0, norm)
            label, timing = classify_with_timing(seq, exp)
            metrics.update(
                sequence=describe(seq), n_rf=seq.n_rf, flips_deg=seq.flips_deg(), phases_deg=seq.phases_deg(),
                time_to_readout_ms=seq.time_to_readout, label_structural=label, timing=asdict(timing),
                nominal_signals={n: float(v) for n, v in zip(TISSUES, readout.magnitude)},
                population_signals=tissue_signals(seq, pop.subset(np.arange(min(len(pop), 3000)))),
                rel_energy=relative_rf_energy(seq), robustness=rob,
            )
    metrics["seconds"] = time.perf_counter() - t0
    (run_dir / "metrics.json").write_text(json.dumps(metrics, indent=2))
    return metrics


def cmd_search(args) -> int:
    defaults = FULL if args.full else DESK
    for k, v in defaults.items():
        if getattr(args, k) is None:
            setattr(args, k, v)
    if args.batch > args.population:
        raise UsageError("batch must not exceed population")
    seeds = args.seed_list if args.seed_list else run_seeds(args.campaign_seed, args.seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"version": __version__, "experiment": args.exp, "campaign_seed": args.campaign_seed,
                "args": {k: v for k, v in vars(args).items() if k != "func"}, "runs": []}
    for i, seed in enumerate(seeds):
        run_dir = out / f"run_{i:03d}"
        try:
            m = search_one(args.exp, seed, args, run_dir)
            status = "failed" if m["failed"] else "ok"
        except Exception as exc:  # a broken run must not stop the campaign
            log.exception("run %d failed", i)
            m, status = {"message": repr(exc)}, "failed"
        manifest["runs"].append({"dir": run_dir.name, "seed": seed, "status": status,
                                 "message": m.get("message", ""), "sequence": m.get("sequence")})
        print(f"[{i + 1}/{len(seeds)}] seed {seed}: {status} {m.get('sequence', m.get('message', ''))}",
              flush=True)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return 0


# ---------------------------------------------------------------------------
# grid


def grid_batch(exp: str, voxels: int, seed: int, table_path=None):
    return sample_population(voxels, seed, tissue_table(exp, table_path))


def cmd_grid(args) -> int:
    spec = grid_preset(args.exp, desk=not args.full)
    batch = grid_batch(args.exp, args.voxels, args.seed, args.tissue_table)
    weights = default_weights(args.exp, **_weights_from_args(args))
    try:
        res = run_grid(spec, batch, args.exp, weights, top_k=args.top_k, force=args.force)
    except GridBudgetExceeded as exc:
        print(f"refusing: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res.write(out / "grid_top.csv", None)
    summary = res.summary()
    summary.update(voxels=args.voxels, seed=args.seed, tissue_table=args.tissue_table, version=__version__)
    (out / "grid_summary.json").write_text(json.dumps(summary, indent=2))
    save(res.best_sequence(), out / "grid_optimum.txt")
    o = res.optimum
    print(f"{args.exp} grid ({spec.total} combinations, {len(batch)} voxels, {res.seconds:.1f} s)")
    print(f"optimum: theta=({o['theta1']:g}, {o['theta2']:g}) phi2={o['phi2']:g} dt=({o['dt1']:g}, {o['dt2']:g}) ms"
          f" loss={o['loss']:.6g} energy={o['rel_energy']:.1f}%")
    print(f"reference {res.reference['flips']}: loss={res.reference['loss']:.6g}")
    return 0


# ---------------------------------------------------------------------------
# report


def _run_dirs(paths) -> list[Path]:
    dirs = []
    for p in map(Path, paths):
        if (p / "metrics.json").exists():
            dirs.append(p)
        else:
            dirs += sorted(d for d in p.glob("run_*") if (d / "metrics.json").exists())
    return dirs


def cmd_report(args) -> int:
    dirs = _run_dirs(args.runs)
    if not dirs:
        raise UsageError("no run directories with metrics.json found")
    grid = json.loads(Path(args.grid).read_text())
    exp = grid["experiment"]
    batch = grid_batch(exp, grid["voxels"], grid["seed"], grid.get("tissue_table"))
    weights = default_weights(exp, **grid.get("weights", {}))
    loss_opt = grid["optimum"]["loss"]
    records, rows, curves = [], [], []
    for d in dirs:
        metrics = json.loads((d / "metrics.json").read_text())
        seq_path = d / "sequence.txt"
        if metrics.get("failed") or not seq_path.exists():
            rows.append({"run": d.name, "status": "failed", "label": "Others", "success": False})
            continue
        seq = load(seq_path)
        mag = simulate(seq, batch).magnitude
        loss = evaluate_sequence(exp, seq, mag, batch, weights).total
        ok = success_threshold(loss, loss_opt)
        structural, timing = classify_with_timing(seq, exp)
        label = structural if ok else "Others"
        sig = metrics["nominal_signals"]
        records.append(RunRecord(label, seq, sig, relative_rf_energy(seq), loss, ok, metrics.get("seed")))
        rows.append({"run": d.name, "status": "ok", "label": label, "structural_label": structural,
                     "success": ok, "loss": loss, "loss_opt": loss_opt, "sequence": describe(seq),
                     "rel_energy": relative_rf_energy(seq), "ti_ms": timing.ti, "te_ms": timing.te,
                     "t_readout_ms": timing.readout, **{f"signal_{k}": v for k, v in sig.items()},
                     "robust_max_dev": metrics["robustness"]["max_abs_deviation"],
                     "robust_mean_dev": metrics["robustness"]["mean_abs_deviation"]})
        with open(d / "history.csv") as fh:
            for r in csv.DictReader(fh):
                curves.append({"run": d.name, "epoch": r["epoch"], "total": r["total"]})
    # failed runs count towards the occurrence rates as Others
    records += [RunRecord("Others", None, {}, float("nan"), success=False) for r in rows if r["status"] == "failed"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = aggregate(records, exp)
    report.write_csv(out / "categories.csv")
    _write_rows(out / "runs.csv", rows)
    _write_rows(out / "loss_curves.csv", curves)
    n_ok = sum(1 for r in rows if r.get("success"))
    text = report.to_text() + f"\nsuccessful: {n_ok}/{len(rows)} (optimum loss {loss_opt:.6g})\n"
    (out / "report.txt").write_text(text)
    print(text)
    return 0


def _write_rows(path, rows):
    fields = []
    for r in rows:
        fields += [k for k in r if k not in fields]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields or ["run"])
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------------------
# simulate / gradcheck


def cmd_simulate(args) -> int:
    seq = load(args.sequence)
    table = tissue_table(args.exp or "E1", args.tissue_table)
    vox = nominal_voxels(TISSUES, table, b1=args.b1, db0=args.db0)
    res = simulate(seq, vox, sample_dt=args.sample_dt if args.trajectory else None)
    print(describe(seq))
    for name, mag in zip(TISSUES, res.magnitude):
        print(f"{name}: |s| = {mag:.6f}")
    print(f"relative RF energy: {relative_rf_energy(seq):.2f}%")
    if args.trajectory:
        res.trajectory.to_csv(args.trajectory, vox)
    if args.robustness:
        b1, db0, norm, rob = robustness_metrics(seq, table, n=args.map_size)
        write_map_csv(args.robustness, b1, db0, norm)
        print(f"GM robustness: max deviation {100 * rob['max_abs_deviation']:.2f}%, "
              f"mean {100 * rob['mean_abs_deviation']:.2f}%")
    return 0


def cmd_gradcheck(args) -> int:
    rep = run_gradcheck(args.sequences, args.voxels, args.seed)
    i, worst = rep.worst()
    print(f"{len(rep.entries)} gradients on {rep.n_sequences} sequences in {rep.seconds:.2f} s")
    print(f"max relative error {rep.max_rel_error:.3e} (sequence {i}, {worst.name})")
    return 0 if rep.max_rel_error < args.tol else 1


# ---------------------------------------------------------------------------
# parser


def _add_common(p):
    p.add_argument("--exp", choices=EXPERIMENTS, default="E1")
    p.add_argument("--tissue-table", default=None, help="JSON tissue table replacing the defaults")
    for k in WEIGHT_NAMES:
        p.add_argument(f"--w-{k.replace('_', '-')}", dest=f"w_{k}", type=float, default=None,
                       help=f"override the {k} loss weight")
    p.add_argument("--config", default=None, help="JSON file whose keys override command line flags")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="seqsearch", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run a multi-seed search campaign")
    _add_common(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--seeds", type=int, default=10, help="number of runs")
    g.add_argument("--seed-list", type=int, nargs="+", help="explicit run seeds")
    p.add_argument("--campaign-seed", type=int, default=0)
    scale = p.add_mutually_exclusive_group()
    scale.add_argument("--desk-scale", action="store_true", help="desk defaults (default)")
    scale.add_argument("--full", action="store_true", help="full-scale population, batch and epochs")
    p.add_argument("--population", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--iters-per-epoch", type=int, default=None,
                   help="iterations per epoch (default: population / batch)")
    p.add_argument("--lr-weights", type=float, default=0.01)
    p.add_argument("--lr-arch", type=float, default=0.001)
    p.add_argument("--gate-estimator", choices=("all", "active"), default="all")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--sample-dt", type=float, default=0.5, help="trajectory sampling step (ms)")
    p.add_argument("--map-size", type=int, default=11, help="robustness map samples per axis")
    p.add_argument("--out", default="runs/search")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("grid", help="exhaustive two-RF reference search")
    _add_common(p)
    p.add_argument("--full", action="store_true", help="use the full-resolution grid")
    p.add_argument("--voxels", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--force", action="store_true", help="run even if over the time budget")
    p.add_argument("--out", default="runs/grid")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("report", help="categorize runs and compute success rates")
    p.add_argument("runs", nargs="+", help="campaign or run directories")
    p.add_argument("--grid", required=True, help="grid_summary.json from the grid command")
    p.add_argument("--out", default="runs/report")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("simulate", help="signals and trajectory of one sequence file")
    p.add_argument("sequence")
    p.add_argument("--exp", choices=EXPERIMENTS, default=None, help="selects the tissue table")
    p.add_argument("--tissue-table", default=None)
    p.add_argument("--b1", type=float, default=1.0)
    p.add_argument("--db0", type=float, default=0.0)
    p.add_argument("--trajectory", default=None, help="write a trajectory CSV here")
    p.add_argument("--sample-dt", type=float, default=0.5)
    p.add_argument("--robustness", default=None, help="write the normalized GM robustness map here")
    p.add_argument("--map-size", type=int, default=11)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the simulator gradients")
    p.add_argument("--sequences", type=int, default=20)
    p.add_argument("--voxels", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def apply_config(args, parser):
    if not getattr(args, "config", None):
        return args
    cfg = json.loads(Path(args.config).read_text())
    known = set(vars(args))
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("func", "command", "config"):
            parser.error(f"unknown config key {key!r}")
        setattr(args, dest, value)
    return args


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args = apply_config(args, parser)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "exp", None) is not None and args.exp not in EXPERIMENTS:
        parser.error(f"unknown experiment {args.exp!r}")
    try:
        return args.func(args)
    except (UsageError, InvalidSequence, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
