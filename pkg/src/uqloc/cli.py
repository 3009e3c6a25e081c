"""Command-line entry point: ``uqloc generate | train | evaluate | oos``."""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import kvfile, metrics, plots
from .experiment import (METHODS, SUBSETS, ExperimentConfig, evaluate_method, load_config,
                         load_data, load_trained, save_trained, subset_mask, train_method)
from .dataset import split
from .scene import generate_dataset, load_scene, read_dataset, write_dataset

logger = logging.getLogger("uqloc")

FAILED_MARKER = "FAILED"


def _g(v: float) -> str:
    return f"{v:.17g}"


def _subset_rmse(records: metrics.EvalRecords, name: str) -> float:
    mask = subset_mask(records, name)
    return metrics.rmse(records.subset(mask)) if mask.any() else math.nan


# --- generate --------------------------------------------------------------

def cmd_generate(config: Path, out: Path) -> Path:
    entries = kvfile.load(config)
    if "scene" in entries:
        scene_path = config.parent / entries["scene"]
    else:
        scene_path = config
    data = generate_dataset(load_scene(scene_path))
    out.mkdir(parents=True, exist_ok=True)
    target = out / "dataset.csv"
    write_dataset(data, target)
    n_los = int(data.los.sum())
    print(f"wrote {target}: {len(data)} samples ({n_los} LOS, {len(data) - n_los} NLOS)")
    return target


# --- train -----------------------------------------------------------------

def cmd_train(cfg: ExperimentConfig, out: Path) -> Path:
    data = load_data(cfg)
    data_split = split(data, cfg.split_spec())
    model = train_method(cfg, cfg.method, data_split)
    target = out / cfg.method.lower()
    save_trained(model, target)
    epochs = [len(h) for h in model.histories]
    print(f"trained {cfg.method}: {len(epochs)} model(s), epochs {min(epochs)}..{max(epochs)}, "
          f"train/val/test = {len(data_split.train)}/{len(data_split.val)}/"
          f"{len(data_split.test)}; checkpoints in {target}")
    return target


# --- evaluate --------------------------------------------------------------

def write_evaluation(cfg: ExperimentConfig, method: str,
                     records_by_s: dict[int, metrics.EvalRecords], out: Path) -> dict:
    """Write prediction dumps, tables, curves, heatmaps and figures for one method."""
    out.mkdir(parents=True, exist_ok=True)
    ev = cfg.evaluation
    s_values = sorted(records_by_s)
    rmse_rows = ["s," + ",".join(f"rmse_{n}" for n in SUBSETS)]
    auco_rows = ["s,auco"]
    report: dict = {"method": method, "n_test": len(records_by_s[s_values[0]])}
    curves = {}
    for s in s_values:
        records = records_by_s[s]
        metrics.write_predictions(records, out / f"predictions_S{s}.csv")
        rmses = [_subset_rmse(records, n) for n in SUBSETS]
        rmse_rows.append(f"{s}," + ",".join(_g(v) for v in rmses))
        curve = metrics.sparsification(records, ev.b_max, ev.n_steps)
        curves[s] = curve
        metrics.write_curve(curve, out / f"sparsification_S{s}.csv")
        auco_rows.append(f"{s},{_g(curve.auco)}")
        hm_dir = out / "heatmaps" / f"S{s}"
        hm_dir.mkdir(parents=True, exist_ok=True)
        for name in SUBSETS:
            mask = subset_mask(records, name)
            if not mask.any():
                continue
            for field in metrics.HEATMAP_FIELDS:
                hm = metrics.heatmap(records.subset(mask), ev.cell_size, field)
                metrics.write_heatmap(hm, hm_dir / f"{name}_{field}.csv")
        report[f"S{s}.rmse"] = rmses[0]
        report[f"S{s}.auco"] = curve.auco
        report[f"S{s}.nll"] = metrics.gaussian_nll(records)
        report[f"S{s}.rmse_drop_20pct_uncertain"] = metrics.rmse_reduction(curve, 0.2)
        report[f"S{s}.mixture_switch_rate"] = records.estimate.switch_rate
    (out / "rmse_vs_s.csv").write_text("\n".join(rmse_rows) + "\n")
    (out / "auco_vs_s.csv").write_text("\n".join(auco_rows) + "\n")
    (out / "report.txt").write_text(kvfile.dump(report, header="uqloc evaluation report"))

    s_max = s_values[-1]
    plots.plot_vs_s({method: (s_values, [report[f"S{s}.rmse"] for s in s_values])},
                    "RMSE [m]", out / "rmse_vs_s.png")
    plots.plot_vs_s({method: (s_values, [report[f"S{s}.auco"] for s in s_values])},
                    "AUCO [m]", out / "auco_vs_s.png")
    plots.plot_sparsification({method: curves[s_max]}, out / f"sparsification_S{s_max}.png")
    plots.plot_heatmaps(records_by_s[s_max], ev.cell_size, out / f"heatmaps_S{s_max}.png",
                        cfg.split.out_of_set_region, title=f"{method}, S = {s_max}")
    return report


def cmd_evaluate(cfg: ExperimentConfig, out: Path, checkpoint: Path | None = None,
                 dataset: Path | None = None) -> dict:
    data = read_dataset(dataset) if dataset is not None else load_data(cfg)
    data_split = split(data, cfg.split_spec())
    model_dir = checkpoint or out / cfg.method.lower()
    model = load_trained(model_dir, cfg.method)
    records = evaluate_method(cfg, model, data_split)
    report = write_evaluation(cfg, cfg.method, records, model_dir / "eval")
    for s in sorted(records):
        print(f"{cfg.method} S={s:>3}: RMSE {report[f'S{s}.rmse']:.4f} m, "
              f"AUCO {report[f'S{s}.auco']:.4f} m")
    return report


# --- out-of-set study ------------------------------------------------------

COMPONENTS = ("data", "model", "total")


def _component(records: metrics.EvalRecords, component: str) -> np.ndarray:
    e = records.estimate
    var = {"data": e.data_variance, "model": e.model_variance, "total": e.total_variance}
    return var[component].sum(axis=1)


def cmd_oos(cfg: ExperimentConfig, out: Path) -> list[dict]:
    region = cfg.split.out_of_set_region
    if region is None:
        raise kvfile.ConfigError("oos needs 'split.out_of_set = x0, y0, x1, y1' in the config")
    data = load_data(cfg)
    if not region.contains(data.positions).any():
        raise ValueError("out-of-set region contains no samples")
    s = cfg.s_max
    rows = []
    for run, holdout in (("baseline", False), ("holdout", True)):
        data_split = split(data, cfg.split_spec(holdout=holdout))
        inside = region.contains(data_split.test.positions)
        if not inside.any():
            raise ValueError(f"{run}: out-of-set region has no test samples")
        if inside.all():
            raise ValueError(f"{run}: every test sample lies in the out-of-set region")
        for method in METHODS:
            model = train_method(cfg, method, data_split)
            target = out / "oos" / run / method.lower()
            save_trained(model, target)
            records = evaluate_method(cfg, model, data_split, (s,))[s]
            write_evaluation(cfg, method, {s: records}, target / "eval")
            for where, mask in (("in", inside), ("out", ~inside)):
                for component in COMPONENTS:
                    rows.append({
                        "run": run, "region": where, "method": method,
                        "component": component,
                        "mean_variance": float(_component(records, component)[mask].mean()),
                        "n": int(mask.sum()),
                    })
    lines = ["run,region,method,component,mean_variance,n"]
    lines += [f"{r['run']},{r['region']},{r['method']},{r['component']},"
              f"{_g(r['mean_variance'])},{r['n']}" for r in rows]
    (out / "oos").mkdir(parents=True, exist_ok=True)
    (out / "oos" / "comparison.csv").write_text("\n".join(lines) + "\n")
    for r in rows:
        if r["component"] == "model":
            print(f"{r['run']:>8} {r['method']} model variance {r['region']:>3}-region: "
                  f"{r['mean_variance']:.4g} m^2 (n={r['n']})")
    return rows


# --- entry point -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uqloc", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("generate", "synthesize a CSI dataset from a scene"),
                       ("train", "train the MCD model or the DEN ensemble"),
                       ("evaluate", "evaluate checkpoints over the S sweep"),
                       ("oos", "out-of-set study: baseline vs region held out")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, type=Path,
                       help="experiment config (or a scene file for generate)")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--out", type=Path, default=None, help="output directory")
        p.add_argument("--parallel", type=int, default=None,
                       help="worker processes for ensemble training")
        if name == "evaluate":
            p.add_argument("--checkpoint", type=Path, default=None,
                           help="checkpoint directory (default <out>/<method>)")
            p.add_argument("--dataset", type=Path, default=None,
                           help="dataset file (default: from config)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = args.out
    try:
        if args.command == "generate":
            out = out or Path(".")
            _clear_marker(out)
            cmd_generate(args.config, out)
            return 0
        cfg = load_config(args.config, seed=args.seed, output=args.out, parallel=args.parallel)
        out = cfg.output_dir or Path(".")
        _clear_marker(out)
        if args.command == "train":
            cmd_train(cfg, out)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, out, args.checkpoint, args.dataset)
        else:
            cmd_oos(cfg, out)
        return 0
    except (kvfile.ConfigError, ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"uqloc {args.command}: error: {exc}", file=sys.stderr)
        if out is not None and Path(out).is_dir():
            (Path(out) / FAILED_MARKER).write_text(f"{args.command}: {exc}\n")
        return 1


def _clear_marker(out: Path) -> None:
    marker = Path(out) / FAILED_MARKER
    if marker.exists():
        marker.unlink()


if __name__ == "__main__":
    sys.exit(main())
