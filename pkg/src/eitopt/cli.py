"""Command-line pipeline: gen-data, train, optimize, evaluate, distinguish,
reconstruct, full-pipeline.

Every command reads one JSON config (see eitopt.config), writes artifacts
into --out, and is reproducible byte for byte from config plus seeds.
Exit codes: 0 success, 2 config error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, PipelineConfig
from .dataset import TrainingSet, build_training_set, matrix_from_csv, matrix_to_csv
from .geometry import layout_from_csv, layout_to_csv, uniform_layout, validate_layout
from .mesh import generate_mesh
from .metrics import compare_layouts
from .network import (
    NetworkArchitecture,
    TrainConfig,
    huang_layer_sizes,
    network_from_json,
    network_to_json,
    optimize_layout,
    train,
)
from .recon import ReconOptions, reconstruction_study

__all__ = ["main"]


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _json_dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1)


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_json(Path(args.config).read_text())
    if args.seed is not None:
        cfg = cfg.with_master_seed(args.seed)
    return cfg


def cmd_gen_data(cfg: PipelineConfig, out: Path, threads: int) -> int:
    ts = build_training_set(
        cfg.domain,
        cfg.per_side,
        cfg.width,
        cfg.raw["dataset"]["n_layouts"],
        cfg.raw["dataset"]["n_sigma"],
        cfg.h_max,
        cfg.h_min,
        cfg.prior_params,
        cfg.z_value,
        seed=cfg.seed("dataset"),
        min_gap=cfg.min_gap,
        amplitude=cfg.amplitude,
        threads=threads,
    )
    ts.manifest["config_hash"] = cfg.hash
    _write(out / "E_bar.csv", matrix_to_csv(ts.E_bar, cfg.hash))
    _write(out / "Theta_bar.csv", matrix_to_csv(ts.Theta_bar, cfg.hash))
    _write(out / "manifest.json", _json_dump(ts.manifest))
    finite = ts.Theta_bar[:, ts.finite_mask]
    print(f"wrote {ts.n_columns} columns ({ts.manifest['sentinel_columns']} sentinel)")
    print(f"kappa range: {finite[0].min():.3e} .. {finite[0].max():.3e}")
    print(f"beta range:  {finite[1].min():.3e} .. {finite[1].max():.3e}")
    return 0


def _load_training_set(cfg: PipelineConfig, data_dir: Path) -> TrainingSet:
    manifest = json.loads((data_dir / "manifest.json").read_text())
    E = matrix_from_csv((data_dir / "E_bar.csv").read_text())
    T = matrix_from_csv((data_dir / "Theta_bar.csv").read_text())
    if E.shape[0] != 2 * cfg.k or T.shape[0] != 2 or E.shape[1] != T.shape[1]:
        raise RuntimeError(
            f"dataset shapes {E.shape}/{T.shape} do not match config k={cfg.k}"
        )
    return TrainingSet(E_bar=E, Theta_bar=T, manifest=manifest)


def cmd_train(cfg: PipelineConfig, out: Path, data_dir: Path) -> int:
    ts = _load_training_set(cfg, data_dir)
    l1, l2 = huang_layer_sizes(cfg.k, ts.manifest["n_layouts"])
    arch = NetworkArchitecture(hidden1=l1, hidden2=l2, output_dim=2 * cfg.k)
    tc = cfg.raw["train"]
    net = train(
        ts,
        arch,
        TrainConfig(
            alpha=tc["alpha"],
            tol=tc["tol"],
            max_epochs=tc["max_epochs"],
            val_patience=tc["val_patience"],
            seed=cfg.seed("train"),
        ),
    )
    _write(out / "network.json", network_to_json(net, cfg.hash))
    rec = net.record
    rows = ["epoch,loss,gradient_norm"]
    for i, (lo, gn) in enumerate(zip(rec["loss_curve"], rec["gradient_curve"])):
        rows.append(f"{i},{lo:.17g},{gn:.17g}")
    _write(out / "training_record.csv", "\n".join(rows) + "\n")
    from .plots import training_svg

    training_svg(out / "training.svg", rec)
    print(
        f"trained {l1}x{l2} net: {rec['epochs']} epochs, stop={rec['stop_reason']}, "
        f"final loss {rec['loss_curve'][-1]:.3e}"
    )
    return 0


def cmd_optimize(cfg: PipelineConfig, out: Path, network_path: Path) -> int:
    net = network_from_json(network_path.read_text())
    opt = optimize_layout(net, cfg.domain, cfg.per_side, cfg.width, cfg.min_gap)
    validate_layout(cfg.domain, opt, cfg.min_gap)
    uni = uniform_layout(cfg.domain, cfg.per_side, cfg.width)
    _write(out / "layout_optimized.csv", f"# config_hash {cfg.hash}\n" + layout_to_csv(opt))
    _write(out / "layout_uniform.csv", f"# config_hash {cfg.hash}\n" + layout_to_csv(uni))
    mesh = generate_mesh(cfg.domain, opt, cfg.h_max, cfg.h_min, seed=cfg.seed("mesh"))
    from .plots import mesh_svg, overlay_svg

    overlay_svg(out / "layout_overlay.svg", cfg.domain, opt, uni)
    mesh_svg(out / "mesh_optimized.svg", mesh, cfg.domain, opt)
    dev = np.abs(opt.arclengths - uni.arclengths).max()
    print(f"optimized layout written; max midpoint deviation from uniform {dev:.4f}")
    return 0


def _load_layout(cfg: PipelineConfig, path: Path):
    text = path.read_text()
    body = "\n".join(ln for ln in text.splitlines() if not ln.startswith("#"))
    return layout_from_csv(body, cfg.domain)


def cmd_evaluate(cfg: PipelineConfig, out: Path, layout_a: Path, layout_b: Path) -> int:
    la = _load_layout(cfg, layout_a)
    lb = _load_layout(cfg, layout_b)
    m = cfg.raw["metrics"]
    report = compare_layouts(
        cfg.domain,
        la,
        lb,
        cfg.h_max,
        cfg.h_min,
        cfg.prior_params,
        cfg.z_value,
        amplitude=cfg.amplitude,
        mu_samples=m["mu_samples"],
        kappa_samples=m["kappa_samples"],
        delta_pairs=m["delta_pairs"],
        ref_spacing=m["ref_spacing"],
        seed=cfg.seed("metrics"),
        mesh_seed=cfg.seed("mesh"),
    )
    report["config_hash"] = cfg.hash
    _write(out / "evaluation.json", _json_dump(report))
    rows = [
        "metric,layout_a,layout_b",
        f"mu_l1,{report['mu_l1_a']:.17g},{report['mu_l1_b']:.17g}",
        f"kappa_H_mean,{report['kappa_H_mean_a']:.17g},{report['kappa_H_mean_b']:.17g}",
        f"kappa_R_mean,{report['kappa_R_mean_a']:.17g},{report['kappa_R_mean_b']:.17g}",
        f"delta_win_rate_coarse,{report['delta_win_rate']['coarse']:.17g},",
        f"delta_win_rate_fine,{report['delta_win_rate']['fine']:.17g},",
    ]
    _write(out / "evaluation.csv", "\n".join(rows) + "\n")
    from .plots import mu_bar_svg

    mu_bar_svg(out / "mu_comparison.svg", report["mu_a"], report["mu_b"])
    print(
        f"mu ratio (B/A): {report['mu_ratio_b_over_a']:.3f}  "
        f"kappa_H reduction: {100 * report['kappa_H_reduction']:.1f}%  "
        f"kappa_R reduction: {100 * report['kappa_R_reduction']:.1f}%  "
        f"delta win rates: {report['delta_win_rate']}"
    )
    return 0


def cmd_distinguish(cfg: PipelineConfig, out: Path, layout_a: Path, layout_b: Path) -> int:
    la = _load_layout(cfg, layout_a)
    lb = _load_layout(cfg, layout_b)
    m = cfg.raw["metrics"]
    report = compare_layouts(
        cfg.domain,
        la,
        lb,
        cfg.h_max,
        cfg.h_min,
        cfg.prior_params,
        cfg.z_value,
        amplitude=cfg.amplitude,
        mu_samples=1,
        kappa_samples=1,
        delta_pairs=m["delta_pairs"],
        ref_spacing=m["ref_spacing"],
        seed=cfg.seed("metrics"),
        mesh_seed=cfg.seed("mesh"),
    )
    payload = {
        "config_hash": cfg.hash,
        "delta_win_rate": report["delta_win_rate"],
        "delta_values": report["delta_values"],
        "n_delta_pairs": report["n_delta_pairs"],
    }
    _write(out / "distinguishability.json", _json_dump(payload))
    rows = ["pair,coarse_a,coarse_b,fine_a,fine_b"]
    dv = report["delta_values"]
    for i in range(report["n_delta_pairs"]):
        rows.append(
            f"{i},{dv['coarse']['a'][i]:.17g},{dv['coarse']['b'][i]:.17g},"
            f"{dv['fine']['a'][i]:.17g},{dv['fine']['b'][i]:.17g}"
        )
    _write(out / "distinguishability.csv", "\n".join(rows) + "\n")
    from .plots import delta_svg

    delta_svg(out / "distinguishability.svg", dv)
    print(f"delta win rates (A beats B): {report['delta_win_rate']}")
    return 0


def cmd_reconstruct(cfg: PipelineConfig, out: Path, layout_a: Path, layout_b: Path) -> int:
    layouts = {
        "optimized": _load_layout(cfg, layout_a),
        "standard": _load_layout(cfg, layout_b),
    }
    study = reconstruction_study(cfg, layouts, ReconOptions())
    cells = study["cells"]
    table = {"config_hash": cfg.hash, "cells": cells}
    _write(out / "rmse_table.json", _json_dump(table))
    rows = ["layout,target,eta,rmse_percent,iterations"]
    for c in cells:
        rows.append(
            f"{c['layout']},{c['target']},{c['eta']:g},{c['rmse_percent']:.17g},{c['iterations']}"
        )
    _write(out / "rmse_table.csv", "\n".join(rows) + "\n")

    from .plots import field_svg

    renders = study["renders"]
    for target in ("blob", "ellipse"):
        vals = [v for (name, t, tag), (mesh, v) in renders.items() if t == target]
        vmin = min(v.min() for v in vals)
        vmax = max(v.max() for v in vals)
        for (name, t, tag), (mesh, v) in renders.items():
            if t != target:
                continue
            tagname = "truth" if tag == "truth" else f"eta{int(round(1000 * tag))}"
            field_svg(
                out / f"recon_{target}_{name}_{tagname}.svg",
                mesh,
                v,
                title=f"{target} / {name} / {tagname}",
                vmin=vmin,
                vmax=vmax,
            )
    for c in cells:
        print(
            f"{c['layout']:9s} {c['target']:8s} eta={c['eta']:<5g} "
            f"RMSE {c['rmse_percent']:6.2f}%  ({c['iterations']} iters)"
        )
    return 0


def cmd_full_pipeline(cfg: PipelineConfig, out: Path, threads: int) -> int:
    cmd_gen_data(cfg, out, threads)
    cmd_train(cfg, out, out)
    cmd_optimize(cfg, out, out / "network.json")
    cmd_evaluate(cfg, out, out / "layout_optimized.csv", out / "layout_uniform.csv")
    cmd_reconstruct(cfg, out, out / "layout_optimized.csv", out / "layout_uniform.csv")
    evaluation = json.loads((out / "evaluation.json").read_text())
    rmse_table = json.loads((out / "rmse_table.json").read_text())
    summary = {
        "config_hash": cfg.hash,
        "mu_ratio_standard_over_optimized": evaluation["mu_ratio_b_over_a"],
        "kappa_H_reduction": evaluation["kappa_H_reduction"],
        "kappa_R_reduction": evaluation["kappa_R_reduction"],
        "delta_win_rate": evaluation["delta_win_rate"],
        "rmse_cells": rmse_table["cells"],
    }
    _write(out / "summary.json", _json_dump(summary))
    print("full pipeline complete; summary.json written")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="eitopt",
        description="Electrode-position optimization for 2D EIT: data generation, "
        "surrogate training, layout prediction, quality metrics, reconstruction.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="pipeline config JSON")
        p.add_argument("--out", default=os.environ.get("EITOPT_OUT", "."),
                       help="output directory (or $EITOPT_OUT)")
        p.add_argument("--seed", type=int, default=None,
                       help="master seed overriding every stage seed")
        p.add_argument("--threads", type=int,
                       default=int(os.environ.get("EITOPT_THREADS", "1")),
                       help="worker threads (or $EITOPT_THREADS); results are thread-count independent")
        return p

    add("gen-data", "generate the stacked training matrices")
    p = add("train", "fit the surrogate network on generated data")
    p.add_argument("--data", default=None, help="directory with E_bar/Theta_bar/manifest (default --out)")
    p = add("optimize", "predict the optimized layout from a trained network")
    p.add_argument("--network", default=None, help="network JSON (default <out>/network.json)")
    for name in ("evaluate", "distinguish", "reconstruct"):
        p = add(name, f"{name} two layouts on the config geometry")
        p.add_argument("--layout-a", default=None, help="candidate layout CSV (default <out>/layout_optimized.csv)")
        p.add_argument("--layout-b", default=None, help="baseline layout CSV (default <out>/layout_uniform.csv)")
    add("full-pipeline", "gen-data + train + optimize + evaluate + reconstruct")

    args = parser.parse_args(argv)
    out = Path(args.out)
    try:
        cfg = _load_config(args)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, out, args.threads)
        if args.command == "train":
            return cmd_train(cfg, out, Path(args.data) if args.data else out)
        if args.command == "optimize":
            net = Path(args.network) if args.network else out / "network.json"
            return cmd_optimize(cfg, out, net)
        la = getattr(args, "layout_a", None)
        lb = getattr(args, "layout_b", None)
        layout_a = Path(la) if la else out / "layout_optimized.csv"
        layout_b = Path(lb) if lb else out / "layout_uniform.csv"
        if args.command == "evaluate":
            return cmd_evaluate(cfg, out, layout_a, layout_b)
        if args.command == "distinguish":
            return cmd_distinguish(cfg, out, layout_a, layout_b)
        if args.command == "reconstruct":
            return cmd_reconstruct(cfg, out, layout_a, layout_b)
        if args.command == "full-pipeline":
            return cmd_full_pipeline(cfg, out, args.threads)
        parser.error(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
