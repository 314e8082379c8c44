"""Command-line front end: phantom | train | infer | eval | gradcheck | sampleviz.

Every subcommand is file-in/file-out and writes a resolved-config
snapshot next to its outputs, so a run can be reproduced from the
snapshot alone.  Failures print a one-line JSON object to stderr and
exit nonzero; TFE_LOG sets the log level.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ArgumentError, ConfigError, TfeNetError
from .geometry import Angles, Axis, KernelSpec, sampling_positions
from .gradcheck import run_all
from .infer import (InferenceConfig, fuse_two_stage, load_model, normalize_hu,
                    postprocess, sliding_window_predict)
from .metrics import MetricsReport, evaluate_pair
from .model import TfeNet, TfeNetConfig
from .phantom import TreeSpec, corpus
from .reports import (corpus_figure, loss_curve_figure, metrics_figure,
                      sampling_figure)
from .train import StageConfig, load_corpus, run_two_stage, stage1_config, stage2_config
from .volume import Volume, read_volume, write_volume

log = logging.getLogger("tfenet")


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of calling sys.exit, so errors can
    be reported as JSON like every other failure."""

    def error(self, message):
        raise ConfigError(message)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return cfg


def _resolve(flag, cfg: dict, key: str, default):
    """CLI flag beats config file beats built-in default."""
    if flag is not None:
        return flag
    if key in cfg:
        return cfg[key]
    return default


def _snapshot(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"tfenet_version": __version__, **payload}
    (out_dir / "run_config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _dataclass_kwargs(cls, cfg: dict, prefix: str = "") -> dict:
    fields = set(cls.__dataclass_fields__)
    out = {}
    for key, val in cfg.items():
        if prefix and not key.startswith(prefix):
            continue
        name = key[len(prefix):]
        if name in fields:
            out[name] = tuple(val) if isinstance(val, list) else val
    return out


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_phantom(args) -> int:
    cfg = _load_config(args.config)
    seed = _resolve(args.seed, cfg, "seed", 0)
    out = Path(_resolve(args.out, cfg, "out", "phantom_corpus"))
    n_cases = _resolve(args.n_cases, cfg, "n_cases", 20)
    spec = TreeSpec(**_dataclass_kwargs(TreeSpec, cfg))
    depth_range = cfg.get("depth_range")
    if depth_range is not None:
        depth_range = (int(depth_range[0]), int(depth_range[1]))
    manifest = corpus(out, n_cases, spec, seed, depth_range=depth_range)

    rows = []
    for entry in manifest:
        truth = json.loads((out / entry["truth"]).read_text())
        rows.append({"case": entry["case"], "split": entry["split"],
                     "branches": truth["n_branches"],
                     "tree_length": truth["tree_length"]})
    with (out / "cases.csv").open("w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=("case", "split", "branches", "tree_length"))
        wr.writeheader()
        wr.writerows(rows)
    first = manifest[0]
    img = read_volume(out / first["image"]).data[0]
    lab = read_volume(out / first["label"]).data[0]
    corpus_figure(img, lab, out / "corpus_preview.png", title=first["case"])
    _snapshot(out, {"subcommand": "phantom", "seed": seed, "n_cases": n_cases,
                    "depth_range": depth_range, "spec": spec.__dict__,
                    "workers": args.workers})
    log.info("wrote %d cases to %s", n_cases, out)
    print(f"phantom corpus: {n_cases} cases at {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    seed = _resolve(args.seed, cfg, "seed", 0)
    out = Path(_resolve(args.out, cfg, "out", "train_run"))
    model_cfg = TfeNetConfig(**_dataclass_kwargs(TfeNetConfig, cfg.get("model", {})))
    stage1 = stage1_config(**_dataclass_kwargs(StageConfig, cfg.get("stage1", {})))
    stage2 = stage2_config(**_dataclass_kwargs(StageConfig, cfg.get("stage2", {})))
    stages = _resolve(args.stage, cfg, "stage", "both")
    cases = load_corpus(args.corpus, split=cfg.get("split", "train"))
    log.info("training on %d cases", len(cases))

    model = TfeNet(model_cfg, seed=seed)
    _snapshot(out, {"subcommand": "train", "seed": seed, "corpus": str(args.corpus),
                    "model": model_cfg.to_dict(),
                    "stage1": stage1.__dict__, "stage2": stage2.__dict__,
                    "stage": stages, "workers": args.workers})
    if stages == "both":
        run_two_stage(cases, model, seed, out, stage1=stage1, stage2=stage2)
    else:
        from .params import save_checkpoint
        from .train import train_stage
        stage = stage1 if stages == "1" else stage2
        rng_index = 0 if stages == "1" else 1
        ss = np.random.SeedSequence(seed).spawn(2)[rng_index]
        curve = train_stage(cases, model, stage, np.random.default_rng(ss),
                            log_path=out / f"train_log_{stage.stage}.csv")
        save_checkpoint(model.store, out / f"checkpoint_{stage.stage}.json",
                        meta={"stage": stage.__dict__, "model": model_cfg.to_dict(),
                              "seed": seed, "loss_curve": curve})
    curves = {}
    for name in ("output1", "output2"):
        p = out / f"train_log_{name}.csv"
        if p.exists():
            with p.open() as f:
                curves[name] = [{"epoch": int(r["epoch"]),
                                 "mean_loss": float(r["mean_loss"]),
                                 "lr": float(r["lr"])} for r in csv.DictReader(f)]
    loss_curve_figure(curves, out / "loss_curve.png")
    print(f"training done: checkpoints and logs at {out}")
    return 0


def cmd_infer(args) -> int:
    cfg = _load_config(args.config)
    out = Path(_resolve(args.out, cfg, "out", "infer_run"))
    fusion = _resolve(args.fusion, cfg, "fusion", "union")
    icfg = InferenceConfig(fusion=fusion,
                           **_dataclass_kwargs(InferenceConfig,
                                               {k: v for k, v in cfg.items()
                                                if k != "fusion"}))
    vol = read_volume(args.image)
    if cfg.get("normalize", True):
        vol = normalize_hu(vol)
    model1, _ = load_model(args.checkpoint1)
    out.mkdir(parents=True, exist_ok=True)
    prob1 = sliding_window_predict(vol, model1, icfg)
    write_volume(prob1, out / "prob_output1.tvol")
    if args.checkpoint2 is not None:
        model2, _ = load_model(args.checkpoint2)
        prob2 = sliding_window_predict(vol, model2, icfg)
        write_volume(prob2, out / "prob_output2.tvol")
        mask = fuse_two_stage(prob1.data[0], prob2.data[0], mode=icfg.fusion,
                              threshold=icfg.threshold)
    else:
        mask = (prob1.data[0] > icfg.threshold).astype(np.uint8)
    mask, empty = postprocess(mask, icfg.keep_largest, icfg.close_holes)
    write_volume(Volume(mask[None].astype(np.uint8), spacing=vol.spacing),
                 out / "mask.tvol")
    _snapshot(out, {"subcommand": "infer", "image": str(args.image),
                    "checkpoint1": str(args.checkpoint1),
                    "checkpoint2": str(args.checkpoint2) if args.checkpoint2 else None,
                    "normalize": bool(cfg.get("normalize", True)),
                    "inference": icfg.__dict__, "workers": args.workers,
                    "empty_mask_warning": bool(empty)})
    if empty:
        log.warning("postprocess produced an empty mask")
    print(f"inference done: {int(mask.sum())} foreground voxels, outputs at {out}")
    return 0


def _eval_pairs(args) -> list[tuple[str, Path, Path]]:
    if args.manifest is not None:
        root = Path(args.manifest).parent
        entries = json.loads(Path(args.manifest).read_text())
        if args.split is not None:
            entries = [e for e in entries if e.get("split") == args.split]
        pred_dir = Path(args.pred)
        pairs = []
        for e in entries:
            name = e.get("case", Path(e["label"]).stem)
            cand = [pred_dir / f"{name}_mask.tvol", pred_dir / name / "mask.tvol"]
            hit = next((c for c in cand if c.exists()), None)
            if hit is None:
                raise ArgumentError(f"no prediction found for case {name!r} "
                                    f"under {pred_dir}")
            pairs.append((name, hit, root / e["label"]))
        return pairs
    if args.gt is None:
        raise ConfigError("eval needs either --manifest or both PRED and --gt")
    return [(Path(args.pred).stem, Path(args.pred), Path(args.gt))]


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    out = Path(_resolve(args.out, cfg, "out", "eval_run"))
    as_printed = bool(args.compat_iou_as_printed or cfg.get("iou_as_printed", False))
    pairs = _eval_pairs(args)
    reports = []
    for name, pred_path, gt_path in pairs:
        pred = read_volume(pred_path).data[0]
        gt = read_volume(gt_path).data[0]
        reports.append(evaluate_pair(pred, gt, case=name,
                                     iou_as_printed=as_printed))
        log.info("evaluated %s", name)

    rows = [r.to_dict() for r in reports]
    out.mkdir(parents=True, exist_ok=True)
    score_keys = [k for k in MetricsReport.CSV_FIELDS if k != "case"]
    agg = {"mean": {k: float(np.mean([r[k] for r in rows])) for k in score_keys},
           "std": {k: float(np.std([r[k] for r in rows])) for k in score_keys}}
    (out / "metrics.json").write_text(
        json.dumps({"cases": rows, "aggregate": agg}, indent=2, sort_keys=True) + "\n")
    with (out / "metrics.csv").open("w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=MetricsReport.CSV_FIELDS)
        wr.writeheader()
        wr.writerows(rows)
        wr.writerow({"case": "mean", **{k: f"{agg['mean'][k]:.6f}" for k in score_keys}})
        wr.writerow({"case": "std", **{k: f"{agg['std'][k]:.6f}" for k in score_keys}})
    metrics_figure(rows, out / "metrics.png")
    _snapshot(out, {"subcommand": "eval", "pairs": [p[0] for p in pairs],
                    "iou_as_printed": as_printed, "workers": args.workers})
    mean_dsc = agg["mean"]["dsc"]
    mean_td = agg["mean"]["td"]
    print(f"eval: {len(rows)} case(s), mean DSC {mean_dsc:.4f}, "
          f"mean TD {mean_td:.4f}; report at {out}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args.config)
    seed = _resolve(args.seed, cfg, "seed", 0)
    results = run_all(seed=seed, h=cfg.get("h", 1e-5), tol=cfg.get("tol", 1e-4))
    for r in results:
        print(r.line())
    n_bad = sum(not r.passed for r in results)
    print(f"{len(results) - n_bad}/{len(results)} gradient checks passed")
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "gradcheck.csv").open("w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(("name", "rel_err", "tol", "passed"))
            for r in results:
                wr.writerow((r.name, f"{r.rel_err:.3e}", f"{r.tol:.0e}", r.passed))
        _snapshot(out, {"subcommand": "gradcheck", "seed": seed,
                        "workers": args.workers})
    return 1 if n_bad else 0


_AXES = {"x": Axis.X, "y": Axis.Y, "z": Axis.Z}


def cmd_sampleviz(args) -> int:
    cfg = _load_config(args.config)
    out = Path(_resolve(args.out, cfg, "out", "sampleviz"))
    taps = _resolve(args.taps, cfg, "taps", 7)
    dilation = _resolve(args.dilation, cfg, "dilation", 1)
    axis = _AXES[_resolve(args.axis, cfg, "axis", "x")]
    angle_sets = args.angles or cfg.get("angles") or ["0,0,0,0"]
    spec = KernelSpec(axis=axis, taps=taps, dilation=dilation)
    centre = np.zeros(3)
    clouds = []
    for raw in angle_sets:
        if isinstance(raw, str):
            parts = [float(v) for v in raw.split(",")]
        else:
            parts = [float(v) for v in raw]
        if len(parts) != 4:
            raise ConfigError(f"an angle set needs four values, got {raw!r}")
        ang = Angles(*parts)
        pts = sampling_positions(centre, spec, ang)
        clouds.append((f"({', '.join(f'{p:g}' for p in parts)})", pts))
    out.mkdir(parents=True, exist_ok=True)
    with (out / "sampling_positions.csv").open("w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(("angles", "tap", "z", "y", "x"))
        for label, pts in clouds:
            for t, (z, y, x) in enumerate(pts):
                wr.writerow((label, t, f"{z:.6f}", f"{y:.6f}", f"{x:.6f}"))
    sampling_figure(clouds, out / "sampling_positions.png")
    _snapshot(out, {"subcommand": "sampleviz", "axis": axis.value, "taps": taps,
                    "dilation": dilation,
                    "angles": [label for label, _ in clouds],
                    "workers": args.workers})
    print(f"sampleviz: {len(clouds)} angle set(s), {taps} taps, outputs at {out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="tfenet",
                description="Direction-aware tube segmentation toolkit")
    p.add_argument("--version", action="version", version=f"tfenet {__version__}")
    sub = p.add_subparsers(dest="subcommand", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, help="master random seed")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--workers", type=int, default=1,
                        help="worker processes (determinism guaranteed at 1)")

    sp = sub.add_parser("phantom", help="generate a synthetic tubular-tree corpus")
    common(sp)
    sp.add_argument("--n-cases", type=int, help="corpus size")
    sp.set_defaults(func=cmd_phantom)

    sp = sub.add_parser("train", help="two-stage patch training on a corpus")
    common(sp)
    sp.add_argument("corpus", help="corpus directory with manifest.json")
    sp.add_argument("--stage", choices=("1", "2", "both"),
                    help="train one stage only, or both (default)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("infer", help="sliding-window segmentation of one volume")
    common(sp)
    sp.add_argument("image", help="input volume (.tvol or NIfTI)")
    sp.add_argument("checkpoint1", help="stage-1 checkpoint manifest")
    sp.add_argument("checkpoint2", nargs="?", default=None,
                    help="optional stage-2 checkpoint for fusion")
    sp.add_argument("--fusion", choices=("union", "mean"),
                    help="two-checkpoint fusion mode (default union)")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("eval", help="airway-tree metrics for predictions")
    common(sp)
    sp.add_argument("pred", help="prediction mask file, or directory with --manifest")
    sp.add_argument("--gt", help="ground-truth mask file (single-pair mode)")
    sp.add_argument("--manifest", help="corpus manifest for batch evaluation")
    sp.add_argument("--split", help="restrict manifest entries to one split")
    sp.add_argument("--compat-iou-as-printed", action="store_true",
                    help="report the IOU column complemented (1 - IOU), for "
                         "comparison with reports that tabulate it that way")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    common(sp)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("sampleviz", help="kernel sampling-position point clouds")
    common(sp)
    sp.add_argument("--axis", choices=tuple(_AXES), help="kernel alignment axis")
    sp.add_argument("--taps", type=int, help="tap count (odd)")
    sp.add_argument("--dilation", type=int, help="tap spacing")
    sp.add_argument("--angles", action="append",
                    help="comma-separated theta1..theta4 in radians; repeatable")
    sp.set_defaults(func=cmd_sampleviz)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("TFE_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except TfeNetError as e:
        kind = "config" if isinstance(e, ConfigError) else type(e).__name__
        print(json.dumps({"error": kind, "message": str(e)}), file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(json.dumps({"error": "missing-file", "message": str(e)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
