"""Two-stage patch training: sampling, augmentation, schedule, wiring.

Stage "output1" trains from scratch with strong augmentation and a
recall-heavy union loss weight; stage "output2" fine-tunes the same
parameters with gentler settings.  All randomness flows through
explicitly passed generators so single-worker runs are bit-identical.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ArgumentError, TrainingDiverged
from .losses import (GulParams, LibParams, TverskyParams, foreground_ratio,
                     gul_loss, lib_weight, tversky_loss)
from .model import TfeNet
from .params import SGD, save_checkpoint
from .volume import Volume, read_volume

HU_CLIP = (-1000.0, 600.0)


@dataclass(frozen=True)
class StageConfig:
    stage: str = "output1"
    loss_kind: str = "gul"                # "gul" or "tversky"
    gul_alpha: float = 0.05
    rotation_threshold: float = 0.7       # augment when draw >= threshold
    epochs: int = 12
    lr: float = 0.01
    decay_epochs: tuple[int, ...] = (4, 8)
    patches_per_case: int = 4
    patch_size: int = 32
    momentum: float = 0.9
    foreground_bias: float = 0.5
    gul_r: float = 0.7                    # exponent on p in the union loss

    def __post_init__(self):
        if self.stage not in ("output1", "output2"):
            raise ArgumentError(f"unknown stage id {self.stage!r}")
        if self.loss_kind not in ("gul", "tversky"):
            raise ArgumentError(f"unknown loss kind {self.loss_kind!r}")
        if not 0.0 <= self.rotation_threshold <= 1.0:
            raise ArgumentError(
                f"rotation threshold must be in [0,1], got {self.rotation_threshold}")
        if not 0.0 <= self.foreground_bias <= 1.0:
            raise ArgumentError(
                f"foreground bias must be in [0,1], got {self.foreground_bias}")
        if self.epochs < 1 or self.patches_per_case < 1:
            raise ArgumentError("epochs and patches_per_case must be >= 1")

    def lr_at(self, epoch: int) -> float:
        decays = sum(1 for e in self.decay_epochs if epoch >= e)
        return self.lr * 0.1 ** decays


def stage1_config(**overrides) -> StageConfig:
    kw = dict(stage="output1", gul_alpha=0.05, rotation_threshold=0.7)
    kw.update(overrides)
    return StageConfig(**kw)


def stage2_config(**overrides) -> StageConfig:
    kw = dict(stage="output2", gul_alpha=0.1, rotation_threshold=0.9)
    kw.update(overrides)
    return StageConfig(**kw)


# ---------------------------------------------------------------------------
# Cases
# ---------------------------------------------------------------------------

@dataclass
class TrainCase:
    name: str
    image: np.ndarray          # (d, h, w) float32 in [0, 1]
    label: np.ndarray          # (d, h, w) uint8
    fr: np.ndarray             # foreground-ratio field, same shape

    @property
    def shape(self):
        return self.image.shape


def preprocess_case(raw: Volume, label: np.ndarray,
                    roi: tuple[tuple[int, int], ...] | None = None,
                    name: str = "", fr_window: int = 32) -> TrainCase:
    """Crop to roi, clip HU to [-1000, 600], min-max normalize to [0, 1].

    roi is ((z0, z1), (y0, y1), (x0, x1)) half-open; None keeps the
    full volume.  The label's local foreground-ratio field is
    precomputed here so patch sampling only has to slice it.
    """
    img = raw.data[0].astype(np.float32)
    lab = (np.asarray(label) != 0).astype(np.uint8)
    if lab.ndim == 4:
        lab = lab[0]
    if img.shape != lab.shape:
        raise ArgumentError(
            f"image shape {img.shape} does not match label {lab.shape}")
    if roi is not None:
        if len(roi) != 3:
            raise ArgumentError(f"roi needs three axis ranges, got {roi}")
        sl = []
        for ax, (a, b) in enumerate(roi):
            if not (0 <= a < b <= img.shape[ax]):
                raise ArgumentError(
                    f"roi axis {ax} range ({a}, {b}) invalid for dim "
                    f"{img.shape[ax]}")
            sl.append(slice(a, b))
        img = img[tuple(sl)]
        lab = lab[tuple(sl)]
    lo, hi = HU_CLIP
    img = (np.clip(img, lo, hi) - lo) / (hi - lo)
    fr = foreground_ratio(lab, window=fr_window)
    return TrainCase(name=name, image=img.astype(np.float32), label=lab,
                     fr=fr.astype(np.float32))


def load_corpus(corpus_dir: str | Path, split: str | None = None,
                fr_window: int = 32) -> list[TrainCase]:
    """Read manifest.json cases, optionally filtered by split."""
    corpus_dir = Path(corpus_dir)
    manifest = json.loads((corpus_dir / "manifest.json").read_text())
    cases = []
    for entry in manifest:
        if split is not None and entry.get("split") != split:
            continue
        vol = read_volume(corpus_dir / entry["image"])
        lab = read_volume(corpus_dir / entry["label"]).data[0]
        roi = tuple(tuple(r) for r in entry["roi"]) if "roi" in entry else None
        cases.append(preprocess_case(vol, lab, roi=roi,
                                     name=entry.get("case", entry["image"]),
                                     fr_window=fr_window))
    return cases


# ---------------------------------------------------------------------------
# Patches
# ---------------------------------------------------------------------------

def sample_patch(case: TrainCase, size: int, rng: np.random.Generator,
                 foreground_bias: float = 0.5,
                 lib: LibParams = LibParams()):
    """One (image, label, weight) patch triple at a random corner.

    With probability foreground_bias the draw insists on at least one
    airway voxel: corners are re-drawn, then as a last resort the patch
    is centred on a random foreground voxel.  The voxel-weight map uses
    a per-patch exponent drawn from [2, 3].
    """
    dims = case.shape
    if any(d < size for d in dims):
        raise ArgumentError(
            f"case {case.name or '?'} shape {dims} smaller than patch {size}")
    want_fg = rng.random() < foreground_bias and case.label.any()
    corner = None
    for attempt in range(20):
        c = tuple(int(rng.integers(0, d - size + 1)) for d in dims)
        sl = tuple(slice(a, a + size) for a in c)
        if not want_fg or case.label[sl].any():
            corner = c
            break
    if corner is None:
        fg = np.argwhere(case.label != 0)
        v = fg[int(rng.integers(0, fg.shape[0]))]
        corner = tuple(int(np.clip(v[i] - size // 2, 0, dims[i] - size))
                       for i in range(3))
    sl = tuple(slice(a, a + size) for a in corner)
    img = case.image[sl][None].astype(np.float32)
    lab = case.label[sl]
    r = float(rng.uniform(2.0, 3.0))
    w = lib_weight(case.fr[sl], LibParams(lam=lib.lam, r=r, window=lib.window))
    return img, lab, w.astype(np.float32)


_ROT_PLANES = {0: (1, 2), 1: (0, 2), 2: (0, 1)}     # spatial-axis pairs


def rotate_augment(img: np.ndarray, lab: np.ndarray, w: np.ndarray,
                   threshold: float, rng: np.random.Generator):
    """Right-angle rotation applied identically to all three patches.

    A uniform draw below the threshold leaves the triple untouched, so
    higher thresholds mean less augmentation.
    """
    if rng.random() < threshold:
        return img, lab, w
    axis = int(rng.integers(0, 3))
    k = int(rng.integers(1, 4))
    a, b = _ROT_PLANES[axis]
    img = np.rot90(img, k, axes=(a + 1, b + 1))     # channel axis leads
    lab = np.rot90(lab, k, axes=(a, b))
    w = np.rot90(w, k, axes=(a, b))
    return (np.ascontiguousarray(img), np.ascontiguousarray(lab),
            np.ascontiguousarray(w))


# ---------------------------------------------------------------------------
# Stage loop
# ---------------------------------------------------------------------------

def _patch_loss(prob, lab, w, stage: StageConfig):
    if stage.loss_kind == "tversky":
        return tversky_loss(prob, lab, TverskyParams(alpha=stage.gul_alpha,
                                                     beta=1.0 - stage.gul_alpha))
    return gul_loss(prob, lab, w, GulParams(alpha=stage.gul_alpha,
                                            r_l=stage.gul_r))


def train_stage(cases: list[TrainCase], model: TfeNet, stage: StageConfig,
                rng: np.random.Generator,
                log_path: str | Path | None = None) -> list[dict]:
    """Run one stage; returns the per-epoch loss curve.

    Steps iterate cases in manifest order, patches within a case in
    draw order; the optimizer step is serialized, so a fixed seed gives
    a bit-reproducible parameter trajectory.
    """
    if not cases:
        raise ArgumentError("training needs at least one case")
    div = model.required_multiple()
    if stage.patch_size % div:
        raise ArgumentError(
            f"patch size {stage.patch_size} not divisible by {div}")
    opt = SGD(model.store, lr=stage.lr, momentum=stage.momentum)
    curve = []
    step = 0
    for epoch in range(stage.epochs):
        opt.lr = stage.lr_at(epoch)
        losses = []
        for case in cases:
            for _ in range(stage.patches_per_case):
                img, lab, w = sample_patch(case, stage.patch_size, rng,
                                           stage.foreground_bias)
                img, lab, w = rotate_augment(img, lab, w,
                                             stage.rotation_threshold, rng)
                prob = model.forward(img)
                loss, dp = _patch_loss(prob[0], lab, w, stage)
                if not np.isfinite(loss):
                    raise TrainingDiverged("loss became non-finite",
                                           stage=stage.stage, epoch=epoch,
                                           step=step, loss=float(loss))
                model.backward(dp[None].astype(np.float32))
                opt.step()
                losses.append(float(loss))
                step += 1
        curve.append({"epoch": epoch, "mean_loss": float(np.mean(losses)),
                      "lr": opt.lr})
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        with log_path.open("w", newline="") as f:
            wr = csv.DictWriter(f, fieldnames=("epoch", "mean_loss", "lr"))
            wr.writeheader()
            wr.writerows(curve)
    return curve


def run_two_stage(cases: list[TrainCase], model: TfeNet, seed: int,
                  out_dir: str | Path,
                  stage1: StageConfig | None = None,
                  stage2: StageConfig | None = None) -> tuple[Path, Path]:
    """Train both stages and write a checkpoint after each.

    Stage 2 fine-tunes the stage-1 parameters in place with a fresh
    optimizer state.  Checkpoint metadata records the stage config,
    seed, and loss curve, which is all a rerun needs to reproduce or
    audit the result.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stage1 = stage1 or stage1_config()
    stage2 = stage2 or stage2_config()
    ss = np.random.SeedSequence(seed)
    rng1, rng2 = (np.random.default_rng(s) for s in ss.spawn(2))

    paths = []
    for stage, rng in ((stage1, rng1), (stage2, rng2)):
        curve = train_stage(cases, model, stage, rng,
                            log_path=out / f"train_log_{stage.stage}.csv")
        ckpt = out / f"checkpoint_{stage.stage}.json"
        save_checkpoint(model.store, ckpt, meta={
            "stage": asdict(stage),
            "model": model.config.to_dict(),
            "seed": seed,
            "loss_curve": curve,
        })
        paths.append(ckpt)
    return paths[0], paths[1]
