"""Sliding-window prediction, two-stage fusion, and mask cleanup."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError
from .model import TfeNet, TfeNetConfig
from .params import load_checkpoint
from .train import HU_CLIP
from .volume import Volume, as_mask, fill_holes, largest_component

FUSION_MODES = ("union", "mean")


@dataclass(frozen=True)
class InferenceConfig:
    patch_size: int = 128
    stride: int = 64
    threshold: float = 0.5
    fusion: str = "union"
    keep_largest: bool = True
    close_holes: bool = True

    def __post_init__(self):
        if not 1 <= self.stride <= self.patch_size:
            raise ArgumentError(
                f"stride must be in [1, patch_size], got {self.stride} "
                f"with patch {self.patch_size}")
        if not 0.0 < self.threshold < 1.0:
            raise ArgumentError(
                f"threshold must be in (0, 1), got {self.threshold}")
        if self.fusion not in FUSION_MODES:
            raise ArgumentError(f"fusion must be one of {FUSION_MODES}, "
                                f"got {self.fusion!r}")


def load_model(path, dtype=np.float32) -> tuple[TfeNet, dict]:
    """Rebuild a network from a checkpoint; returns (model, metadata)."""
    store, meta = load_checkpoint(path)
    if "model" not in meta:
        raise ArgumentError(f"checkpoint {path} has no model config in meta")
    model = TfeNet(TfeNetConfig.from_dict(meta["model"]), dtype=dtype)
    model.store.load_values(store)
    return model, meta


def normalize_hu(vol: Volume) -> Volume:
    """Clip to the airway HU window and rescale to [0, 1], as in training."""
    lo, hi = HU_CLIP
    data = (np.clip(vol.data.astype(np.float32), lo, hi) - lo) / (hi - lo)
    return Volume(data, spacing=vol.spacing)


def _starts(dim: int, patch: int, stride: int) -> list[int]:
    starts = list(range(0, dim - patch + 1, stride))
    if starts[-1] != dim - patch:
        starts.append(dim - patch)
    return starts


def _pad_reflect(data: np.ndarray, target: tuple[int, int, int]) -> np.ndarray:
    """Reflect-pad the trailing end of each spatial axis up to target."""
    for ax, want in enumerate(target, start=1):
        while data.shape[ax] < want:
            have = data.shape[ax]
            # numpy reflect caps a single pad at have - 1
            step = min(want - have, max(have - 1, 1))
            width = [(0, 0)] * data.ndim
            width[ax] = (0, step)
            data = np.pad(data, width, mode="reflect" if have > 1 else "edge")
    return data


def sliding_window_predict(vol: Volume, model: TfeNet,
                           config: InferenceConfig = InferenceConfig()) -> Volume:
    """Tile the volume with overlapping patches and average the outputs.

    Every voxel's probability is the uniform mean over all windows that
    cover it.  Volumes smaller than one patch are reflect-padded for
    prediction and cropped back afterwards.
    """
    p = config.patch_size
    if p % model.required_multiple():
        raise ArgumentError(
            f"patch size {p} not divisible by {model.required_multiple()}")
    data = vol.data.astype(np.float32)
    orig = data.shape[1:]
    padded = tuple(max(d, p) for d in orig)
    if padded != orig:
        data = _pad_reflect(data, padded)
    acc = np.zeros(padded, dtype=np.float64)
    cov = np.zeros(padded, dtype=np.int32)
    grid = [_starts(d, p, config.stride) for d in padded]
    for z in grid[0]:
        for y in grid[1]:
            for x in grid[2]:
                sl = (slice(z, z + p), slice(y, y + p), slice(x, x + p))
                prob = model.forward(data[(slice(None),) + sl])
                acc[sl] += prob[0]
                cov[sl] += 1
    out = (acc / cov).astype(np.float32)
    out = out[tuple(slice(0, d) for d in orig)]
    return Volume(out[None], spacing=vol.spacing)


def fuse_two_stage(prob1: np.ndarray, prob2: np.ndarray, mode: str = "union",
                   threshold: float = 0.5) -> np.ndarray:
    """Combine the probability maps of the two training stages.

    "union" ORs the two thresholded masks, trading precision for
    detected length; "mean" averages probabilities before thresholding.
    """
    p1 = np.asarray(prob1)
    p2 = np.asarray(prob2)
    if p1.shape != p2.shape:
        raise ArgumentError(f"shape mismatch: {p1.shape} vs {p2.shape}")
    if mode == "union":
        return (((p1 > threshold) | (p2 > threshold))).astype(np.uint8)
    if mode == "mean":
        return (0.5 * (p1 + p2) > threshold).astype(np.uint8)
    raise ArgumentError(f"fusion must be one of {FUSION_MODES}, got {mode!r}")


def postprocess(mask: np.ndarray, keep_largest: bool = True,
                close_holes: bool = True) -> tuple[np.ndarray, bool]:
    """Largest-component filter plus hole filling.

    Returns (mask, empty) where empty flags an all-background input,
    which is passed through untouched rather than treated as an error.
    """
    m = as_mask(mask)
    if not m.any():
        return m, True
    if keep_largest:
        m = largest_component(m)
    if close_holes:
        m = fill_holes(m)
    return m, False


def predict_mask(vol: Volume, model1: TfeNet, model2: TfeNet | None = None,
                 config: InferenceConfig = InferenceConfig()):
    """Full pipeline: window prediction, optional fusion, cleanup.

    Returns (mask, prob1, prob2, empty) with prob2 None in single-stage
    runs.  Fusion happens before postprocessing so the cleanup sees the
    final candidate mask exactly once.
    """
    prob1 = sliding_window_predict(vol, model1, config)
    prob2 = None
    if model2 is not None:
        prob2 = sliding_window_predict(vol, model2, config)
        mask = fuse_two_stage(prob1.data[0], prob2.data[0],
                              mode=config.fusion, threshold=config.threshold)
    else:
        mask = (prob1.data[0] > config.threshold).astype(np.uint8)
    mask, empty = postprocess(mask, config.keep_largest, config.close_holes)
    return mask, prob1, prob2, empty
