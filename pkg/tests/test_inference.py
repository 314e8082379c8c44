"""Sliding-window prediction, fusion, and mask cleanup."""
import numpy as np
import pytest

from tfenet.errors import ArgumentError
from tfenet.infer import (FUSION_MODES, InferenceConfig, fuse_two_stage,
                          load_model, normalize_hu, postprocess, predict_mask,
                          sliding_window_predict)
from tfenet.model import TfeNet, TfeNetConfig
from tfenet.params import save_checkpoint
from tfenet.train import HU_CLIP
from tfenet.volume import Volume

TINY = TfeNetConfig(levels=2, widths=(2, 4), k=3)


class StubModel:
    """Duck-typed stand-in: records calls, emits programmable patches."""

    def __init__(self, fn, multiple=2):
        self.fn = fn
        self.multiple = multiple
        self.calls = 0

    def required_multiple(self):
        return self.multiple

    def forward(self, x):
        self.calls += 1
        return self.fn(x, self.calls)


def constant_stub(c):
    return StubModel(lambda x, i: np.full((1,) + x.shape[1:], c, np.float32))


def oracle_starts(dim, patch, stride):
    s = list(range(0, dim - patch + 1, stride))
    if s[-1] != dim - patch:
        s.append(dim - patch)
    return s


# -- config ----------------------------------------------------------------

def test_inference_config_validation():
    InferenceConfig(patch_size=8, stride=8)
    with pytest.raises(ArgumentError):
        InferenceConfig(patch_size=8, stride=0)
    with pytest.raises(ArgumentError):
        InferenceConfig(patch_size=8, stride=9)
    with pytest.raises(ArgumentError):
        InferenceConfig(threshold=0.0)
    with pytest.raises(ArgumentError):
        InferenceConfig(threshold=1.0)
    with pytest.raises(ArgumentError):
        InferenceConfig(fusion="max")
    assert set(FUSION_MODES) == {"union", "mean"}


# -- windowing -------------------------------------------------------------

def test_single_window_equals_direct_forward():
    model = TfeNet(TINY, seed=3)
    rng = np.random.default_rng(0)
    x = rng.random((1, 8, 8, 8)).astype(np.float32)
    direct = model.forward(x)
    out = sliding_window_predict(
        Volume(x), model, InferenceConfig(patch_size=8, stride=8))
    assert np.allclose(out.data[0], direct[0], atol=1e-7)


def test_constant_predictions_unaffected_by_overlap():
    stub = constant_stub(0.37)
    vol = Volume(np.zeros((20, 14, 17), dtype=np.float32))
    out = sliding_window_predict(vol, stub,
                                 InferenceConfig(patch_size=8, stride=3))
    assert out.data.shape == (1, 20, 14, 17)
    assert np.allclose(out.data, 0.37, atol=1e-6)


def test_overlap_average_matches_per_voxel_oracle():
    # every call emits its own flat value; each voxel must then carry
    # the plain mean over the windows that covered it
    patch, stride = 8, 3
    shape = (16, 12, 10)
    stub = StubModel(lambda x, i: np.full((1,) + x.shape[1:], float(i),
                                          np.float32))
    out = sliding_window_predict(Volume(np.zeros(shape, dtype=np.float32)),
                                 stub,
                                 InferenceConfig(patch_size=patch,
                                                 stride=stride))
    grids = [oracle_starts(d, patch, stride) for d in shape]
    acc = np.zeros(shape)
    cov = np.zeros(shape, dtype=int)
    call = 0
    for z in grids[0]:
        for y in grids[1]:
            for x in grids[2]:
                call += 1
                acc[z:z + patch, y:y + patch, x:x + patch] += call
                cov[z:z + patch, y:y + patch, x:x + patch] += 1
    assert cov.min() >= 1
    assert np.allclose(out.data[0], acc / cov, atol=1e-5)


def test_small_volume_reflect_padded_and_cropped():
    stub = constant_stub(0.9)
    for shape in ((5, 12, 7), (3, 3, 3), (1, 9, 9)):
        out = sliding_window_predict(Volume(np.zeros(shape, np.float32)),
                                     stub,
                                     InferenceConfig(patch_size=8, stride=8))
        assert out.data.shape == (1,) + shape
        assert np.allclose(out.data, 0.9, atol=1e-6)


def test_patch_must_match_network_stride():
    model = TfeNet(TINY, seed=0)
    vol = Volume(np.zeros((8, 8, 8), dtype=np.float32))
    with pytest.raises(ArgumentError):
        sliding_window_predict(vol, model,
                               InferenceConfig(patch_size=7, stride=7))


def test_spacing_carried_through():
    stub = constant_stub(0.1)
    vol = Volume(np.zeros((9, 9, 9), np.float32), spacing=(2.0, 0.7, 0.7))
    out = sliding_window_predict(vol, stub,
                                 InferenceConfig(patch_size=8, stride=4))
    assert out.spacing == (2.0, 0.7, 0.7)


# -- fusion ----------------------------------------------------------------

def test_fusion_union_is_or_of_thresholded():
    p1 = np.array([[[0.6, 0.4, 0.4, 0.51]]])
    p2 = np.array([[[0.4, 0.6, 0.4, 0.49]]])
    fused = fuse_two_stage(p1, p2, mode="union")
    assert fused.tolist() == [[[1, 1, 0, 1]]]
    rng = np.random.default_rng(1)
    a, b = rng.random((6, 6, 6)), rng.random((6, 6, 6))
    u = fuse_two_stage(a, b, mode="union")
    assert np.all(u >= (a > 0.5)) and np.all(u >= (b > 0.5))


def test_fusion_mean_averages_before_threshold():
    p1 = np.array([[[0.6, 0.45, 0.8]]])
    p2 = np.array([[[0.3, 0.58, 0.9]]])
    fused = fuse_two_stage(p1, p2, mode="mean")
    assert fused.tolist() == [[[0, 1, 1]]]


def test_fusion_identical_inputs_reduce_to_single_stage():
    rng = np.random.default_rng(2)
    p = rng.random((5, 5, 5))
    for mode in FUSION_MODES:
        assert np.array_equal(fuse_two_stage(p, p, mode=mode),
                              (p > 0.5).astype(np.uint8))


def test_fusion_errors():
    with pytest.raises(ArgumentError):
        fuse_two_stage(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))
    with pytest.raises(ArgumentError):
        fuse_two_stage(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), mode="vote")


# -- postprocess -----------------------------------------------------------

def test_postprocess_keeps_largest_and_fills():
    m = np.zeros((12, 12, 12), dtype=np.uint8)
    m[2:9, 2:9, 2:9] = 1
    m[4:7, 4:7, 4:7] = 0          # internal cavity
    m[10, 10, 10] = 1             # stray speck
    out, empty = postprocess(m)
    assert not empty
    assert out[5, 5, 5] == 1      # cavity closed
    assert out[10, 10, 10] == 0   # speck dropped
    again, _ = postprocess(out)
    assert np.array_equal(again, out)


def test_postprocess_flags_disabled():
    m = np.zeros((10, 10, 10), dtype=np.uint8)
    m[1:4, 1:4, 1:4] = 1
    m[1:4, 1:4, 2] = 1
    m[7, 7, 7] = 1
    keep_all, _ = postprocess(m, keep_largest=False, close_holes=False)
    assert keep_all[7, 7, 7] == 1
    assert np.array_equal(keep_all, m != 0)


def test_postprocess_empty_passthrough():
    m = np.zeros((6, 6, 6), dtype=np.uint8)
    out, empty = postprocess(m)
    assert empty and not out.any()


# -- model io --------------------------------------------------------------

def test_load_model_round_trip(tmp_path):
    model = TfeNet(TINY, seed=8)
    ckpt = tmp_path / "ck.json"
    save_checkpoint(model.store, ckpt, meta={"model": TINY.to_dict()})
    loaded, meta = load_model(ckpt)
    assert meta["model"]["widths"] == [2, 4]
    x = np.random.default_rng(0).random((1, 8, 8, 8)).astype(np.float32)
    assert np.array_equal(model.forward(x), loaded.forward(x))


def test_load_model_requires_config(tmp_path):
    model = TfeNet(TINY, seed=8)
    ckpt = tmp_path / "bare.json"
    save_checkpoint(model.store, ckpt, meta={})
    with pytest.raises(ArgumentError):
        load_model(ckpt)


# -- full pipeline ---------------------------------------------------------

def test_normalize_hu_window():
    lo, hi = HU_CLIP
    v = Volume(np.array([[[[lo, (lo + hi) / 2, hi, hi + 100]]]],
                        dtype=np.float32))
    out = normalize_hu(v)
    assert out.data[0, 0, 0].tolist() == pytest.approx([0.0, 0.5, 1.0, 1.0])


def test_predict_mask_two_identical_stages_match_single():
    hot = StubModel(lambda x, i: _blob_patch(x))
    cfg = InferenceConfig(patch_size=8, stride=8)
    vol = Volume(np.zeros((8, 8, 8), dtype=np.float32))
    m_single, p1, p2, empty = predict_mask(vol, hot, None, cfg)
    assert p2 is None and not empty
    hot2 = StubModel(lambda x, i: _blob_patch(x))
    m_double, _, p2b, _ = predict_mask(vol, hot, hot2, cfg)
    assert p2b is not None
    assert np.array_equal(m_single, m_double)


def _blob_patch(x):
    out = np.full((1,) + x.shape[1:], 0.1, np.float32)
    out[0, 2:6, 2:6, 2:6] = 0.9
    return out


def test_predict_mask_reports_empty():
    cold = constant_stub(0.05)
    cfg = InferenceConfig(patch_size=8, stride=8)
    mask, _, _, empty = predict_mask(
        Volume(np.zeros((8, 8, 8), dtype=np.float32)), cold, None, cfg)
    assert empty and not mask.any()
