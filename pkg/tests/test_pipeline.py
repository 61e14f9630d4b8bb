import numpy as np
import pytest

from cogload.data import synth_generate
from cogload.dsp import NoiseSpec
from cogload.pipeline import FeaturePipeline


@pytest.fixture(scope="module")
def prepared():
    segs = synth_generate(2, 4, seed=0)
    pipe = FeaturePipeline()
    by_subject = {}
    for s in segs:
        by_subject.setdefault(s.subject_id, []).append(s)
    prep = {s: pipe.prepare_many(v) for s, v in sorted(by_subject.items())}
    return segs, pipe, prep


def test_model_inputs_shapes(prepared):
    _, pipe, prep = prepared
    stats = pipe.fit_stats(prep["S00"], "S01")
    inputs = pipe.model_inputs(prep["S01"], stats)
    assert inputs.raw.shape == (4, 4, 2560)
    assert inputs.topo.shape == (4, 15, 32, 32)
    assert inputs.raw.dtype == np.float32
    assert inputs.labels.tolist() == [0, 1, 0, 1]
    assert np.all(inputs.topo >= 0.0) and np.all(inputs.topo <= 1.0)
    # raw stream is z-scored per channel-segment
    assert np.allclose(inputs.raw.mean(axis=2), 0.0, atol=1e-4)
    assert np.allclose(inputs.raw.std(axis=2), 1.0, atol=1e-3)


def test_channel_mask_zeroes_other_channels(prepared):
    _, pipe, prep = prepared
    stats = pipe.fit_stats(prep["S00"], "S01")
    inputs = pipe.model_inputs(prep["S01"], stats, channel_keep=2)
    for c in (0, 1, 3):
        assert np.all(inputs.raw[:, c] == 0.0)
    assert np.any(inputs.raw[:, 2] != 0.0)


def test_band_mask_zeroes_other_planes(prepared):
    _, pipe, prep = prepared
    stats = pipe.fit_stats(prep["S00"], "S01")
    inputs = pipe.model_inputs(prep["S01"], stats, band_keep=1)  # Theta
    for b in (0, 2, 3, 4):
        assert np.all(inputs.topo[:, 3 * b:3 * b + 3] == 0.0)
    assert np.any(inputs.topo[:, 3:6] != 0.0)


def test_prepare_deterministic(prepared):
    segs, pipe, _ = prepared
    a = pipe.prepare(segs[0])
    b = pipe.prepare(segs[0])
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.filtered, b.filtered)


def test_prepare_noise_changes_features(prepared):
    segs, pipe, _ = prepared
    clean = pipe.prepare(segs[0])
    noisy = pipe.prepare(segs[0], noise=NoiseSpec(fraction=0.5, seed=1))
    assert not np.allclose(clean.features, noisy.features)
    zero = pipe.prepare(segs[0], noise=NoiseSpec(fraction=0.0, seed=1))
    assert np.array_equal(clean.features, zero.features)


def test_band_restrict_shifts_power(prepared):
    segs, pipe, _ = prepared
    theta_only = pipe.prepare(segs[0], band_keep=1)
    full = pipe.prepare(segs[0])
    mat_t = theta_only.features.reshape(4, 5)
    mat_f = full.features.reshape(4, 5)
    # log-power outside theta collapses toward the floor after restriction
    assert np.all(mat_t[:, 4] < mat_f[:, 4] - 1.0)  # gamma heavily attenuated
    assert np.all(mat_t[:, 1] > mat_t[:, 4])  # theta dominates what remains


def test_de_feature_variant(prepared):
    segs, _, _ = prepared
    pipe = FeaturePipeline(feature="de")
    prep = pipe.prepare(segs[0])
    assert prep.features.shape == (20,)
    assert np.all(np.isfinite(prep.features))


def test_pipeline_rejects_unknown_feature():
    with pytest.raises(ValueError):
        FeaturePipeline(feature="wavelet")
