import hashlib
import math

import numpy as np
import pytest
from scipy import ndimage

from volufuse.metrics import ssim3d
from volufuse.synthgen import (
    Dataset,
    DegradationSpec,
    PhantomSpec,
    case_seed,
    degrade_single_view,
    generate_phantom,
    make_dataset,
    split_indices,
)
from volufuse.volcore import Volume

SMALL = PhantomSpec(shape=(32, 32, 32), count_range=(3, 5), radius_range=(3.0, 5.0))


def test_phantom_is_deterministic_and_normalised():
    a, b = generate_phantom(SMALL), generate_phantom(SMALL)
    assert a.data.tobytes() == b.data.tobytes()
    assert a.data.min() == 0.0 and a.data.max() == 1.0
    other = generate_phantom(PhantomSpec(shape=(32, 32, 32), count_range=(3, 5), radius_range=(3.0, 5.0), seed=1))
    assert other.data.tobytes() != a.data.tobytes()


@pytest.mark.parametrize("channel", ["nucleus", "membrane"])
@pytest.mark.parametrize("seed", range(4))
def test_exact_object_count(channel, seed):
    spec = PhantomSpec(shape=(48, 48, 48), channel=channel, count_range=(5, 5), seed=seed)
    v = generate_phantom(spec).data
    _, n = ndimage.label(v > 0.5 * v.max(), structure=np.ones((3, 3, 3)))
    assert n == 5


def test_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(count_range=(0, 3))
    with pytest.raises(ValueError):
        PhantomSpec(shape=(8, 8, 8), radius_range=(4.0, 6.0))
    with pytest.raises(ValueError):
        PhantomSpec(channel="cytoplasm")
    with pytest.raises(ValueError):
        DegradationSpec(blur_near=2.0, blur_far=1.0)
    with pytest.raises(ValueError):
        DegradationSpec(attenuation_length=0.0)


def test_degenerate_degradation_is_identity():
    gt = generate_phantom(SMALL)
    out = degrade_single_view(gt, DegradationSpec(attenuation_length=math.inf, blur_near=0, blur_far=0, noise_sigma=0, noise_gain=0))
    np.testing.assert_array_equal(out.data, gt.data)


@pytest.mark.parametrize("axis", ["z", "y", "x"])
def test_attenuation_law(axis):
    gt = Volume(np.full((24, 24, 24), 0.5, dtype=np.float32))
    tau = 12.0
    deg = DegradationSpec(view_axis=axis, attenuation_length=tau, blur_near=0, blur_far=0, noise_sigma=0.01, noise_gain=0, seed=3)
    out = degrade_single_view(gt, deg).data
    ax = "zyx".index(axis)
    means = out.mean(axis=tuple(a for a in range(3) if a != ax))
    expected = 0.5 * np.exp(-np.arange(24) / tau)
    # noise std per slice mean is 0.01 / 24
    np.testing.assert_allclose(means, expected, atol=4 * 0.01 / 24)
    slope = np.polyfit(np.arange(24), np.log(means), 1)[0]
    assert slope == pytest.approx(-1 / tau, rel=0.02)


def _hf_energy(v, axis, sl):
    s = np.take(v, sl, axis=axis)
    lap = ndimage.laplace(s.astype(np.float64))
    return float((lap**2).mean())


def test_far_side_has_less_high_frequency_energy():
    gt = generate_phantom(PhantomSpec(shape=(48, 48, 48), count_range=(10, 14), radius_range=(3.0, 5.0), seed=2))
    out = degrade_single_view(gt, DegradationSpec(attenuation_length=1e9, noise_sigma=0, noise_gain=0)).data
    near = _hf_energy(out, 0, np.arange(0, 24))
    far = _hf_energy(out, 0, np.arange(24, 48))
    near_gt = _hf_energy(gt.data, 0, np.arange(0, 24))
    far_gt = _hf_energy(gt.data, 0, np.arange(24, 48))
    # compare the fraction of ground-truth energy that survives on each side
    assert far / far_gt < near / near_gt


def test_degradation_reduces_ssim_and_worsens_with_depth():
    gt = generate_phantom(PhantomSpec(shape=(48, 48, 48), count_range=(10, 14), radius_range=(3.0, 5.0), seed=4))
    out = degrade_single_view(gt, DegradationSpec(seed=9))
    assert ssim3d(out.data, gt.data) < 1.0
    near = ssim3d(out.data[:24], gt.data[:24])
    far = ssim3d(out.data[24:], gt.data[24:])
    assert far <= near
    assert np.all(out.data >= 0)
    again = degrade_single_view(gt, DegradationSpec(seed=9))
    assert again.data.tobytes() == out.data.tobytes()


def test_split_arithmetic():
    train, val = split_indices(75, 0)
    assert len(train) == 60 and len(val) == 15
    assert sorted(train + val) == list(range(75))
    assert split_indices(75, 0) == (train, val)
    assert split_indices(75, 1) != (train, val)
    assert case_seed(0, 3) != case_seed(0, 4) and case_seed(0, 3) == case_seed(0, 3)


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.iterdir()):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def test_make_dataset_manifest_and_reproducibility(tmp_path):
    phantom = PhantomSpec(shape=(20, 20, 20), count_range=(1, 2), radius_range=(2.0, 3.0))
    deg = DegradationSpec(attenuation_length=16.0, blur_far=1.5)
    m = make_dataset(75, phantom, deg, tmp_path / "a", seed=5)
    splits = [c["split"] for c in m["cases"]]
    assert splits.count("train") == 60 and splits.count("val") == 15
    assert {c["channel"] for c in m["cases"]} == {"nucleus", "membrane"}

    ds = Dataset(tmp_path / "a")
    for case in ds.cases[:5]:
        inp, gt = ds.pair(case)
        assert inp.shape == gt.shape == (20, 20, 20)
        assert inp.channel == gt.channel == case["channel"]
    assert len(ds.split("val")) == 15

    make_dataset(75, phantom, deg, tmp_path / "b", seed=5)
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_dataset_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        Dataset(tmp_path)
    (tmp_path / "manifest.json").write_text("[")
    with pytest.raises(ValueError):
        Dataset(tmp_path)
