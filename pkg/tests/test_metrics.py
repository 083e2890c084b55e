import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import mae_direct, niou_direct, normalize_direct, nssim_direct, ssim_direct, window_matrix
from volufuse.metrics import (
    CaseReport,
    aggregate,
    evaluate_case,
    mae,
    niou,
    nssim,
    read_csv,
    render_table,
    ssim3d,
    write_csv,
)
from volufuse.volcore import Volume


@pytest.fixture(scope="module")
def W8():
    return window_matrix((8, 8, 8))


def test_ssim_self_is_exactly_one(rng):
    x = rng.random((9, 10, 11))
    assert ssim3d(x, x) == 1.0


def test_ssim_constant_patches_closed_form():
    a, b = np.zeros((6, 6, 6)), np.ones((6, 6, 6))
    c1, c2 = 1e-4, 9e-4
    expected = (c1 * c2) / ((0 + 1 + c1) * (0 + 0 + c2))
    assert ssim3d(a, b) == pytest.approx(expected, rel=1e-9)
    assert expected == pytest.approx(1e-4 * 9e-4 / (1.0001 * 0.0009))


def test_ssim_symmetry_and_bounds(rng):
    for _ in range(5):
        a, b = rng.random((7, 7, 7)), rng.random((7, 7, 7))
        assert ssim3d(a, b) == pytest.approx(ssim3d(b, a), abs=1e-12)
        assert -1 <= ssim3d(a, b) <= 1
    with pytest.raises(ValueError):
        ssim3d(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


def test_ssim_matches_direct_oracle(rng, W8):
    for _ in range(3):
        a, b = rng.random((8, 8, 8)), rng.random((8, 8, 8))
        assert ssim3d(a, b) == pytest.approx(ssim_direct(a, b, W8), abs=1e-10)


def test_nssim_examples(rng):
    gt = rng.random((8, 8, 8))
    inp = np.clip(gt + 0.3 * rng.normal(size=gt.shape), 0, 1)
    assert nssim(inp, inp, gt) == 0.0
    assert nssim(inp, gt, gt) == pytest.approx(1.0)
    worse = np.clip(gt + 0.6 * rng.normal(size=gt.shape), 0, 1)
    assert ssim3d(worse, gt) < ssim3d(inp, gt)
    assert nssim(inp, worse, gt) < 0
    # perfect input: zero headroom
    assert nssim(gt, inp, gt) == 0.0


def test_nssim_increasing_in_output_ssim(rng):
    gt = rng.random((8, 8, 8))
    inp = np.clip(gt + 0.3 * rng.normal(size=gt.shape), 0, 1)
    noise = rng.normal(size=gt.shape)
    outs = [np.clip(gt + s * noise, 0, 1) for s in (0.5, 0.3, 0.2, 0.1, 0.05)]
    ss = [ssim3d(o, gt) for o in outs]
    ns = [nssim(inp, o, gt) for o in outs]
    assert np.all(np.diff(ss) > 0) and np.all(np.diff(ns) > 0)


def test_niou_examples():
    gt = np.zeros((4, 4, 4))
    gt[0, 0, 0] = 1
    assert niou(gt, gt) == 1.0
    other = np.zeros_like(gt)
    other[3, 3, 3] = 1
    assert niou(other, gt) == 0.0
    # masks {0,1} and {1,2}: one shared voxel out of three
    a, b = np.zeros((20, 1, 1)), np.zeros((20, 1, 1))
    a[[0, 1]] = 1
    b[[1, 2]] = 1
    assert niou(a, b) == pytest.approx(1 / 3)
    assert niou(np.zeros((3, 3, 3)), np.zeros((3, 3, 3))) == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_niou_range_and_identity(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((5, 5, 5)), rng.random((5, 5, 5))
    v = niou(a, b)
    assert 0 <= v <= 1
    assert niou(a, a) == 1.0
    assert niou_direct(a, b) == pytest.approx(v)


def test_evaluate_case_identity_and_perfect(rng):
    gt = Volume(rng.random((10, 10, 10), dtype=np.float32))
    inp = Volume(np.clip(gt.data + 0.2 * rng.normal(size=gt.shape), 0, None).astype(np.float32))
    r = evaluate_case(inp, inp, gt, "nucleus")
    assert r.nssim == 0.0
    ref = evaluate_case(inp, gt, gt, "nucleus")
    assert ref.ssim == 1.0 and ref.mae == 0.0 and ref.nssim == 1.0 and ref.niou == 1.0
    assert r.mae == pytest.approx(mae(normalize_direct(inp.data), normalize_direct(gt.data)), abs=1e-6)
    assert evaluate_case(inp, inp, gt, with_niou=False).niou is None


def test_evaluate_case_matches_direct_oracle(W8):
    rng = np.random.default_rng(99)
    i, o, g = (rng.random((8, 8, 8), dtype=np.float32) for _ in range(3))
    r = evaluate_case(i, o, g)
    ni, no, ng = (normalize_direct(x) for x in (i, o, g))
    assert r.ssim == pytest.approx(ssim_direct(no, ng, W8), abs=1e-5)
    assert r.mae == pytest.approx(mae_direct(no, ng), abs=1e-5)
    assert r.nssim == pytest.approx(nssim_direct(ni, no, ng, W8), abs=1e-5)
    assert r.niou == pytest.approx(niou_direct(no, ng), abs=1e-5)


def _report(v, method="m", channel="nucleus", cid="a"):
    return CaseReport(cid, channel, ssim=v, mae=v, nssim=v, niou=None, method=method)


def test_aggregate_examples():
    single = aggregate([_report(0.3)])
    assert single[("m", "nucleus")].std["ssim"] == 0.0
    two = aggregate([_report(0.0, cid="a"), _report(1.0, cid="b")])[("m", "nucleus")]
    assert two.mean["nssim"] == 0.5 and two.std["nssim"] == 0.5
    with pytest.raises(ValueError):
        aggregate([])


def test_aggregate_order_independent():
    reps = [_report(float(k), method=m, channel=c, cid=str(k)) for k, (m, c) in enumerate(
        [("a", "nucleus"), ("b", "membrane"), ("a", "membrane"), ("a", "nucleus"), ("b", "nucleus")]
    )]
    x = aggregate(reps)
    y = aggregate(list(reversed(reps)))
    assert list(x) == list(y)
    assert all(x[k] == y[k] for k in x)
    table = render_table(x, methods=["a", "b"])
    assert table.splitlines()[0].startswith("Method")
    assert "N/A" in table  # no nIOU in these reports


def test_csv_round_trip(tmp_path):
    reps = [CaseReport("c1", "nucleus", 0.5, 0.1, 0.2, 0.3, "Identity"), CaseReport("c2", "membrane", 0.6, 0.2, -0.1, None, "X")]
    path = write_csv(reps, tmp_path / "r.csv")
    assert path.read_text().splitlines()[0] == "id,channel,method,ssim,mae,nssim,niou"
    back = read_csv(path)
    assert back[0].case_id == "c1" and back[1].niou is None
    assert back[0].nssim == pytest.approx(0.2)
