import json

import cv2
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from biref.metrics import (
    HCE_LABEL,
    REPORT_COLUMNS,
    MetricConfig,
    MetricReport,
    dominant_points,
    e_curve,
    e_measures,
    evaluate_corpus,
    evaluate_pair,
    f_curve,
    f_measures,
    mae,
    relax_hce,
    s_measure,
    trace_boundary,
    weighted_f_measure,
)

PAIRS = [oracles.random_pair(np.random.default_rng(s)) for s in range(25)]


def _blob_gt(rng, size=16):
    return oracles.random_pair(rng, size)[1]


# -- oracle agreement -------------------------------------------------------------


@pytest.mark.parametrize("k", range(0, 25, 4))
def test_s_measure_oracle(k):
    p, g = PAIRS[k]
    assert s_measure(p, g) == pytest.approx(oracles.s_measure(p, g), abs=1e-6)


@pytest.mark.parametrize("k", range(1, 25, 4))
def test_f_and_e_oracle(k):
    p, g = PAIRS[k]
    fs, es = oracles.f_and_e_curves(p, g)
    assert np.allclose(f_curve(p, g), fs, atol=1e-9)
    assert np.allclose(e_curve(p, g), es, atol=1e-9)
    fm, em = f_measures(p, g), e_measures(p, g)
    assert fm["max"] == pytest.approx(max(fs), abs=1e-6) and fm["mean"] == pytest.approx(np.mean(fs), abs=1e-6)
    assert em["max"] == pytest.approx(max(es), abs=1e-6) and em["mean"] == pytest.approx(np.mean(es), abs=1e-6)


@pytest.mark.parametrize("k", range(2, 25, 4))
def test_weighted_f_oracle(k):
    p, g = PAIRS[k]
    assert weighted_f_measure(p, g) == pytest.approx(oracles.weighted_f(p, g), abs=1e-6)


@pytest.mark.parametrize("gamma", [0, 1, 5])
def test_hce_oracle(gamma):
    for p, g in PAIRS[::3]:
        assert relax_hce(p, g, gamma) == oracles.relax_hce(p, g, gamma)


def test_hce_oracle_larger_blocky_cases():
    rng = np.random.default_rng(9)
    for _ in range(6):
        g = np.kron(rng.random((8, 8)) < 0.4, np.ones((5, 5), np.uint8)).astype(np.uint8)
        p = np.kron(rng.random((8, 8)), np.ones((5, 5)))
        for gamma in (0, 1):
            assert relax_hce(p, g, gamma) == oracles.relax_hce(p, g, gamma)


# -- closed forms and degenerate cases ---------------------------------------------


def test_mae_examples():
    assert mae(np.array([[0.5, 0], [1, 0.25]]), np.array([[1, 0], [1, 0]])) == pytest.approx(0.1875)
    assert mae(np.ones((3, 3)), np.zeros((3, 3))) == 1.0
    g = np.eye(4)
    assert mae(g, g) == 0.0


def test_s_measure_degenerate():
    z = np.zeros((8, 8))
    assert s_measure(z, z.astype(np.uint8)) == 1.0
    assert s_measure(np.ones((8, 8)), z.astype(np.uint8)) == 0.0
    with pytest.raises(ValueError):
        s_measure(z, np.full((8, 8), 2))


def test_f_beta_closed_form():
    # precision 1, recall 0.5 at every threshold
    g = np.zeros((4, 4), np.uint8)
    g[:2] = 1
    p = np.zeros((4, 4))
    p[0] = 1.0
    assert f_measures(p, g)["max"] == pytest.approx(1.3 * 0.5 / 0.8)


def test_empty_gt_f_rule():
    z = np.zeros((6, 6), np.uint8)
    assert f_measures(np.zeros((6, 6)), z)["max"] == 1.0
    p = np.zeros((6, 6))
    p[0, 0] = 1.0
    assert f_curve(p, z)[-1] == 0.0


def test_e_measure_complement_is_low():
    rng = np.random.default_rng(0)
    g = (rng.random((8, 8)) < 0.5).astype(np.uint8)
    em = e_measures(1.0 - g, g)
    assert em["max"] < 0.1
    fs, es = oracles.f_and_e_curves(1.0 - g, g)
    assert em["max"] == pytest.approx(max(es))


def test_e_measure_constant_pred_finite():
    g = np.zeros((8, 8), np.uint8)
    g[2:5, 2:5] = 1
    for v in (0.0, 0.3, 1.0):
        em = e_measures(np.full((8, 8), v), g)
        assert np.isfinite(em["max"]) and np.isfinite(em["mean"])


def test_recall_monotone_when_adding_true_positive():
    rng = np.random.default_rng(1)
    p, g = oracles.random_pair(rng)
    ys, xs = np.nonzero(g)
    q = p.copy()
    q[ys[0], xs[0]] = 1.0
    from biref.metrics import _sweep_counts

    _, tp_p = _sweep_counts(p, g.astype(bool), 256)
    _, tp_q = _sweep_counts(q, g.astype(bool), 256)
    assert np.all(tp_q >= tp_p)


def test_hce_examples():
    g = np.zeros((64, 64), np.uint8)
    g[10:30, 10:30] = 1
    assert relax_hce(g.astype(float), g) == 0
    small = g.astype(float).copy()
    small[40:43, 40:43] = 1
    assert relax_hce(small, g, 5) == 0
    big = g.astype(float).copy()
    big[36:56, 36:56] = 1
    v = relax_hce(big, g, 5)
    assert v >= 1 and v == oracles.relax_hce(big, g, 5)


def test_trace_and_dominant_points_square():
    m = np.zeros((6, 6), bool)
    m[1:5, 1:5] = True
    ring = trace_boundary(m)
    assert ring[0] == (1, 1) and len(ring) == 12
    assert dominant_points(ring, 0.5) == 4
    assert dominant_points([(0, 0)]) == 1


# -- perfect predictions and invariants -------------------------------------------------


@settings(max_examples=15, deadline=None)
@given(arrays(np.uint8, (12, 12), elements=st.integers(0, 1)))
def test_perfect_prediction(g):
    r = evaluate_pair(g.astype(float), g)
    for k in ("sm", "fmax", "fmean", "fw", "emax", "emean"):
        assert r[k] == 1.0, k
    assert r["mae"] == 0.0 and r["hce"] == 0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_bounded_metrics(seed):
    p, g = oracles.random_pair(np.random.default_rng(seed))
    r = evaluate_pair(p, g)
    for k in ("sm", "fmax", "fmean", "fw", "emax", "emean", "mae"):
        assert 0.0 <= r[k] <= 1.0, k
    assert isinstance(r["hce"], int) and r["hce"] >= 0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["sqrt", "square", "affine"]))
def test_sweep_max_invariant_under_monotone_level_map(seed, kind):
    # remap the 256 quantization levels by a strictly increasing map fixing 0
    p, g = oracles.random_pair(np.random.default_rng(seed))
    q = np.floor(p * 255 + 0.5) / 255
    f = {"sqrt": np.sqrt, "square": np.square, "affine": lambda v: 0.5 * v + 0.5 * (v > 0)}[kind]
    levels = f(np.arange(256) / 255)
    assert np.all(np.diff(levels) > 0)
    levels = np.floor(levels * 255 + 0.5) / 255
    if np.any(np.diff(levels) <= 0):
        return  # the remap collided two levels after re-quantization
    r = levels[np.rint(q * 255).astype(int)]
    assert f_measures(r, g)["max"] == pytest.approx(f_measures(q, g)["max"], abs=1e-12)
    assert e_measures(r, g)["max"] == pytest.approx(e_measures(q, g)["max"], abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (5, 7), elements=st.floats(0, 1)), arrays(np.float64, (5, 7), elements=st.floats(0, 1)))
def test_mae_symmetric(a, b):
    assert mae(a, b) == mae(b, a)


def test_config_validation():
    with pytest.raises(ValueError):
        MetricConfig(alpha=1.5).validate()
    with pytest.raises(ValueError):
        MetricConfig(gamma=-1).validate()
    with pytest.raises(KeyError):
        MetricConfig.from_dict({"bogus": 1})


# -- corpus evaluation ------------------------------------------------------------------


def _write_maps(d, maps):
    d.mkdir(parents=True, exist_ok=True)
    for name, m in maps.items():
        cv2.imwrite(str(d / f"{name}.png"), m)


def test_corpus_perfect(tmp_path):
    rng = np.random.default_rng(0)
    maps = {f"m{i}": (_blob_gt(rng, 24) * 255).astype(np.uint8) for i in range(3)}
    _write_maps(tmp_path / "gt", maps)
    _write_maps(tmp_path / "pred", maps)
    rep = evaluate_corpus(tmp_path / "pred", tmp_path / "gt")
    s = rep.summary
    assert s["count"] == 3 and s["missing"] == 0
    for k in ("sm", "fmax", "fmean", "fw", "emax", "emean"):
        assert s[k] == 1.0
    assert s["mae"] == 0.0 and s["hce"] == 0.0 and s["hce_sum"] == 0


def test_corpus_mean_and_resize(tmp_path):
    gt = np.zeros((10, 10), np.uint8)
    _write_maps(tmp_path / "gt", {"a": gt, "b": gt})
    _write_maps(tmp_path / "pred", {"a": np.full((10, 10), 51, np.uint8), "b": np.full((5, 5), 153, np.uint8)})
    rep = evaluate_corpus(tmp_path / "pred", tmp_path / "gt", with_hce=False)
    assert rep.summary["mae"] == pytest.approx(0.4)
    assert [r["mae"] for r in rep.per_image] == pytest.approx([0.2, 0.6])


def test_corpus_missing_pair_and_report_files(tmp_path):
    gt = np.zeros((10, 10), np.uint8)
    gt[2:6, 2:6] = 255
    _write_maps(tmp_path / "gt", {"a": gt, "b": gt})
    _write_maps(tmp_path / "pred", {"a": gt, "c": gt})
    rep = evaluate_corpus(tmp_path / "pred", tmp_path / "gt")
    assert rep.missing == ["b", "c"] and len(rep.per_image) == 1
    jpath, cpath = rep.write(tmp_path / "out")
    doc = json.loads(jpath.read_text())
    assert set(doc) == {"config", "per_image", "summary", "missing"}
    assert set(doc["per_image"][0]) == {"id", "sm", "fmax", "fmean", "fw", "emax", "emean", "mae", "hce"}
    header = cpath.read_text().splitlines()[0].split(",")
    assert header[:7] == ["id", "fmax", "fw", "mae", "sm", "emean", HCE_LABEL]
    assert doc["summary"]["hce_label"] == HCE_LABEL


def test_report_column_order():
    assert REPORT_COLUMNS[:6] == ("fmax", "fw", "mae", "sm", "emean", "hce")


def test_report_hce_sum_and_mean():
    rep = MetricReport(per_image=[{"id": "a", "mae": 0.1, "hce": 3}, {"id": "b", "mae": 0.3, "hce": 4}], config={})
    s = rep.summary
    assert s["mae"] == pytest.approx(0.2) and s["hce"] == 3.5 and s["hce_sum"] == 7
