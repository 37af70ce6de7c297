import numpy as np
import pytest

from centeratt.boxes import Box3D
from centeratt.errors import PrecisionOverflowError, ShapeError
from centeratt.optimize import (EquivalenceReport, align_detections, convert_pipeline_precision,
                                equivalence_check, fold_batchnorm, fold_store, foldable_pairs,
                                keeps_fp32)
from centeratt.pipeline import Pipeline, Variant
from centeratt.tensor import Precision, Tensor, batch_norm, conv2d, mlp_forward
from conftest import oracle_scenes, small_config


def test_fold_hand_example():
    w = np.ones((1, 1, 1, 1)) * 2.0
    wf, bf = fold_batchnorm(w, [1.0], [3.0], [0.5], [2.0], [4.0 - 1e-3])
    # scale = 3 / sqrt(4) = 1.5
    np.testing.assert_allclose(wf.ravel(), [3.0])
    np.testing.assert_allclose(bf, [1.5 * (1.0 - 2.0) + 0.5])


def test_fold_identity_bn_is_noop(rng):
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    wf, bf = fold_batchnorm(w, b, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), eps=1e-300)
    np.testing.assert_allclose(wf, w, rtol=1e-15)
    np.testing.assert_allclose(bf, b, rtol=1e-15)


def test_fold_shape_mismatch():
    with pytest.raises(ShapeError):
        fold_batchnorm(np.ones((2, 1, 1, 1)), np.ones(2), np.ones(3), np.ones(2), np.ones(2),
                       np.ones(2))


def test_random_conv_bn_networks_agree(rng):
    worst = 0.0
    for _ in range(100):
        ci, co = rng.integers(1, 5, size=2)
        k = int(rng.choice([1, 3]))
        x = Tensor(rng.normal(size=(ci, 6, 5)))
        w, b = Tensor(rng.normal(size=(co, ci, k, k))), Tensor(rng.normal(size=co))
        gamma, beta = Tensor(rng.uniform(0.5, 2, co)), Tensor(rng.normal(size=co))
        mean, var = Tensor(rng.normal(size=co)), Tensor(rng.uniform(0.1, 3, co))
        ref = batch_norm(conv2d(x, w, b, 1, k // 2), gamma, beta, mean, var, 1e-3).data
        wf, bf = fold_batchnorm(w, b, gamma, beta, mean, var)
        got = conv2d(x, Tensor(wf), Tensor(bf), 1, k // 2).data
        rel = np.abs(got - ref) / np.maximum(np.abs(ref), 1.0)
        worst = max(worst, float(rel.max()))
    assert worst <= 1e-5


def test_fold_linear(rng):
    x = Tensor(rng.normal(size=(7, 4)))
    w, b = rng.normal(size=(3, 4)), rng.normal(size=3)
    g, bt, mu, var = rng.uniform(0.5, 2, 3), rng.normal(size=3), rng.normal(size=3), \
        rng.uniform(0.5, 2, 3)
    y = x.data.astype(np.float64) @ w.T + b
    ref = (y - mu) / np.sqrt(var + 1e-3) * g + bt
    wf, bf = fold_batchnorm(w, b, g, bt, mu, var)
    got = mlp_forward(x, [(Tensor(wf), Tensor(bf), "none")]).data
    np.testing.assert_allclose(got, ref, rtol=1e-5, atol=1e-5)


def _store(rng):
    return {
        "a.conv.weight": Tensor(rng.normal(size=(2, 1, 3, 3))), "a.conv.bias": Tensor(np.zeros(2)),
        "a.bn.gamma": Tensor(np.ones(2)), "a.bn.beta": Tensor(np.zeros(2)),
        "a.bn.mean": Tensor(np.zeros(2)), "a.bn.var": Tensor(np.ones(2)),
        "m.linear.weight": Tensor(rng.normal(size=(2, 3))), "m.linear.bias": Tensor(np.ones(2)),
        "m.bn.gamma": Tensor(np.full(2, 2.0)), "m.bn.beta": Tensor(np.zeros(2)),
        "m.bn.mean": Tensor(np.zeros(2)), "m.bn.var": Tensor(np.ones(2)),
        "head.weight": Tensor(rng.normal(size=(1, 2))),
    }


def test_fold_store(rng):
    s = _store(rng)
    assert sorted(foldable_pairs(s)) == [("a.conv", "a.bn"), ("m.linear", "m.bn")]
    out = fold_store(s)
    assert not any(".bn." in k for k in out)
    assert "a.bn.gamma" in s  # input untouched
    np.testing.assert_allclose(out["m.linear.bias"].data, 2 / np.sqrt(1 + 1e-3), rtol=1e-6)
    assert out["head.weight"] is s["head.weight"]


def test_precision_conversion(rng):
    s = _store(rng)
    half = convert_pipeline_precision(s, Precision.FP16E)
    assert s["a.conv.weight"].precision is Precision.FP32
    assert half["a.conv.weight"].precision is Precision.FP16E
    assert half["a.bn.gamma"] is s["a.bn.gamma"] and keeps_fp32("a.bn.var")
    again = convert_pipeline_precision(half, Precision.FP16E)
    assert all(again[k].data.tobytes() == half[k].data.tobytes() for k in half)
    for k, t in s.items():
        err = np.abs(half[k].data.astype(np.float64) - t.data)
        assert np.all(err <= np.abs(t.data) * 2.0 ** -11 + 2.0 ** -25)
    back = convert_pipeline_precision(half, Precision.FP32)
    assert back["a.conv.weight"].precision is Precision.FP32


def test_overflow_names_tensor(rng):
    s = _store(rng)
    s["m.linear.bias"] = Tensor(np.array([1.0, 70000.0]))
    with pytest.raises(PrecisionOverflowError) as info:
        convert_pipeline_precision(s, Precision.FP16E)
    assert info.value.names == ["m.linear.bias"]
    assert "m.linear.bias" in str(info.value)


def _box(x, score=0.9, cls=0):
    return Box3D(x, 0.0, 0.0, 4.0, 2.0, 1.5, 0.1, cls, score)


def test_align_detections():
    a = [_box(0.0), _box(10.0), _box(20.0, cls=1)]
    b = [_box(10.2), _box(0.1), _box(20.0, cls=2)]
    assert align_detections(a, b) == [(0, 1), (1, 0)]


def test_equivalence_identical_detector_passes():
    dets = {"s0": [_box(0.0), _box(5.0)], "s1": []}
    rep = equivalence_check(dets.get, dets.get, [("s0", "s0"), ("s1", "s1")])
    assert rep.passed and rep.max_rel_diff == 0.0 and rep.unmatched == 0
    assert rep.count_a == rep.count_b == 2 and rep.scenes == 2


def test_equivalence_reports_worst():
    rep = equivalence_check(lambda s: [_box(0.0, 0.9)], lambda s: [_box(0.0, 0.7)],
                            [("x", None)], tolerance=0.1)
    assert rep.worst == "score" and rep.worst_scene["score"] == "x"
    assert rep.max_abs["score"] == pytest.approx(0.2) and not rep.passed
    csv = rep.to_csv().splitlines()
    assert csv[0] == "tensor,metric,value" and csv[-1] == "overall,pass,0"
    assert "FAIL" in rep.to_text()


def test_report_csv_rows():
    rows = EquivalenceReport(1e-5).to_csv().splitlines()
    assert len(rows) == 1 + 8 + 3 + 4
    assert all(len(r.split(",")) == 3 for r in rows)


@pytest.fixture(scope="module")
def oracle_setup():
    cfg = small_config(mode="oracle")
    return cfg, oracle_scenes(cfg, 3)


def _detector(p):
    return lambda scene: p.run_scene(scene)


def test_folded_pipeline_equivalent(oracle_setup):
    cfg, scenes = oracle_setup
    for v in ("baseline", "centeratt"):
        plain = Pipeline(cfg, Variant(v, v))
        folded = Pipeline(cfg, Variant(v, v, fold_bn=True))
        rep = equivalence_check(_detector(plain), _detector(folded), scenes, tolerance=1e-5)
        assert rep.passed, rep.to_text()
        assert rep.count_a == rep.count_b > 0 and rep.unmatched == 0


def test_fp16_report_well_formed(oracle_setup):
    cfg, scenes = oracle_setup
    a = Pipeline(cfg, Variant("c", "centeratt"))
    b = Pipeline(cfg, Variant("c16", "centeratt", precision="fp16"))
    rep = equivalence_check(_detector(a), _detector(b), scenes, tolerance=1e-2)
    assert rep.count_a == rep.count_b and rep.scenes == 3
    assert np.isfinite(rep.max_rel_diff) and rep.max_rel_diff > 0
    assert rep.passed
