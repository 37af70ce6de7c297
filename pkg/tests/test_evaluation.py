import math

import numpy as np
import pytest

from centeratt.boxes import Box3D
from centeratt.evaluation import (EvalConfig, Match, ap_aph_for_class, compute_ap_aph, evaluate,
                                  heading_error, match_detections)
from centeratt.matching import rotated_iou_bev


def gt_row(n, cls=0, spacing=10.0):
    return [Box3D(i * spacing, 0.0, 0.0, 4.0, 2.0, 1.5, 0.2 * i, cls) for i in range(n)]


def det(b, score, dx=0.0, dyaw=0.0, cls=None):
    return Box3D(b.cx + dx, b.cy, b.cz, b.l, b.w, b.h, b.yaw + dyaw,
                 b.class_id if cls is None else cls, score)


def random_instance(rng, n_gt=6, n_det=10):
    gts = [Box3D(rng.uniform(-20, 20), rng.uniform(-20, 20), 0, rng.uniform(1, 4),
                 rng.uniform(1, 2), 1.5, rng.uniform(-3, 3), int(rng.integers(3)))
           for _ in range(n_gt)]
    dets = []
    for _ in range(n_det):
        g = gts[int(rng.integers(n_gt))]
        dets.append(det(g, float(rng.random()), dx=rng.normal(0, 0.5),
                        dyaw=rng.uniform(-math.pi, math.pi) * rng.random() ** 3))
    return dets, gts


def test_identical_detection_is_tp():
    g = gt_row(1)
    (m,) = match_detections([det(g[0], 0.9)], g, 0.7)
    assert m.is_tp and m.iou == pytest.approx(1.0) and m.dyaw == pytest.approx(0.0, abs=1e-12)


def test_two_dets_one_gt():
    g = gt_row(1)
    ms = match_detections([det(g[0], 0.4), det(g[0], 0.8, dx=0.1)], g, 0.5)
    by_score = {m.det.score: m for m in ms}
    assert by_score[0.8].is_tp and not by_score[0.4].is_tp


def test_heading_error_wraps():
    assert heading_error(3.0, -3.0) == pytest.approx(2 * math.pi - 6.0)
    assert heading_error(0.0, math.pi) == pytest.approx(math.pi)


def best_first_oracle(dets, gts, thr):
    ious = np.array([[rotated_iou_bev(d, g) if d.class_id == g.class_id else -1.0 for g in gts]
                     for d in dets]).reshape(len(dets), len(gts))
    labels, free = {}, set(range(len(gts)))
    for i in sorted(range(len(dets)), key=lambda k: (-dets[k].score, k)):
        cands = sorted((-ious[i, j], j) for j in free if ious[i, j] >= 0)
        if cands and -cands[0][0] >= thr:
            free.discard(cands[0][1])
            labels[i] = cands[0][1]
        else:
            labels[i] = None
    return labels


def test_matcher_vs_oracle(rng):
    for _ in range(200):
        dets, gts = random_instance(rng)
        ms = match_detections(dets, gts, 0.5)
        oracle = best_first_oracle(dets, gts, 0.5)
        got = {dets.index(m.det): m.gt for m in ms}
        assert got == oracle


def test_single_tp_weights():
    g = gt_row(1)
    r = evaluate([[det(g[0], 0.9)]], [g])
    assert r.ap[0] == 1.0 and r.aph[0] == 1.0
    m = Match(det(g[0], 0.9), 0, 1.0, math.pi / 2)
    ap, aph = ap_aph_for_class([m], 1)
    assert ap == 1.0 and aph == 0.5 * ap


def test_hand_curve():
    g = gt_row(2)
    dets = [det(g[0], 0.9), det(g[0], 0.8, dx=8.0), det(g[1], 0.7)]
    # TP, FP (far from every gt), TP: precisions 1, 1/2, 2/3; recall 0.5, 0.5, 1
    r = evaluate([dets], [g])
    assert r.ap[0] == pytest.approx(0.5 * 1 + 0.5 * (2 / 3))


def test_aph_never_exceeds_ap(rng):
    for _ in range(300):
        dets, gts = random_instance(rng)
        r = evaluate([dets], [gts], EvalConfig(0.5, 0.5, 0.5))
        for c in r.ap:
            assert r.aph[c] <= r.ap[c] + 1e-15


def test_monotone_rescaling_invariance(rng):
    for _ in range(50):
        dets, gts = random_instance(rng)
        scaled = [d.with_score(float(np.exp(3 * d.score) - 0.5)) for d in dets]
        a = evaluate([dets], [gts])
        b = evaluate([scaled], [gts])
        assert a.ap == b.ap and a.aph == b.aph


def test_duplicate_never_helps(rng):
    for _ in range(100):
        gts = gt_row(4, cls=1)
        dets = [det(g, float(rng.random()), dx=rng.normal(0, 0.2)) for g in gts[:3]]
        base = evaluate([dets], [gts]).ap[1]
        dup = det(dets[int(rng.integers(3))], float(rng.random()))
        assert evaluate([dets + [dup]], [gts]).ap[1] <= base + 1e-15


def test_zero_gt_class_excluded():
    g = gt_row(2, cls=0)
    r = evaluate([[det(g[0], 0.9), det(g[1], 0.5, cls=2)]], [g])
    assert r.excluded == [1, 2] and list(r.ap) == [0]
    assert r.mAP == 0.5  # the second vehicle is only detected under the wrong class


def test_empty_detections_score_zero():
    r = evaluate([[]], [gt_row(3)])
    assert r.ap[0] == 0.0 and r.mAPH == 0.0


def test_csv_format():
    g = gt_row(1) + gt_row(1, cls=1)
    r = compute_ap_aph([Match(det(g[0], 0.9), 0, 1.0, math.pi / 2)], {0: 1, 1: 1})
    assert r.to_csv() == "class,ap,aph\nVehicle,100.0,50.0\nPedestrian,0.0,0.0\nmAP,mAPH\n50.0,25.0\n"


def test_config_validation():
    with pytest.raises(ValueError):
        EvalConfig(iou_vehicle=0.0)
    assert EvalConfig().thresholds == {0: 0.7, 1: 0.5, 2: 0.5}
