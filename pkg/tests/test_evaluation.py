import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from earseg.dataio import RetinalSample, synth_vessels
from earseg.evaluation import (
    ConfusionCounts,
    MetricsReport,
    confusion,
    count_colors,
    cross_validate,
    crossval_csv,
    evaluate,
    mean_metrics,
    metrics,
    predict_masks,
    render_overlay,
)
from earseg.trainer import TrainConfig, train_stage1


def confusion_oracle(pred, gt, fov):
    c = {"tp": 0, "tn": 0, "fp": 0, "fn": 0}
    for p, g, f in zip(pred.ravel(), gt.ravel(), fov.ravel()):
        if not f:
            continue
        key = ("t" if p == g else "f") + ("p" if p else "n")
        c[key] += 1
    return ConfusionCounts(**c)


def test_confusion_example():
    pred = np.array([[1, 1, 0], [0, 0, 0]])
    gt = np.array([[1, 0, 1], [0, 0, 0]])
    assert confusion(pred, gt) == ConfusionCounts(tp=1, tn=3, fp=1, fn=1)


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_confusion_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    pred, gt, fov = rng.integers(0, 2, (3, 6, 7))
    assert confusion(pred, gt, fov) == confusion_oracle(pred, gt, fov)
    assert confusion(pred, gt).total == 42


def test_confusion_shape_checks():
    with pytest.raises(ValueError):
        confusion(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        confusion(np.zeros((2, 2)), np.zeros((2, 2)), np.ones((3, 3)))


def test_metrics_example():
    m = metrics(ConfusionCounts(tp=2, tn=6, fp=1, fn=1))
    assert m["acc"] == pytest.approx(0.8)
    assert m["se"] == pytest.approx(2 / 3)
    assert m["sp"] == pytest.approx(6 / 7)
    assert m["miou"] == pytest.approx(0.5 * (2 / 4 + 6 / 8))
    assert m["miou_pct"] == pytest.approx(100 * m["miou"])
    assert m["degenerate"] == []


def test_perfect_prediction():
    m = metrics(ConfusionCounts(tp=5, tn=20))
    assert (m["acc"], m["se"], m["sp"], m["miou"]) == (1.0, 1.0, 1.0, 1.0)


def test_no_vessels_is_flagged_degenerate():
    m = metrics(ConfusionCounts(tn=10))
    assert m["se"] == 1.0 and m["miou"] == 1.0
    assert set(m["degenerate"]) == {"se", "iou_vessel"}


def test_empty_counts_raise():
    with pytest.raises(ValueError):
        metrics(ConfusionCounts())


@settings(max_examples=100, deadline=None)
@given(st.tuples(*[st.integers(1, 500)] * 4))
def test_accuracy_is_prevalence_weighted(counts):
    c = ConfusionCounts(*counts)
    m = metrics(c)
    p = (c.tp + c.fn) / c.total
    assert m["acc"] == pytest.approx(p * m["se"] + (1 - p) * m["sp"])
    for k in ("acc", "se", "sp", "miou"):
        assert 0.0 <= m[k] <= 1.0


def test_mean_metrics_is_macro():
    out = mean_metrics([{"acc": 0.8, "se": 0.5, "sp": 1.0, "miou": 0.6},
                        {"acc": 0.9, "se": 0.7, "sp": 0.9, "miou": 0.8}])
    assert out["acc"] == pytest.approx(0.85)
    assert out["miou_pct"] == pytest.approx(70.0)


def test_report_aggregate_is_micro():
    counts = {"b": ConfusionCounts(tp=1, tn=1), "a": ConfusionCounts(tp=0, tn=6, fn=2)}
    rep = MetricsReport.from_counts(counts)
    assert [r["id"] for r in rep.per_image] == ["a", "b"]
    assert rep.aggregate["se"] == pytest.approx(1 / 3)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "id,tp,tn,fp,fn,acc,sp,se,miou,miou_pct"
    assert lines[-1].startswith("aggregate,1,7,0,2,")


def test_report_requires_samples():
    with pytest.raises(ValueError, match="no samples"):
        MetricsReport.from_counts({})


# model-level evaluation

@pytest.fixture(scope="module")
def small():
    data = synth_vessels(4, 32, np.random.default_rng(8))
    cfg = TrainConfig(stage1_epochs=2, stage2_epochs=1, channels=8, batch_size=2)
    return data, cfg, train_stage1(data, cfg)


def test_fusion_requires_attention_weights(small):
    data, _, ck = small
    with pytest.raises(ValueError, match="attention"):
        predict_masks(ck, data, fuse=True)
    with pytest.raises(ValueError, match="no samples"):
        evaluate(ck, [])


def test_evaluate_is_deterministic_and_writes_overlays(tmp_path, small):
    data, _, ck = small
    a = evaluate(ck, data, overlay_dir=tmp_path / "ov")
    b = evaluate(ck, data)
    assert a.to_json() == b.to_json()
    meta = json.loads(a.to_json())["meta"]
    assert meta["fuse"] is False and meta["n_samples"] == 4 and meta["epoch"] == 2
    assert len(list((tmp_path / "ov").glob("*.png"))) == 4


def test_fov_restriction(small):
    data, _, ck = small
    fov = np.zeros((32, 32), np.uint8)
    fov[4:28, 4:28] = 1
    masked = [RetinalSample(s.id, s.image, s.gt, fov) for s in data]
    inside = evaluate(ck, masked)
    everywhere = evaluate(ck, masked, use_fov=False)
    assert inside.aggregate["tp"] + inside.aggregate["tn"] + inside.aggregate["fp"] \
        + inside.aggregate["fn"] == 4 * 24 * 24
    assert inside.meta["fov_restricted"] and not everywhere.meta["fov_restricted"]
    assert inside.aggregate_all_pixels == {**everywhere.aggregate, "id": "aggregate_all_pixels"}
    assert everywhere.aggregate_all_pixels is None


def test_cross_validation_structure(tmp_path, small):
    data, cfg, _ = small
    res = cross_validate(data, 2, cfg, workdir=tmp_path)
    assert res["k"] == 2 and [f["fold"] for f in res["folds"]] == [0, 1]
    assert sorted(i for f in res["folds"] for i in f["test_ids"]) == sorted(s.id for s in data)
    for name in ("baseline", "refined"):
        want = np.mean([f[name]["miou"] for f in res["folds"]])
        assert res["mean"][name]["miou"] == pytest.approx(want)
    assert (tmp_path / "fold1" / "refined.json").is_file()
    assert crossval_csv(res).splitlines()[-1].startswith("mean,refined,")


# overlays

@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_overlay_colors_match_confusion(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((9, 11, 3))
    img[0, 0] = (0.0, 1.0, 0.0)  # a green-ish input pixel must not read as TP
    pred, gt = rng.integers(0, 2, (2, 9, 11))
    assert count_colors(render_overlay(img, pred, gt)) == confusion(pred, gt)


def test_overlay_examples(rng):
    img = rng.random((6, 6, 3))
    gt = (rng.random((6, 6)) > 0.6).astype(np.uint8)
    same = count_colors(render_overlay(img, gt, gt))
    assert same.fp == 0 and same.fn == 0 and same.tp == gt.sum()
    empty = count_colors(render_overlay(img, np.zeros_like(gt), gt))
    assert empty.fn == gt.sum() and empty.tp == 0 and empty.fp == 0


def test_overlay_shape_check():
    with pytest.raises(ValueError):
        render_overlay(np.zeros((4, 4, 3)), np.zeros((4, 5)), np.zeros((4, 5)))
