"""Acceptance gate: one PASS/FAIL line per criterion, shown in the terminal summary.

Tolerances are fixed here, not tuned. Criteria 6 to 8 share one synthetic
cross-validation run per mixer (a few minutes on one CPU core).
"""
import numpy as np
import pytest

from deformableformer.data import (AUGMENT_AVAILABLE, AUGMENT_UNAVAILABLE, AVAILABLE,
                                   UNAVAILABLE, DatasetManifest, ImageRecord, augment,
                                   channel_stats, hflip, load_images, make_folds, normalize,
                                   rot90, vflip)
from deformableformer.deform import deform_conv2d_forward
from deformableformer.model import build_model, desk_config, full_config
from deformableformer.tensor import conv2d_forward, softmax_cross_entropy
from deformableformer.training import (AdamW, ConfusionMatrix, TrainConfig, compare_mixers,
                                       compute_metrics, cross_validate, label_indices, predict)
from deformableformer.verify import DEFAULT_TOLERANCE, gradcheck_suite

from .test_training import REFERENCE_RATES

ZERO_OFFSET_TOL = 1e-12
CV_ACCURACY_MIN = 90.0
OVERFIT_STEPS = 200
OVERFIT_LOSS = 0.05

LINES = []


def record(criterion, ok, detail):
    LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
    assert ok, detail


def test_1_metric_reproduction():
    mismatches = []
    for name, ((tp, fn, fp, tn), expect) in REFERENCE_RATES.items():
        shown = compute_metrics(ConfusionMatrix(tp=tp, fp=fp, fn=fn, tn=tn)).display()
        got = (shown["accuracy"], shown["precision"], shown["recall"], shown["specificity"])
        mismatches += [(name, g, e) for g, e in zip(got, expect) if g != e]
    record(1, not mismatches, f"20 rates reproduced exactly, mismatches={mismatches}")


def test_2_zero_offset_equivalence():
    rng = np.random.default_rng(2)
    worst = 0.0
    instances = 120
    for _ in range(instances):
        b, cin, cout = rng.integers(1, 3), rng.integers(1, 9), rng.integers(1, 9)
        h, w = rng.integers(3, 17, size=2)
        k = int(rng.choice([1, 3, 5]))
        x = rng.standard_normal((b, cin, h, w))
        wt = rng.standard_normal((cout, cin, k, k))
        bias = rng.standard_normal(cout)
        out = deform_conv2d_forward(x, np.zeros((b, 2 * k * k, h, w)), wt, bias)
        worst = max(worst, float(np.abs(out - conv2d_forward(x, wt, bias, 1, k // 2)).max()))
    record(2, worst <= ZERO_OFFSET_TOL,
           f"{instances} instances up to (2,8,16,16), max |diff| {worst:.2e} <= {ZERO_OFFSET_TOL}")


def test_3_gradient_oracle():
    errors = gradcheck_suite(seed=0)
    need = {"conv2d", "linear", "norm", "mlp", "deformable_conv", "model"}
    bad = {k: v for k, v in errors.items() if not v < DEFAULT_TOLERANCE}
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    record(3, need <= set(errors) and not bad, f"relative error < {DEFAULT_TOLERANCE}: {detail}")


@pytest.mark.parametrize("side", [224, 1600])
def test_4_shape_ladder(side):
    model = build_model(full_config())
    offset_shapes = []
    for st in model.stages:
        conv = st.blocks[0].mixer.offset_conv
        original = conv.forward

        def spy(x, _f=original):
            out = _f(x)
            offset_shapes.append(out.shape)
            return out
        conv.forward = spy
    logits = model.forward(np.zeros((1, 3, side, side), np.float32))
    expect = [(1, c, side // r, side // r) for c, r in zip((64, 128, 320, 512), (4, 8, 16, 32))]
    ok = (model.stage_shapes == expect and logits.shape == (1, 2)
          and [s[1] for s in offset_shapes] == [18] * 4
          and [s[2:] for s in offset_shapes] == [e[2:] for e in expect])
    record(4, ok, f"{side}x{side}: stages {[s[2] for s in model.stage_shapes]}, "
                  f"offset channels {[s[1] for s in offset_shapes]}, logits {logits.shape}")


def test_5_augmentation_and_folds():
    img = np.random.default_rng(5).random((3, 12, 12))
    group = (np.array_equal(rot90(img, 4), img) and np.array_equal(hflip(hflip(img)), img)
             and np.array_equal(vflip(vflip(img)), img))
    counts = (len(augment(img, AVAILABLE)), len(augment(img, UNAVAILABLE)))
    recs = [ImageRecord(f"a{i}", "a", AVAILABLE) for i in range(145)]
    recs += [ImageRecord(f"u{i}", "u", UNAVAILABLE) for i in range(28)]
    m = make_folds(DatasetManifest(recs), 28, seed=0)
    unavail = [sum(r.label == UNAVAILABLE for r in m.fold(i)) for i in range(28)]
    covered = sorted(r.id for i in range(28) for r in m.fold(i)) == sorted(r.id for r in recs)
    ok = (group and counts == (len(AUGMENT_AVAILABLE), len(AUGMENT_UNAVAILABLE)) == (2, 9)
          and unavail == [1] * 28 and covered)
    record(5, ok, f"x{counts[0]}/x{counts[1]}, group identities {group}, "
                  f"k=28 folds each with one Unavailable {unavail == [1] * 28}, partition {covered}")


@pytest.fixture(scope="module")
def cv_runs(synthetic_dir, tmp_path_factory):
    manifest = make_folds(DatasetManifest.load(synthetic_dir / "manifest.json"), 5, seed=0)
    tcfg = TrainConfig.from_json("configs/desk_train.json")
    out = tmp_path_factory.mktemp("compare")
    reports = compare_mixers(manifest, desk_config(), tcfg, out)
    repeat_dir = tmp_path_factory.mktemp("repeat")
    repeat = cross_validate(manifest, desk_config(), tcfg, repeat_dir, method="deformable")
    return {"manifest": manifest, "reports": reports, "out": out, "repeat": repeat,
            "repeat_dir": repeat_dir}


@pytest.mark.slow
def test_6_trainability(synthetic_dir, cv_runs):
    m = DatasetManifest.load(synthetic_dir / "manifest.json")
    recs = ([r for r in m.records if r.label == AVAILABLE][:5]
            + [r for r in m.records if r.label == UNAVAILABLE][:5])
    x = load_images(m, recs)
    mean, std = channel_stats(x)
    x, y = normalize(x, mean, std), label_indices(recs)
    model = build_model(desk_config(), 0)
    opt = AdamW(model.named_parameters(), TrainConfig())
    steps_to_fit = None
    for step in range(1, OVERFIT_STEPS + 1):
        model.zero_grad()
        loss, g = softmax_cross_entropy(model.forward(x), y)
        if loss < OVERFIT_LOSS and (predict(model, x) == y).all():
            steps_to_fit = step - 1
            break
        model.backward(g)
        opt.step()
    deformable = cv_runs["reports"][0]
    acc = deformable.metrics.accuracy
    same = deformable.aggregate == cv_runs["repeat"].aggregate
    ok = steps_to_fit is not None and acc >= CV_ACCURACY_MIN and same
    record(6, ok, f"10-image overfit (100% train accuracy, loss < {OVERFIT_LOSS}) after "
                  f"{steps_to_fit} steps (<= {OVERFIT_STEPS}); "
                  f"5-fold deformable accuracy {deformable.metrics.display()['accuracy']}% "
                  f"(>= {CV_ACCURACY_MIN}); seeded rerun identical {same}")


@pytest.mark.slow
def test_7_baseline_harness(cv_runs):
    lines = (cv_runs["out"] / "report.csv").read_text().splitlines()
    rows = [l.split(",") for l in lines[1:]]
    ok = ([r[0] for r in rows] == ["deformable", "pooling"]
          and all(len(r) == 9 and all(v not in ("", "nan") for v in r[1:5]) for r in rows)
          and all(rep.status == "ok" for rep in cv_runs["reports"]))
    record(7, ok, "report.csv rows: " + " | ".join(lines[1:]))


@pytest.mark.slow
def test_8_determinism(cv_runs):
    a = cv_runs["reports"][0].aggregate
    b = cv_runs["repeat"].aggregate
    first = (cv_runs["out"] / "deformable" / "report.csv").read_bytes()
    second = (cv_runs["repeat_dir"] / "report.csv").read_bytes()
    record(8, a == b and first == second,
           f"aggregate {a.to_dict()} == {b.to_dict()}, report.csv byte-identical {first == second}")
