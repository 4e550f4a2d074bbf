import csv
import math

import numpy as np
import pytest

from lanechange import models as M
from lanechange import tensor as T
from lanechange.dataset import FrameSet
from lanechange.trainer import AdamState, EvalReport, TrainConfig, adam_step, evaluate, train

TINY = M.NetworkSpec("image", 16, 24, 0.25, groups=2)
TINY_FUSION = M.NetworkSpec("fusion", 16, 24, 0.25, groups=2)

# per-class test counts and correct counts from the three published result tables
COUNTS = (5898, 6033, 12695)
TABLES = {
    "trees": ((587, 880, 12216), (9.95, 14.59, 96.23), 55.56),
    "image": ((5304, 5093, 10640), (89.93, 84.42, 83.81), 85.43),
    "fusion": ((5194, 5350, 10868), (88.06, 88.68, 85.61), 86.95),
}


def tiny_frames(n, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.array([(-1, 1, 0)[i % 3] for i in range(n)])
    imgs = rng.integers(0, 256, (n, 3, 16, 24), dtype=np.uint8)
    imus = rng.standard_normal((n, 6)) * 5 + 10
    return FrameSet(imgs, imus, labels, [str(i) for i in range(n)])


def report_from_table(positives):
    true, pred = [], []
    for k, (n, p) in enumerate(zip(COUNTS, positives)):
        true += [k] * n
        pred += [k] * p + [(k + 1) % 3] * (n - p)
    return EvalReport.from_predictions(true, pred)


# --- Adam ------------------------------------------------------------------


def test_adam_zero_gradient_is_identity():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    state = AdamState()
    for _ in range(5):
        adam_step(p, {"w": np.zeros(3)}, state)
    assert p["w"].tolist() == [1.0, -2.0, 3.0]
    assert not state.m["w"].any() and not state.v["w"].any()
    assert state.t == 5


def test_adam_first_step_closed_form():
    p = {"w": np.array([0.5])}
    adam_step(p, {"w": np.array([1.0])}, AdamState(lr=1e-4))
    assert p["w"][0] == pytest.approx(0.5 - 1e-4 / (1 + 1e-8), abs=1e-15)


def test_adam_matches_recurrence_and_stays_within_two_alpha():
    rng = np.random.default_rng(0)
    lr = 1e-3
    for stream in range(20):
        scale = 10.0 ** rng.uniform(-6, 3)
        p = {"w": np.zeros(8)}
        state = AdamState(lr=lr)
        m = v = np.zeros(8)
        for t in range(1, 201):
            g = rng.standard_normal(8) * scale * (1 + 5 * (rng.random(8) < 0.05))
            before = p["w"].copy()
            adam_step(p, {"w": g}, state)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            expect = -lr * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
            step = p["w"] - before
            np.testing.assert_allclose(step, expect, rtol=1e-9, atol=1e-18)
            assert np.all(np.abs(step) <= 2 * lr)
            assert np.all(state.v["w"] >= 0)


def test_adam_shape_mismatch_is_contract_error():
    with pytest.raises(T.ContractError):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, AdamState())
    with pytest.raises(T.ContractError):
        adam_step({"w": np.zeros(3)}, {}, AdamState())


# --- training loop ---------------------------------------------------------


def test_train_is_deterministic(tmp_path):
    data = tiny_frames(20)
    cfg = TrainConfig(max_iters=6, val_interval=3, seed=2, log_path=tmp_path / "a.csv")
    a = train(TINY_FUSION, data, cfg, val_set=data)
    cfg.log_path = tmp_path / "b.csv"
    b = train(TINY_FUSION, data, cfg, val_set=data)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_learning_rate_zero_leaves_parameters_unchanged():
    init = M.build(TINY, seed=1)
    res = train(TINY, tiny_frames(10), TrainConfig(max_iters=3, lr=0.0), params=init)
    assert all(np.array_equal(res.final_params[k], init[k]) for k in init)


def test_single_sample_step_decreases_loss():
    for seed in range(5):
        spec = TINY_FUSION if seed % 2 else TINY
        data = tiny_frames(1, seed)
        params = M.build(spec, seed=seed, dtype=np.float64)
        imus = None if spec.variant == "image" else (data.imus - data.imus.mean(0))

        def loss(p):
            z = M.logits(spec, p, data.float_images().astype(np.float64), imus)
            return float(T.softmax_cross_entropy(z, np.eye(3)[data.class_indices]).data)

        res = train(spec, data, TrainConfig(max_iters=1, lr=1e-6, batch_size=16), params=params)
        assert loss(res.final_params) < loss(params)


def test_batches_per_epoch_and_short_batch_average(monkeypatch):
    seen = []
    orig = T.softmax_cross_entropy

    def spy(z, label):
        out = orig(z, label)
        zz = np.asarray(z.data, np.float64)
        p = np.exp(zz - zz.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        per_row = -np.log(np.clip((p * label).sum(1), 1e-7, 1))
        seen.append((len(label), float(out.data), per_row.mean()))
        return out

    monkeypatch.setattr(T, "softmax_cross_entropy", spy)
    n = 40
    res = train(TINY, tiny_frames(n), TrainConfig(max_iters=2 * math.ceil(n / 16)))
    assert [s[0] for s in seen] == [16, 16, 8, 16, 16, 8]
    for _, got, want in seen:
        assert got == pytest.approx(want, rel=1e-5)
    assert len(res.log) == 6


def test_epoch_visits_every_sample_once(monkeypatch):
    batches = []
    orig = M.logits

    def spy(spec, params, images, imus=None):
        batches.append(np.asarray(T.as_tensor(images).data).copy())
        return orig(spec, params, images, imus)

    import lanechange.trainer as tr

    monkeypatch.setattr(tr, "logits", spy)
    data = tiny_frames(20)
    train(TINY, data, TrainConfig(max_iters=2))
    seen = np.concatenate(batches)
    assert len(seen) == 20
    key = lambda a: sorted(x.tobytes() for x in a)  # noqa: E731
    assert key(seen) == key(data.float_images())


def test_log_layout_and_selection(tmp_path):
    data = tiny_frames(12)
    log = tmp_path / "log.csv"
    res = train(TINY, data, TrainConfig(max_iters=5, val_interval=2, select="accuracy", log_path=log), val_set=data)
    rows = list(csv.reader(open(log)))
    assert rows[0] == ["iteration", "train_loss", "train_acc", "val_loss", "val_acc"]
    assert [r[0] for r in rows[1:]] == ["1", "2", "3", "4", "5"]
    val_rows = [r for r in res.log if r.val_acc is not None]
    assert [r.iteration for r in val_rows] == [2, 4, 5]
    best = max(val_rows, key=lambda r: (r.val_acc, -r.iteration))
    assert res.best_iteration == best.iteration
    assert rows[1][3] == "" and rows[2][3] != ""


def test_train_errors():
    empty = tiny_frames(3).subset([])
    with pytest.raises(ValueError):
        train(TINY, empty, TrainConfig(max_iters=1))
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(select="f1")


# --- evaluation reports ----------------------------------------------------


@pytest.mark.parametrize("table", ["trees", "image", "fusion"])
def test_report_reproduces_published_tables(table):
    positives, per_class, total = TABLES[table]
    rep = report_from_table(positives)
    np.testing.assert_allclose(rep.class_accuracy, per_class, atol=0.005 + 1e-9)
    assert rep.total_accuracy == pytest.approx(total, abs=0.005)
    rows = rep.table()
    assert rows[-1][1:] == [f"{a:.2f}" for a in per_class] + [f"{total:.2f}"]
    assert rows[1][1:] == [*map(str, COUNTS), str(sum(COUNTS))]


def test_report_invariants():
    rng = np.random.default_rng(0)
    true, pred = rng.integers(0, 3, 500), rng.integers(0, 3, 500)
    rep = EvalReport.from_predictions(true, pred)
    assert np.array_equal(rep.positives + rep.negatives, rep.counts)
    assert np.array_equal(rep.confusion.sum(1), np.bincount(true, minlength=3))
    assert rep.total_accuracy == 100.0 * np.trace(rep.confusion) / 500
    assert rep.trivial_guess == 100.0 * np.bincount(true).max() / 500


def test_report_layout():
    rows = report_from_table(TABLES["image"][0]).table()
    assert [r[0] for r in rows] == ["Result", "Testing Data", "Testing Positive", "Testing Negative", "Testing Accuracy"]
    assert rows[0][1:] == ["Class 1", "Class 2", "Class 3", "Total"]
    assert all(len(r) == 5 for r in rows)


def test_constant_classifier_scores_class_prevalence():
    data = tiny_frames(30)
    data.labels[:4] = 0  # make keep the majority class
    rep = evaluate(lambda f: np.full(len(f), 2), data)
    assert rep.class_accuracy.tolist() == [0.0, 0.0, 100.0]
    assert rep.total_accuracy == rep.trivial_guess == 100.0 * (data.labels == 0).mean()


def test_perfect_classifier():
    data = tiny_frames(9)
    rep = evaluate(lambda f: f.class_indices, data)
    assert rep.table()[-1][1:] == ["100.00"] * 4


def test_evaluate_empty_rejected():
    with pytest.raises(ValueError):
        evaluate(lambda f: f.class_indices, tiny_frames(3).subset([]))
