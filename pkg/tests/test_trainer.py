import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protofuse.autodiff import ShapeMismatch, Tensor
from protofuse.model import Model, TrainConfig
from protofuse.molgraph import DatasetRecord, generate_description, parse_smiles
from protofuse.text_encoder import Vocabulary
from protofuse.toy import heavy_atom_dataset, oxygen_dataset
from protofuse.trainer import (
    AdamState,
    LengthMismatch,
    SingleClassInput,
    TooFewRecords,
    adam_step,
    batch_gradients,
    cosine_lr,
    evaluate,
    roc_auc,
    rmse,
    split_dataset,
    train,
)

SMALL = dict(d_g=8, d_t=8, d_p=8, num_layers=2)


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p, q in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


def _records(n_pos, n_neg):
    out = []
    for i in range(n_pos + n_neg):
        g = parse_smiles("C" * (i % 7 + 1) + ("O" if i < n_pos else ""))
        out.append(DatasetRecord("x", int(i < n_pos), generate_description(g), g))
    return out


# ----------------------------------------------------------------- splits


def test_stratified_split_arithmetic():
    recs = _records(50, 50)
    tr, va, te = split_dataset(recs, seed=0, task_kind="classification")
    assert (len(tr), len(va), len(te)) == (80, 10, 10)
    for part, k in ((tr, 40), (va, 5), (te, 5)):
        assert sum(r.target for r in part) == k


def test_split_deterministic_and_partition():
    recs = _records(13, 24)
    a = split_dataset(recs, 3, "classification")
    b = split_dataset(recs, 3, "classification")
    assert all([id(r) for r in x] == [id(r) for r in y] for x, y in zip(a, b))
    ids = [id(r) for part in a for r in part]
    assert sorted(ids) == sorted(id(r) for r in recs) and len(set(ids)) == len(ids)


def test_regression_split_sizes():
    tr, va, te = split_dataset(heavy_atom_dataset(80, 0), 0, "regression")
    assert (len(tr), len(va), len(te)) == (64, 8, 8)


def test_split_too_few():
    with pytest.raises(TooFewRecords):
        split_dataset(_records(4, 5), 0, "classification")


# ------------------------------------------------------------------ adam


def test_adam_zero_grad_no_decay():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1, weight_decay=0.0)
    assert np.array_equal(p["w"].value, [1.0, -2.0])


def test_adam_first_step_closed_form():
    g = np.array([0.5, -3.0, 1e-3])
    p = {"w": Tensor(np.zeros(3))}
    adam_step(p, {"w": g}, AdamState(), lr=0.01, weight_decay=0.0)
    assert np.allclose(p["w"].value, -0.01 * g / (np.abs(g) + 1e-8), atol=1e-15)


def test_adam_decay_only():
    p = {"w": Tensor(np.array([2.0, -4.0]))}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1, weight_decay=0.5)
    assert np.allclose(p["w"].value, np.array([2.0, -4.0]) * (1 - 0.05), atol=1e-15)


def test_adam_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        adam_step({"w": Tensor(np.zeros(2))}, {"w": np.zeros(3)}, AdamState(), 0.1, 0.0)


def test_cosine_examples():
    assert cosine_lr(0, 100, 0.3) == 0.3
    assert cosine_lr(100, 100, 0.3) == pytest.approx(0.0, abs=1e-17)
    assert cosine_lr(50, 100, 0.3) == pytest.approx(0.15, abs=1e-15)
    lrs = [cosine_lr(s, 37, 1.0) for s in range(38)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


# --------------------------------------------------------------- metrics


def test_auc_examples():
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert roc_auc([0.9, 0.6, 0.4, 0.2], [1, 0, 1, 0]) == 0.75
    assert roc_auc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
    with pytest.raises(SingleClassInput):
        roc_auc([0.1, 0.2], [1, 1])


def test_auc_brute_force_200():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 31))
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 0, 1
        # coarse grid so ties occur
        scores = rng.integers(0, 6, size=n) / 5.0
        assert roc_auc(scores, labels) == brute_auc(scores, labels)


def test_rmse_examples():
    assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rmse([3.0, 4.0], [0.0, 0.0]) == pytest.approx(math.sqrt(12.5), abs=1e-15)
    assert rmse([3.0, 4.0], [0.0, 0.0]) == pytest.approx(3.5355, abs=1e-4)
    with pytest.raises(LengthMismatch):
        rmse([1.0], [1.0, 2.0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=20))
def test_rmse_symmetric(pairs):
    a, b = zip(*pairs)
    assert rmse(a, b) == rmse(b, a)


# ---------------------------------------------------------------- training


def test_epochs_zero_keeps_init():
    recs = oxygen_dataset(20, 0)
    cfg = TrainConfig(epochs=0, **SMALL)
    res = train(cfg, recs)
    assert res.history == []
    init = Model.init(cfg, Vocabulary.build(r.description for r in res.splits[0]))
    for name, t in init.named_tensors().items():
        assert np.array_equal(t.value, res.model.named_tensors()[name].value)


def test_pred_only_loss_decreases():
    recs = oxygen_dataset(20, 1)
    cfg = TrainConfig(epochs=10, lr=1e-3, batch_size=64, lambda_align=0.0, lambda_proto=0.0, **SMALL)
    losses = [row["train_loss"] for row in train(cfg, recs).history]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_same_seed_identical_history():
    recs = oxygen_dataset(20, 2)
    cfg = TrainConfig(epochs=3, **SMALL)
    assert train(cfg, recs).history == train(cfg, recs).history


def test_no_al_matches_zero_lambda_align():
    recs = oxygen_dataset(20, 3)
    a = train(TrainConfig(epochs=3, no_al=True, **SMALL), recs)
    b = train(TrainConfig(epochs=3, lambda_align=0.0, **SMALL), recs)
    assert a.history == b.history
    for name, t in a.model.named_tensors().items():
        assert np.array_equal(t.value, b.model.named_tensors()[name].value)


def test_threaded_gradients_match_serial():
    recs = oxygen_dataset(24, 4)
    model = Model.init(TrainConfig(**SMALL), Vocabulary.build(r.description for r in recs))
    names = list(model.named_tensors())
    v1, g1, _ = batch_gradients(model, recs, names, threads=0)
    v2, g2, _ = batch_gradients(model, recs, names, threads=3)
    assert v1 == pytest.approx(v2, abs=1e-12)
    for a, b in zip(g1, g2):
        assert np.allclose(a, b, atol=1e-12)


def test_best_epoch_restored():
    recs = oxygen_dataset(30, 5)
    res = train(TrainConfig(epochs=5, lr=1e-3, **SMALL), recs)
    best = res.history[res.best_epoch - 1]["val_metric"]
    assert evaluate(res.model, res.splits[1]).metric == best
    assert best == max(row["val_metric"] for row in res.history)


def test_memorized_toy_train_auc():
    recs = oxygen_dataset(30, 6)
    # train, validate and select on the same set so the model is asked to memorize it
    res = train(TrainConfig(epochs=300, lr=1e-2, batch_size=32, **SMALL), recs, splits=(recs, recs, recs))
    assert evaluate(res.model, recs).metric == 1.0


def test_constant_regression_predictor_rmse_is_std():
    recs = heavy_atom_dataset(30, 0)
    cfg = TrainConfig(task_kind="regression", **SMALL)
    model = Model.init(cfg, Vocabulary.build(r.description for r in recs))
    y = np.array([r.target for r in recs])
    model.target_mean = float(y.mean())  # zero heads predict exactly this
    report = evaluate(model, recs)
    assert report.metric == pytest.approx(y.std(), rel=1e-12)
    assert len(report.predictions) == len(recs)


def test_no_up_uses_two_spaces():
    recs = oxygen_dataset(20, 7)
    model = Model.init(TrainConfig(no_up=True, **SMALL), Vocabulary.build(r.description for r in recs))
    names = model.named_tensors()
    assert "proto_text.prototypes" in names and "proto.prototypes" in names
    loss, info = model.batch_loss(model.make_batch(recs))
    assert info["align"] == 0.0
