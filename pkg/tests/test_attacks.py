import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradsec import nn
from gradsec.attacks.dpia import (block_gradients, dpia_build_dataset, dpia_run, snapshot_rows,
                                  union_batch)
from gradsec.attacks.dria import (DriaConfig, NoSignalError, attacker_model, dria,
                                  replica_gradients)
from gradsec.attacks.gradset import (GradDataset, build_rows, groups_from_sizes, impute_mean,
                                     schedule_mask, simulate_window_missingness)
from gradsec.attacks.metrics import auc, image_loss
from gradsec.attacks.mia import mia_build_dataset, probe_trace
from gradsec.attacks.models import train_attack_model
from gradsec.attacks.optim import adam, lbfgs_lite
from gradsec.attacks.outcome import AttackOutcome, write_preview
from gradsec.shield import ProtectedSet, redact

from oracles import brute_force_auc


# -- metrics -----------------------------------------------------------------

def test_image_loss_examples():
    x = np.random.default_rng(0).random((4, 4, 3))
    assert image_loss(x, x) == 0.0
    assert image_loss([0, 0], [3, 4]) == 5.0
    with pytest.raises(ValueError):
        image_loss(np.zeros(3), np.zeros(4))


def test_auc_examples():
    assert auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert auc([0.5, 0.5], [1, 0]) == 0.5
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])


def test_auc_matches_brute_force_on_a_random_instance():
    rng = np.random.default_rng(5)
    s = rng.integers(0, 10, 50) / 10
    y = rng.integers(0, 2, 50)
    assert auc(s, y) == brute_force_auc(s, y)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 1)), min_size=2, max_size=40))
def test_auc_invariant_under_monotone_transform(pairs):
    s = np.array([p[0] for p in pairs], dtype=float)
    y = np.array([p[1] for p in pairs])
    if y.min() == y.max():
        return
    assert auc(s, y) == auc(np.exp(s / 3.0) + 7.0, y)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=40, unique=True), st.data())
def test_auc_complement_without_ties(scores, data):
    y = np.array(data.draw(st.lists(st.integers(0, 1), min_size=len(scores),
                                    max_size=len(scores))))
    if y.min() == y.max():
        return
    assert auc(scores, y) + auc(scores, 1 - y) == pytest.approx(1.0, abs=1e-12)


# -- gradient tables -----------------------------------------------------------

def _table(col, mask):
    groups = {1: (0, 1)}
    feats = np.array(col, dtype=float).reshape(-1, 1)
    feats[np.array(mask)] = np.nan
    return GradDataset(feats, np.zeros(len(col), int), groups, np.array(mask).reshape(-1, 1))


def test_impute_examples():
    out = impute_mean(_table([1.0, 99.0, 3.0], [False, True, False]))
    np.testing.assert_array_equal(out.features.ravel(), [1.0, 2.0, 3.0])
    assert not out.mask.any()
    clean = _table([1.0, 5.0], [False, False])
    np.testing.assert_array_equal(impute_mean(clean).features, clean.features)
    np.testing.assert_array_equal(impute_mean(_table([4.0, 5.0], [True, True])).features, 0.0)


def test_impute_is_idempotent():
    rng = np.random.default_rng(1)
    rows = [{1: rng.normal(size=3), 2: rng.normal(size=2)} if i % 3 else {2: rng.normal(size=2)}
            for i in range(9)]
    data = build_rows(rows, np.arange(9) % 2, groups_from_sizes({1: 3, 2: 2}))
    once = impute_mean(data)
    np.testing.assert_array_equal(impute_mean(once).features, once.features)


def test_build_rows_masks_absent_layers():
    data = build_rows([{1: np.ones(2)}, {2: np.ones(3)}], [0, 1], groups_from_sizes({1: 2, 2: 3}))
    assert data.width == 5
    assert data.mask.tolist() == [[False, True], [True, False]]
    assert np.isnan(data.features[0, 2:]).all() and np.isnan(data.features[1, :2]).all()
    with pytest.raises(ValueError):
        build_rows([{1: np.ones(3)}], [0], groups_from_sizes({1: 2}))


def test_window_missingness_masks_contiguous_groups():
    data = build_rows([{l: np.ones(1) for l in range(1, 6)}] * 40, np.arange(40) % 2,
                      groups_from_sizes({l: 1 for l in range(1, 6)}))
    out = simulate_window_missingness(data, [0.0, 0.0, 1.0, 0.0], 2, np.random.default_rng(0))
    assert (out.mask == [False, False, True, True, False]).all()
    out = simulate_window_missingness(data, [0.25] * 4, 2, np.random.default_rng(0))
    assert (out.mask.sum(axis=1) == 2).all()


# -- attack classifiers ----------------------------------------------------------

def _rows(X, y):
    return GradDataset(X, y, {1: (0, X.shape[1])}, np.zeros((len(y), 1), bool))


def test_logistic_separates_separable_data():
    X = np.array([[0.0, 0.0], [0.2, 0.1], [0.1, 0.3], [2.0, 2.0], [2.1, 1.9], [1.8, 2.2]])
    y = np.array([0, 0, 0, 1, 1, 1])
    for family in ("logistic", "forest"):
        model = train_attack_model(_rows(X, y), family, seed=0)
        assert auc(model.score(X), y) == 1.0


def test_permuted_labels_give_chance_auc():
    values = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(400, 5))
        y = rng.permutation(np.arange(400) % 2)
        model = train_attack_model(_rows(X[:200], y[:200]), "logistic", seed)
        values.append(auc(model.score(X[200:]), y[200:]))
    assert all(0.4 <= v <= 0.6 for v in values), values


@pytest.mark.parametrize("family", ["logistic", "forest"])
def test_attack_training_is_deterministic(family):
    rng = np.random.default_rng(2)
    X, y = rng.normal(size=(60, 4)), np.arange(60) % 2
    a = train_attack_model(_rows(X, y), family, seed=3)
    b = train_attack_model(_rows(X, y), family, seed=3)
    assert a.score(X).tobytes() == b.score(X).tobytes()
    if family == "logistic":
        assert a.params["w"].tobytes() == b.params["w"].tobytes()


def test_attack_training_errors():
    X = np.zeros((4, 2))
    with pytest.raises(ValueError):
        train_attack_model(_rows(X, np.zeros(4, int)))
    with pytest.raises(ValueError):
        train_attack_model(_rows(X, np.arange(4) % 2), "svm")
    model = train_attack_model(_rows(np.eye(4)[:, :2], np.arange(4) % 2))
    with pytest.raises(ValueError):
        model.score(np.full((1, 2), np.nan))


# -- optimisers --------------------------------------------------------------------

def _rosenbrock(v):
    x, y = v
    f = (1 - x) ** 2 + 100 * (y - x * x) ** 2
    g = np.array([-2 * (1 - x) - 400 * x * (y - x * x), 200 * (y - x * x)])
    return f, g


def test_lbfgs_curve_is_monotone_and_converges():
    x, curve = lbfgs_lite(_rosenbrock, [-1.2, 1.0], 200)
    assert all(b <= a for a, b in zip(curve, curve[1:]))
    np.testing.assert_allclose(x, [1.0, 1.0], atol=1e-4)


def test_adam_returns_best_point():
    x, curve = adam(lambda v: (float(v @ v), 2 * v), np.ones(3), 400, lr=0.05)
    assert len(curve) == 401
    assert float(x @ x) == pytest.approx(min(curve))
    assert min(curve) < 1e-3


# -- DRIA ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_case():
    specs, shape = nn.architecture("tiny")
    model = nn.build_model(specs, shape, seed=1)
    rng = np.random.default_rng(1)
    x = rng.random((1, *shape)).astype(np.float32)
    y = np.eye(4, dtype=np.float32)[[2]]
    return model, x, y


def test_replica_matches_engine_gradients(tiny_case):
    model, x, y = tiny_case
    X = np.repeat(x, 3, axis=0) * np.array([1.0, 0.5, 0.2], np.float32).reshape(3, 1, 1, 1)
    Y = np.eye(4, dtype=np.float32)[[2, 0, 3]]
    _, grads = nn.gradients(model, X, Y)
    for mine, ref in zip(grads.dW, replica_gradients(model, X, Y)):
        if mine is not None:
            np.testing.assert_allclose(mine, ref, rtol=1e-4, atol=1e-6)
    for name in ("lenet5", "alexnet"):
        specs, shape = nn.architecture(name, classes=5, activation="relu")
        m = nn.build_model(specs, shape, seed=0)
        Xr = np.random.default_rng(0).random((2, *shape), dtype=np.float32)
        Yr = np.eye(5, dtype=np.float32)[[1, 4]]
        _, g = nn.gradients(m, Xr, Yr)
        for mine, ref in zip(g.dW, replica_gradients(m, Xr, Yr)):
            if mine is not None:
                np.testing.assert_allclose(mine, ref, rtol=1e-3, atol=1e-6)


def test_dria_starting_at_the_truth_has_zero_match(tiny_case):
    model, x, y = tiny_case
    _, grads = nn.gradients(model, x, y)
    target = {l: grads.dW[i] for l, i in enumerate(model.weighted_index, start=1)}
    cfg = DriaConfig("adam", iterations=1)
    out = dria(None, model, target, cfg, x_true=x[0], init=(x[0], 30.0 * y[0]))
    assert out.curve[0] < 1e-8
    assert out.metric == "ImageLoss"


def test_dria_reconstructs_unprotected_tiny_example(tiny_case):
    model, x, y = tiny_case
    _, grads = nn.gradients(model, x, y)
    target = {l: grads.dW[i] for l, i in enumerate(model.weighted_index, start=1)}
    out = dria(None, model, target, DriaConfig("lbfgs-lite", 300), x_true=x[0])
    assert out.value < 1.0
    assert all(b <= a for a, b in zip(out.curve, out.curve[1:]))
    assert int(np.argmax(out.extra["label_estimate"])) == 2
    assert out.tensor.shape == model.input_shape


def test_dria_adam_run_improves_on_its_start(tiny_case):
    model, x, y = tiny_case
    _, grads = nn.gradients(model, x, y)
    target = {l: grads.dW[i] for l, i in enumerate(model.weighted_index, start=1)}
    out = dria(None, model, target, DriaConfig("adam", 40, 0.05, seed=2))
    assert out.metric == "MatchLoss"
    assert out.curve[-1] < out.curve[0]
    assert out.value == min(out.curve)


def test_dria_without_gradients_has_no_signal(tiny_case):
    model, _, _ = tiny_case
    with pytest.raises(NoSignalError, match="attack has no signal"):
        dria(None, model, {}, DriaConfig())


def test_attacker_model_replaces_only_hidden_layers(tiny_case):
    model, _, _ = tiny_case
    guess = attacker_model(model, {2}, seed=9)
    a, b = model.block_weights(), guess.block_weights()
    assert a[0].tobytes() == b[0].tobytes() and a[2].tobytes() == b[2].tobytes()
    assert a[1].tobytes() != b[1].tobytes()


def test_outcome_serialisation(tmp_path):
    out = AttackOutcome("DRIA", "ImageLoss", 0.5, curve=[2.0, 1.0])
    out.tensor = np.zeros((2, 2, 1))
    d = json.loads(out.save(tmp_path / "o.json").read_text())
    assert d["value"] == 0.5 and "tensor" not in d
    with pytest.raises(ValueError):
        AttackOutcome("MIA", "AUC", 1.5)
    with pytest.raises(ValueError):
        AttackOutcome("XIA", "AUC", 0.5)
    p = write_preview(np.ones((3, 2, 1)), tmp_path / "p.pgm")
    assert p.read_bytes().startswith(b"P5\n2 3\n255\n")


# -- MIA -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def lenet():
    specs, shape = nn.architecture("lenet5")
    return nn.build_model(specs, shape, seed=0)


def test_mia_rows_span_every_parameter(lenet):
    rng = np.random.default_rng(0)
    probes = [probe_trace(lenet, rng.random(lenet.input_shape), np.eye(100)[k]) for k in (3, 8)]
    data = mia_build_dataset([redact(p, ()) for p in probes], [1, 0], lenet)
    assert data.width == sum(lenet.param_counts()) == 900 + 3 * 3600 + 76800
    assert not data.mask.any()
    hidden = mia_build_dataset([redact(p, {5}) for p in probes], [1, 0], lenet)
    assert hidden.mask[:, 4].all() and not hidden.mask[:, :4].any()
    a, b = hidden.groups[5]
    assert np.isnan(hidden.features[:, a:b]).all()


def test_mia_probe_matches_single_example_gradient(lenet):
    x = np.random.default_rng(3).random(lenet.input_shape).astype(np.float32)
    y = np.eye(100, dtype=np.float32)[7]
    trace = probe_trace(lenet, x, y)
    _, g = nn.gradients(lenet, x[None], y[None])
    np.testing.assert_array_equal(trace.get(0, 5, "DW"), g.dW[lenet.weighted_index[4]])


def test_mia_empty_and_mismatched(lenet):
    empty = mia_build_dataset([], [], lenet)
    assert len(empty) == 0 and empty.width == sum(lenet.param_counts())
    p = probe_trace(lenet, np.zeros(lenet.input_shape), np.eye(100)[0])
    with pytest.raises(ValueError):
        mia_build_dataset([redact(p, ())], [1, 0], lenet)
    with pytest.raises(ValueError):
        mia_build_dataset([redact(p, ()), redact(p, {2})], [1, 0], lenet)


# -- DPIA ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def dpia_case():
    specs, shape = nn.architecture("tiny", classes=2)
    m0 = nn.build_model(specs, shape, seed=0)
    rng = np.random.default_rng(0)
    X = rng.random((4, *shape), dtype=np.float32)
    Y = np.eye(2, dtype=np.float32)[[0, 1, 0, 1]]
    _, g = nn.gradients(m0, X, Y)
    m1 = nn.sgd_step(m0, g, 0.1)
    return m0, m1, X, Y


def test_dpia_two_snapshot_rows(dpia_case):
    m0, m1, X, Y = dpia_case
    data = dpia_build_dataset([m0, m1], 0.1, [(X[:2], Y[:2])], [(X[2:], Y[2:])],
                              [ProtectedSet(0)])
    assert len(data) == 2 and data.labels.tolist() == [1, 0]
    assert data.width == sum(m0.param_counts()) and not data.mask.any()


def test_dpia_schedule_masks_protected_groups():
    specs, shape = nn.architecture("lenet5", classes=2)
    m0 = nn.build_model(specs, shape, seed=0)
    m1 = nn.build_model(specs, shape, seed=1)
    X = np.random.default_rng(0).random((2, *shape), dtype=np.float32)
    Y = np.eye(2, dtype=np.float32)[[0, 1]]
    data = dpia_build_dataset([m0, m1], 0.1, [(X, Y)], [(X, Y)], [ProtectedSet(0, {3, 4})])
    assert (data.mask == [False, False, True, True, False]).all()
    snap = snapshot_rows([m0, m1], 0.1, [ProtectedSet(0, {3, 4})], [1])
    assert (snap.mask == [[False, False, True, True, False]]).all()


def test_snapshot_rows_recover_the_applied_gradient(dpia_case):
    m0, m1, X, Y = dpia_case
    rows = snapshot_rows([m0, m1], 0.1, [()], [1])
    g = block_gradients(m0, X, Y)
    for l, (a, b) in rows.groups.items():
        ref = g[l].ravel()
        assert np.linalg.norm(rows.features[0, a:b] - ref) / np.linalg.norm(ref) < 1e-4


def test_dpia_errors(dpia_case):
    m0, m1, X, Y = dpia_case
    with pytest.raises(ValueError):
        dpia_build_dataset([m0], 0.1, [], [], [])
    with pytest.raises(ValueError):
        dpia_build_dataset([m0, m1], 0.1, [], [], [(), ()])
    with pytest.raises(ValueError):
        snapshot_rows([m0, m1], 0.1, [()], [1, 0])


def test_identical_aux_data_carries_no_signal():
    """Same batches on both sides: the attack cannot beat chance."""
    specs, shape = nn.architecture("tiny", classes=2)
    rng = np.random.default_rng(0)
    snaps = [nn.build_model(specs, shape, seed=s) for s in range(21)]
    pools = [(rng.random((4, *shape), dtype=np.float32),
              np.eye(2, dtype=np.float32)[rng.integers(0, 2, 4)]) for _ in range(40)]
    same = lambda t: pools[2 * t:2 * t + 2]  # noqa: E731
    sched = [()] * 20
    data = dpia_build_dataset(snaps, 0.1, same, same, sched)
    half = len(data) // 2  # rows are cycle-ordered: fit on early cycles, score late ones
    train, test = data.subset(np.arange(half)), data.subset(np.arange(half, len(data)))
    for family in ("logistic", "forest"):
        value = dpia_run(train, test, family, 0).value
        assert 0.4 <= value <= 0.6


def test_schedule_mask_and_union_batch():
    data = build_rows([{1: np.ones(1), 2: np.ones(1), 3: np.ones(1)}] * 3, [0, 1, 0],
                      groups_from_sizes({1: 1, 2: 1, 3: 1}))
    out = schedule_mask(data, [0, 1, 1], [ProtectedSet(0, {1}), ProtectedSet(1, {2, 3})])
    assert out.mask.tolist() == [[True, False, False], [False, True, True], [False, True, True]]
    X, Y = union_batch([(np.zeros((2, 3)), np.zeros((2, 1))), (np.ones((1, 3)), np.ones((1, 1)))])
    assert X.shape == (3, 3) and Y[-1, 0] == 1


def test_attacks_ignore_tampered_hidden_buffers(lenet, tiny_case):
    """Overwrite every enclave-held buffer before redaction; attack inputs must not change."""
    from gradsec.shield import removed_keys

    def tampered(trace, protected):
        for key in removed_keys(trace.n_layers, protected, trace.steps) & trace.keys():
            trace.records[key] = np.full_like(trace.records[key], 123.0)
        return trace

    x = np.random.default_rng(4).random(lenet.input_shape)
    clean = [probe_trace(lenet, x, np.eye(100)[k]) for k in (1, 2)]
    dirty = [tampered(probe_trace(lenet, x, np.eye(100)[k]), {2, 5}) for k in (1, 2)]
    a = mia_build_dataset([redact(t, {2, 5}) for t in clean], [1, 0], lenet)
    b = mia_build_dataset([redact(t, {2, 5}) for t in dirty], [1, 0], lenet)
    assert a.features.tobytes() == b.features.tobytes()

    model, xs, ys = tiny_case
    clean_t = probe_trace(model, xs[0], ys[0])
    dirty_t = tampered(probe_trace(model, xs[0], ys[0]), {1})
    runs = []
    for t in (clean_t, dirty_t):
        view = redact(t, {1})
        runs.append(dria(view, model, view.gradients(), DriaConfig("adam", 5), x_true=xs[0]))
    assert runs[0].curve == runs[1].curve and runs[0].value == runs[1].value
