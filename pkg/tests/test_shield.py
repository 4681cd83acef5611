import itertools

import numpy as np
import pytest

from gradsec import nn
from gradsec.attacks.gradset import build_rows, groups_from_sizes
from gradsec.attacks.models import trainer
from gradsec.shield import (DynamicPolicy, NoPolicy, PolicyError, ProtectedSet, StaticPolicy,
                            dynamic_footprints, evaluate_vmw, memory_footprint, parse_policy,
                            redact, removed_keys, resolve_policy, schedule, tune_vmw,
                            validate_policy, window_layers, window_locations)
from gradsec.trace import RawTrace, record_step

from oracles import footprint_oracle, lenet5_element_counts


@pytest.fixture(scope="module")
def lenet():
    specs, shape = nn.architecture("lenet5")
    return nn.build_model(specs, shape, seed=0)


def _trace(n_steps=1, seed=0):
    specs, shape = nn.architecture("lenet5", classes=10)
    model = nn.build_model(specs, shape, seed=seed)
    rng = np.random.default_rng(seed)
    X = rng.random((2, *shape), dtype=np.float32)
    Y = np.eye(10, dtype=np.float32)[[1, 7]]
    trace = RawTrace(model.n)
    for s in range(n_steps):
        cache, grads = nn.gradients(model, X, Y)
        new = nn.sgd_step(model, grads, 0.1)
        record_step(trace, s, model, cache, grads, new)
        model = new
    return trace


def test_window_locations_examples():
    assert window_locations(5, 2) == 4
    assert window_locations(5, 5) == 1
    assert window_locations(8, 3) == 6
    with pytest.raises(PolicyError):
        window_locations(5, 6)
    with pytest.raises(PolicyError):
        window_locations(5, 0)


@pytest.mark.parametrize("n", range(1, 13))
def test_window_locations_enumeration(n):
    for size in range(1, n + 1):
        windows = {tuple(range(s, s + size)) for s in range(1, n + 1) if s + size - 1 <= n}
        assert window_locations(n, size) == len(windows)
        assert {tuple(sorted(window_layers(loc, size)))
                for loc in range(1, window_locations(n, size) + 1)} == windows


def test_resolve_static_and_none():
    rng = np.random.default_rng(0)
    for t in (0, 5, 99):
        assert resolve_policy(StaticPolicy([2, 5]), t, rng).protected == {2, 5}
        assert resolve_policy(NoPolicy(), t, rng).protected == frozenset()


def test_degenerate_dynamic_always_first_window():
    sched = schedule(DynamicPolicy(2, [1, 0, 0, 0]), 50, seed=3)
    assert all(p.protected == {1, 2} and p.location == 1 for p in sched)


def test_schedule_is_seeded():
    pol = DynamicPolicy(2, [0.25] * 4)
    a = [p.location for p in schedule(pol, 40, 1)]
    assert a == [p.location for p in schedule(pol, 40, 1)]
    assert a != [p.location for p in schedule(pol, 40, 2)]


def test_validate_policy():
    validate_policy(StaticPolicy([1, 5]), 5)
    validate_policy(DynamicPolicy(2, [0.2, 0.1, 0.6, 0.1]), 5)
    for bad in (StaticPolicy([]), StaticPolicy([0]), StaticPolicy([6]),
                DynamicPolicy(2, [0.2, 0.1, 0.6]), DynamicPolicy(2, [0.2, 0.1, 0.5, 0.1]),
                DynamicPolicy(2, [1.2, -0.1, -0.1, 0.0]), DynamicPolicy(6, [1.0])):
        with pytest.raises(PolicyError):
            validate_policy(bad, 5)


def test_parse_policy():
    assert parse_policy("none") == NoPolicy()
    assert parse_policy("static:2,5") == StaticPolicy([2, 5])
    assert parse_policy("dynamic:2:0.2,0.1,0.6,0.1") == DynamicPolicy(2, [0.2, 0.1, 0.6, 0.1])
    assert parse_policy(DynamicPolicy(3, [0.5, 0.5]).describe()) == DynamicPolicy(3, [0.5, 0.5])
    for bad in ("static:x", "random", "dynamic:two:1"):
        with pytest.raises(PolicyError):
            parse_policy(bad)


def test_redact_empty_set_is_identity():
    trace = _trace()
    view = redact(trace, ProtectedSet(0))
    assert view.mask == frozenset()
    assert view.records.keys() == trace.records.keys()
    assert all(np.array_equal(view.records[k], trace.records[k]) for k in trace.records)


def test_redact_two_and_five():
    view = redact(_trace(), {2, 5})
    assert sorted(view.gradients()) == [1, 3, 4]
    assert view.observable_layers() == [1, 3, 4]
    for f in ("W", "DW", "Z", "DELTA"):
        assert view.get(0, 2, f) is None and view.get(0, 5, f) is None
    assert view.get(0, 5, "A") is None  # softmax output stays inside
    assert view.get(0, 1, "A") is not None  # layer 1 output is computed outside
    assert view.get(0, 4, "A") is not None
    assert view.get(0, 4, "BDELTA") is not None  # boundary error leaves the enclave


def test_redact_adjacent_pair():
    view = redact(_trace(), {2, 3})
    assert view.get(0, 1, "A") is not None
    assert view.get(0, 2, "A") is None
    assert view.get(0, 2, "BDELTA") is None
    assert view.get(0, 3, "A") is not None and view.get(0, 3, "BDELTA") is not None
    assert all(view.get(0, l, f) is None for l in (2, 3) for f in ("W", "DW", "Z", "DELTA"))


def test_redact_first_layer_hides_input():
    view = redact(_trace(), {1})
    assert view.get(0, 0, "A") is None


def test_mask_and_view_partition_the_trace():
    trace = _trace(n_steps=2)
    for r in range(0, 6):
        for combo in itertools.combinations(range(1, 6), r):
            view = redact(trace, combo)
            assert view.mask.isdisjoint(view.records.keys())
            assert view.mask | view.records.keys() == trace.keys()
            assert view.mask == removed_keys(5, combo, trace.steps) & trace.keys()


def test_redaction_copies_buffers():
    trace = _trace()
    view = redact(trace, {3})
    for k, v in view.records.items():
        assert not np.shares_memory(v, trace.records[k])


def test_redact_rejects_out_of_range():
    with pytest.raises(PolicyError):
        redact(_trace(), {6})


def test_footprint_empty_and_equal_twins(lenet):
    assert memory_footprint(lenet, [], 32).bytes_total == 0
    assert memory_footprint(lenet, [3], 32).bytes_total == memory_footprint(lenet, [4], 32).bytes_total


def test_footprint_matches_element_count_oracle(lenet):
    singles = {}
    for r in range(1, 6):
        for combo in itertools.combinations(range(1, 6), r):
            fp = memory_footprint(lenet, combo, 32)
            assert fp.bytes_total == footprint_oracle(combo, 32)
            assert fp.bytes_total == sum(fp.buffers.values())
            if r == 1:
                singles[combo[0]] = fp.bytes_total
    assert singles[1] == max(singles[l] for l in (1, 2, 3, 4))
    assert lenet5_element_counts(32)[5]["W"] == 76800


def test_footprint_scales_with_batch(lenet):
    a = memory_footprint(lenet, [2], 1).bytes_total
    b = memory_footprint(lenet, [2], 2).bytes_total
    w = 2 * 4 * 12 * 5 * 5 * 12
    assert (b - w) == 2 * (a - w)


def test_dynamic_footprints(lenet):
    fp = dynamic_footprints(lenet, DynamicPolicy(2, [0.2, 0.1, 0.6, 0.1]), 32)
    per = fp["per_location"]
    assert set(per) == {1, 2, 3, 4}
    assert per[1] == memory_footprint(lenet, [1, 2], 32).bytes_total
    assert fp["max"] == max(per.values())
    assert fp["mean"] == pytest.approx(0.2 * per[1] + 0.1 * per[2] + 0.6 * per[3] + 0.1 * per[4])


def _column_data(n, seed, informative_layer=1):
    """Three one-column groups; only ``informative_layer`` separates the classes."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    rows = []
    for label in y:
        row = {l: rng.normal(size=1) for l in (1, 2, 3)}
        row[informative_layer] = row[informative_layer] + 4.0 * label
        rows.append(row)
    return build_rows(rows, y, groups_from_sizes({1: 1, 2: 1, 3: 1}))


def test_tune_vmw_single_candidate():
    train, val = _column_data(60, 0), _column_data(60, 1)
    vmw, aucs = tune_vmw([(0.5, 0.5)], train, val, trainer("logistic", 0), size=2)
    assert vmw == (0.5, 0.5) and len(aucs) == 1


def test_tune_vmw_prefers_hiding_the_informative_group():
    train, val = _column_data(80, 0), _column_data(80, 1)
    cands = [(0.0, 1.0), (1.0, 0.0)]
    vmw, aucs = tune_vmw(cands, train, val, trainer("logistic", 0), size=2)
    assert vmw == (1.0, 0.0)  # window {1,2} always covers the informative layer 1
    assert aucs[1] < 0.7  # only noise columns remain
    assert aucs[0] > 0.9


def test_tune_vmw_returns_grid_minimum():
    train, val = _column_data(80, 2, informative_layer=2), _column_data(80, 3, informative_layer=2)
    cands = [(0.9, 0.1, 0.0), (0.1, 0.1, 0.8), (0.3, 0.4, 0.3), (0.0, 0.0, 1.0)]
    vmw, aucs = tune_vmw(cands, train, val, trainer("logistic", 0), size=1)
    redo = [evaluate_vmw(c, 1, train, val, trainer("logistic", 0)) for c in cands]
    assert redo == aucs
    assert vmw == cands[int(np.argmin(redo))]


def test_tune_vmw_rejects_bad_candidates():
    train = _column_data(20, 0)
    with pytest.raises(PolicyError):
        tune_vmw([], train, train, trainer("logistic"), size=2)
    with pytest.raises(PolicyError):
        tune_vmw([(0.5, 0.4)], train, train, trainer("logistic"), size=2)
