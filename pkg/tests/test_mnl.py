import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ptrchoice.mnl import (
    MNLDesign,
    MNLFitConfig,
    MNLParams,
    choice_probabilities,
    dataset_probabilities,
    fit_mnl,
    load_mnl,
    log_likelihood,
    log_likelihood_gradient,
    predict_dataset,
    save_mnl,
    utility,
)
from ptrchoice.preprocess import EncodedAlternative, EncodedDataset, encode_dataset, fit_preprocessor


def numeric_dataset(sessions, chosen):
    """EncodedDataset from lists of per-alternative numeric rows (no categoricals)."""
    L = max(len(s) for s in sessions)
    F = len(sessions[0][0])
    num = np.zeros((len(sessions), L, F))
    mask = np.zeros((len(sessions), L), dtype=bool)
    for i, s in enumerate(sessions):
        num[i, : len(s)] = s
        mask[i, : len(s)] = True
    return EncodedDataset(
        num,
        np.zeros((len(sessions), L, 0), dtype=np.int64),
        mask,
        np.array([len(s) for s in sessions]),
        np.array(chosen),
        tuple(f"s{i}" for i in range(len(sessions))),
    )


def design(n):
    return MNLDesign(tuple(f"x{i}" for i in range(n)), n, ())


def test_utility_examples():
    params = MNLParams(np.array([-1.0, -0.5]), design(2))
    alt = EncodedAlternative(np.array([0.5, 0.2]), np.zeros(0, dtype=np.int64))
    assert utility(params, alt) == pytest.approx(-0.6, abs=1e-15)
    assert utility(MNLParams(np.zeros(2), design(2)), alt) == 0.0
    bumped = EncodedAlternative(np.array([0.5, 0.9]), np.zeros(0, dtype=np.int64))
    assert utility(params, bumped) - utility(params, alt) == pytest.approx(-0.5 * 0.7, abs=1e-15)


def test_choice_probabilities_examples():
    params = MNLParams(np.array([1.0]), design(1))
    data = numeric_dataset([[[0.0], [0.0]], [[1.0], [0.0]], [[3.0]]], [0, 0, 0])
    np.testing.assert_allclose(choice_probabilities(params, data.session(0)), [0.5, 0.5], atol=1e-15)
    e = math.e
    np.testing.assert_allclose(choice_probabilities(params, data.session(1)), [e / (e + 1), 1 / (e + 1)], atol=1e-15)
    np.testing.assert_allclose(choice_probabilities(params, data.session(1)), [0.73106, 0.26894], atol=1e-5)
    assert choice_probabilities(params, data.session(2)).tolist() == [1.0]


def test_log_likelihood_uniform():
    rng = np.random.default_rng(0)
    sessions = [rng.random((4, 3)) for _ in range(7)]
    data = numeric_dataset(sessions, rng.integers(0, 4, 7))
    ll = log_likelihood(MNLParams(np.zeros(3), design(3)), data)
    assert ll == pytest.approx(7 * math.log(1 / 4), rel=1e-14)


def test_log_likelihood_hand_evaluation():
    sessions = [
        [[0.1, 0.5], [0.3, 0.2], [0.9, 0.9]],
        [[0.0, 1.0], [1.0, 0.0]],
        [[0.2, 0.2], [0.4, 0.1], [0.6, 0.7], [0.8, 0.3]],
    ]
    chosen = [2, 0, 1]
    theta = [-1.3, 0.7]
    expected = 0.0
    for rows, c in zip(sessions, chosen):
        v = [theta[0] * r[0] + theta[1] * r[1] for r in rows]
        expected += v[c] - math.log(sum(math.exp(x) for x in v))
    ll = log_likelihood(MNLParams(np.array(theta), design(2)), numeric_dataset(sessions, chosen))
    assert ll == pytest.approx(expected, abs=1e-13)
    assert ll <= 0


def test_log_likelihood_approaches_zero_when_certain():
    data = numeric_dataset([[[1.0], [0.0]]], [0])
    lls = [log_likelihood(MNLParams(np.array([t]), design(1)), data) for t in (1, 5, 20, 40)]
    assert all(a < b for a, b in zip(lls, lls[1:]))
    assert -1e-15 < lls[-1] <= 0


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    sessions = [rng.random((int(rng.integers(1, 6)), 3)) for _ in range(6)]
    data = numeric_dataset(sessions, [int(rng.integers(0, len(s))) for s in sessions])
    theta = rng.normal(size=3)
    g = log_likelihood_gradient(MNLParams(theta, design(3)), data)
    h = 1e-5
    fd = np.zeros(3)
    for i in range(3):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        fd[i] = (log_likelihood(MNLParams(tp, design(3)), data) - log_likelihood(MNLParams(tm, design(3)), data)) / (2 * h)
    rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-8)
    assert rel.max() < 1e-6


def toy_instance():
    xs = [[0.9, 0.1], [0.3, 0.8], [0.5, 0.4], [0.2, 0.7], [0.6, 0.65]]
    chosen = [0, 0, 1, 1, 0]
    return xs, chosen


def grid_oracle(xs, chosen):
    grid = np.round(np.arange(-10.0, 10.0 + 5e-4, 1e-3), 10)
    ll = np.zeros_like(grid)
    for pair, c in zip(xs, chosen):
        a, b = pair
        va, vb = grid * a, grid * b
        ll += (va if c == 0 else vb) - np.logaddexp(va, vb)
    return grid[np.argmax(ll)]


def test_fit_matches_grid_search_oracle():
    xs, chosen = toy_instance()
    data = numeric_dataset([[[a], [b]] for a, b in xs], chosen)
    params, report = fit_mnl(data, design(1), MNLFitConfig(tol=1e-13, max_iters=20000))
    assert abs(params.theta[0] - grid_oracle(xs, chosen)) < 1e-2


def test_fit_trace_monotone_and_deterministic(synthetic_small):
    p = fit_preprocessor(synthetic_small)
    data = encode_dataset(p, synthetic_small)
    d = MNLDesign.from_preprocessor(p)
    params, report = fit_mnl(data, d, MNLFitConfig(max_iters=300))
    trace = np.array(report.ll_trace)
    assert np.all(np.diff(trace) >= -1e-9 * np.abs(trace[:-1]))
    assert report.final_log_likelihood == trace[-1]
    again, report2 = fit_mnl(data, d, MNLFitConfig(max_iters=300))
    np.testing.assert_array_equal(params.theta, again.theta)
    assert report.ll_trace == report2.ll_trace


def test_separable_data_theta_grows():
    data = numeric_dataset([[[1.0], [0.0]], [[0.8], [0.1]]], [0, 0])
    short, _ = fit_mnl(data, design(1), MNLFitConfig(max_iters=50, tol=0))
    long, rep = fit_mnl(data, design(1), MNLFitConfig(max_iters=500, tol=0))
    assert 0 < short.theta[0] < long.theta[0]
    assert np.all(np.diff(rep.ll_trace) >= 0)


def test_fit_empty_rejected():
    empty = EncodedDataset(
        np.zeros((0, 1, 1)),
        np.zeros((0, 1, 0), dtype=np.int64),
        np.zeros((0, 1), dtype=bool),
        np.zeros(0, dtype=np.int64),
        np.zeros(0, dtype=np.int64),
        (),
    )
    with pytest.raises(ValueError):
        fit_mnl(empty, design(1))


@st.composite
def session_and_theta(draw, min_len=1):
    n = draw(st.integers(min_len, 8))
    f = draw(st.integers(1, 4))
    vals = st.floats(-3, 3, allow_nan=False)
    rows = [[draw(vals) for _ in range(f)] for _ in range(n)]
    theta = np.array([draw(vals) for _ in range(f)])
    return rows, theta


@settings(max_examples=100, deadline=None)
@given(session_and_theta(min_len=3), st.data())
def test_iia_deleting_third_alternative(st_, data):
    rows, theta = st_
    n = len(rows)
    a, b, c = data.draw(st.permutations(range(n)))[:3]
    full = choice_probabilities(MNLParams(theta, design(len(theta))), numeric_dataset([rows], [0]).session(0))
    keep = [j for j in range(n) if j != c]
    reduced = choice_probabilities(MNLParams(theta, design(len(theta))), numeric_dataset([[rows[j] for j in keep]], [0]).session(0))
    before = full[a] / full[b]
    after = reduced[keep.index(a)] / reduced[keep.index(b)]
    assert after == pytest.approx(before, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(session_and_theta(), st.floats(-5, 5))
def test_translation_invariance(st_, shift):
    rows, theta = st_
    if abs(theta[0]) < 0.1:
        theta[0] = 1.0
    rows2 = [[r[0] + shift / theta[0]] + r[1:] for r in rows]
    params = MNLParams(theta, design(len(theta)))
    p1 = choice_probabilities(params, numeric_dataset([rows], [0]).session(0))
    p2 = choice_probabilities(params, numeric_dataset([rows2], [0]).session(0))
    np.testing.assert_allclose(p1, p2, rtol=0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(session_and_theta(), st.data())
def test_order_invariance(st_, data):
    rows, theta = st_
    perm = data.draw(st.permutations(range(len(rows))))
    params = MNLParams(theta, design(len(theta)))
    p = choice_probabilities(params, numeric_dataset([rows], [0]).session(0))
    q = choice_probabilities(params, numeric_dataset([[rows[j] for j in perm]], [0]).session(0))
    np.testing.assert_allclose(q, p[list(perm)], rtol=0, atol=1e-15)
    assert abs(p.sum() - 1.0) < 1e-12


def test_batched_probabilities_match_per_session(synthetic_small):
    p = fit_preprocessor(synthetic_small)
    data = encode_dataset(p, synthetic_small)
    d = MNLDesign.from_preprocessor(p)
    params = MNLParams(np.random.default_rng(1).normal(size=d.width), d)
    probs = dataset_probabilities(params, data)
    for i in range(len(data)):
        n = data.lengths[i]
        np.testing.assert_allclose(probs[i, :n], choice_probabilities(params, data.session(i)), rtol=0, atol=1e-12)
        assert np.all(probs[i, n:] == 0.0)


def test_design_columns_exclude_pad_include_unk(tiny_dataset):
    p = fit_preprocessor(tiny_dataset)
    d = MNLDesign.from_preprocessor(p)
    assert "airline=<UNK>" in d.columns
    assert not any(c.endswith("=<PAD>") for c in d.columns)
    assert d.width == len(p.numeric_columns) + sum(p.cardinality(f) - 1 for f in p.categorical_features)


def test_save_load_round_trip(tmp_path, tiny_dataset):
    p = fit_preprocessor(tiny_dataset)
    data = encode_dataset(p, tiny_dataset)
    d = MNLDesign.from_preprocessor(p)
    params, report = fit_mnl(data, d, MNLFitConfig(max_iters=20))
    path = tmp_path / "m.json"
    save_mnl(path, params, p, report, MNLFitConfig(max_iters=20))
    back, p2, doc = load_mnl(path)
    np.testing.assert_array_equal(back.theta, params.theta)
    assert back.design == params.design
    assert p2.to_dict() == p.to_dict()
    assert doc["config"]["max_iters"] == 20
    preds = predict_dataset(back, p2, tiny_dataset)
    assert [pr.session_id for pr in preds] == tiny_dataset.ids
