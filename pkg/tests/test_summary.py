import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from phylosparse.gwishart import TraitGraph
from phylosparse.mcmc import ChainTrace
from phylosparse.summary import (
    DEFAULT_BF_THRESHOLD,
    EmptyTraceError,
    InconsistentEstimateError,
    bayes_factors,
    classify_hpd,
    confusion_metrics,
    edge_inclusion_probabilities,
    effective_sample_size,
    estimate_correlation,
    estimate_graph,
    estimate_precision,
    hpd_interval,
    logmse_stratified,
    pair_categories,
    sign_probability,
    summarize,
    write_summary_json,
)

BOUNDARY = math.sqrt(10) / (1 + math.sqrt(10))


def make_trace(graphs, precisions, variant="graphical"):
    graphs = np.asarray(graphs, dtype=np.int8)
    precisions = np.asarray(precisions, dtype=float)
    n = len(precisions)
    meta = {"spec": {"variant": variant}, "trait_labels": [f"t{i}" for i in range(precisions.shape[1])]}
    return ChainTrace(np.arange(1, n + 1), graphs, precisions, 0, 1, n, meta)


def pe_matrix(value, p=2):
    pe = np.full((p, p), value)
    np.fill_diagonal(pe, 0)
    return pe


# -- edge inclusion and graph estimate -------------------------------------------


def test_edge_inclusion_counting():
    trace = make_trace([[1], [1], [0], [1]], [np.eye(2)] * 4)
    assert edge_inclusion_probabilities(trace)[0, 1] == 0.75


def test_edge_inclusion_full_trace_is_one():
    trace = make_trace(np.ones((5, 3)), [np.eye(3)] * 5, "full")
    pe = edge_inclusion_probabilities(trace)
    assert np.all(pe[~np.eye(3, dtype=bool)] == 1)


def test_empty_trace_raises():
    trace = make_trace(np.zeros((0, 1)), np.zeros((0, 2, 2)))
    with pytest.raises(EmptyTraceError):
        edge_inclusion_probabilities(trace)


@pytest.mark.parametrize(
    "pe, included", [(0.7597, False), (0.76, True), (0.5, False), (0.9, True), (1.0, True), (0.0, False)]
)
def test_estimate_graph_examples(pe, included):
    graph, bf = estimate_graph(pe_matrix(pe))
    assert graph.has_edge(0, 1) == included
    if pe < 1:
        assert bf[0, 1] == pytest.approx(pe / (1 - pe))
    else:
        assert bf[0, 1] == math.inf


def test_boundary_pe_is_included():
    assert BOUNDARY == pytest.approx(0.7597, abs=1e-4)
    assert estimate_graph(pe_matrix(BOUNDARY))[0].has_edge(0, 1)
    assert not estimate_graph(pe_matrix(BOUNDARY - 1e-12))[0].has_edge(0, 1)
    assert bayes_factors(pe_matrix(BOUNDARY))[0, 1] == pytest.approx(DEFAULT_BF_THRESHOLD, rel=1e-12)


def test_estimate_graph_rejects_bad_threshold():
    with pytest.raises(ValueError):
        estimate_graph(pe_matrix(0.5), 0.0)


@given(st.floats(0.0, 1.0, exclude_max=True))
def test_bf_pe_bijection(pe):
    included = estimate_graph(pe_matrix(pe))[0].has_edge(0, 1)
    assert included == (pe >= BOUNDARY)
    if abs(pe - BOUNDARY) > 1e-9:
        assert included == (pe / (1 - pe) >= DEFAULT_BF_THRESHOLD)


# -- precision and correlation ---------------------------------------------------


def test_estimate_precision_conditional_means():
    # slot (0, 1) present in samples 0 and 1; k_01 = -0.2, -0.4 there
    ks = []
    for v in (-0.2, -0.4, 0.0, 0.0):
        k = np.eye(3) * 2
        k[0, 1] = k[1, 0] = v
        ks.append(k)
    graphs = [[1, 0, 0], [1, 0, 0], [0, 0, 0], [0, 0, 0]]
    trace = make_trace(graphs, ks)
    g_hat = TraitGraph(3, frozenset({(0, 1)}))
    k_hat = estimate_precision(trace, g_hat)
    assert k_hat[0, 1] == pytest.approx(-0.3)
    assert k_hat[0, 2] == 0 and k_hat[1, 2] == 0
    assert np.allclose(np.diag(k_hat), 2)
    with pytest.raises(InconsistentEstimateError, match=r"\(2, 3\)"):
        estimate_precision(trace, TraitGraph(3, frozenset({(1, 2)})))


def test_estimate_precision_full_trace_is_mean():
    rng = np.random.default_rng(0)
    ks = []
    for _ in range(10):
        a = rng.standard_normal((3, 3))
        ks.append(a @ a.T + 3 * np.eye(3))
    trace = make_trace(np.ones((10, 3)), ks, "full")
    assert np.allclose(estimate_precision(trace, TraitGraph.complete(3)), np.mean(ks, axis=0))


def test_estimate_correlation_examples():
    trace = make_trace([[0]] * 3, [np.eye(2)] * 3)
    assert np.array_equal(estimate_correlation(trace), np.eye(2))
    trace = make_trace([[1]], [[[1.0, -0.5], [-0.5, 1.0]]])
    assert np.allclose(estimate_correlation(trace), [[1, 0.5], [0.5, 1]])


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_correlation_estimate_is_valid(p, seed):
    rng = np.random.default_rng(seed)
    ks = []
    for _ in range(25):
        a = rng.standard_normal((p, p))
        ks.append(a @ a.T + 0.1 * np.eye(p))
    r = estimate_correlation(make_trace(np.ones((25, p * (p - 1) // 2)), ks))
    assert np.array_equal(r, r.T)
    assert np.all(np.diag(r) == 1.0)
    assert np.all(np.abs(r) <= 1.0)


# -- HPD and sign probability ----------------------------------------------------


def test_hpd_standard_normal():
    x = np.random.default_rng(1).standard_normal(100_000)
    lo, hi = hpd_interval(x, 0.95)
    assert lo == pytest.approx(-1.96, abs=0.05) and hi == pytest.approx(1.96, abs=0.05)


def test_hpd_degenerate_cases():
    assert hpd_interval(np.full(30, 2.5), 0.9) == (2.5, 2.5)
    x = np.random.default_rng(2).standard_normal(50)
    assert hpd_interval(x, 1.0) == (x.min(), x.max())
    with pytest.raises(ValueError):
        hpd_interval(np.zeros(19), 0.9)
    with pytest.raises(ValueError):
        hpd_interval(np.zeros(30), 0.0)


def test_hpd_skewed_sample_is_shorter_than_equal_tails():
    x = np.random.default_rng(3).exponential(size=20_000)
    lo, hi = hpd_interval(x, 0.9)
    assert lo < 0.01
    assert hi - lo < np.quantile(x, 0.95) - np.quantile(x, 0.05)
    assert hi == pytest.approx(stats.expon.ppf(0.9), rel=0.05)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-100, 100), min_size=20, max_size=300),
    st.floats(0.05, 1.0),
)
def test_hpd_is_minimal_window(samples, gamma):
    lo, hi = hpd_interval(samples, gamma)
    x = np.sort(samples)
    n = x.size
    m = math.ceil(gamma * n - 1e-12)
    assert np.sum((x >= lo) & (x <= hi)) >= m
    best = min(x[i + m - 1] - x[i] for i in range(n - m + 1))
    assert hi - lo == best


def _corr_trace(r_values):
    ks = [np.linalg.inv(np.array([[1.0, r], [r, 1.0]])) for r in r_values]
    return make_trace(np.ones((len(ks), 1)), ks, "full")


def test_classify_hpd():
    rng = np.random.default_rng(4)
    positive = _corr_trace(rng.uniform(0.3, 0.6, 200))
    assert classify_hpd(positive, 0.95)[0, 1] == 1
    symmetric = _corr_trace(np.concatenate([rng.uniform(0.0, 0.5, 100), -rng.uniform(0.0, 0.5, 100)]))
    assert classify_hpd(symmetric, 0.95)[0, 1] == 0


def test_sign_probability():
    trace = _corr_trace([0.2, 0.3, -0.1, 0.4])
    assert sign_probability(trace)[0, 1] == 0.75
    trace = _corr_trace([0.0, 0.0, -0.1, -0.2])
    assert sign_probability(trace)[0, 1] == 0.5  # zeros count as positive


# -- metrics ---------------------------------------------------------------------


def test_confusion_identity_and_complement():
    truth = TraitGraph(5, frozenset({(0, 1), (1, 2), (3, 4)}))
    m = confusion_metrics(truth, truth)
    assert (m.sensitivity, m.specificity, m.precision_metric, m.f1, m.accuracy) == (1, 1, 1, 1, 1)
    comp = TraitGraph.from_indicators(5, 1 - truth.indicators())
    m = confusion_metrics(comp, truth)
    assert m.sensitivity == 0 and m.specificity == 0


def test_confusion_hand_fixture():
    # 10 slots at p = 5: truth edges (0,1),(0,2); estimate (0,1),(0,3)
    truth = TraitGraph(5, frozenset({(0, 1), (0, 2)}))
    est = TraitGraph(5, frozenset({(0, 1), (0, 3)}))
    m = confusion_metrics(est, truth)
    assert (m.tp, m.fp, m.fn, m.tn) == (1, 1, 1, 7)
    assert m.precision_metric == 0.5 and m.sensitivity == 0.5 and m.f1 == 0.5 and m.accuracy == 0.8
    assert m.as_dict()["precision"] == 0.5


def test_confusion_undefined_ratios():
    m = confusion_metrics(TraitGraph.empty(3), TraitGraph.empty(3))
    assert m.sensitivity is None and m.precision_metric is None and m.f1 is None
    assert m.specificity == 1 and m.accuracy == 1
    with pytest.raises(ValueError):
        confusion_metrics(TraitGraph.empty(3), TraitGraph.empty(4))


@given(st.integers(2, 7), st.data())
def test_confusion_identities(p, data):
    n = p * (p - 1) // 2
    a = data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
    b = data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
    m = confusion_metrics(TraitGraph.from_indicators(p, a), TraitGraph.from_indicators(p, b))
    assert m.tp + m.fp + m.tn + m.fn == n
    assert m.accuracy == pytest.approx((m.tp + m.tn) / n)
    if m.f1 is not None and m.sensitivity + m.precision_metric > 0:
        s, q = m.sensitivity, m.precision_metric
        assert m.f1 == pytest.approx(2 * s * q / (s + q))


def test_pair_categories():
    # 0-1 edge, 1-2 edge, so 0-2 is conditionally independent but correlated; 3 isolated
    k0 = np.array([[2.0, -0.8, 0, 0], [-0.8, 2.0, 0.6, 0], [0, 0.6, 2.0, 0], [0, 0, 0, 1.0]])
    cats = pair_categories(k0)
    assert cats[0, 1] == cats[1, 2] == "CD-D"
    assert cats[0, 2] == "CI-D"
    assert cats[0, 3] == cats[2, 3] == "CI-I"
    assert cats[0, 0] == ""


def test_logmse_examples():
    truth = np.array([[1.0, 0.5, 0.0], [0.5, 1.0, 0.0], [0.0, 0.0, 1.0]])
    cats = pair_categories(truth)
    exact = logmse_stratified([truth], truth, cats)
    assert exact["CI-I"].exact.all() and exact["CI-I"].mean() is None
    off = truth + 1.0 - np.eye(3)
    res = logmse_stratified([off, truth], truth, cats)
    assert res["CD-D"].values[0] == pytest.approx(0.0)
    assert res["CI-I"].values[0] == pytest.approx(0.0)
    assert res["CI-I"].exact.tolist() == [False, True]
    assert "CI-D" not in res


def test_effective_sample_size():
    rng = np.random.default_rng(5)
    iid = rng.standard_normal(5000)
    assert 4000 < effective_sample_size(iid) < 6500
    ar = np.empty(5000)
    ar[0] = 0
    for t in range(1, 5000):
        ar[t] = 0.9 * ar[t - 1] + rng.standard_normal()
    # AR(1) with phi = 0.9 has ESS = n (1 - phi) / (1 + phi)
    assert effective_sample_size(ar) == pytest.approx(5000 * 0.1 / 1.9, rel=0.35)
    assert effective_sample_size(np.ones(100)) == 100


# -- summary object --------------------------------------------------------------


def test_summarize_and_json(tmp_path):
    rng = np.random.default_rng(6)
    ks, gs = [], []
    for s in range(40):
        k = np.eye(3) * 2
        g = [1, 0, int(s % 4 == 0)]
        k[0, 1] = k[1, 0] = -0.8 + 0.1 * rng.standard_normal()
        if g[2]:
            k[1, 2] = k[2, 1] = 0.1
        ks.append(k)
        gs.append(g)
    summary = summarize(make_trace(gs, ks))
    assert summary.graph_estimate.edges == frozenset({(0, 1)})
    assert summary.precision_estimate[1, 2] == 0
    assert summary.bayes_factors[0, 1] == math.inf
    assert summary.hpd_selection()[0, 1] == 1
    path = write_summary_json(summary, tmp_path / "s.json", {"seed": 1})
    data = json.loads(path.read_text())
    assert data["bf"][0][1] == "inf"
    assert data["graph"] == [[1, 2]]
    assert set(data) >= {"pe", "bf", "graph", "K_hat", "R_hat", "ps", "hpd", "provenance"}
    assert data["hpd"]["gamma"] == 0.95
