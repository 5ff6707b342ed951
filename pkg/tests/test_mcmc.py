import math

import numpy as np
import pytest

from phylosparse.gwishart import GWishartParams, TraitGraph, WishartParams
from phylosparse.mcmc import (
    ChainState,
    GraphConstants,
    InvalidStateError,
    ModelSpec,
    SamplerSettings,
    check_state,
    full_model_gibbs_step,
    graph_mh_step,
    precision_gibbs_step,
    read_trace,
    run_chain,
    run_sampler,
    write_trace,
)
from phylosparse.phylo import RootPrior, compute_delta_pruning, simulate_traits, simulate_tree


def sim1_like(n_taxa=50, seed=0):
    """Three traits: 0-1 strongly conditionally dependent, 2 independent."""
    k0 = np.array([[2.0, -1.6, 0.0], [-1.6, 2.0, 0.0], [0.0, 0.0, 1.0]])
    tree = simulate_tree(n_taxa, rng_seed=seed)
    x = simulate_traits(tree, k0, RootPrior.centered(3), rng_seed=seed + 1)
    return tree, x, k0


def test_model_spec_validation():
    root = RootPrior.centered(3)
    with pytest.raises(ValueError):
        ModelSpec("graphical", root)
    with pytest.raises(ValueError):
        ModelSpec("full", root)
    with pytest.raises(ValueError):
        ModelSpec("other", root, gwishart_prior=GWishartParams(3.0, np.eye(3)))
    with pytest.raises(ValueError):
        ModelSpec("graphical", root, gwishart_prior=GWishartParams(3.0, np.eye(3)), graph_prior="beta")
    spec = ModelSpec.default(4, "full")
    assert spec.wishart_prior.df == 6.0 and spec.p == 4
    assert ModelSpec.from_dict(spec.to_dict()).digest() == spec.digest()


def test_settings_validation():
    with pytest.raises(ValueError):
        SamplerSettings(mc_samples=0)
    with pytest.raises(ValueError):
        SamplerSettings(graph_move_prob=0.0)
    with pytest.raises(ValueError):
        SamplerSettings(norm_const_method="laplace")
    assert SamplerSettings().moves_for(ModelSpec.default(5)) == 20
    assert SamplerSettings().moves_for(ModelSpec.default(5, "full")) == 1


def test_check_state_detects_violations():
    g = TraitGraph(3, frozenset({(0, 1)}))
    rng = np.random.default_rng(0)
    check_state(ChainState(g, np.eye(3), 0, rng))
    bad = np.eye(3)
    bad[0, 2] = bad[2, 0] = 0.1
    with pytest.raises(InvalidStateError):
        check_state(ChainState(g, bad, 0, rng))
    with pytest.raises(InvalidStateError):
        check_state(ChainState(g, -np.eye(3), 0, rng))


def test_precision_gibbs_step_complete_mean():
    p, n = 3, 7
    rng = np.random.default_rng(1)
    a = rng.standard_normal((p, p))
    delta = a @ a.T
    spec = ModelSpec.default(p)
    state = ChainState(TraitGraph.complete(p), np.eye(p), 0, rng)
    acc = np.zeros((p, p))
    for _ in range(5000):
        state = precision_gibbs_step(state, delta, n, spec)
        acc += state.precision
    target = (3 + n + p - 1) * np.linalg.inv(np.eye(p) + delta)
    assert np.linalg.norm(acc / 5000 - target) / np.linalg.norm(target) < 0.05


def test_precision_gibbs_step_preserves_zeros():
    g = TraitGraph(4, frozenset({(0, 1), (1, 2), (2, 3), (0, 3)}))
    state = ChainState(g, np.eye(4), 0, np.random.default_rng(2))
    for _ in range(50):
        state = precision_gibbs_step(state, np.eye(4), 3, ModelSpec.default(4))
        check_state(state)


def test_full_model_gibbs_step_mean():
    p, n = 3, 5
    rng = np.random.default_rng(3)
    a = rng.standard_normal((p, p))
    delta = a @ a.T
    spec = ModelSpec.default(p, "full")
    state = ChainState(TraitGraph.empty(p), np.eye(p), 0, rng)
    acc = np.zeros((p, p))
    for _ in range(5000):
        state = full_model_gibbs_step(state, delta, n, spec)
        acc += state.precision
    assert state.graph == TraitGraph.complete(p)
    target = (p + 2 + n) * np.linalg.inv(np.eye(p) + delta)
    assert np.linalg.norm(acc / 5000 - target) / np.linalg.norm(target) < 0.05


def test_full_model_concentrates():
    k0 = np.array([[1.5, 0.5, 0.0], [0.5, 1.0, -0.3], [0.0, -0.3, 0.8]])
    errors = []
    for n in (50, 200, 800):
        tree = simulate_tree(n, rng_seed=n)
        x = simulate_traits(tree, k0, RootPrior.centered(3), rng_seed=n + 1)
        trace = run_chain(tree, x, ModelSpec.default(3, "full"), 400, 100, 1, rng_seed=4)
        errors.append(np.linalg.norm(trace.precisions.mean(0) - k0))
    assert errors[0] > errors[2] and errors[2] < 0.3


def test_graph_mh_step_with_no_data_accepts_nearly_always():
    p = 4
    spec = ModelSpec.default(p)
    settings = SamplerSettings(mc_samples=2000, prior_mc_samples=2000)
    consts = GraphConstants(spec.gwishart_prior, np.zeros((p, p)), 0, settings, seed=1)
    state = ChainState(TraitGraph.empty(p), np.eye(p), 0, np.random.default_rng(5))
    accepted = 0
    for _ in range(300):
        new = graph_mh_step(state, np.zeros((p, p)), 0, spec, constants=consts)
        accepted += new.graph != state.graph
        state = new
    assert accepted > 0.9 * 300


def test_graph_constants_auto_matches_mc():
    p = 5
    rng = np.random.default_rng(6)
    a = rng.standard_normal((p, p))
    delta = a @ a.T
    g = TraitGraph(p, frozenset({(0, 1), (1, 2), (2, 3), (0, 3), (3, 4)}))
    prior = GWishartParams(3.0, np.eye(p))
    auto = GraphConstants(prior, delta, 10, SamplerSettings(mc_samples=50_000, prior_mc_samples=50_000))
    whole = GraphConstants(
        prior, delta, 10, SamplerSettings(mc_samples=50_000, prior_mc_samples=50_000, norm_const_method="mc")
    )
    r = np.random.default_rng(7)
    assert auto.log_prior(g) == pytest.approx(whole.log_prior(g), abs=0.05)
    assert auto.log_posterior(g, r) == pytest.approx(whole.log_posterior(g, r), abs=0.05)
    # prior constants are memoised and independent of chain seed
    other = GraphConstants(prior, delta, 10, SamplerSettings(mc_samples=50_000, prior_mc_samples=50_000), seed=99)
    assert auto.log_prior(g) == other.log_prior(g)


def test_run_chain_recovers_strong_edge():
    tree, x, _ = sim1_like()
    trace = run_chain(tree, x, ModelSpec.default(3), 600, 100, 1, rng_seed=8)
    pe = trace.graphs.mean(0)
    assert pe[0] > 0.95  # slot (0, 1)
    assert pe[1] < 0.5 and pe[2] < 0.5


def test_run_chain_full_variant_complete_graphs():
    tree, x, _ = sim1_like(20)
    trace = run_chain(tree, x, ModelSpec.default(3, "full"), 50, 10, 2, rng_seed=9)
    assert np.all(trace.graphs == 1)


def test_thinning_and_metadata():
    tree, x, _ = sim1_like(20)
    spec = ModelSpec.default(3)
    trace = run_chain(tree, x, spec, 55, 10, 5, rng_seed=10, settings=SamplerSettings(check_states=True))
    assert list(trace.iterations) == list(range(15, 56, 5))
    assert trace.warmup == 10 and trace.n_iterations == 55
    delta = compute_delta_pruning(tree, x, spec.root_prior)
    again = run_sampler(delta, tree.n_tips, spec, 55, 10, 5, rng_seed=10)
    assert trace.metadata["delta_hash"] == again.metadata["delta_hash"]
    assert trace.metadata["spec_hash"] == spec.digest()


def test_run_chain_validates_arguments():
    tree, x, _ = sim1_like(10)
    with pytest.raises(ValueError):
        run_chain(tree, x, ModelSpec.default(3), 10, 10, 1)
    with pytest.raises(ValueError):
        run_chain(tree, x, ModelSpec.default(4), 10, 2, 1)
    with pytest.raises(ValueError):
        run_chain(tree, x, ModelSpec.default(3), 10, 2, 0)


def test_seed_determinism_and_trace_round_trip(tmp_path):
    tree, x, _ = sim1_like(15)
    spec = ModelSpec.default(3)
    a = run_chain(tree, x, spec, 40, 10, 1, rng_seed=11)
    b = run_chain(tree, x, spec, 40, 10, 1, rng_seed=11)
    assert np.array_equal(a.graphs, b.graphs)
    assert np.array_equal(a.precisions, b.precisions)
    write_trace(a, tmp_path / "t.csv")
    back = read_trace(tmp_path / "t.csv")
    assert np.array_equal(back.graphs, a.graphs)
    assert np.array_equal(back.precisions, a.precisions)
    assert np.array_equal(back.iterations, a.iterations)
    assert back.metadata["trait_labels"] == list(x.trait_labels)
    header = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert header == "iteration,g_1_2,g_1_3,g_2_3,k_1_1,k_1_2,k_1_3,k_2_2,k_2_3,k_3_3"


def test_prior_recovery_short():
    p = 3
    trace = run_sampler(np.zeros((p, p)), 0, ModelSpec.default(p), 3000, 0, 1, rng_seed=12)
    pe = trace.graphs.mean(0)
    # edge indicators are autocorrelated, so allow a few naive standard errors
    assert np.all(np.abs(pe - 0.5) < 0.04), pe
    assert np.isclose(trace.graphs.sum(1).mean(), 1.5, atol=0.1)


def test_states_valid_with_checks_enabled():
    tree, x, _ = sim1_like(12)
    settings = SamplerSettings(check_states=True, mc_samples=200)
    trace = run_chain(tree, x, ModelSpec.default(3), 30, 5, 1, rng_seed=13, settings=settings)
    for g, k in zip(trace.graphs, trace.precisions):
        graph = TraitGraph.from_indicators(3, g)
        check_state(ChainState(graph, k, 0, np.random.default_rng()))
        assert math.isfinite(np.linalg.slogdet(k)[1])


def test_wishart_prior_df_bound():
    with pytest.raises(ValueError):
        ModelSpec("full", RootPrior.centered(3), wishart_prior=WishartParams(2.0, np.eye(3)))
