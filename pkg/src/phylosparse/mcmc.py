"""Random-scan Metropolis-within-Gibbs sampling of the diffusion graph and
precision matrix.

The graphical model alternates, by random scan, between a joint update
(flip one edge slot, accept on the ratio of G-Wishart normalising
constants, then redraw the precision under the new graph) and a
precision-only Gibbs refresh.  The full model only has the conjugate
Wishart refresh.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import __version__
from .gwishart import (
    GWishartParams,
    TraitGraph,
    WishartParams,
    edge_slots,
    _complete_block,
    _induced,
    log_norm_const_mc,
    prime_decomposition,
    sample_gwishart,
    sample_wishart,
)
from .phylo import PhyloTree, RootPrior, TraitMatrix, compute_delta_pruning


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Model variant and priors.

    ``variant`` is ``"graphical"`` (uniform graph prior, G-Wishart on
    ``K | G``) or ``"full"`` (Wishart on ``K``, complete graph).
    """

    variant: str
    root_prior: RootPrior
    gwishart_prior: GWishartParams | None = None
    wishart_prior: WishartParams | None = None
    graph_prior: str = "uniform"

    def __post_init__(self):
        if self.variant == "graphical":
            if self.gwishart_prior is None:
                raise ValueError("graphical model needs a G-Wishart prior")
        elif self.variant == "full":
            if self.wishart_prior is None:
                raise ValueError("full model needs a Wishart prior")
        else:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.graph_prior != "uniform":
            raise ValueError("only the uniform graph prior is supported")
        if self.root_prior.mean.shape[0] not in (1, self.p):
            raise ValueError("root prior mean has the wrong length")

    @property
    def p(self) -> int:
        prior = self.gwishart_prior if self.variant == "graphical" else self.wishart_prior
        return prior.p

    @classmethod
    def default(cls, p: int, variant: str = "graphical", root_sample_size: float = 1.0):
        """G-Wishart(3, I) or Wishart(p + 2, I), zero root mean."""
        root = RootPrior.centered(p, root_sample_size)
        if variant == "graphical":
            return cls(variant, root, gwishart_prior=GWishartParams(3.0, np.eye(p)))
        return cls(variant, root, wishart_prior=WishartParams(p + 2.0, np.eye(p)))

    def to_dict(self) -> dict:
        prior = self.gwishart_prior if self.variant == "graphical" else self.wishart_prior
        return {
            "variant": self.variant,
            "graph_prior": self.graph_prior,
            "df": float(prior.df),
            "rate": prior.rate.tolist(),
            "root_mean": self.root_prior.mean.tolist(),
            "root_sample_size": float(self.root_prior.sample_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        root = RootPrior(np.asarray(d["root_mean"]), d["root_sample_size"])
        if d["variant"] == "graphical":
            return cls("graphical", root, gwishart_prior=GWishartParams(d["df"], np.asarray(d["rate"])))
        return cls("full", root, wishart_prior=WishartParams(d["df"], np.asarray(d["rate"])))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class SamplerSettings:
    """Tuning knobs that do not change the target distribution.

    ``moves_per_iteration`` random-scan block updates make up one
    iteration; the default is two per edge slot for the graphical model
    (one expected edge proposal per slot) and one for the full model.
    """

    mc_samples: int = 1000
    prior_mc_samples: int = 10_000
    norm_const_method: str = "auto"
    graph_move_prob: float = 0.5
    moves_per_iteration: int | None = None
    initial_graph: str = "empty"
    check_states: bool = False

    def __post_init__(self):
        if self.mc_samples < 1 or self.prior_mc_samples < 1:
            raise ValueError("Monte Carlo sample counts must be >= 1")
        if not 0.0 < self.graph_move_prob <= 1.0:
            raise ValueError("graph_move_prob must be in (0, 1]")
        if self.norm_const_method not in ("auto", "mc"):
            raise ValueError(f"unknown norm_const_method {self.norm_const_method!r}")
        if self.initial_graph not in ("empty", "complete"):
            raise ValueError("initial_graph must be 'empty' or 'complete'")

    def moves_for(self, spec: ModelSpec) -> int:
        if self.moves_per_iteration is not None:
            return max(1, int(self.moves_per_iteration))
        if spec.variant == "full":
            return 1
        return max(1, spec.p * (spec.p - 1))


@dataclass(frozen=True, eq=False)
class ChainState:
    graph: TraitGraph
    precision: np.ndarray
    iteration: int
    rng: np.random.Generator


class InvalidStateError(AssertionError):
    pass


def check_state(state: ChainState) -> None:
    """Raise if the precision is not symmetric PD with the graph's zeros."""
    k = state.precision
    p = state.graph.n_vertices
    if k.shape != (p, p) or not np.allclose(k, k.T, rtol=0, atol=1e-12 * max(1.0, np.abs(k).max())):
        raise InvalidStateError("precision is not symmetric")
    off = ~state.graph.adjacency & ~np.eye(p, dtype=bool)
    if np.any(k[off] != 0.0):
        raise InvalidStateError("precision has non-zeros off the graph")
    if np.linalg.eigvalsh(k).min() <= 0:
        raise InvalidStateError("precision is not positive definite")


@lru_cache(maxsize=200_000)
def _prior_component_constant(df: float, rate_bytes: bytes, m: int, edges: frozenset, n_samples: int) -> float:
    """Monte Carlo prior constant of one prime component.

    The seed is a hash of the arguments, so the value is a pure function of
    the component and can be shared by every chain in the process.
    """
    key = repr((df, m, sorted(edges), n_samples)).encode() + rate_bytes
    seed = int.from_bytes(hashlib.sha256(key).digest()[:16], "little")
    rate = np.frombuffer(rate_bytes, dtype=float).reshape(m, m)
    return log_norm_const_mc(TraitGraph(m, edges), GWishartParams(df, rate), n_samples, seed).log_value


class GraphConstants:
    """Log normalising constants needed by the graph update.

    With ``norm_const_method="auto"`` each constant factorises over the
    prime components of the graph.  Complete components and separators
    are exact and cached by vertex set.  Non-complete components are
    estimated by Monte Carlo: prior estimates are cached process-wide per
    component with a seed derived from the component itself, so they do
    not depend on chain history; posterior estimates are redrawn at every
    call.
    With ``"mc"`` the whole graph is estimated at once (prior cached per
    graph, posterior fresh).
    """

    def __init__(self, prior: GWishartParams, delta, n_taxa: int, settings: SamplerSettings, seed: int = 0):
        self.prior = prior
        self.posterior = prior.posterior(np.asarray(delta, dtype=float), n_taxa)
        self.settings = settings
        self.seed = int(seed)
        self._blocks = ({}, {})  # complete-block constants: prior, posterior
        self._prior_mc: dict = {}

    def _block(self, params, which: int, vertices) -> float:
        cache = self._blocks[which]
        if vertices not in cache:
            cache[vertices] = _complete_block(params.df, params.rate, vertices)
        return cache[vertices]

    def _seed_for(self, graph: TraitGraph, key: int) -> np.random.SeedSequence:
        bits = int("".join(map(str, graph.indicators())) or "0", 2)
        return np.random.SeedSequence([self.seed, graph.n_vertices, key, bits])

    def _evaluate(self, graph: TraitGraph, params, which: int, n_samples: int, rng) -> float:
        atoms, separators = prime_decomposition(graph.n_vertices, graph.edges)
        total = 0.0
        for atom in atoms:
            sub = _induced(graph, atom)
            m = len(atom)
            if sub.n_edges == m * (m - 1) // 2:
                total += self._block(params, which, atom)
            elif which == 0:
                idx = list(atom)
                block = np.ascontiguousarray(params.rate[np.ix_(idx, idx)])
                total += _prior_component_constant(float(params.df), block.tobytes(), m, sub.edges, n_samples)
            else:
                idx = list(atom)
                sub_params = GWishartParams(params.df, params.rate[np.ix_(idx, idx)])
                total += log_norm_const_mc(sub, sub_params, n_samples, rng).log_value
        return total - sum(self._block(params, which, sep) for sep in separators)

    def log_prior(self, graph: TraitGraph) -> float:
        n = self.settings.prior_mc_samples
        if self.settings.norm_const_method == "auto":
            return self._evaluate(graph, self.prior, 0, n, None)
        if graph.edges not in self._prior_mc:
            est = log_norm_const_mc(graph, self.prior, n, self._seed_for(graph, 0))
            self._prior_mc[graph.edges] = est.log_value
        return self._prior_mc[graph.edges]

    def log_posterior(self, graph: TraitGraph, rng, n_samples: int | None = None) -> float:
        n = self.settings.mc_samples if n_samples is None else n_samples
        if self.settings.norm_const_method == "auto":
            return self._evaluate(graph, self.posterior, 1, n, rng)
        return log_norm_const_mc(graph, self.posterior, n, rng).log_value


def _constants(state, delta_stat, n_taxa, spec, settings, constants):
    if constants is not None:
        return constants
    seed = int(state.rng.integers(2**63))
    return GraphConstants(spec.gwishart_prior, delta_stat, n_taxa, settings or SamplerSettings(), seed)


def precision_gibbs_step(
    state: ChainState, delta_stat, n_taxa: int, spec: ModelSpec, posterior: GWishartParams | None = None
) -> ChainState:
    """Redraw ``K`` from ``W_G(df + N, rate + delta)`` under the current graph."""
    if posterior is None:
        posterior = spec.gwishart_prior.posterior(np.asarray(delta_stat, dtype=float), n_taxa)
    k = sample_gwishart(state.graph, posterior, state.rng, warm_start=state.precision)
    return replace(state, precision=k)


def graph_mh_step(
    state: ChainState,
    delta_stat,
    n_taxa: int,
    spec: ModelSpec,
    mc_samples: int | None = None,
    constants: GraphConstants | None = None,
    settings: SamplerSettings | None = None,
) -> ChainState:
    """Propose flipping a uniformly chosen edge slot and accept with

    ``min(1, I_Gp(post) / I_G(post) * I_G(prior) / I_Gp(prior))``.

    On acceptance the precision is redrawn under the proposed graph.
    """
    consts = _constants(state, delta_stat, n_taxa, spec, settings, constants)
    rng = state.rng
    p = state.graph.n_vertices
    slots = edge_slots(p)
    i, j = slots[rng.integers(len(slots))]
    proposal = state.graph.flip(i, j)
    log_alpha = (
        consts.log_posterior(proposal, rng, mc_samples)
        - consts.log_posterior(state.graph, rng, mc_samples)
        + consts.log_prior(state.graph)
        - consts.log_prior(proposal)
    )
    if log_alpha >= 0 or math.log(rng.random()) < log_alpha:
        k = sample_gwishart(proposal, consts.posterior, rng, warm_start=state.precision)
        return replace(state, graph=proposal, precision=k)
    return state


def full_model_gibbs_step(state: ChainState, delta_stat, n_taxa: int, spec: ModelSpec) -> ChainState:
    """Redraw ``K`` from the Wishart posterior with df ``nu + N`` and rate ``D + delta``."""
    prior = spec.wishart_prior
    rate = prior.rate + np.asarray(delta_stat, dtype=float)
    k = sample_wishart(prior.df + n_taxa, rate, state.rng)
    return replace(state, graph=TraitGraph.complete(prior.p), precision=k)


@dataclass(eq=False)
class ChainTrace:
    """Post-warm-up samples of (G, K) at the thinning stride."""

    iterations: np.ndarray
    graphs: np.ndarray  # (n, p(p-1)/2) edge indicators
    precisions: np.ndarray  # (n, p, p)
    warmup: int
    thin: int
    n_iterations: int
    metadata: dict = field(default_factory=dict)

    @property
    def p(self) -> int:
        return self.precisions.shape[1]

    def __len__(self) -> int:
        return self.iterations.shape[0]

    def graph_matrix(self) -> np.ndarray:
        """Edge indicators as (n, p, p) symmetric 0/1 arrays."""
        p = self.p
        out = np.zeros((len(self), p, p), dtype=np.int8)
        iu = np.triu_indices(p, 1)
        out[:, iu[0], iu[1]] = self.graphs
        out[:, iu[1], iu[0]] = self.graphs
        return out


def _delta_digest(delta) -> str:
    return hashlib.sha256(np.ascontiguousarray(delta, dtype=float).tobytes()).hexdigest()[:16]


def run_sampler(
    delta_stat,
    n_taxa: int,
    spec: ModelSpec,
    n_iterations: int,
    warmup: int,
    thin: int = 1,
    rng_seed=None,
    settings: SamplerSettings | None = None,
    initial_precision=None,
) -> ChainTrace:
    """Run a chain given the data statistic directly (``n_taxa = 0`` samples the prior)."""
    settings = settings or SamplerSettings()
    delta_stat = np.asarray(delta_stat, dtype=float)
    p = spec.p
    if delta_stat.shape != (p, p):
        raise ValueError(f"delta has shape {delta_stat.shape}, expected ({p}, {p})")
    if not 0 <= warmup < n_iterations:
        raise ValueError("need 0 <= warmup < n_iterations")
    if thin < 1:
        raise ValueError("thin must be >= 1")
    rng = np.random.default_rng(rng_seed)
    moves = settings.moves_for(spec)

    if spec.variant == "graphical":
        graph = TraitGraph.empty(p) if settings.initial_graph == "empty" else TraitGraph.complete(p)
        consts = GraphConstants(spec.gwishart_prior, delta_stat, n_taxa, settings, int(rng.integers(2**63)))
        posterior = consts.posterior
        k0 = sample_gwishart(graph, posterior, rng) if initial_precision is None else initial_precision
    else:
        graph = TraitGraph.complete(p)
        k0 = np.eye(p) if initial_precision is None else initial_precision
    state = ChainState(graph, np.asarray(k0, dtype=float), 0, rng)

    n_keep = len(range(warmup + thin, n_iterations + 1, thin))
    iters = np.empty(n_keep, dtype=np.int64)
    graphs = np.empty((n_keep, p * (p - 1) // 2), dtype=np.int8)
    precs = np.empty((n_keep, p, p))
    kept = 0
    for it in range(1, n_iterations + 1):
        for _ in range(moves):
            if spec.variant == "full":
                state = full_model_gibbs_step(state, delta_stat, n_taxa, spec)
            elif rng.random() < settings.graph_move_prob:
                state = graph_mh_step(state, delta_stat, n_taxa, spec, constants=consts)
            else:
                state = precision_gibbs_step(state, delta_stat, n_taxa, spec, posterior)
            if settings.check_states:
                check_state(state)
        state = replace(state, iteration=it)
        if it > warmup and (it - warmup) % thin == 0:
            iters[kept] = it
            graphs[kept] = state.graph.indicators()
            precs[kept] = state.precision
            kept += 1

    seed_repr = rng_seed if isinstance(rng_seed, (int, type(None))) else repr(rng_seed)
    metadata = {
        "tool": "phylosparse",
        "version": __version__,
        "seed": seed_repr,
        "spec": spec.to_dict(),
        "spec_hash": spec.digest(),
        "delta_hash": _delta_digest(delta_stat),
        "n_taxa": int(n_taxa),
        "settings": asdict(settings),
    }
    return ChainTrace(iters, graphs, precs, warmup, thin, n_iterations, metadata)


def run_chain(
    tree: PhyloTree,
    traits: TraitMatrix,
    spec: ModelSpec,
    n_iterations: int = 20_000,
    warmup: int | None = None,
    thin: int = 10,
    rng_seed=None,
    settings: SamplerSettings | None = None,
) -> ChainTrace:
    """Fit the model to traits on a fixed tree.

    The sufficient statistic is computed once by a post-order pass (the
    tree and data are fixed), then :func:`run_sampler` does the rest.
    ``warmup`` defaults to 20% of ``n_iterations``.
    """
    if warmup is None:
        warmup = n_iterations // 5
    if traits.n_traits != spec.p:
        raise ValueError(f"traits have {traits.n_traits} columns, model expects {spec.p}")
    delta = compute_delta_pruning(tree, traits, spec.root_prior)
    trace = run_sampler(delta, tree.n_tips, spec, n_iterations, warmup, thin, rng_seed, settings)
    trace.metadata["trait_labels"] = list(traits.trait_labels)
    return trace


# ---------------------------------------------------------------------------
# Trace serialisation


def _trace_header(p: int) -> list[str]:
    g = [f"g_{i + 1}_{j + 1}" for i, j in edge_slots(p)]
    k = [f"k_{i + 1}_{j + 1}" for i in range(p) for j in range(i, p)]
    return ["iteration", *g, *k]


def write_trace(trace: ChainTrace, path) -> tuple[Path, Path]:
    """Write ``<path>`` (CSV, one row per stored sample) and a JSON sidecar."""
    path = Path(path)
    p = trace.p
    iu = np.triu_indices(p)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_trace_header(p))
        for it, g, k in zip(trace.iterations, trace.graphs, trace.precisions):
            writer.writerow([int(it), *map(int, g), *(repr(float(v)) for v in k[iu])])
    meta = dict(trace.metadata)
    meta.update(warmup=trace.warmup, thin=trace.thin, n_iterations=trace.n_iterations, p=p)
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path, sidecar


def read_trace(path) -> ChainTrace:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    p = int(meta["p"])
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n_slots = p * (p - 1) // 2
    iters = rows[:, 0].astype(np.int64)
    graphs = rows[:, 1 : 1 + n_slots].astype(np.int8)
    upper = rows[:, 1 + n_slots :]
    precs = np.zeros((rows.shape[0], p, p))
    iu = np.triu_indices(p)
    precs[:, iu[0], iu[1]] = upper
    precs[:, iu[1], iu[0]] = upper
    warmup, thin, n_it = meta.pop("warmup"), meta.pop("thin"), meta.pop("n_iterations")
    meta.pop("p")
    return ChainTrace(iters, graphs, precs, warmup, thin, n_it, meta)
