"""Trait graphs and the G-Wishart distribution.

The G-Wishart ``W_G(df, rate)`` has density proportional to
``|K|^{(df-2)/2} exp(-tr(rate K)/2)`` on positive-definite matrices whose
off-graph entries are zero.  On the complete graph it is the Wishart
with ``df + p - 1`` degrees of freedom and scale ``rate^{-1}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Iterable, NamedTuple

import networkx as nx
import numpy as np
from scipy.special import gammaln, multigammaln

from . import _kernels


class NotPositiveDefiniteError(ValueError):
    pass


class NotDecomposableError(ValueError):
    pass


class SamplerConvergenceError(RuntimeError):
    pass


def edge_slots(p: int) -> list[tuple[int, int]]:
    """Upper-triangle vertex pairs in row-major order."""
    return [(i, j) for i in range(p) for j in range(i + 1, p)]


@dataclass(frozen=True)
class TraitGraph:
    """Undirected graph on ``n_vertices`` traits (0-based vertex indices)."""

    n_vertices: int
    edges: frozenset = frozenset()

    def __post_init__(self):
        p = int(self.n_vertices)
        if p < 1:
            raise ValueError("a graph needs at least one vertex")
        norm = set()
        for i, j in self.edges:
            i, j = int(i), int(j)
            if i == j:
                raise ValueError(f"self-loop at vertex {i}")
            if not (0 <= i < p and 0 <= j < p):
                raise ValueError(f"edge ({i}, {j}) out of range for {p} vertices")
            norm.add((min(i, j), max(i, j)))
        object.__setattr__(self, "n_vertices", p)
        object.__setattr__(self, "edges", frozenset(norm))

    @classmethod
    def empty(cls, p: int) -> "TraitGraph":
        return cls(p)

    @classmethod
    def complete(cls, p: int) -> "TraitGraph":
        return cls(p, frozenset(edge_slots(p)))

    @classmethod
    def from_adjacency(cls, adjacency) -> "TraitGraph":
        a = np.asarray(adjacency)
        p = a.shape[0]
        return cls(p, frozenset((i, j) for i, j in edge_slots(p) if a[i, j]))

    @classmethod
    def from_indicators(cls, p: int, indicators) -> "TraitGraph":
        slots = edge_slots(p)
        return cls(p, frozenset(s for s, g in zip(slots, indicators) if g))

    @classmethod
    def from_precision(cls, precision, atol: float = 0.0) -> "TraitGraph":
        """Zero pattern of a precision matrix."""
        k = np.asarray(precision)
        return cls.from_adjacency(np.abs(k) > atol)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def has_edge(self, i: int, j: int) -> bool:
        return (min(i, j), max(i, j)) in self.edges

    def flip(self, i: int, j: int) -> "TraitGraph":
        """Copy of the graph with edge (i, j) toggled."""
        p = self.n_vertices
        if i == j or not (0 <= i < p and 0 <= j < p):
            raise ValueError(f"cannot flip ({i}, {j}) on {p} vertices")
        e = (min(i, j), max(i, j))
        return TraitGraph(p, self.edges ^ {e})

    @cached_property
    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n_vertices, self.n_vertices), dtype=np.bool_)
        for i, j in self.edges:
            a[i, j] = a[j, i] = True
        a.setflags(write=False)
        return a

    def indicators(self) -> np.ndarray:
        """Edge indicators over :func:`edge_slots` order."""
        return np.array([e in self.edges for e in edge_slots(self.n_vertices)], dtype=np.int8)

    def is_decomposable(self) -> bool:
        return _decomposition(self.n_vertices, self.edges) is not None

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.n_vertices))
        g.add_edges_from(self.edges)
        return g


def _bits(mask: int):
    while mask:
        low = mask & -mask
        yield low.bit_length() - 1
        mask ^= low


def _mcs_m(p: int, nbr: list[int]) -> tuple[list[int], list[int]]:
    """Minimal triangulation by maximum cardinality search (MCS-M).

    Returns the elimination order (first eliminated first) and the
    neighbour bitmasks of the triangulated graph.
    """
    weight = [0] * p
    unnumbered = (1 << p) - 1
    fill = list(nbr)
    order = []
    for _ in range(p):
        v = max(_bits(unnumbered), key=lambda u: (weight[u], -u))
        unnumbered &= ~(1 << v)
        bumped = 0
        for level in sorted({weight[u] for u in _bits(unnumbered)}):
            # vertices reachable from v through unnumbered vertices lighter than `level`
            allowed = 0
            for u in _bits(unnumbered):
                if weight[u] < level:
                    allowed |= 1 << u
            reach = nbr[v] & unnumbered
            frontier = reach & allowed
            seen = frontier
            while frontier:
                grow = 0
                for z in _bits(frontier):
                    grow |= nbr[z]
                grow &= unnumbered
                reach |= grow
                frontier = grow & allowed & ~seen
                seen |= frontier
            for u in _bits(reach & unnumbered):
                if weight[u] == level:
                    bumped |= 1 << u
        for u in _bits(bumped):
            weight[u] += 1
            fill[u] |= 1 << v
            fill[v] |= 1 << u
        order.append(v)
    order.reverse()
    return order, fill


@lru_cache(maxsize=65536)
def prime_decomposition(p: int, edges: frozenset):
    """Prime components (atoms) and complete separators of a graph.

    The graph is completed to a minimal triangulation (MCS-M); neighbouring
    cliques of its clique tree are merged whenever their separator is not
    complete in the original graph.  Returns ``(atoms, separators)`` as
    tuples of sorted vertex tuples.  For a chordal graph the atoms are the
    maximal cliques.
    """
    nbr = [0] * p
    for i, j in edges:
        nbr[i] |= 1 << j
        nbr[j] |= 1 << i
    order, fill = _mcs_m(p, nbr)
    rank = {v: k for k, v in enumerate(order)}
    # maximal cliques of the triangulation from its perfect elimination order
    candidates = []
    for v in order:
        later = 0
        for u in _bits(fill[v]):
            if rank[u] > rank[v]:
                later |= 1 << u
        candidates.append(later | (1 << v))
    cliques = [c for c in candidates if not any(c != d and c & d == c for d in candidates)]
    cliques = sorted(set(cliques))
    # clique tree: Kruskal on intersection sizes (ties broken by index)
    pairs = sorted(
        ((-bin(cliques[a] & cliques[b]).count("1"), a, b) for a in range(len(cliques)) for b in range(a + 1, len(cliques)))
    )
    comp = list(range(len(cliques)))
    merged = list(range(len(cliques)))

    def find(arr, a):
        while arr[a] != a:
            arr[a] = arr[arr[a]]
            a = arr[a]
        return a

    separators = []
    for _, a, b in pairs:
        ra, rb = find(comp, a), find(comp, b)
        if ra == rb:
            continue
        comp[ra] = rb
        sep = cliques[a] & cliques[b]
        if all(sep & ~(1 << u) & ~nbr[u] == 0 for u in _bits(sep)):
            separators.append(tuple(_bits(sep)))
        else:
            merged[find(merged, a)] = find(merged, b)
    groups: dict = {}
    for k, c in enumerate(cliques):
        r = find(merged, k)
        groups[r] = groups.get(r, 0) | c
    atoms = sorted(tuple(_bits(m)) for m in groups.values())
    return tuple(atoms), tuple(sorted(separators))


@lru_cache(maxsize=65536)
def _decomposition(p: int, edges: frozenset):
    """Cliques and separators of a chordal graph, or None."""
    atoms, separators = prime_decomposition(p, edges)
    for atom in atoms:
        m = len(atom)
        if sum(1 for i, j in edges if i in atom and j in atom) != m * (m - 1) // 2:
            return None
    return list(atoms), list(separators)


@dataclass(frozen=True, eq=False)
class GWishartParams:
    """Shape ``df`` (> 0) and symmetric positive-definite ``rate``."""

    df: float
    rate: np.ndarray

    def __post_init__(self):
        rate = np.atleast_2d(np.asarray(self.rate, dtype=float))
        if rate.shape[0] != rate.shape[1] or not np.allclose(rate, rate.T, atol=1e-10):
            raise ValueError("rate must be a symmetric square matrix")
        if not self.df > 0:
            raise ValueError(f"df must be > 0, got {self.df}")
        try:
            np.linalg.cholesky(rate)
        except np.linalg.LinAlgError:
            raise NotPositiveDefiniteError("rate matrix is not positive definite") from None
        object.__setattr__(self, "rate", 0.5 * (rate + rate.T))

    @property
    def p(self) -> int:
        return self.rate.shape[0]

    @cached_property
    def inverse_factor(self) -> np.ndarray:
        """Upper triangular ``T`` with ``rate^{-1} = T' T``."""
        return np.ascontiguousarray(np.linalg.cholesky(np.linalg.inv(self.rate)).T)

    def posterior(self, delta: np.ndarray, n_taxa: int) -> "GWishartParams":
        """Conjugate update ``W_G(df + N, rate + delta)``."""
        return GWishartParams(self.df + n_taxa, self.rate + delta)


@dataclass(frozen=True, eq=False)
class WishartParams:
    """Wishart prior with ``df`` degrees of freedom (> p - 1) and rate matrix."""

    df: float
    rate: np.ndarray

    def __post_init__(self):
        rate = GWishartParams(1.0, self.rate).rate
        if not self.df > rate.shape[0] - 1:
            raise ValueError(f"Wishart df must exceed p - 1 = {rate.shape[0] - 1}, got {self.df}")
        object.__setattr__(self, "rate", rate)

    @property
    def p(self) -> int:
        return self.rate.shape[0]


class NormConstEstimate(NamedTuple):
    log_value: float
    std_error: float


def gwishart_unnormalized_logdensity(precision, params: GWishartParams) -> float:
    """``(df - 2)/2 * log|K| - tr(rate K)/2``."""
    k = np.asarray(precision, dtype=float)
    sign, logdet = np.linalg.slogdet(k)
    if sign <= 0:
        raise NotPositiveDefiniteError("precision matrix is not positive definite")
    try:
        np.linalg.cholesky(k)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("precision matrix is not positive definite") from None
    return 0.5 * (params.df - 2.0) * logdet - 0.5 * float(np.sum(params.rate * k))


def wishart_log_norm_const_closed(p: int, params: GWishartParams) -> float:
    """Log normalising constant on the complete graph.

    Equals ``(nu p / 2) log 2 - (nu / 2) log|rate| + log Gamma_p(nu / 2)``
    with ``nu = df + p - 1``.
    """
    if params.p != p:
        raise ValueError(f"rate is {params.p}x{params.p}, expected {p}x{p}")
    nu = params.df + p - 1
    _, logdet = np.linalg.slogdet(params.rate)
    return 0.5 * nu * p * math.log(2.0) - 0.5 * nu * logdet + float(multigammaln(0.5 * nu, p))


def _complete_block(df, rate, idx) -> float:
    if not idx:
        return 0.0
    idx = list(idx)
    sub = rate[np.ix_(idx, idx)]
    k = len(idx)
    nu = df + k - 1
    _, logdet = np.linalg.slogdet(sub)
    return 0.5 * nu * k * math.log(2.0) - 0.5 * nu * logdet + float(multigammaln(0.5 * nu, k))


def decomposable_log_norm_const(graph: TraitGraph, params: GWishartParams) -> float:
    """Closed form for chordal graphs: clique constants over separator constants."""
    dec = _decomposition(graph.n_vertices, graph.edges)
    if dec is None:
        raise NotDecomposableError("graph is not decomposable")
    cliques, separators = dec
    total = sum(_complete_block(params.df, params.rate, c) for c in cliques)
    return total - sum(_complete_block(params.df, params.rate, s) for s in separators)


def _mc_setup(graph: TraitGraph, params: GWishartParams):
    p = graph.n_vertices
    if params.p != p:
        raise ValueError(f"rate is {params.p}x{params.p} but graph has {p} vertices")
    adj = graph.adjacency
    upper = np.triu(adj, 1)
    nu = upper.sum(axis=1)  # neighbours after i
    before = upper.sum(axis=0)  # neighbours before i
    tri = params.inverse_factor
    shape = params.df + nu
    log_const = float(
        np.sum(
            0.5 * shape * math.log(2.0)
            + gammaln(0.5 * shape)
            + 0.5 * nu * math.log(2.0 * math.pi)
            + (params.df + nu + before) * np.log(np.diag(tri))
        )
    )
    rows, cols = np.nonzero(upper)
    return adj, tri, shape, rows.astype(np.int64), cols.astype(np.int64), log_const


def log_norm_const_mc(
    graph: TraitGraph, params: GWishartParams, n_samples: int = 100_000, rng_seed=None
) -> NormConstEstimate:
    """Monte Carlo estimate of ``log I_G(df, rate)``.

    Writes ``K = Phi' Phi`` and ``Psi = Phi T^{-1}`` with ``rate^{-1} = T' T``.
    The diagonal and edge entries of ``Psi`` are free (chi and standard
    normal variates); the remaining upper entries are fixed by the zero
    constraints.  The constant is a closed-form factor times the expected
    value of ``exp(-sum(non-free psi^2)/2)``.  The standard error is the
    delta-method error of the log of the sample mean.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(rng_seed)
    p = graph.n_vertices
    adj, tri, shape, rows, cols, log_const = _mc_setup(graph, params)
    if graph.n_edges == p * (p - 1) // 2:
        return NormConstEstimate(log_const, 0.0)
    psi_diag = np.sqrt(2.0 * rng.standard_gamma(0.5 * shape, size=(n_samples, p)))
    psi_free = rng.standard_normal((n_samples, rows.size))
    logw = _kernels.completion_log_weights(psi_diag, psi_free, rows, cols, adj, tri)
    top = logw.max()
    w = np.exp(logw - top)
    mean = w.mean()
    se = float(w.std(ddof=1) / (math.sqrt(n_samples) * mean)) if n_samples > 1 else math.inf
    return NormConstEstimate(float(log_const + top + math.log(mean)), se)


def _induced(graph: TraitGraph, vertices) -> TraitGraph:
    pos = {v: k for k, v in enumerate(vertices)}
    sub = frozenset((pos[i], pos[j]) for i, j in graph.edges if i in pos and j in pos)
    return TraitGraph(len(vertices), sub)


def log_norm_const(
    graph: TraitGraph,
    params: GWishartParams,
    method: str = "auto",
    n_samples: int = 1000,
    rng_seed=None,
) -> NormConstEstimate:
    """Log normalising constant, exact where possible.

    ``method="auto"`` factorises over the prime components of the graph:
    complete components use the closed form, the others are estimated by
    Monte Carlo on their own (smaller) subgraph, and complete separators
    are divided out.  Decomposable graphs are therefore exact.
    ``method="mc"`` samples the whole graph at once.
    """
    if method == "mc":
        return log_norm_const_mc(graph, params, n_samples, rng_seed)
    if method != "auto":
        raise ValueError(f"unknown method {method!r}")
    if params.p != graph.n_vertices:
        raise ValueError(f"rate is {params.p}x{params.p} but graph has {graph.n_vertices} vertices")
    atoms, separators = prime_decomposition(graph.n_vertices, graph.edges)
    rng = None
    total, var = 0.0, 0.0
    for atom in atoms:
        sub = _induced(graph, atom)
        m = len(atom)
        if sub.n_edges == m * (m - 1) // 2:
            total += _complete_block(params.df, params.rate, atom)
            continue
        if rng is None:
            rng = np.random.default_rng(rng_seed)
        idx = list(atom)
        est = log_norm_const_mc(sub, GWishartParams(params.df, params.rate[np.ix_(idx, idx)]), n_samples, rng)
        total += est.log_value
        var += est.std_error**2
    total -= sum(_complete_block(params.df, params.rate, sep) for sep in separators)
    return NormConstEstimate(float(total), math.sqrt(var))


# ---------------------------------------------------------------------------
# Sampling


def sample_wishart(df: float, rate: np.ndarray, rng_seed=None) -> np.ndarray:
    """Wishart draw with ``df`` degrees of freedom and scale ``rate^{-1}``
    (mean ``df * rate^{-1}``), by the Bartlett decomposition."""
    rng = np.random.default_rng(rng_seed)
    rate = np.asarray(rate, dtype=float)
    p = rate.shape[0]
    if not df > p - 1:
        raise ValueError(f"Wishart df must exceed p - 1 = {p - 1}, got {df}")
    scale_chol = np.linalg.cholesky(np.linalg.inv(rate))
    a = np.zeros((p, p))
    a[np.diag_indices(p)] = np.sqrt(rng.chisquare(df - np.arange(p)))
    lower = np.tril_indices(p, -1)
    a[lower] = rng.standard_normal(len(lower[0]))
    la = scale_chol @ a
    w = la @ la.T
    return 0.5 * (w + w.T)


def sample_gwishart(
    graph: TraitGraph,
    params: GWishartParams,
    rng_seed=None,
    warm_start: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int = 10_000,
) -> np.ndarray:
    """Draw from ``W_G(df, rate)``.

    Connected components are independent G-Wisharts on the matching rate
    blocks and are drawn separately.  Within a component a Wishart draw
    is made on the complete subgraph and its covariance is completed so
    that the inverse has zeros off the graph, by cycling neighbourhood
    regressions until the relative change falls below ``tol``.  The
    result is an exact draw up to that tolerance, so ``warm_start`` is
    accepted for interface compatibility but unused.
    """
    p = graph.n_vertices
    if params.p != p:
        raise ValueError(f"rate is {params.p}x{params.p} but graph has {p} vertices")
    rng = np.random.default_rng(rng_seed)
    seed = int(rng.integers(2**32))
    k, ok = _kernels.rgwish(graph.adjacency, params.rate, float(params.df), seed, tol, max_iter)
    if not ok:
        raise SamplerConvergenceError(f"G-Wishart completion did not converge in {max_iter} sweeps")
    return k
