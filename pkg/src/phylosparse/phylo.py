"""Phylogenetic trees, Brownian trait simulation and the tree-whitened
trait cross-product.

Trees are rooted and strictly bifurcating.  Nodes are indexed with the
``N`` tips first (in Newick left-to-right order), internal nodes next in
post-order, and the root last, so every child has a smaller index than
its parent.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg


class NewickError(ValueError):
    """Raised for malformed or unsupported Newick input."""


class DegenerateTreeError(ValueError):
    """Raised when the tree covariance is singular."""


class TraitDataError(ValueError):
    """Raised for trait tables that do not match the tree or have holes."""


@dataclass(frozen=True)
class RootPrior:
    """Conjugate normal prior on the root trait vector.

    The root is distributed as ``N(mean, K^{-1} / sample_size)``.
    """

    mean: np.ndarray
    sample_size: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=float)))
        if not self.sample_size > 0:
            raise ValueError(f"root prior sample size must be > 0, got {self.sample_size}")

    @classmethod
    def centered(cls, p: int, sample_size: float = 1.0) -> "RootPrior":
        return cls(np.zeros(p), sample_size)

    @property
    def root_variance(self) -> float:
        return 0.0 if math.isinf(self.sample_size) else 1.0 / self.sample_size


@dataclass(frozen=True, eq=False)
class PhyloTree:
    """Rooted bifurcating tree with branch lengths.

    Parameters
    ----------
    parent : array of int, shape (2N-1,)
        Parent index of every node; ``-1`` for the root.
    branch_length : array of float, shape (2N-1,)
        Length of the branch above each node.  The root entry is ignored
        and stored as 0.
    tip_labels : sequence of str
        Labels of the ``N`` tips, in node-index order.
    """

    parent: np.ndarray
    branch_length: np.ndarray
    tip_labels: tuple[str, ...]

    def __post_init__(self):
        parent = np.asarray(self.parent, dtype=np.int64)
        lengths = np.asarray(self.branch_length, dtype=float).copy()
        object.__setattr__(self, "parent", parent)
        object.__setattr__(self, "tip_labels", tuple(self.tip_labels))
        n_nodes = parent.shape[0]
        n = len(self.tip_labels)
        if n < 2:
            raise ValueError("a tree needs at least two tips")
        if n_nodes != 2 * n - 1 or lengths.shape != parent.shape:
            raise ValueError(f"expected {2 * n - 1} nodes for {n} tips, got {n_nodes}")
        if parent[-1] != -1 or np.count_nonzero(parent == -1) != 1:
            raise ValueError("the root must be the last node and the only parentless one")
        lengths[-1] = 0.0
        object.__setattr__(self, "branch_length", lengths)
        if np.any(~np.isfinite(lengths)) or np.any(lengths < 0):
            raise ValueError("branch lengths must be finite and non-negative")
        if not np.any(lengths > 0):
            raise ValueError("at least one branch length must be positive")
        if np.any(parent[:-1] <= np.arange(n_nodes - 1)) or np.any(parent[:-1] >= n_nodes):
            raise ValueError("every node must have a parent with a larger index")
        counts = np.bincount(parent[:-1], minlength=n_nodes)
        if np.any(counts[:n] != 0):
            raise ValueError("tips cannot have children")
        if np.any(counts[n:] != 2):
            raise ValueError("internal nodes and the root must have exactly two children")
        if len(set(self.tip_labels)) != n:
            raise ValueError("tip labels must be unique")

    @property
    def n_tips(self) -> int:
        return len(self.tip_labels)

    @property
    def n_nodes(self) -> int:
        return self.parent.shape[0]

    @property
    def root(self) -> int:
        return self.n_nodes - 1

    @cached_property
    def children(self) -> np.ndarray:
        """Array of shape (N-1, 2): children of internal node ``N + k``."""
        n = self.n_tips
        kids = np.full((n - 1, 2), -1, dtype=np.int64)
        for node in range(self.n_nodes - 1):
            row = kids[self.parent[node] - n]
            row[0 if row[0] < 0 else 1] = node
        return kids

    @cached_property
    def depth(self) -> np.ndarray:
        """Path length from the root to every node."""
        depth = np.zeros(self.n_nodes)
        for node in range(self.n_nodes - 2, -1, -1):
            depth[node] = depth[self.parent[node]] + self.branch_length[node]
        return depth

    @cached_property
    def tip_sets(self) -> list[np.ndarray]:
        """Sorted descendant tip indices of every node."""
        n = self.n_tips
        sets = [np.array([i]) for i in range(n)]
        for k, (a, b) in enumerate(self.children):
            sets.append(np.concatenate([sets[a], sets[b]]))
        return sets

    @cached_property
    def _levels(self) -> list[np.ndarray]:
        # internal nodes grouped by height so a post-order pass can be batched
        n = self.n_tips
        height = np.zeros(self.n_nodes, dtype=np.int64)
        for k, (a, b) in enumerate(self.children):
            height[n + k] = 1 + max(height[a], height[b])
        internal = np.arange(n, self.n_nodes)
        return [internal[height[n:] == h] for h in range(1, height[-1] + 1)]

    def mrca(self, i: int, j: int) -> int:
        """Most recent common ancestor of two nodes, by walking parents."""
        seen = set()
        node = i
        while node != -1:
            seen.add(node)
            node = self.parent[node]
        node = j
        while node not in seen:
            node = self.parent[node]
        return node


@dataclass(frozen=True, eq=False)
class TraitMatrix:
    """Complete continuous trait observations, one row per taxon."""

    values: np.ndarray
    taxon_labels: tuple[str, ...]
    trait_labels: tuple[str, ...]

    def __post_init__(self):
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "taxon_labels", tuple(self.taxon_labels))
        object.__setattr__(self, "trait_labels", tuple(self.trait_labels))
        if values.shape != (len(self.taxon_labels), len(self.trait_labels)):
            raise TraitDataError(
                f"values have shape {values.shape} but there are "
                f"{len(self.taxon_labels)} taxa and {len(self.trait_labels)} traits"
            )
        if not np.all(np.isfinite(values)):
            raise TraitDataError("trait values must be finite (complete data only)")

    @property
    def n_traits(self) -> int:
        return self.values.shape[1]

    def aligned_to(self, tree: PhyloTree) -> np.ndarray:
        """Rows reordered to match the tree's tip order."""
        if self.taxon_labels == tree.tip_labels:
            return self.values
        index = {label: row for row, label in enumerate(self.taxon_labels)}
        missing = [t for t in tree.tip_labels if t not in index]
        extra = sorted(set(self.taxon_labels) - set(tree.tip_labels))
        if missing or extra:
            raise TraitDataError(
                f"taxon labels do not match tree tips (missing: {missing[:5]}, extra: {extra[:5]})"
            )
        return self.values[[index[t] for t in tree.tip_labels]]


# ---------------------------------------------------------------------------
# Newick I/O


def _build_tree(root) -> PhyloTree:
    """Number a nested ``[label, length, children]`` structure into a PhyloTree."""
    tips, internals = [], []
    # iterative post-order; tips are met in left-to-right order
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        kids = node[2]
        if not kids:
            tips.append(node)
        elif done:
            internals.append(node)
        else:
            stack.append((node, True))
            stack.extend((kid, False) for kid in reversed(kids))
    order = tips + internals
    index = {id(node): k for k, node in enumerate(order)}
    parent = np.full(len(order), -1, dtype=np.int64)
    lengths = np.zeros(len(order))
    for node in internals:
        for kid in node[2]:
            parent[index[id(kid)]] = index[id(node)]
    for k, node in enumerate(order[:-1]):
        lengths[k] = node[1]
    return PhyloTree(parent, lengths, [node[0] for node in tips])


def parse_newick(text: str) -> PhyloTree:
    """Parse a rooted, fully bifurcating Newick string with branch lengths.

    Tips must be labelled and every non-root branch must carry a length.
    Internal node labels and ``[...]`` comments are accepted and ignored.
    """
    s = text.strip()
    if not s.endswith(";"):
        raise NewickError("Newick string must end with ';'")
    s = s[:-1]
    pos = 0
    n = len(s)

    def skip():
        nonlocal pos
        while pos < n:
            if s[pos].isspace():
                pos += 1
            elif s[pos] == "[":
                end = s.find("]", pos)
                if end < 0:
                    raise NewickError("unterminated comment")
                pos = end + 1
            else:
                break

    def read_label():
        nonlocal pos
        skip()
        if pos < n and s[pos] == "'":
            end = s.find("'", pos + 1)
            if end < 0:
                raise NewickError("unterminated quoted label")
            label = s[pos + 1 : end]
            pos = end + 1
            return label
        start = pos
        while pos < n and s[pos] not in "(),:;[" and not s[pos].isspace():
            pos += 1
        return s[start:pos]

    def read_length(required):
        nonlocal pos
        skip()
        if pos < n and s[pos] == ":":
            pos += 1
            skip()
            start = pos
            while pos < n and s[pos] not in "(),:;[" and not s[pos].isspace():
                pos += 1
            try:
                value = float(s[start:pos])
            except ValueError:
                raise NewickError(f"bad branch length {s[start:pos]!r} at {start}") from None
            if not math.isfinite(value) or value < 0:
                raise NewickError(f"branch length must be finite and >= 0, got {value}")
            return value
        if required:
            raise NewickError(f"missing branch length at position {pos}")
        return 0.0

    # node = [label, length, children]
    root = ["", 0.0, []]
    stack = []
    current = root
    skip()
    if pos >= n or s[pos] != "(":
        raise NewickError("tree must start with '('")
    while True:
        skip()
        if pos >= n:
            raise NewickError("unexpected end of input")
        c = s[pos]
        if c == "(":
            pos += 1
            child = ["", 0.0, []]
            current[2].append(child)
            stack.append(current)
            current = child
            continue
        # a leaf
        label = read_label()
        if not label:
            raise NewickError(f"unlabelled tip at position {pos}")
        current[0] = label
        current[1] = read_length(required=True)
        # close as many clades as needed
        while True:
            skip()
            if pos >= n:
                raise NewickError("unexpected end of input")
            c = s[pos]
            if c == ",":
                pos += 1
                if not stack:
                    raise NewickError("',' outside of a clade")
                parent = stack[-1]
                sibling = ["", 0.0, []]
                parent[2].append(sibling)
                current = sibling
                break
            if c == ")":
                pos += 1
                if not stack:
                    raise NewickError("unbalanced ')'")
                current = stack.pop()
                if len(current[2]) != 2:
                    raise NewickError(
                        f"node with {len(current[2])} children; only bifurcating trees are supported"
                    )
                current[0] = read_label()
                current[1] = read_length(required=bool(stack))
                if not stack:
                    skip()
                    if pos != n:
                        raise NewickError(f"trailing characters at position {pos}")
                    return _build_tree(root)
                continue
            raise NewickError(f"unexpected {c!r} at position {pos}")
        continue


def to_newick(tree: PhyloTree) -> str:
    """Serialise a tree; branch lengths use round-trip float formatting."""

    def fmt(x):
        return repr(float(x))

    n = tree.n_tips
    text: dict[int, str] = {}
    for node in range(tree.n_nodes):
        if node < n:
            text[node] = tree.tip_labels[node]
        else:
            a, b = sorted(tree.children[node - n], key=lambda c: tree.tip_sets[c].min())
            text[node] = (
                f"({text.pop(a)}:{fmt(tree.branch_length[a])},"
                f"{text.pop(b)}:{fmt(tree.branch_length[b])})"
            )
    return text[tree.root] + ";"


def read_newick(path) -> PhyloTree:
    return parse_newick(Path(path).read_text(encoding="utf-8"))


def write_newick(tree: PhyloTree, path) -> None:
    Path(path).write_text(to_newick(tree) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Trait CSV I/O

_MISSING = {"", "na", "nan", "?", "-"}


def read_traits_csv(path) -> TraitMatrix:
    """Read a trait table: header of trait names, first column taxon labels."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [row for row in csv.reader(fh) if row]
    if len(rows) < 2:
        raise TraitDataError(f"{path}: need a header and at least one data row")
    header = rows[0]
    traits = [h.strip() for h in header[1:]]
    labels, values = [], []
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise TraitDataError(f"{path}:{line}: expected {len(header)} cells, got {len(row)}")
        labels.append(row[0].strip())
        parsed = []
        for name, cell in zip(traits, row[1:]):
            if cell.strip().lower() in _MISSING:
                raise TraitDataError(f"{path}:{line}: missing value for trait {name!r}")
            try:
                parsed.append(float(cell))
            except ValueError:
                raise TraitDataError(f"{path}:{line}: non-numeric value {cell!r}") from None
        values.append(parsed)
    if len(set(labels)) != len(labels):
        raise TraitDataError(f"{path}: duplicate taxon labels")
    return TraitMatrix(np.array(values), labels, traits)


def write_traits_csv(traits: TraitMatrix, path, taxon_header: str = "taxon") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([taxon_header, *traits.trait_labels])
        for label, row in zip(traits.taxon_labels, traits.values):
            writer.writerow([label, *(repr(float(v)) for v in row)])


# ---------------------------------------------------------------------------
# Simulation


def simulate_tree(n_tips: int, rng_seed=None, birth_rate: float = 1.0) -> PhyloTree:
    """Pure-birth (Yule) tree with ``n_tips`` tips.

    The process starts with the two lineages leaving the root, splits a
    uniformly chosen lineage after each exponential waiting time and
    stops one further waiting time after the last split, so the tree is
    ultrametric with no zero-length tip pairs.
    """
    if n_tips < 2:
        raise ValueError(f"n_tips must be >= 2, got {n_tips}")
    rng = np.random.default_rng(rng_seed)
    root = ["", 0.0, []]
    # (node, start time)
    active = [(["", 0.0, []], 0.0), (["", 0.0, []], 0.0)]
    root[2] = [active[0][0], active[1][0]]
    t = 0.0
    while len(active) < n_tips:
        t += rng.exponential(1.0 / (birth_rate * len(active)))
        node, start = active.pop(rng.integers(len(active)))
        node[1] = t - start
        kids = [["", 0.0, []], ["", 0.0, []]]
        node[2] = kids
        active.extend((kid, t) for kid in kids)
    t += rng.exponential(1.0 / (birth_rate * len(active)))
    for k, (node, start) in enumerate(active):
        node[0] = f"t{k + 1}"
        node[1] = t - start
    tree = _build_tree(root)
    labels = [f"t{k + 1}" for k in range(n_tips)]
    return PhyloTree(tree.parent, tree.branch_length, labels)


def _cholesky_covariance(precision: np.ndarray) -> np.ndarray:
    precision = np.asarray(precision, dtype=float)
    try:
        scipy.linalg.cholesky(precision, lower=True)
    except np.linalg.LinAlgError:
        raise ValueError("precision matrix is not positive definite") from None
    return np.linalg.cholesky(np.linalg.inv(precision))


def simulate_traits(
    tree: PhyloTree,
    precision: np.ndarray,
    root_prior: RootPrior,
    rng_seed=None,
    trait_labels: Sequence[str] | None = None,
) -> TraitMatrix:
    """Forward-simulate Brownian diffusion from the root to the tips.

    The root value is drawn from the root prior, and each node is its
    parent's value plus ``N(0, t_h K^{-1})``.
    """
    precision = np.asarray(precision, dtype=float)
    p = precision.shape[0]
    chol = _cholesky_covariance(precision)
    rng = np.random.default_rng(rng_seed)
    z = rng.standard_normal((tree.n_nodes, p)) @ chol.T
    scale = np.sqrt(tree.branch_length)
    scale[-1] = math.sqrt(root_prior.root_variance)
    x = z * scale[:, None]
    x[-1] += root_prior.mean
    for node in range(tree.n_nodes - 2, -1, -1):
        x[node] += x[tree.parent[node]]
    if trait_labels is None:
        trait_labels = [f"trait{k + 1}" for k in range(p)]
    return TraitMatrix(x[: tree.n_tips], tree.tip_labels, trait_labels)


# ---------------------------------------------------------------------------
# Tree covariance and the sufficient statistic


def tree_covariance(tree: PhyloTree, root_prior: RootPrior) -> np.ndarray:
    """Shared root-to-MRCA path lengths plus the root prior variance."""
    n = tree.n_tips
    depth = tree.depth
    cov = np.zeros((n, n))
    sets = tree.tip_sets
    for k, (a, b) in enumerate(tree.children):
        d = depth[n + k]
        ia, ib = sets[a], sets[b]
        cov[np.ix_(ia, ib)] = d
        cov[np.ix_(ib, ia)] = d
    cov[np.diag_indices(n)] = depth[:n]
    return cov + root_prior.root_variance


def _centered(tree, traits, root_prior):
    x = traits.aligned_to(tree) if isinstance(traits, TraitMatrix) else np.asarray(traits, float)
    if x.shape[0] != tree.n_tips:
        raise TraitDataError(f"expected {tree.n_tips} rows, got {x.shape[0]}")
    mean = np.broadcast_to(root_prior.mean, (x.shape[1],))
    return x - mean


def compute_delta_dense(tree: PhyloTree, traits, root_prior: RootPrior) -> np.ndarray:
    """Reference O(N^3) evaluation of ``(X - 1 mu0')' Upsilon^{-1} (X - 1 mu0')``."""
    z = _centered(tree, traits, root_prior)
    cov = tree_covariance(tree, root_prior)
    try:
        factor = scipy.linalg.cho_factor(cov, lower=True)
    except np.linalg.LinAlgError:
        raise DegenerateTreeError("tree covariance is singular") from None
    delta = z.T @ scipy.linalg.cho_solve(factor, z)
    return 0.5 * (delta + delta.T)


def compute_delta_pruning(tree: PhyloTree, traits, root_prior: RootPrior) -> np.ndarray:
    """Same quantity as :func:`compute_delta_dense` in one post-order pass.

    Each internal node contributes the contrast between its children's
    partial means, weighted by the inverse of their summed variances;
    the root adds the contrast against the prior mean.  Nodes of equal
    height are processed together.
    """
    z = _centered(tree, traits, root_prior)
    n, p = z.shape
    mean = np.zeros((tree.n_nodes, p))
    mean[:n] = z
    var = np.zeros(tree.n_nodes)
    t = tree.branch_length
    kids = tree.children
    contrasts = np.empty((n, p))
    weights = np.empty(n)
    filled = 0
    for level in tree._levels:
        a, b = kids[level - n, 0], kids[level - n, 1]
        va = var[a] + t[a]
        vb = var[b] + t[b]
        total = va + vb
        if np.any(total <= 0):
            raise DegenerateTreeError("sibling subtrees with zero total variance")
        m = len(level)
        contrasts[filled : filled + m] = mean[a] - mean[b]
        weights[filled : filled + m] = 1.0 / total
        mean[level] = (mean[a] * vb[:, None] + mean[b] * va[:, None]) / total[:, None]
        var[level] = va * vb / total
        filled += m
    root_total = var[-1] + root_prior.root_variance
    if root_total <= 0:
        raise DegenerateTreeError("root contrast has zero variance")
    contrasts[filled] = mean[-1]
    weights[filled] = 1.0 / root_total
    delta = contrasts.T @ (contrasts * weights[:, None])
    return 0.5 * (delta + delta.T)
