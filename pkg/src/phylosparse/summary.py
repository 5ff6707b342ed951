"""Posterior summaries of a chain trace and the benchmark metrics.

Edge inclusion probabilities, Bayes factors and the graph estimate come from
the stored graph indicators.  The precision estimate averages only samples
whose edge indicator agrees with the graph estimate; the correlation
estimate averages over all samples.  The full model selects correlations
through HPD intervals instead.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gwishart import TraitGraph
from .mcmc import ChainTrace

DEFAULT_BF_THRESHOLD = 10**0.5
CATEGORIES = ("CI-I", "CI-D", "CD-D")


class EmptyTraceError(ValueError):
    """The trace holds no post-warm-up samples."""


class InconsistentEstimateError(ValueError):
    """No stored sample agrees with the graph estimate for some entry."""


def _require_samples(trace: ChainTrace) -> None:
    if len(trace) == 0:
        raise EmptyTraceError("trace has no samples after warm-up")


def _upper_to_matrix(values: np.ndarray, p: int, diagonal: float = 0.0) -> np.ndarray:
    out = np.full((p, p), diagonal, dtype=float)
    iu = np.triu_indices(p, 1)
    out[iu] = values
    out[iu[1], iu[0]] = values
    return out


def edge_inclusion_probabilities(trace: ChainTrace) -> np.ndarray:
    """Fraction of stored samples containing each edge, as a symmetric p×p
    matrix with a zero diagonal."""
    _require_samples(trace)
    return _upper_to_matrix(trace.graphs.mean(axis=0), trace.p)


def bayes_factors(pe: np.ndarray) -> np.ndarray:
    """pe / (1 - pe) under the uniform graph prior; pe = 1 maps to +inf."""
    pe = np.asarray(pe, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        bf = np.where(pe < 1.0, pe / (1.0 - pe), np.inf)
    np.fill_diagonal(bf, 0.0)
    return bf


def estimate_graph(pe, bf_threshold: float = DEFAULT_BF_THRESHOLD) -> tuple[TraitGraph, np.ndarray]:
    """Median-style graph estimate from edge inclusion probabilities.

    Parameters
    ----------
    pe : array_like
        Symmetric p×p matrix of inclusion probabilities.
    bf_threshold : float
        Edges with Bayes factor at or above this value are kept.

    Returns
    -------
    graph : TraitGraph
    bf : ndarray
        Bayes factors, +inf where pe = 1.

    Notes
    -----
    The test ``pe / (1 - pe) >= t`` is evaluated as ``pe >= t / (1 + t)`` so
    that the boundary is exact in floating point.
    """
    if not bf_threshold > 0:
        raise ValueError("bf_threshold must be positive")
    pe = np.asarray(pe, dtype=float)
    p = pe.shape[0]
    cut = bf_threshold / (1.0 + bf_threshold)
    keep = pe >= cut
    np.fill_diagonal(keep, False)
    return TraitGraph.from_adjacency(keep | keep.T), bayes_factors(pe)


def estimate_precision(trace: ChainTrace, graph_estimate: TraitGraph) -> np.ndarray:
    """Entry-wise mean of k_ij over samples whose g_ij agrees with the estimate.

    The diagonal averages over all samples.  Raises
    :class:`InconsistentEstimateError` listing the (1-based) pairs for which
    no sample agrees.
    """
    _require_samples(trace)
    p = trace.p
    if graph_estimate.n_vertices != p:
        raise ValueError("graph estimate and trace disagree on the number of traits")
    target = graph_estimate.indicators().astype(bool)
    agree = trace.graphs.astype(bool) == target[None, :]
    counts = agree.sum(axis=0)
    if np.any(counts == 0):
        iu = np.triu_indices(p, 1)
        bad = [(int(iu[0][s]) + 1, int(iu[1][s]) + 1) for s in np.flatnonzero(counts == 0)]
        raise InconsistentEstimateError(f"no sample agrees with the graph estimate for pairs {bad}")
    iu = np.triu_indices(p, 1)
    k_upper = trace.precisions[:, iu[0], iu[1]]
    means = (k_upper * agree).sum(axis=0) / counts
    means[~target] = 0.0
    out = _upper_to_matrix(means, p)
    out[np.diag_indices(p)] = trace.precisions[:, np.arange(p), np.arange(p)].mean(axis=0)
    return out


def correlation_samples(trace: ChainTrace) -> np.ndarray:
    """Per-sample correlation matrices of K^{-1}, shape (n, p, p)."""
    _require_samples(trace)
    try:
        cov = np.linalg.inv(trace.precisions)
    except np.linalg.LinAlgError as exc:
        raise ValueError("a stored precision matrix is singular") from exc
    sd = np.sqrt(np.einsum("nii->ni", cov))
    if not np.all(np.isfinite(sd)) or np.any(sd <= 0):
        raise ValueError("a stored precision matrix is not positive definite")
    corr = cov / sd[:, :, None] / sd[:, None, :]
    corr = np.clip(0.5 * (corr + np.swapaxes(corr, 1, 2)), -1.0, 1.0)
    idx = np.arange(trace.p)
    corr[:, idx, idx] = 1.0
    return corr


def estimate_correlation(trace: ChainTrace) -> np.ndarray:
    """Posterior mean correlation matrix over all stored samples."""
    out = correlation_samples(trace).mean(axis=0)
    out = 0.5 * (out + out.T)
    np.fill_diagonal(out, 1.0)
    return out


def hpd_interval(samples, gamma: float) -> tuple[float, float]:
    """Shortest interval holding ``ceil(gamma * n)`` of the sorted samples."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = x.size
    if n < 20:
        raise ValueError(f"need at least 20 samples for an HPD interval, got {n}")
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    m = min(n, math.ceil(gamma * n - 1e-12))
    widths = x[m - 1:] - x[: n - m + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + m - 1])


def hpd_bounds(trace: ChainTrace, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-pair HPD bounds of the correlation samples (diagonal set to 1)."""
    corr = correlation_samples(trace)
    p = trace.p
    lo = np.ones((p, p))
    hi = np.ones((p, p))
    for i, j in zip(*np.triu_indices(p, 1)):
        a, b = hpd_interval(corr[:, i, j], gamma)
        lo[i, j] = lo[j, i] = a
        hi[i, j] = hi[j, i] = b
    return lo, hi


def classify_hpd(trace: ChainTrace, gamma: float) -> np.ndarray:
    """Indicator matrix of pairs whose HPD interval excludes zero."""
    lo, hi = hpd_bounds(trace, gamma)
    out = ((lo > 0) | (hi < 0)).astype(np.int8)
    np.fill_diagonal(out, 0)
    return out


def sign_probability(trace: ChainTrace) -> np.ndarray:
    """max(P(r > 0), P(r < 0)) per pair, with zeros counted as positive."""
    corr = correlation_samples(trace)
    pos = (corr >= 0).mean(axis=0)
    out = np.maximum(pos, 1.0 - pos)
    np.fill_diagonal(out, 1.0)
    return out


def effective_sample_size(x) -> float:
    """Autocorrelation-adjusted sample size using Geyer's initial positive
    sequence on sums of adjacent autocorrelation pairs."""
    x = np.asarray(x, dtype=float).ravel()
    n = x.size
    if n < 4:
        return float(n)
    x = x - x.mean()
    var = x @ x / n
    if var == 0:
        return float(n)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    acf = np.fft.irfft(f * np.conjugate(f), size)[:n] / (n * var)
    tau = -1.0
    for k in range(0, n - 1, 2):
        pair = acf[k] + acf[k + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
    return float(n / max(tau, 1.0 / n))


@dataclass
class BenchmarkMetrics:
    """Confusion-based metrics for a binary pair selection.  Undefined
    ratios are ``None``."""

    tp: int
    fp: int
    tn: int
    fn: int
    sensitivity: float | None
    specificity: float | None
    precision_metric: float | None
    f1: float | None
    accuracy: float
    logmse_precision: dict = field(default_factory=dict)
    logmse_correlation: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "precision": self.precision_metric,
            "f1": self.f1,
            "accuracy": self.accuracy,
        }


def _ratio(a: int, b: int) -> float | None:
    return a / b if b else None


def _as_upper(estimate, p: int | None = None) -> np.ndarray:
    if isinstance(estimate, TraitGraph):
        return estimate.indicators().astype(bool)
    m = np.asarray(estimate)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("expected a square indicator matrix")
    return m[np.triu_indices(m.shape[0], 1)] != 0


def confusion_metrics(estimate, truth) -> BenchmarkMetrics:
    """Sensitivity, specificity, precision, F1 and accuracy over the
    upper-triangle pairs."""
    est = _as_upper(estimate)
    tru = _as_upper(truth)
    if est.shape != tru.shape:
        raise ValueError("estimate and truth have different dimensions")
    tp = int(np.sum(est & tru))
    fp = int(np.sum(est & ~tru))
    tn = int(np.sum(~est & ~tru))
    fn = int(np.sum(~est & tru))
    sens = _ratio(tp, tp + fn)
    prec = _ratio(tp, tp + fp)
    if sens is None or prec is None:
        f1 = None
    elif sens + prec == 0:
        f1 = 0.0
    else:
        f1 = 2 * sens * prec / (sens + prec)
    return BenchmarkMetrics(
        tp=tp, fp=fp, tn=tn, fn=fn,
        sensitivity=sens,
        specificity=_ratio(tn, tn + fp),
        precision_metric=prec,
        f1=f1,
        accuracy=(tp + tn) / est.size,
    )


def correlation_from_precision(precision) -> np.ndarray:
    cov = np.linalg.inv(np.asarray(precision, dtype=float))
    sd = np.sqrt(np.diag(cov))
    r = cov / np.outer(sd, sd)
    r = 0.5 * (r + r.T)
    np.fill_diagonal(r, 1.0)
    return r


def pair_categories(true_precision, tol: float = 1e-10) -> np.ndarray:
    """Label each off-diagonal pair CI-I, CI-D or CD-D from K_0.

    CD-D marks an edge of G_0; among non-edges, CI-D marks a non-zero
    marginal correlation and CI-I a zero one.  The diagonal is labelled "".
    """
    k0 = np.asarray(true_precision, dtype=float)
    r0 = correlation_from_precision(k0)
    p = k0.shape[0]
    out = np.full((p, p), "", dtype=object)
    for i in range(p):
        for j in range(p):
            if i == j:
                continue
            if abs(k0[i, j]) > tol:
                out[i, j] = "CD-D"
            elif abs(r0[i, j]) > tol:
                out[i, j] = "CI-D"
            else:
                out[i, j] = "CI-I"
    return out


@dataclass
class CategoryLogMSE:
    """Per-replicate log mean squared error for one category.

    ``values`` is NaN where the error was exactly zero; those replicates are
    flagged in ``exact``.
    """

    values: np.ndarray
    exact: np.ndarray

    def mean(self) -> float | None:
        finite = self.values[~self.exact]
        return float(finite.mean()) if finite.size else None


def logmse_stratified(estimates, truth, categories) -> dict[str, CategoryLogMSE]:
    """Log of the within-category mean squared error, one value per estimate.

    Parameters
    ----------
    estimates : sequence of (p, p) arrays
        One estimate per replicate.
    truth : (p, p) array
    categories : (p, p) array of str
        Labels from :func:`pair_categories`; only upper-triangle pairs count.
    """
    est = np.asarray(estimates, dtype=float)
    if est.ndim == 2:
        est = est[None]
    truth = np.asarray(truth, dtype=float)
    p = truth.shape[0]
    iu = np.triu_indices(p, 1)
    labels = np.asarray(categories, dtype=object)[iu]
    sq = (est[:, iu[0], iu[1]] - truth[iu]) ** 2
    out = {}
    for cat in CATEGORIES:
        mask = labels == cat
        if not mask.any():
            continue
        mse = sq[:, mask].mean(axis=1)
        exact = mse == 0.0
        with np.errstate(divide="ignore"):
            values = np.where(exact, np.nan, np.log(np.where(exact, 1.0, mse)))
        out[cat] = CategoryLogMSE(values=values, exact=exact)
    if not out:
        raise ValueError("no pairs in any category")
    return out


@dataclass
class PosteriorSummary:
    """Point estimates and selection quantities derived from a trace."""

    variant: str
    edge_inclusion: np.ndarray
    bayes_factors: np.ndarray
    graph_estimate: TraitGraph
    precision_estimate: np.ndarray
    correlation_estimate: np.ndarray
    sign_probability: np.ndarray
    hpd_gamma: float
    hpd_lower: np.ndarray
    hpd_upper: np.ndarray
    trait_labels: list = field(default_factory=list)

    def hpd_selection(self) -> np.ndarray:
        out = ((self.hpd_lower > 0) | (self.hpd_upper < 0)).astype(np.int8)
        np.fill_diagonal(out, 0)
        return out

    def to_dict(self) -> dict:
        def mat(a):
            return [[_json_float(v) for v in row] for row in np.asarray(a, dtype=float)]

        return {
            "variant": self.variant,
            "trait_labels": list(self.trait_labels),
            "pe": mat(self.edge_inclusion),
            "bf": mat(self.bayes_factors),
            "graph": [[i + 1, j + 1] for i, j in sorted(self.graph_estimate.edges)],
            "K_hat": mat(self.precision_estimate),
            "R_hat": mat(self.correlation_estimate),
            "ps": mat(self.sign_probability),
            "hpd": {"gamma": self.hpd_gamma, "lo": mat(self.hpd_lower), "hi": mat(self.hpd_upper)},
        }


def _json_float(v: float):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if math.isnan(v):
        return None
    return float(v)


def summarize(
    trace: ChainTrace,
    variant: str | None = None,
    bf_threshold: float = DEFAULT_BF_THRESHOLD,
    gamma: float = 0.95,
) -> PosteriorSummary:
    """Compute every summary quantity for a trace."""
    variant = variant or trace.metadata.get("spec", {}).get("variant", "graphical")
    pe = edge_inclusion_probabilities(trace)
    graph, bf = estimate_graph(pe, bf_threshold)
    lo, hi = hpd_bounds(trace, gamma)
    return PosteriorSummary(
        variant=variant,
        edge_inclusion=pe,
        bayes_factors=bf,
        graph_estimate=graph,
        precision_estimate=estimate_precision(trace, graph),
        correlation_estimate=estimate_correlation(trace),
        sign_probability=sign_probability(trace),
        hpd_gamma=gamma,
        hpd_lower=lo,
        hpd_upper=hi,
        trait_labels=list(trace.metadata.get("trait_labels", [])),
    )


def write_summary_json(summary: PosteriorSummary, path, provenance: dict | None = None) -> Path:
    path = Path(path)
    payload = summary.to_dict()
    if provenance:
        payload["provenance"] = provenance
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path
