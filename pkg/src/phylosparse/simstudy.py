"""Monte Carlo benchmark of the graphical model against the full model.

Each replicate simulates a tree and traits under a known precision matrix,
fits both models to the same data and scores the graphical model's graph
estimate and the full model's HPD-based correlation selection against the
true graph.  Replicates are independent jobs; results are sorted by index
before aggregation so the report does not depend on the worker count.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .gwishart import GWishartParams, TraitGraph, WishartParams
from .mcmc import ModelSpec, SamplerSettings, run_chain
from .phylo import RootPrior, simulate_traits, simulate_tree
from .summary import (
    CATEGORIES,
    DEFAULT_BF_THRESHOLD,
    confusion_metrics,
    correlation_from_precision,
    edge_inclusion_probabilities,
    effective_sample_size,
    estimate_correlation,
    estimate_graph,
    estimate_precision,
    classify_hpd,
    logmse_stratified,
    pair_categories,
)

log = logging.getLogger(__name__)

METRICS = ("sensitivity", "specificity", "precision", "f1", "accuracy")
MAX_FAILURE_FRACTION = 0.02


class PrecisionValidationError(ValueError):
    """A true precision matrix failed validation."""


class BenchmarkAbortedError(RuntimeError):
    """Too many replicates failed."""


def validate_precision(k0, expected_edges=None, tol: float = 1e-12) -> np.ndarray:
    """Check a true precision matrix: square, symmetric, positive definite and,
    if ``expected_edges`` (0-based pairs) is given, with that zero pattern."""
    k0 = np.asarray(k0, dtype=float)
    if k0.ndim != 2 or k0.shape[0] != k0.shape[1]:
        raise PrecisionValidationError(f"precision must be square, got shape {k0.shape}")
    if not np.allclose(k0, k0.T, rtol=0, atol=1e-10):
        raise PrecisionValidationError("precision matrix is not symmetric")
    k0 = 0.5 * (k0 + k0.T)
    eig = np.linalg.eigvalsh(k0)
    if eig[0] <= tol:
        raise PrecisionValidationError(
            f"precision matrix is not positive definite: smallest eigenvalue {eig[0]:.6g}"
        )
    if expected_edges is not None:
        found = TraitGraph.from_precision(k0).edges
        want = TraitGraph(k0.shape[0], frozenset(expected_edges)).edges
        if found != want:
            extra = sorted((i + 1, j + 1) for i, j in found - want)
            missing = sorted((i + 1, j + 1) for i, j in want - found)
            raise PrecisionValidationError(
                f"zero pattern mismatch: unexpected non-zeros {extra}, unexpected zeros {missing}"
            )
    return k0


def read_precision_csv(path, expected_edges=None) -> np.ndarray:
    try:
        k0 = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise PrecisionValidationError(f"{path}: {exc}") from exc
    return validate_precision(k0, expected_edges)


def _parse_edges(text: str) -> list[tuple[int, int]]:
    """``"1-2 2-3"`` (1-based) to 0-based pairs."""
    out = []
    for token in text.replace(",", " ").split():
        a, b = token.split("-")
        out.append((int(a) - 1, int(b) - 1))
    return out


@dataclass(frozen=True, eq=False)
class ScenarioSpec:
    """A benchmark scenario.

    ``true_precision`` defines the true graph (its zero pattern) and the
    true correlation matrix.  Chain settings are shared by both models.
    """

    name: str
    n_taxa: int
    true_precision: np.ndarray
    n_replicates: int = 50
    base_seed: int = 0
    n_iterations: int = 1000
    warmup: int = 200
    thin: int = 1
    mc_samples: int = 1000
    prior_mc_samples: int = 10_000
    gwishart_df: float = 3.0
    full_df: float | None = None
    root_sample_size: float = 1.0
    bf_threshold: float = DEFAULT_BF_THRESHOLD
    hpd_levels: tuple = (0.90, 0.95)

    def __post_init__(self):
        k0 = validate_precision(self.true_precision)
        object.__setattr__(self, "true_precision", k0)
        if self.n_taxa < 2:
            raise ValueError("n_taxa must be >= 2")
        if self.n_replicates < 1:
            raise ValueError("n_replicates must be >= 1")
        if not 0 <= self.warmup < self.n_iterations or self.thin < 1:
            raise ValueError("need 0 <= warmup < n_iterations and thin >= 1")
        if self.full_df is None:
            object.__setattr__(self, "full_df", self.p + 2.0)
        if not all(0 < g < 1 for g in self.hpd_levels):
            raise ValueError("HPD levels must lie in (0, 1)")

    @property
    def p(self) -> int:
        return self.true_precision.shape[0]

    @property
    def true_graph(self) -> TraitGraph:
        return TraitGraph.from_precision(self.true_precision)

    @property
    def true_correlation(self) -> np.ndarray:
        return correlation_from_precision(self.true_precision)

    @property
    def categories(self) -> np.ndarray:
        return pair_categories(self.true_precision)

    def model(self, variant: str) -> ModelSpec:
        root = RootPrior.centered(self.p, self.root_sample_size)
        eye = np.eye(self.p)
        if variant == "graphical":
            return ModelSpec("graphical", root, gwishart_prior=GWishartParams(self.gwishart_df, eye))
        return ModelSpec("full", root, wishart_prior=WishartParams(self.full_df, eye))

    def settings(self) -> SamplerSettings:
        return SamplerSettings(mc_samples=self.mc_samples, prior_mc_samples=self.prior_mc_samples)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n_taxa": self.n_taxa,
            "p": self.p,
            "true_precision": self.true_precision.tolist(),
            "n_replicates": self.n_replicates,
            "base_seed": self.base_seed,
            "n_iterations": self.n_iterations,
            "warmup": self.warmup,
            "thin": self.thin,
            "mc_samples": self.mc_samples,
            "prior_mc_samples": self.prior_mc_samples,
            "gwishart_df": self.gwishart_df,
            "full_df": self.full_df,
            "root_sample_size": self.root_sample_size,
            "bf_threshold": self.bf_threshold,
            "hpd_levels": list(self.hpd_levels),
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def load_scenario(path, overrides: dict | None = None) -> ScenarioSpec:
    """Read a scenario from an INI file.

    ``[scenario]`` holds ``name``, ``n_taxa``, ``precision`` (CSV path
    relative to the INI file), optional ``edges`` (1-based, e.g.
    ``1-2 2-3``) checked against the zero pattern, ``replicates`` and
    ``seed``.  ``[chain]`` and ``[model]``/``[summary]`` hold the remaining
    fields.  ``overrides`` maps ScenarioSpec field names to values and wins
    over the file.
    """
    path = Path(path)
    cfg = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if not cfg.read(path):
        raise FileNotFoundError(path)
    sc = cfg["scenario"]
    edges = _parse_edges(sc["edges"]) if "edges" in sc else None
    k0 = read_precision_csv(path.parent / sc["precision"], edges)
    chain = cfg["chain"] if cfg.has_section("chain") else {}
    model = cfg["model"] if cfg.has_section("model") else {}
    summ = cfg["summary"] if cfg.has_section("summary") else {}
    kw = dict(
        name=sc.get("name", path.stem),
        n_taxa=int(sc["n_taxa"]),
        true_precision=k0,
        n_replicates=int(sc.get("replicates", 50)),
        base_seed=int(sc.get("seed", 0)),
        n_iterations=int(chain.get("iterations", 1000)),
        warmup=int(chain.get("warmup", 200)),
        thin=int(chain.get("thin", 1)),
        mc_samples=int(chain.get("mc_samples", 1000)),
        prior_mc_samples=int(chain.get("prior_mc_samples", 10_000)),
        gwishart_df=float(model.get("gwishart_df", 3.0)),
        full_df=float(model["full_df"]) if "full_df" in model else None,
        root_sample_size=float(model.get("root_sample_size", 1.0)),
        bf_threshold=float(summ.get("bf_threshold", DEFAULT_BF_THRESHOLD)),
        hpd_levels=tuple(float(x) for x in summ.get("hpd_levels", "0.90 0.95").split()),
    )
    kw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ScenarioSpec(**kw)


def bundled_scenario_path(name: str) -> Path:
    """Path of a shipped scenario file (``"sim1"`` or ``"sim2"``)."""
    path = resources.files("phylosparse") / "data" / f"{name}.ini"
    if not path.is_file():
        raise FileNotFoundError(f"no bundled scenario {name!r}")
    return Path(str(path))


def criterion_name(gamma: float) -> str:
    return f"HPD_{round(gamma * 100):d}"


@dataclass
class ReplicateResult:
    index: int
    ok: bool
    error: str = ""
    edge_inclusion: np.ndarray | None = None
    graph_estimate: np.ndarray | None = None  # p×p 0/1
    hpd_selection: dict = field(default_factory=dict)  # criterion -> p×p 0/1
    precision_estimates: dict = field(default_factory=dict)  # model -> K̂
    correlation_estimates: dict = field(default_factory=dict)  # model -> R̂
    metrics: dict = field(default_factory=dict)  # criterion -> BenchmarkMetrics
    ess: dict = field(default_factory=dict)
    data_digest: str = ""


def _replicate_seeds(spec: ScenarioSpec, index: int):
    return np.random.SeedSequence([spec.base_seed, index]).spawn(4)


def simulate_replicate_data(spec: ScenarioSpec, index: int):
    """Tree and traits for one replicate (shared by both model fits)."""
    s_tree, s_traits, _, _ = _replicate_seeds(spec, index)
    tree = simulate_tree(spec.n_taxa, s_tree)
    root = RootPrior.centered(spec.p, spec.root_sample_size)
    traits = simulate_traits(tree, spec.true_precision, root, s_traits)
    return tree, traits


def _min_ess(trace, pairs) -> float:
    values = [effective_sample_size(trace.precisions[:, i, i]) for i in range(trace.p)]
    values += [effective_sample_size(trace.precisions[:, i, j]) for i, j in pairs]
    return float(min(values))


def run_replicate(spec: ScenarioSpec, index: int) -> ReplicateResult:
    """Simulate, fit both models and score one replicate.  Exceptions are
    caught and reported as a failed result."""
    try:
        return _run_replicate(spec, index)
    except Exception as exc:  # one bad replicate must not abort the batch
        log.warning("replicate %d failed: %r", index, exc)
        return ReplicateResult(index=index, ok=False, error=f"{type(exc).__name__}: {exc}")


def _run_replicate(spec: ScenarioSpec, index: int) -> ReplicateResult:
    _, _, s_graph, s_full = _replicate_seeds(spec, index)
    tree, traits = simulate_replicate_data(spec, index)
    digest = hashlib.sha256(tree.branch_length.tobytes() + traits.values.tobytes()).hexdigest()[:16]
    truth = spec.true_graph
    settings = spec.settings()
    chain = dict(n_iterations=spec.n_iterations, warmup=spec.warmup, thin=spec.thin, settings=settings)

    g_trace = run_chain(tree, traits, spec.model("graphical"), rng_seed=s_graph, **chain)
    pe = edge_inclusion_probabilities(g_trace)
    g_hat, _ = estimate_graph(pe, spec.bf_threshold)
    f_trace = run_chain(tree, traits, spec.model("full"), rng_seed=s_full, **chain)

    result = ReplicateResult(index=index, ok=True, edge_inclusion=pe, data_digest=digest)
    result.graph_estimate = g_hat.adjacency.astype(np.int8)
    result.metrics["GGM"] = confusion_metrics(g_hat, truth)
    for gamma in spec.hpd_levels:
        name = criterion_name(gamma)
        sel = classify_hpd(f_trace, gamma)
        result.hpd_selection[name] = sel
        result.metrics[name] = confusion_metrics(sel, truth)
    result.precision_estimates["graphical"] = estimate_precision(g_trace, g_hat)
    result.precision_estimates["full"] = f_trace.precisions.mean(axis=0)
    result.correlation_estimates["graphical"] = estimate_correlation(g_trace)
    result.correlation_estimates["full"] = estimate_correlation(f_trace)
    edges = sorted(truth.edges)
    result.ess = {"graphical": _min_ess(g_trace, edges), "full": _min_ess(f_trace, edges)}
    return result


def tune_chain_length(spec: ScenarioSpec, target_ess: float = 200.0, pilot_iterations: int | None = None) -> ScenarioSpec:
    """Scale the chain length so a pilot graphical fit reaches ``target_ess``
    on the diagonal and true-edge precision entries."""
    pilot = replace(spec, n_iterations=pilot_iterations or spec.n_iterations)
    pilot = replace(pilot, warmup=min(pilot.warmup, pilot.n_iterations // 5))
    _, _, s_graph, _ = _replicate_seeds(pilot, 0)
    tree, traits = simulate_replicate_data(pilot, 0)
    trace = run_chain(
        tree, traits, pilot.model("graphical"), n_iterations=pilot.n_iterations,
        warmup=pilot.warmup, thin=pilot.thin, rng_seed=s_graph, settings=pilot.settings(),
    )
    ess = _min_ess(trace, sorted(spec.true_graph.edges))
    kept_needed = math.ceil(len(trace) * target_ess / max(ess, 1.0))
    n_iter = max(pilot.warmup + pilot.thin * kept_needed, pilot.warmup + 20 * pilot.thin)
    n_iter = math.ceil(1.25 * n_iter)  # margin for replicate-to-replicate variation
    warmup = n_iter // 5
    log.info("pilot ESS %.1f over %d samples; using %d iterations", ess, len(trace), n_iter)
    return replace(spec, n_iterations=n_iter, warmup=warmup)


def run_replicates(spec: ScenarioSpec, workers: int = 1, indices=None) -> list[ReplicateResult]:
    """Run replicates on a process pool and return them sorted by index."""
    indices = list(range(spec.n_replicates) if indices is None else indices)
    if workers <= 1 or len(indices) <= 1:
        results = [run_replicate(spec, i) for i in indices]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_replicate, [spec] * len(indices), indices))
    return sorted(results, key=lambda r: r.index)


# ---------------------------------------------------------------------------
# Aggregation


def _mean_sd(values) -> dict:
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "sd": None, "n": 0}
    arr = np.asarray(vals, dtype=float)
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return {"mean": float(arr.mean()), "sd": sd, "n": int(arr.size)}


def category_accuracy(selection, truth: TraitGraph, categories) -> dict:
    """Fraction of correctly classified pairs within each category."""
    sel = np.asarray(selection) != 0
    tru = truth.adjacency
    iu = np.triu_indices(truth.n_vertices, 1)
    labels = np.asarray(categories, dtype=object)[iu]
    correct = sel[iu] == tru[iu]
    return {c: float(correct[labels == c].mean()) for c in CATEGORIES if np.any(labels == c)}


@dataclass
class BenchmarkReport:
    scenario: ScenarioSpec
    results: list
    failed: list
    graph_mc: np.ndarray
    pe_mc: np.ndarray
    metrics: dict  # criterion -> metric -> {mean, sd, n}
    category_accuracy: dict  # criterion -> category -> {mean, sd, n}
    logmse: dict  # quantity -> model -> category -> {"values", "exact", "mean"}
    checks: dict

    def rows(self) -> list[tuple]:
        """Metrics CSV rows: (replicate, model, criterion, category, metric, value)."""
        out = []
        model_of = {"GGM": "graphical"}
        criteria = ["GGM"] + [criterion_name(g) for g in self.scenario.hpd_levels]
        cats = self.scenario.categories
        truth = self.scenario.true_graph
        for r in self.results:
            for crit in criteria:
                model = model_of.get(crit, "full")
                d = r.metrics[crit].as_dict()
                for m in METRICS:
                    out.append((r.index, model, crit, "all", m, d[m]))
                sel = r.graph_estimate if crit == "GGM" else r.hpd_selection[crit]
                for c, v in category_accuracy(sel, truth, cats).items():
                    out.append((r.index, model, crit, c, "accuracy", v))
        for qty, by_model in self.logmse.items():
            for model, by_cat in by_model.items():
                for c, entry in by_cat.items():
                    for r, v, ex in zip(self.results, entry["values"], entry["exact"]):
                        out.append((r.index, model, "estimate", c, f"logmse_{qty}", "exact" if ex else v))
        for crit in criteria:
            model = model_of.get(crit, "full")
            for m in METRICS:
                s = self.metrics[crit][m]
                out.append(("mean", model, crit, "all", m, s["mean"]))
                out.append(("sd", model, crit, "all", m, s["sd"]))
            for c, s in self.category_accuracy[crit].items():
                out.append(("mean", model, crit, c, "accuracy", s["mean"]))
                out.append(("sd", model, crit, c, "accuracy", s["sd"]))
        for qty, by_model in self.logmse.items():
            for model, by_cat in by_model.items():
                for c, entry in by_cat.items():
                    out.append(("mean", model, "estimate", c, f"logmse_{qty}", entry["mean"]))
        return out

    def to_dict(self) -> dict:
        def clean(entry):
            return {
                "mean": entry["mean"],
                "values": [None if ex else float(v) for v, ex in zip(entry["values"], entry["exact"])],
                "exact": [bool(x) for x in entry["exact"]],
            }

        return {
            "scenario": self.scenario.to_dict(),
            "n_successful": len(self.results),
            "failed": [{"replicate": r.index, "error": r.error} for r in self.failed],
            "graph_mc": self.graph_mc.tolist(),
            "pe_mc": self.pe_mc.tolist(),
            "metrics": self.metrics,
            "category_accuracy": self.category_accuracy,
            "logmse": {q: {m: {c: clean(e) for c, e in bc.items()} for m, bc in bm.items()} for q, bm in self.logmse.items()},
            "checks": self.checks,
        }

    def text_table(self) -> str:
        criteria = ["GGM"] + [criterion_name(g) for g in self.scenario.hpd_levels]

        def cell(s):
            if s["mean"] is None:
                return "n/a"
            return f"{s['mean']:.2f} ({s['sd']:.3f})"

        width = 16
        lines = [f"Scenario {self.scenario.name}: {len(self.results)} replicates, N={self.scenario.n_taxa}, p={self.scenario.p}", ""]
        lines.append("Decision-criterion performance, mean (SD)")
        lines.append(f"{'':<14}" + "".join(f"{c:>{width}}" for c in criteria))
        for m in METRICS:
            lines.append(f"{m:<14}" + "".join(f"{cell(self.metrics[c][m]):>{width}}" for c in criteria))
        lines.append("")
        lines.append("Pairwise accuracy by category, mean (SD)")
        lines.append(f"{'':<14}" + "".join(f"{c:>{width}}" for c in criteria))
        for cat in CATEGORIES:
            if cat in self.category_accuracy[criteria[0]]:
                lines.append(f"{cat:<14}" + "".join(f"{cell(self.category_accuracy[c][cat]):>{width}}" for c in criteria))
        lines.append("")
        lines.append("Mean log MSE by category (graphical / full)")
        for qty in ("precision", "correlation"):
            for cat in CATEGORIES:
                if cat not in self.logmse[qty]["graphical"]:
                    continue
                vals = []
                for model in ("graphical", "full"):
                    e = self.logmse[qty][model][cat]
                    vals.append("exact" if e["mean"] is None else f"{e['mean']:.3f}")
                lines.append(f"{qty:<12}{cat:<6}{vals[0]:>12}{vals[1]:>12}")
        lines.append("")
        for name, ok in self.checks.items():
            lines.append(f"check {name}: {'pass' if ok else 'FAIL'}")
        return "\n".join(lines) + "\n"


def aggregate(results: list[ReplicateResult], spec: ScenarioSpec) -> BenchmarkReport:
    """Combine replicate results into the benchmark report.

    Failed replicates are excluded with a warning when they make up at most
    2% of the batch; beyond that the benchmark is aborted.
    """
    results = sorted(results, key=lambda r: r.index)
    good = [r for r in results if r.ok]
    failed = [r for r in results if not r.ok]
    if not good:
        raise BenchmarkAbortedError("all replicates failed")
    if failed:
        frac = len(failed) / len(results)
        msg = f"{len(failed)} of {len(results)} replicates failed: " + "; ".join(f"#{r.index}: {r.error}" for r in failed)
        if frac > MAX_FAILURE_FRACTION:
            raise BenchmarkAbortedError(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)

    criteria = ["GGM"] + [criterion_name(g) for g in spec.hpd_levels]
    truth = spec.true_graph
    cats = spec.categories
    metrics = {
        c: {m: _mean_sd([r.metrics[c].as_dict()[m] for r in good]) for m in METRICS} for c in criteria
    }
    cat_acc = {}
    for c in criteria:
        per = [category_accuracy(r.graph_estimate if c == "GGM" else r.hpd_selection[c], truth, cats) for r in good]
        cat_acc[c] = {k: _mean_sd([d[k] for d in per]) for k in per[0]}

    logmse: dict = {}
    targets = {"precision": spec.true_precision, "correlation": spec.true_correlation}
    for qty, attr in (("precision", "precision_estimates"), ("correlation", "correlation_estimates")):
        logmse[qty] = {}
        for model in ("graphical", "full"):
            est = [getattr(r, attr)[model] for r in good]
            res = logmse_stratified(est, targets[qty], cats)
            logmse[qty][model] = {
                c: {"values": v.values, "exact": v.exact, "mean": v.mean()} for c, v in res.items()
            }

    checks = {}
    g_spec = metrics["GGM"]["specificity"]["mean"]
    for g in spec.hpd_levels:
        h_spec = metrics[criterion_name(g)]["specificity"]["mean"]
        checks[f"graphical_specificity_ge_{criterion_name(g)}"] = bool(
            g_spec is not None and h_spec is not None and g_spec >= h_spec
        )
    if "CI-I" in logmse["precision"]["graphical"]:
        a = logmse["precision"]["graphical"]["CI-I"]["mean"]
        b = logmse["precision"]["full"]["CI-I"]["mean"]
        # an exact (zero-error) graphical estimate beats any full-model error
        checks["graphical_cii_precision_logmse_lower"] = bool(b is not None and (a is None or a < b))

    return BenchmarkReport(
        scenario=spec,
        results=good,
        failed=failed,
        graph_mc=np.mean([r.graph_estimate for r in good], axis=0),
        pe_mc=np.mean([r.edge_inclusion for r in good], axis=0),
        metrics=metrics,
        category_accuracy=cat_acc,
        logmse=logmse,
        checks=checks,
    )


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, str):
        return v
    return repr(float(v))


def write_report(report: BenchmarkReport, out_dir, provenance: dict | None = None) -> dict:
    """Write ``metrics.csv``, ``report.json`` and ``report.txt``; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out_dir / "metrics.csv", "json": out_dir / "report.json", "txt": out_dir / "report.txt"}
    with open(paths["csv"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["replicate", "model", "criterion", "category", "metric", "value"])
        for row in report.rows():
            w.writerow([*row[:5], _fmt(row[5])])
    payload = report.to_dict()
    payload["provenance"] = provenance or {
        "tool": "phylosparse",
        "version": __version__,
        "scenario_hash": report.scenario.digest(),
    }
    paths["json"].write_text(json.dumps(payload, indent=2) + "\n")
    paths["txt"].write_text(report.text_table())
    return paths


def run_benchmark(spec: ScenarioSpec, workers: int = 1) -> BenchmarkReport:
    return aggregate(run_replicates(spec, workers), spec)
