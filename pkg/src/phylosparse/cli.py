"""Command-line interface: ``simulate``, ``fit``, ``summarize``, ``benchmark``.

Exit codes: 0 success, 1 runtime or numerical failure, 2 input validation
failure.  Settings resolve as command-line flag, then config file, then
default; the effective configuration is printed before any work starts.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .gwishart import GWishartParams, NotPositiveDefiniteError, WishartParams
from .mcmc import ChainTrace, ModelSpec, SamplerSettings, read_trace, run_chain, write_trace
from .phylo import (
    NewickError,
    RootPrior,
    TraitDataError,
    read_newick,
    read_traits_csv,
    simulate_traits,
    simulate_tree,
    write_newick,
    write_traits_csv,
)
from .simstudy import (
    BenchmarkAbortedError,
    PrecisionValidationError,
    bundled_scenario_path,
    load_scenario,
    read_precision_csv,
    run_replicates,
    aggregate,
    tune_chain_length,
    write_report,
)
from .summary import DEFAULT_BF_THRESHOLD, PosteriorSummary, summarize, write_summary_json

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2

log = logging.getLogger("phylosparse")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


# Per-subcommand defaults.  Keys double as config-file keys in the section
# named after the subcommand.
DEFAULTS = {
    "simulate": {
        "precision": None,
        "n_taxa": 50,
        "seed": 0,
        "out_dir": ".",
        "prefix": "sim",
        "root_mean": 0.0,
        "root_sample_size": 1.0,
        "birth_rate": 1.0,
    },
    "fit": {
        "tree": None,
        "traits": None,
        "variant": "graphical",
        "iterations": 20_000,
        "warmup": None,
        "thin": 10,
        "seed": 0,
        "df": None,
        "rate_scale": 1.0,
        "root_mean": 0.0,
        "root_sample_size": 1.0,
        "mc_samples": 1000,
        "prior_mc_samples": 10_000,
        "bf_threshold": DEFAULT_BF_THRESHOLD,
        "gamma": 0.95,
        "out_dir": ".",
        "prefix": "fit",
    },
    "summarize": {
        "trace": None,
        "bf_threshold": DEFAULT_BF_THRESHOLD,
        "gamma": 0.95,
        "out": None,
    },
    "benchmark": {
        "scenario": "sim1",
        "replicates": None,
        "iterations": None,
        "warmup": None,
        "seed": None,
        "workers": 1,
        "out_dir": "benchmark",
        "auto_tune": False,
        "target_ess": 200.0,
        "strict": False,
    },
}

TYPES = {
    "n_taxa": int, "seed": int, "iterations": int, "warmup": int, "thin": int,
    "mc_samples": int, "prior_mc_samples": int, "replicates": int, "workers": int,
    "root_mean": float, "root_sample_size": float, "birth_rate": float, "df": float,
    "rate_scale": float, "bf_threshold": float, "gamma": float, "target_ess": float,
}


def _coerce(key, value):
    if value is None:
        return None
    if key in ("auto_tune", "strict") and isinstance(value, str):
        return value.strip().lower() in ("1", "true", "yes", "on")
    typ = TYPES.get(key)
    if typ is None:
        return value
    try:
        return typ(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {typ.__name__}") from None


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, the ``[command]`` section of ``--config`` and flags."""
    cfg = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        if not parser.read(args.config):
            raise ConfigError(f"cannot read config file {args.config}")
        if parser.has_section(command):
            for key, value in parser[command].items():
                if key not in cfg:
                    raise ConfigError(f"unknown key {key!r} in [{command}]")
                cfg[key] = value
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None and value is not False:
            cfg[key] = value
    return {k: _coerce(k, v) for k, v in cfg.items()}


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def provenance(command: str, cfg: dict) -> dict:
    return {
        "tool": "phylosparse",
        "version": __version__,
        "command": command,
        "seed": cfg.get("seed"),
        "config_hash": config_hash(cfg),
        "config": cfg,
    }


def _print_config(command: str, cfg: dict) -> None:
    print(f"# phylosparse {__version__} {command}")
    for key in sorted(cfg):
        print(f"#   {key} = {cfg[key]}")


def _require(cfg: dict, *keys) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise ConfigError("missing required setting(s): " + ", ".join(missing))


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(cfg: dict) -> int:
    _require(cfg, "precision")
    if cfg["n_taxa"] < 2:
        raise ConfigError("n_taxa must be >= 2")
    k0 = read_precision_csv(cfg["precision"])
    p = k0.shape[0]
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(cfg["seed"]).spawn(2)
    tree = simulate_tree(cfg["n_taxa"], seeds[0], cfg["birth_rate"])
    root = RootPrior(np.full(p, cfg["root_mean"]), cfg["root_sample_size"])
    traits = simulate_traits(tree, k0, root, seeds[1])
    stem = cfg["prefix"]
    write_newick(tree, out / f"{stem}.nwk")
    write_traits_csv(traits, out / f"{stem}_traits.csv")
    _write_json(out / f"{stem}_provenance.json", provenance("simulate", cfg))
    print(f"wrote {out / f'{stem}.nwk'} and {out / f'{stem}_traits.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit / summarize


def _model_spec(cfg: dict, p: int) -> ModelSpec:
    variant = cfg["variant"]
    if variant not in ("graphical", "full"):
        raise ConfigError(f"variant must be 'graphical' or 'full', got {variant!r}")
    if cfg["rate_scale"] <= 0:
        raise ConfigError("rate_scale must be positive")
    rate = cfg["rate_scale"] * np.eye(p)
    root = RootPrior(np.full(p, cfg["root_mean"]), cfg["root_sample_size"])
    if variant == "graphical":
        df = 3.0 if cfg["df"] is None else cfg["df"]
        if df <= 0:
            raise ConfigError("G-Wishart df must be > 0")
        return ModelSpec("graphical", root, gwishart_prior=GWishartParams(df, rate))
    df = p + 2.0 if cfg["df"] is None else cfg["df"]
    if df <= p - 1:
        raise ConfigError(f"Wishart df must exceed p - 1 = {p - 1}")
    return ModelSpec("full", root, wishart_prior=WishartParams(df, rate))


def _label(labels, i) -> str:
    return labels[i] if i < len(labels) else f"trait{i + 1}"


def format_correlogram(summary: PosteriorSummary) -> str:
    """R̂ in the upper triangle with pe (graphical) or ps (full) below it.

    Entries selected by the decision rule (edge in Ĝ, or HPD excluding zero)
    carry an asterisk.
    """
    p = summary.correlation_estimate.shape[0]
    labels = [_label(summary.trait_labels, i) for i in range(p)]
    graphical = summary.variant == "graphical"
    selected = summary.graph_estimate.adjacency if graphical else summary.hpd_selection().astype(bool)
    annot = summary.edge_inclusion if graphical else summary.sign_probability
    width = max(9, max(len(s) for s in labels) + 1)
    lines = [
        f"Correlogram: upper = posterior mean correlation, lower = {'pe' if graphical else 'ps'}; "
        f"* = {'edge in graph estimate' if graphical else f'HPD_{round(summary.hpd_gamma * 100)} excludes 0'}",
        "".ljust(width) + "".join(s.rjust(width) for s in labels),
    ]
    for i in range(p):
        cells = []
        for j in range(p):
            if i == j:
                cells.append("1".rjust(width))
                continue
            v = summary.correlation_estimate[i, j] if i < j else annot[i, j]
            mark = "*" if selected[i, j] else " "
            cells.append(f"{v:.2f}{mark}".rjust(width))
        lines.append(labels[i].ljust(width) + "".join(cells))
    return "\n".join(lines)


def format_edges(summary: PosteriorSummary) -> str:
    labels = summary.trait_labels
    edges = sorted(summary.graph_estimate.edges)
    if not edges:
        return "Estimated graph: no edges"
    rows = ["Estimated graph edges (pe, BF):"]
    for i, j in edges:
        bf = summary.bayes_factors[i, j]
        bf_txt = "inf" if np.isinf(bf) else f"{bf:.2f}"
        rows.append(f"  {_label(labels, i)} -- {_label(labels, j)}  pe={summary.edge_inclusion[i, j]:.3f}  BF={bf_txt}")
    return "\n".join(rows)


def _report_summary(summary: PosteriorSummary) -> None:
    if summary.variant == "graphical":
        print(format_edges(summary))
    print(format_correlogram(summary))


def cmd_fit(cfg: dict) -> int:
    _require(cfg, "tree", "traits")
    if cfg["iterations"] < 1 or cfg["thin"] < 1:
        raise ConfigError("iterations and thin must be >= 1")
    if cfg["warmup"] is not None and not 0 <= cfg["warmup"] < cfg["iterations"]:
        raise ConfigError("warmup must satisfy 0 <= warmup < iterations")
    if not 0 < cfg["gamma"] < 1:
        raise ConfigError("gamma must lie in (0, 1)")
    if cfg["bf_threshold"] <= 0:
        raise ConfigError("bf_threshold must be positive")
    tree = read_newick(cfg["tree"])
    traits = read_traits_csv(cfg["traits"])
    traits.aligned_to(tree)  # label mismatches fail here, before any sampling
    spec = _model_spec(cfg, traits.n_traits)
    settings = SamplerSettings(mc_samples=cfg["mc_samples"], prior_mc_samples=cfg["prior_mc_samples"])
    trace = run_chain(
        tree, traits, spec, n_iterations=cfg["iterations"], warmup=cfg["warmup"],
        thin=cfg["thin"], rng_seed=cfg["seed"], settings=settings,
    )
    prov = provenance("fit", cfg)
    trace.metadata["config_hash"] = prov["config_hash"]
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    stem = cfg["prefix"]
    trace_path, _ = write_trace(trace, out / f"{stem}_trace.csv")
    summary = summarize(trace, spec.variant, cfg["bf_threshold"], cfg["gamma"])
    write_summary_json(summary, out / f"{stem}_summary.json", prov)
    print(f"wrote {trace_path} and {out / f'{stem}_summary.json'}")
    _report_summary(summary)
    return EXIT_OK


def cmd_summarize(cfg: dict) -> int:
    _require(cfg, "trace")
    if not 0 < cfg["gamma"] < 1:
        raise ConfigError("gamma must lie in (0, 1)")
    trace: ChainTrace = read_trace(cfg["trace"])
    summary = summarize(trace, None, cfg["bf_threshold"], cfg["gamma"])
    out = Path(cfg["out"]) if cfg["out"] else Path(cfg["trace"]).with_name(Path(cfg["trace"]).stem + "_summary.json")
    write_summary_json(summary, out, provenance("summarize", cfg))
    print(f"wrote {out}")
    _report_summary(summary)
    return EXIT_OK


# ---------------------------------------------------------------------------
# benchmark


def _scenario_path(name: str) -> Path:
    path = Path(name)
    if path.suffix == ".ini" or path.exists():
        return path
    return bundled_scenario_path(name)


def cmd_benchmark(cfg: dict) -> int:
    if cfg["workers"] < 1:
        raise ConfigError("workers must be >= 1")
    overrides = {
        "n_replicates": cfg["replicates"],
        "base_seed": cfg["seed"],
        "n_iterations": cfg["iterations"],
        "warmup": cfg["warmup"],
    }
    if cfg["iterations"] is not None and cfg["warmup"] is None:
        overrides["warmup"] = cfg["iterations"] // 5
    spec = load_scenario(_scenario_path(cfg["scenario"]), overrides)
    if cfg["auto_tune"]:
        spec = tune_chain_length(spec, cfg["target_ess"])
        print(f"# auto-tuned chain: {spec.n_iterations} iterations, warmup {spec.warmup}")
    results = run_replicates(spec, cfg["workers"])
    report = aggregate(results, spec)
    prov = provenance("benchmark", cfg)
    prov["scenario_hash"] = spec.digest()
    paths = write_report(report, cfg["out_dir"], prov)
    print(report.text_table(), end="")
    print(f"wrote {paths['csv']}, {paths['json']}, {paths['txt']}")
    if cfg["strict"] and not all(report.checks.values()):
        print("directional checks failed", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phylosparse", description="Sparse phylogenetic trait-correlation models.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI file; keys are read from the section named after the subcommand")
        p.add_argument("--seed", type=int, help="random seed")

    s = sub.add_parser("simulate", help="simulate a Yule tree and traits under a precision matrix")
    common(s)
    s.add_argument("--precision", help="CSV file with the true p×p precision matrix")
    s.add_argument("--n-taxa", dest="n_taxa", type=int, help="number of tips (default 50)")
    s.add_argument("--out-dir", dest="out_dir", help="output directory")
    s.add_argument("--prefix", help="output file prefix (default 'sim')")
    s.add_argument("--root-mean", dest="root_mean", type=float, help="root prior mean, all traits (default 0)")
    s.add_argument("--root-sample-size", dest="root_sample_size", type=float, help="root prior sample size tau0 (default 1)")
    s.add_argument("--birth-rate", dest="birth_rate", type=float, help="Yule birth rate (default 1)")

    f = sub.add_parser("fit", help="fit the graphical or full model on a fixed tree")
    common(f)
    f.add_argument("--tree", help="Newick tree file")
    f.add_argument("--traits", help="trait CSV (first column taxon labels)")
    f.add_argument("--variant", choices=["graphical", "full"], help="model variant (default graphical)")
    f.add_argument("--iterations", type=int, help="chain length (default 20000)")
    f.add_argument("--warmup", type=int, help="warm-up iterations (default 20%% of iterations)")
    f.add_argument("--thin", type=int, help="thinning stride (default 10)")
    f.add_argument("--df", type=float, help="prior df: G-Wishart delta (default 3) or Wishart nu (default p+2)")
    f.add_argument("--rate-scale", dest="rate_scale", type=float, help="prior rate D = scale * I (default 1)")
    f.add_argument("--root-mean", dest="root_mean", type=float, help="root prior mean mu0 (default 0)")
    f.add_argument("--root-sample-size", dest="root_sample_size", type=float, help="root prior tau0 (default 1)")
    f.add_argument("--mc-samples", dest="mc_samples", type=int, help="MC samples per posterior constant (default 1000)")
    f.add_argument("--prior-mc-samples", dest="prior_mc_samples", type=int, help="MC samples per prior constant (default 10000)")
    f.add_argument("--bf-threshold", dest="bf_threshold", type=float, help="Bayes factor threshold (default 10^0.5)")
    f.add_argument("--gamma", type=float, help="HPD level (default 0.95)")
    f.add_argument("--out-dir", dest="out_dir", help="output directory")
    f.add_argument("--prefix", help="output file prefix (default 'fit')")

    m = sub.add_parser("summarize", help="re-summarize a stored trace")
    m.add_argument("--config")
    m.add_argument("trace", nargs="?", help="trace CSV written by 'fit'")
    m.add_argument("--bf-threshold", dest="bf_threshold", type=float)
    m.add_argument("--gamma", type=float)
    m.add_argument("--out", help="summary JSON path (default <trace>_summary.json)")

    b = sub.add_parser("benchmark", help="run a simulation study scenario")
    common(b)
    b.add_argument("--scenario", help="bundled name (sim1, sim2) or path to an INI file")
    b.add_argument("--replicates", type=int, help="number of replicates")
    b.add_argument("--iterations", type=int, help="chain length per fit")
    b.add_argument("--warmup", type=int, help="warm-up iterations")
    b.add_argument("--workers", type=int, help="worker processes (default 1)")
    b.add_argument("--out-dir", dest="out_dir", help="report directory (default 'benchmark')")
    b.add_argument("--auto-tune", dest="auto_tune", action="store_true", help="size chains from a pilot run")
    b.add_argument("--target-ess", dest="target_ess", type=float, help="ESS target for --auto-tune (default 200)")
    b.add_argument("--strict", action="store_true", help="exit 1 if directional checks fail")
    return parser


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "summarize": cmd_summarize, "benchmark": cmd_benchmark}

VALIDATION_ERRORS = (
    ConfigError,
    PrecisionValidationError,
    NewickError,
    TraitDataError,
    NotPositiveDefiniteError,
    FileNotFoundError,
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        _print_config(args.command, cfg)
        return COMMANDS[args.command](cfg)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except BenchmarkAbortedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        # remaining ValueErrors come from input checks in the library
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
