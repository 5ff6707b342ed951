"""
A small simulation study
========================

Runs a shortened version of the bundled five-trait scenario and prints the
benchmark tables.  The full desk-scale run is
``phylosparse benchmark --scenario sim1``.
"""

from phylosparse.simstudy import aggregate, bundled_scenario_path, load_scenario, run_replicates

spec = load_scenario(bundled_scenario_path("sim1"), {"n_replicates": 5, "n_iterations": 400, "warmup": 80})
print(f"{spec.name}: N={spec.n_taxa}, p={spec.p}, true edges {sorted((i + 1, j + 1) for i, j in spec.true_graph.edges)}")
print("pair categories (upper triangle):")
print(spec.categories)

results = run_replicates(spec, workers=1)
report = aggregate(results, spec)
print(report.text_table())

# Mean edge inclusion over replicates, next to the true correlations.
print("mean pe over replicates\n", report.pe_mc.round(2))
print("true correlation\n", spec.true_correlation.round(2))
