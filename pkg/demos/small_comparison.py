"""Cross-validated comparison on a reduced grid.

Runs leave-one-pair-out prediction for every model on two datasets and
two observation levels, then prints the ranking. The full desk-scale grid
is ``pibp run-experiment --config demos/desk.cfg``.

    python demos/small_comparison.py [out_dir]
"""

import sys

from pibp.experiments import ExperimentConfig, model_label, ranking, run_comparison


def main(out_dir="demo_results"):
    config = ExperimentConfig(obs_levels=[1, 10], n_datasets=2, chains=1, iterations=300,
                              burn_in=100, thin=10)
    _, summary = run_comparison(config, out_dir, log=print)
    print()
    for row in summary:
        label = model_label(row["model"], None if row["ell"] == "" else row["ell"])
        print(f"{label:>10}  level {row['obs_level']:>3}  mean {row['mean']:.4f}")
    for level in config.obs_levels:
        print(f"level {level}: " + " > ".join(ranking(summary, level)))
    print(f"\nresults.csv, summary.csv and figure4.svg written to {out_dir}/")


if __name__ == "__main__":
    main(*sys.argv[1:])
