"""Fit the tree prior and the IBP to simulated pairwise choices.

A true feature matrix is drawn on the triple tree, choices are simulated
with 100 observations per pair, and both models are fitted. The output
compares recovered choice matrices and the number of retained features.

    python demos/choice_posterior.py
"""

import numpy as np

from pibp.experiments import (ExperimentConfig, figure2_tree, generate_dataset,
                              mean_posterior_summary, posterior_samples)


def show(label, summary, truth_P, threshold=0.1):
    z, w = summary.retained(threshold)
    off = ~np.eye(9, dtype=bool)
    mad = np.mean(np.abs(summary.mean_P - truth_P)[off])
    print(f"\n{label}: {z.shape[1]} columns with weight >= {threshold}, "
          f"mean |P - P_true| = {mad:.3f}")
    for row in z:
        print("   " + "".join(str(b) for b in row))
    print("   weights " + " ".join(f"{x:.2f}" for x in w))


def main():
    rng = np.random.default_rng(3)
    truth, data = generate_dataset(figure2_tree(0.1), 2.0, 0.05, 100, rng)
    print("true shared features:")
    for row in truth.z:
        print("   " + "".join(str(b) for b in row))

    config = ExperimentConfig(iterations=600, burn_in=200, thin=10, chains=2)
    for label, tree in (("pIBP(0.1)", figure2_tree(0.1)), ("IBP", None)):
        samples = posterior_samples(data, tree, config, seed_coords=(7,))
        show(label, mean_posterior_summary(samples, config.epsilon), truth.P)


if __name__ == "__main__":
    main()
