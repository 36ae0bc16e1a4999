"""Draw feature matrices from the tree prior and compare them with the IBP.

Nine objects sit in three triples. With short leaf edges, objects in the
same triple tend to share features; on the star tree (the IBP) they do not.

    python demos/tree_prior.py
"""

from itertools import combinations

import numpy as np

from pibp import sample_generative
from pibp.experiments import figure2_tree


def shared_fraction(tree, alpha=2.0, draws=2000, seed=0):
    """Mean count of shared features for same-triple and cross-triple pairs."""
    rng = np.random.default_rng(seed)
    same, cross = [], []
    for _ in range(draws):
        z = sample_generative(tree, alpha, rng).bits
        for i, j in combinations(range(9), 2):
            shared = int(np.sum(z[i] & z[j]))
            (same if i // 3 == j // 3 else cross).append(shared)
    return np.mean(same), np.mean(cross)


def main():
    tree = figure2_tree(0.1)
    print(tree.to_newick())
    fm = sample_generative(tree, 2.0, np.random.default_rng(1)).left_ordered()
    print("\none draw (rows are objects, left-ordered columns):")
    for name, row in zip(tree.leaf_names, fm.to_text().splitlines()):
        print(f"  {name}  {row}")

    print("\nmean shared features per pair, alpha = 2:")
    for ell in (0.1, 0.5, 1.0):
        same, cross = shared_fraction(figure2_tree(ell))
        print(f"  ell={ell:<4} same triple {same:.3f}   across triples {cross:.3f}")


if __name__ == "__main__":
    main()
