"""Phylogenetic Indian buffet process: a tree-structured prior over sparse
binary feature matrices, exact sum-product on the tree, an MCMC sampler,
and an elimination-by-aspects choice model to plug into it.
"""

from .eba import (ChoiceData, EBALikelihood, EBAParams, choice_matrix, choice_prob,
                  collapse_columns, log_likelihood, noisy_prob, predictive_loglik)
from .inference import (MessageCache, leaf_conditional, leaves_given_leaf, log_evidence,
                        log_leaves_given_leaf)
from .prior import FeatureMatrix, new_column_prob_finite, new_dish_rate, sample_generative
from .sampler import (FlatLikelihood, SamplerConfig, ibp_collapsed_gibbs, run_chain,
                      sample_alpha)
from .tree import (NewickError, PhyloTree, TreeValidationError, minimal_subtree, parse_newick,
                   read_newick, star_tree, total_edge_length)

__version__ = "0.1.0"
