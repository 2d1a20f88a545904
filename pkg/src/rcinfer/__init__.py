"""Exact inference and learning for recursive cardinality (RC) models."""
from .baselines import brute_force, brute_force_log_z, chain_marginals, quadratic_tree_marginals
from .convtree import (InferenceResult, ZeroMassError, convolve, correlate, count_marginal,
                       factor_messages, log_partition, marginals, sample)
from .learning import (Bag, DivergenceError, FitOptions, Parameters, agglomerative_structure,
                       fit, mil_label_probs, mil_loglik_and_grad, nll_and_grad, train_mil)
from .matching import (InfeasibleError, LbpOptions, MatchingModel, block_gibbs,
                       exact_matching_marginals, lbp_matching)
from .model import (CardinalityTable, ModelError, RCModel, SubsetFamily, TreeSpec, align_tree,
                    balanced_tree, hard_count_table, load_model, noisy_or_table, normal_table,
                    validate_nested)

__version__ = "0.1.0"
