"""Local mutual information pretraining on a discrete generative world.

The package couples feature-grid image encoders and sentence encoders through
variational MI lower bounds, trains them with a local one-way-max objective,
and evaluates what the features retain with per-region probes. A discrete
world with exactly computable information quantities backs every estimate
with an oracle.
"""

from .errors import (ConfigError, DataFormatError, DimensionMismatch,
                     LimiError, NumericAbort, NumericError, SingleClassError,
                     StateSpaceError)
from .estimators import (MIEstimate, ScoreBatch, assemble_bound, dv_bound,
                         dv_bound_exact, global_objective, infonce_bound,
                         init_critic, log_ratio_critic, sample_mismatched,
                         shuffle_negatives)
from .evaluation import (ResultsTable, ScoredLabelSet, aggregate, auc,
                         moving_average)
from .local_mi import (local_objective_features, local_pipeline_objective,
                       local_scores, select_regions)
from .seeding import substream
from .trainer import (ProbeConfig, TrainConfig, evaluate_probe, pretrain,
                      run_experiment_matrix, train_gaussian_critic,
                      train_probe)
from .world import (GaussianPairConfig, WorldConfig, chain_rule_check,
                    gaussian_mi_nats, gaussian_pairs, generate_dataset,
                    region_information, sample_world, true_mi_discrete)

__version__ = "0.1.0"
