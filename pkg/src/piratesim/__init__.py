"""Discrete-event simulator for sharded, blockchain-protected SGD.

The package models a cluster of training nodes partitioned into
committees. Each committee runs a chained three-phase BFT protocol to
commit the intermediate values of a ring all-reduce over the committee
graph, so that per-node storage stays bounded while every aggregation
step remains auditable. A lottery-leader baseline with a full replicated
gradient history is included for comparison, along with byzantine node
strategies and robust aggregation rules.
"""

from .adversary import (ByzantineStrategy, OmniscientView, contaminate_model,
                        corrupt_gradient, craft_target_mean,
                        falsify_aggregation)
from .aggregation import (AggregationResult, AggregatorSpec, Gradient,
                          aggregate, anomaly_score, detection_weighted, krum,
                          krum_scores, l_nearest, mean, multi_krum,
                          pooled_median_scores)
from .allreduce import (StreamValue, chunk_quota, combine_finals,
                        default_gradients_per_step, expected_handoffs, fold,
                        oracle_aggregate, visit_quotas)
from .baseline import LearningChainEngine, run_learningchain
from .config import (ConfigError, RunConfig, load_config, load_config_file,
                     rng_stream)
from .consensus import (Block, CommitteeReplica, MisbehaviorReport, NewView,
                        QuorumCertificate, StepPayload, StorageBreach,
                        StorageTracker, Vote, commit_candidates, make_block,
                        quorum, view_timeout_s)
from .engine import PirateEngine, RunResult, run_pirate
from .metrics import (CSV_HEADER, MetricsRow, build_manifest, metrics_digest,
                      read_manifest, read_metrics_csv, write_manifest,
                      write_metrics_csv)
from .netsim import LinkProfile, SimClock
from .sharding import (AdmissionPolicy, CommitteeAssignment, CreditLedger,
                       CreditPolicy, NodeProfile, apply_churn, assess,
                       cuckoo_reassign, form_committees, remove_node)
from .training import (LearningTask, ModelState, apply_update,
                       local_gradient, make_task, stable_learning_rate)

__all__ = [
    "AdmissionPolicy", "AggregationResult", "AggregatorSpec", "Block",
    "ByzantineStrategy", "CSV_HEADER", "CommitteeAssignment",
    "CommitteeReplica", "ConfigError", "CreditLedger", "CreditPolicy",
    "Gradient", "LearningChainEngine", "LearningTask", "LinkProfile",
    "MetricsRow", "MisbehaviorReport", "ModelState", "NewView",
    "NodeProfile", "OmniscientView", "PirateEngine", "QuorumCertificate",
    "RunConfig", "RunResult", "SimClock", "StepPayload", "StorageBreach",
    "StorageTracker", "StreamValue", "Vote", "aggregate", "anomaly_score",
    "apply_churn", "apply_update", "assess", "build_manifest",
    "chunk_quota", "combine_finals", "commit_candidates",
    "contaminate_model", "corrupt_gradient", "craft_target_mean",
    "cuckoo_reassign", "default_gradients_per_step", "detection_weighted",
    "expected_handoffs", "falsify_aggregation", "fold", "form_committees",
    "krum", "krum_scores", "l_nearest", "load_config", "load_config_file",
    "local_gradient", "make_block", "make_task", "mean", "metrics_digest",
    "multi_krum", "oracle_aggregate", "pooled_median_scores", "quorum",
    "read_manifest", "read_metrics_csv", "remove_node", "rng_stream",
    "run_learningchain", "run_pirate", "stable_learning_rate",
    "view_timeout_s", "visit_quotas", "write_manifest", "write_metrics_csv",
]

__version__ = "0.1.0"
