"""Desk-scale simulator for gene-driven parameter-efficient dynamic
federated learning: elastic Fisher-guided local updates, layer-sensitivity
gene condensation, cluster-wise aggregation, signature-routed initialization
of dynamically joining clients, communication accounting, and a
gradient-inversion privacy probe."""

from .params import Architecture, GradientSet, LayeredParams, init_params
from .nn import Batch, OptState, RegularizerSpec, forward, loss_and_grad, sgd_step
from .data import Dataset, Dirichlet, PartitionSpec, Shard, Sharding, make_synthetic
from .genecraft import (
    ElasticMask,
    FisherDiag,
    LayerScores,
    LearnGene,
    NormalizedFisher,
    elastic_mask,
    fisher_diag,
    gamma_schedule,
    layer_scores,
    normalize_fisher,
    select_learngene,
)
from .client import ClientState, LocalConfig, local_update, loss_elg, loss_gen
from .server import (
    ClusterState,
    RoutingTable,
    Signature,
    admit_agnostic,
    aggregate_learngene,
    cluster_known,
    init_agnostic,
    nearest_cluster,
    svd_signature,
)
from .harness import (
    CommLedger,
    ExperimentConfig,
    MetricsRow,
    comm_cost,
    fedavg_aggregate,
    run_experiment,
)
from .privacy import AttackObservation, ReconState, idlg_reconstruct, observe_gradients, psnr

__version__ = "0.1.0"
