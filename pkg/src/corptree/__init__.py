"""Indicator-graph credit rating: dataset, graph mapping, GNN, training, metrics."""

from .dataset import (
    DEFAULT_SCHEMA,
    INDICATOR_NAMES,
    DatasetSplit,
    IndicatorPanel,
    IndicatorSchema,
    LabelSpec,
    coarsen_label,
    filter_sme,
    generate_synthetic,
    load_dataset,
    split_dataset,
    standardize,
)
from .diffcore import ParameterStore
from .graph_mapping import (
    CorpGraph,
    augment_plus,
    build_graph,
    cosine_similarity,
    export_graph,
    indicator_vectors,
    max_spanning_tree,
)
from .metrics import (
    RocCurve,
    accuracy,
    compute_report,
    confusion,
    export_metrics,
    macro_average_roc,
    micro_average_roc,
    roc_one_vs_rest,
)
from .model import GraphBatch, ModelConfig, init_params, model_forward, predict
from .training import (
    Checkpoint,
    TrainConfig,
    build_samples,
    fit,
    load_checkpoint,
    make_batches,
    save_checkpoint,
    warm_restart_lr,
)

__version__ = "0.1.0"
