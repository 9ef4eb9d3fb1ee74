"""Transport-oriented feature aggregation.

Set-level features via entropic optimal transport: a set of vectors is
coupled to a fixed reference set by Sinkhorn scaling, and the barycentric
displacement against the reference is a fixed-size, permutation-invariant
embedding whose Euclidean geometry approximates Wasserstein geometry.

The package carries the solver (plain and log-domain), the embedding and
its grouped per-frequency variant, exact oracles for validation, a
mixed-Gamma toy benchmark with hand-rolled reverse-mode training, and a
CLI. Hot kernels run under numba when available; set OTAGG_BACKEND=numpy
to force the pure-numpy twin.
"""

__version__ = "0.1.0"

from .core_ot import (
    CostMatrix,
    DiscreteMeasure,
    SinkhornConfig,
    SinkhornUnderflowError,
    TransportPlan,
    cost_matrix,
    entropic_cost,
    sinkhorn,
    transport_cost,
)
from .embedding import (
    ReferenceSet,
    WassersteinEmbedding,
    attention_weights,
    embed,
    embedding_distance,
    grouped_aggregate,
    l2_normalize_embedding,
)
from .oracle import SampleSet1D, exact_assignment, exact_w2_1d, stats_pool
from .datagen import (
    MixedGammaParams,
    ToyDataset,
    build_toy_dataset,
    make_class_set,
    read_dataset,
    sample_mixed_gamma,
    write_dataset,
)
from .toytrain import (
    GradientTape,
    NumericalError,
    ToyModel,
    TrainConfig,
    backward,
    evaluate,
    forward,
    init_toy_model,
    load_model,
    loss,
    save_model,
    train,
)

__all__ = [
    "__version__",
    "CostMatrix",
    "DiscreteMeasure",
    "SinkhornConfig",
    "SinkhornUnderflowError",
    "TransportPlan",
    "cost_matrix",
    "entropic_cost",
    "sinkhorn",
    "transport_cost",
    "ReferenceSet",
    "WassersteinEmbedding",
    "attention_weights",
    "embed",
    "embedding_distance",
    "grouped_aggregate",
    "l2_normalize_embedding",
    "SampleSet1D",
    "exact_assignment",
    "exact_w2_1d",
    "stats_pool",
    "MixedGammaParams",
    "ToyDataset",
    "build_toy_dataset",
    "make_class_set",
    "read_dataset",
    "sample_mixed_gamma",
    "write_dataset",
    "GradientTape",
    "NumericalError",
    "ToyModel",
    "TrainConfig",
    "backward",
    "evaluate",
    "forward",
    "init_toy_model",
    "load_model",
    "loss",
    "save_model",
    "train",
]
