"""Knowledge-graph embeddings with paired orthogonal relation maps.

Entities are d-vectors; each relation is a pair of d-by-d near-orthogonal
maps applied to the head and tail sides.  The package trains these
parameters with a margin objective, evaluates them by filtered ranking and
threshold classification, checks the modelling assumptions they rest on,
compresses the relation maps to low rank, and validates the underlying
generative story on synthetic data.
"""

__version__ = "0.1.0"

from .kgdata import (
    Dataset,
    KnownIndex,
    ParseError,
    Triple,
    Vocabulary,
    VocabularyError,
    build_dataset,
    load_dataset,
    parse_labeled_triples,
    parse_triples,
    sample_negatives,
    write_triples,
)
from .model import (
    Model,
    ModelFormatError,
    PartitionValue,
    RelationEmbedding,
    init_model,
    load_model,
    log_probability,
    partition_function,
    save_model,
    score,
)
from .trainer import (
    Hyperparams,
    TrainingDiverged,
    TrainState,
    gradients,
    margin_loss_multi,
    margin_loss_single,
    orthogonality_penalty,
    train,
)
from .evaluation import (
    ClassificationReport,
    RankingReport,
    Thresholds,
    classify,
    learn_thresholds,
    link_prediction,
    rank_candidates,
)
from .diagnostics import (
    ConcentrationRow,
    concentration_stats,
    correlate,
    gram_offdiag_mass,
)
from .compress import (
    CompressedModel,
    LowRankRelation,
    compress_model,
    compress_relation,
    compression_ratio,
    load_compressed_model,
    save_compressed_model,
    sweep_ranks,
)
from .synthetic import (
    SyntheticWorld,
    build_world,
    check_concentration,
    check_theorem,
    estimate_joint,
    sample_walk,
)

__all__ = [name for name in dir() if not name.startswith("_")]
