"""Multi-patch feature fusion, triplet-loss embeddings and face-recognition evaluation."""

__version__ = "0.1.0"

from .feature_store import (
    Dataset,
    DatasetError,
    FaceRecord,
    FoldSplit,
    LabeledPair,
    concat_patches,
    load_dataset,
    make_folds,
    read_pairs,
    sample_pairs,
    save_dataset,
    write_pairs,
)
from .synth import SynthConfig, generate
from .embedding import (
    EmbeddingModel,
    TrainConfig,
    Triplet,
    embed,
    load_model,
    sample_triplets,
    save_model,
    similarity,
    train,
    triplet_grad,
    triplet_loss,
)
from .evalproto import (
    IdentificationSetup,
    RocCurve,
    ScoreSet,
    dir_at_far,
    failure_report,
    pairwise_accuracy_tenfold,
    rank1_identification,
    roc_curve,
    score_pairs,
    tar_at_far,
)
from .ensemble import EnsembleModel, GridConfig, fuse_average, fuse_weighted, grid_search_ensemble, tenfold_ensemble
from .experiments import ProtocolConfig, SweepResult, data_sweep, patch_sweep
