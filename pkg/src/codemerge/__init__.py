"""Codebook-guided checkpoint merging for online test-time adaptation."""

from .codebook import (
    Codebook,
    CodebookEntry,
    codebook_load,
    codebook_save,
    fingerprint_matrix,
)
from .errors import (
    CodeMergeError,
    ConfigError,
    FormatError,
    MissingReferenceError,
    NumericalError,
    ParameterError,
    StateError,
    StorageError,
    StructuralError,
)
from .fingerprint import (
    Fingerprint,
    ProjectionMatrix,
    compute_fingerprint,
    make_projection,
    pool_features,
)
from .merging import (
    SignPolicy,
    ema_update,
    sign_consistent_merge,
    weighted_average_merge,
)
from .scoring import (
    MergePlan,
    ScoringConfig,
    ema_weights,
    make_merge_plan,
    mos_weights,
    ridge_leverage_scores,
)
from .tensor_store import (
    Checkpoint,
    Tensor,
    checkpoint_linear_combination,
    checkpoint_load,
    checkpoint_save,
    flatten,
)

__version__ = "0.1.0"
