"""Hash-based target attention over long behavior sequences."""

from .attention import (
    AttentionInput,
    MHTAParams,
    attention_gradients,
    eta_attention,
    init_mhta_params,
    mhta,
    single_head_attention,
)
from .errors import FormatError, NumericError
from .fingerprint import (
    Fingerprint,
    FingerprintTable,
    HashFamily,
    fingerprint_batch,
    hamming,
    load_table,
    new_hash_family,
    save_table,
    simhash,
)
from .model import (
    ModelConfig,
    ModelParams,
    Request,
    auc,
    evaluate,
    forward,
    init_params,
    load_checkpoint,
    loss_and_gradients,
    predict_request,
    save_checkpoint,
    train,
)
from .retrieval import (
    TopKResult,
    category_hard_search,
    recall_at_k,
    top_k_by_dot,
    top_k_by_hamming,
)

__version__ = "0.1.0"
