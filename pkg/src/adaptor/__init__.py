"""Contrastive pre-training of a cross-attention adaptor over frozen-encoder embeddings.

Everything runs on a small numpy-backed autograd engine in float64.  The
frozen image and text encoders are stood in for by cached embeddings; only
the adaptor and a learnable temperature are trained.
"""

from .data import EmbeddingCache, SynthSpec, gen_synthetic, read_cache, sample_batches, split_cache, write_cache
from .errors import (
    AdaptorError,
    ConfigError,
    DimensionError,
    FormatError,
    GraphStateError,
    NumericError,
    TrainingAborted,
)
from .evaluate import EvalReport, ProbeConfig, evaluate, linear_probe, recall_at_k, separability_score
from .network import (
    AdaptorConfig,
    AdaptorParams,
    ModalEmbedding,
    adaptor_forward,
    adaptor_forward_image_only,
    init_params,
    param_count,
)
from .objective import LossBreakdown, info_nce_i2t, info_nce_t2i, similarity_matrix, total_loss
from .tensor import Tensor
from .trainer import TrainConfig, TrainState, load_checkpoint, pretrain, save_checkpoint

__version__ = "0.1.0"
