"""Parameter-efficient conformer encoder sharing sparsely-gated experts across grouped blocks."""
from .encoder import EncoderConfig, count_params, encoder_forward
from .seq2seq import DecoderConfig, LossWeights, ModelConfig

__all__ = ["EncoderConfig", "DecoderConfig", "LossWeights", "ModelConfig", "count_params", "encoder_forward"]
