"""Rakugo speech synthesis: Tacotron-style sequence-to-sequence models with
global style tokens and context-label conditioning, the DSP front/back ends,
a training pipeline over a deterministic synthetic corpus, and the listening
test statistics used to evaluate the systems."""

from rakugo_tts.autodiff import (
    Tensor,
    concat,
    default_dtype,
    get_default_dtype,
    no_grad,
    set_default_dtype,
    tensor,
)

__all__ = [
    "Tensor",
    "concat",
    "default_dtype",
    "get_default_dtype",
    "no_grad",
    "set_default_dtype",
    "tensor",
]
