"""Twin-encoder cross-modal dense retrieval at desk scale.

Submodules: ``autodiff`` (reverse-mode tape), ``encoders``, ``objectives``,
``optim``, ``training``, ``checkpoint``, ``index`` (exact inner-product
search), ``rerank``, ``synth`` (corpus generator and file formats),
``evaluation``, ``bench`` and ``cli``.
"""

from __future__ import annotations

from .encoders import DualEncoder, ModelConfig, RegionSequence, TokenSequence, encode_image, encode_text
from .index import EmbeddingIndex, RetrievalResult, build_index, load_index, save_index, top_k
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = [
    "DualEncoder", "ModelConfig", "RegionSequence", "TokenSequence", "encode_image", "encode_text",
    "EmbeddingIndex", "RetrievalResult", "build_index", "load_index", "save_index", "top_k",
    "KERNEL_BACKEND", "__version__",
]
