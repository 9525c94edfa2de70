"""Минимальное ядро автодифференцирования и блоки трансформера."""

from .layers import (
	MLP,
	AdaLayerNorm,
	CrossAttention,
	FourierActionEmbedder,
	FourierEmbedderConfig,
	LayerNorm,
	Linear,
	Module,
	MultiHeadSelfAttention,
	PatchEncoder,
	TemporalAttention,
	TransformerBlock,
	TransformerConfig,
	fourier_features,
)
from .optim import AdamW, clip_grad_norm, lr_at
from .tensor import Tensor, no_grad


__all__ = [
	"MLP",
	"AdaLayerNorm",
	"AdamW",
	"CrossAttention",
	"FourierActionEmbedder",
	"FourierEmbedderConfig",
	"LayerNorm",
	"Linear",
	"Module",
	"MultiHeadSelfAttention",
	"PatchEncoder",
	"TemporalAttention",
	"Tensor",
	"TransformerBlock",
	"TransformerConfig",
	"clip_grad_norm",
	"fourier_features",
	"lr_at",
	"no_grad",
]
