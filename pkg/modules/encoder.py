"""
Snippet Encoder Module for the TAGS toolkit
Multi-scale self-attentive embedding of a snippet feature sequence
"""

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

ALLOWED_SCALES = (1, 2, 4)


@dataclass(frozen=True)
class PoolingConfig:
    """Temporal average pooling P(theta): kernel, stride, zero padding"""
    kernel: int
    stride: int
    padding: int = 0

    @classmethod
    def for_scale(cls, scale: int) -> "PoolingConfig":
        return cls(scale, scale, 0)

    def validate(self):
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid pooling {self}")

    def check_scale(self, scale: int):
        """Windows must step one scale-s snippet at a time and cover it"""
        self.validate()
        if self.stride != scale:
            raise ValueError(f"pooling stride {self.stride} must equal the scale {scale}")
        if not scale + self.padding <= self.kernel <= scale + 2 * self.padding:
            raise ValueError(f"pooling kernel {self.kernel} must lie in [{scale + self.padding}, {scale + 2 * self.padding}] "
                             f"for scale {scale} with padding {self.padding}")


def scale_length(T: int, scale: int) -> int:
    """T^s = ceil(T / s)"""
    return -(-T // scale)


def sinusoid_table(length: int, width: int, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Fixed sin/cos position table, length x width"""
    position = torch.arange(length, dtype=dtype)[:, None]
    rate = torch.exp(torch.arange(0, width, 2, dtype=dtype) * (-math.log(10000.0) / width))
    table = torch.zeros(length, width, dtype=dtype)
    table[:, 0::2] = torch.sin(position * rate)
    table[:, 1::2] = torch.cos(position * rate[:width // 2])
    return table


def temporal_pool(x: torch.Tensor, kernel: int, stride: int, padding: int = 0) -> torch.Tensor:
    """Average pooling along time with zero padding on both ends

    x is T x dim; output length is floor((T + 2p - k) / stride) + 1.
    """
    PoolingConfig(kernel, stride, padding).validate()
    if x.dim() != 2:
        raise ValueError(f"expected a T x dim matrix, got shape {tuple(x.shape)}")
    T = x.shape[0]
    out_len = (T + 2 * padding - kernel) // stride + 1
    if out_len < 1:
        raise ValueError(f"pooling k={kernel}, stride={stride}, p={padding} leaves no output for T={T}")
    if kernel == 1 and stride == 1 and padding == 0:
        return x
    seq = x.t().unsqueeze(0)
    if padding:
        seq = F.pad(seq, (padding, padding))
    return F.avg_pool1d(seq, kernel_size=kernel, stride=stride).squeeze(0).t()


def pool_to_scale(x: torch.Tensor, scale: int, pooling: Optional[PoolingConfig] = None) -> torch.Tensor:
    """Pool a base-rate sequence to exactly ceil(T / s) rows

    The pooling must step by s (see PoolingConfig.check_scale). When T is
    not a multiple of s the last window is completed by repeating the last
    snippet.
    """
    pooling = pooling or PoolingConfig.for_scale(scale)
    pooling.check_scale(scale)
    T = x.shape[0]
    target = scale_length(T, scale)
    needed = (target - 1) * pooling.stride + pooling.kernel - 2 * pooling.padding
    if needed > T:
        x = torch.cat([x, x[-1:].expand(needed - T, -1)], dim=0)
    pooled = temporal_pool(x, pooling.kernel, pooling.stride, pooling.padding)
    if pooled.shape[0] < target:
        raise ValueError(f"pooling {pooling} yields {pooled.shape[0]} rows, scale {scale} needs {target}")
    return pooled[:target]


def attention_head(features: torch.Tensor, w_q: torch.Tensor, w_k: torch.Tensor, w_v: torch.Tensor,
                   scale: int = 1, pooling: Optional[PoolingConfig] = None,
                   residual: Optional[torch.Tensor] = None,
                   return_weights: bool = False) -> Union[torch.Tensor, Tuple[torch.Tensor, torch.Tensor]]:
    """One self-attention head: A = X + softmax(Q K^T / sqrt(d)) V

    X is the sequence pooled to the head's scale; Q, K, V are its
    projections. The residual defaults to X and must match the head width.
    """
    if features.dim() != 2 or features.shape[1] != w_q.shape[0]:
        raise ValueError(f"features {tuple(features.shape)} do not match projection {tuple(w_q.shape)}")
    if w_k.shape != w_q.shape:
        raise ValueError(f"key projection {tuple(w_k.shape)} differs from query {tuple(w_q.shape)}")
    if w_v.shape[0] != w_q.shape[0]:
        raise ValueError(f"value projection {tuple(w_v.shape)} does not take {w_q.shape[0]} inputs")
    x = pool_to_scale(features, scale, pooling) if (scale != 1 or pooling is not None) else features
    if residual is None:
        residual = x
    if residual.shape != (x.shape[0], w_v.shape[1]):
        raise ValueError(f"residual {tuple(residual.shape)} does not match head output "
                         f"({x.shape[0]}, {w_v.shape[1]})")
    q = x @ w_q
    k = x @ w_k
    v = x @ w_v
    weights = torch.softmax(q @ k.t() / math.sqrt(w_q.shape[1]), dim=-1)
    out = residual + weights @ v
    if return_weights:
        return out, weights
    return out


class AttentionHead(nn.Module):
    """Learnable W_Q, W_K, W_V of one head"""

    def __init__(self, in_dim: int, head_dim: int):
        super().__init__()
        self.w_q = nn.Parameter(torch.empty(in_dim, head_dim))
        self.w_k = nn.Parameter(torch.empty(in_dim, head_dim))
        self.w_v = nn.Parameter(torch.empty(in_dim, head_dim))
        for w in (self.w_q, self.w_k, self.w_v):
            nn.init.xavier_uniform_(w)

    def forward(self, x: torch.Tensor, residual: torch.Tensor, return_weights: bool = False):
        return attention_head(x, self.w_q, self.w_k, self.w_v, residual=residual,
                              return_weights=return_weights)


class ScaleEncoder(nn.Module):
    """Pre-norm multi-head attention block plus a residual FC layer for one scale"""

    def __init__(self, in_dim: int, width: int, num_heads: int, scale: int,
                 pooling: Optional[PoolingConfig] = None, positional: bool = False):
        super().__init__()
        if num_heads < 1 or width % num_heads:
            raise ValueError(f"width {width} is not divisible into {num_heads} heads")
        self.scale = scale
        self.pooling = pooling or PoolingConfig.for_scale(scale)
        self.pooling.check_scale(scale)
        self.width = width
        self.positional = positional
        self.head_dim = width // num_heads
        self.input_proj = nn.Linear(in_dim, width) if in_dim != width else nn.Identity()
        self.norm_attn = nn.LayerNorm(width)
        self.heads = nn.ModuleList(AttentionHead(width, self.head_dim) for _ in range(num_heads))
        self.norm_mlp = nn.LayerNorm(width)
        self.mlp = nn.Linear(width, width)

    def forward(self, features: torch.Tensor, return_weights: bool = False):
        x = self.input_proj(pool_to_scale(features, self.scale, self.pooling))
        if self.positional:
            x = x + sinusoid_table(x.shape[0], self.width, x.dtype)
        normed = self.norm_attn(x)
        outputs, weights = [], []
        for i, head in enumerate(self.heads):
            part = x[:, i * self.head_dim:(i + 1) * self.head_dim]
            out, w = head(normed, part, return_weights=True)
            outputs.append(out)
            weights.append(w)
        h = torch.cat(outputs, dim=1)
        embedding = h + self.mlp(self.norm_mlp(h))
        if return_weights:
            return embedding, weights
        return embedding


class MultiScaleEncoder(nn.Module):
    """One ScaleEncoder per temporal scale s in S"""

    def __init__(self, in_dim: int, width: int, num_heads: int = 4, scales: Sequence[int] = (1, 2),
                 pooling: Optional[Dict[int, PoolingConfig]] = None, positional: bool = False):
        super().__init__()
        scales = tuple(scales)
        if not scales or any(s not in ALLOWED_SCALES for s in scales) or len(set(scales)) != len(scales):
            raise ValueError(f"scale set must be a non-empty subset of {ALLOWED_SCALES}, got {scales}")
        pooling = pooling or {}
        self.scales = scales
        self.in_dim = in_dim
        self.width = width
        self.blocks = nn.ModuleDict({
            f"s{s}": ScaleEncoder(in_dim, width, num_heads, s, pooling.get(s), positional) for s in scales
        })

    def forward(self, features: torch.Tensor) -> Dict[int, torch.Tensor]:
        return embed(features, self)


def embed(features: torch.Tensor, encoder: MultiScaleEncoder) -> Dict[int, torch.Tensor]:
    """Snippet embedding E^s (T^s x C) for every scale of the encoder"""
    if features.dim() != 2 or features.shape[1] != encoder.in_dim:
        raise ValueError(f"features {tuple(features.shape)} do not match encoder input {encoder.in_dim}")
    return {s: encoder.blocks[f"s{s}"](features) for s in encoder.scales}
