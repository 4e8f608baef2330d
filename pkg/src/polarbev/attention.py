"""Soft attention, polar-ray self-attention and the 1D transformer layers.

All functions accept arbitrary leading batch axes: a memory is ``(..., H, C)``
and a set of positional queries is ``(..., r, C)``. One parameter set serves
every column of an image, so batching columns along a leading axis is the same
as looping over them.
"""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .nn import LayerNorm, Linear, Module, param
from .numerics import ContractError, DimensionError, DomainError, Tensor

MODES = ("soft", "mono_down", "mono_up")


class AttentionParams(Module):
    """Query/key/value projections ``W_Q, W_K, W_V`` of shape (C, D)."""

    def __init__(self, width_in: int, width_out: int, rng: np.random.Generator,
                 head_count: int = 1, dtype=np.float64):
        if width_out % head_count:
            raise ContractError(f"width {width_out} not divisible by {head_count} heads")
        self.wq = param((width_in, width_out), rng, width_in, dtype)
        self.wk = param((width_in, width_out), rng, width_in, dtype)
        self.wv = param((width_in, width_out), rng, width_in, dtype)
        self.head_count = head_count

    @classmethod
    def from_arrays(cls, wq, wk, wv, head_count: int = 1) -> "AttentionParams":
        obj = cls.__new__(cls)
        obj.wq, obj.wk, obj.wv = (w if isinstance(w, Tensor) else Tensor(w) for w in (wq, wk, wv))
        obj.head_count = head_count
        if obj.wq.shape != obj.wk.shape or obj.wq.shape != obj.wv.shape:
            raise DimensionError("W_Q, W_K and W_V must share their shape")
        return obj


class EnergyParams(Module):
    """Query/key projections only, for attention that needs energies but no values."""

    def __init__(self, width_in: int, width_out: int, rng: np.random.Generator,
                 head_count: int = 1, dtype=np.float64):
        if width_out % head_count:
            raise ContractError(f"width {width_out} not divisible by {head_count} heads")
        self.wq = param((width_in, width_out), rng, width_in, dtype)
        self.wk = param((width_in, width_out), rng, width_in, dtype)
        self.head_count = head_count


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., L, D) -> (..., heads, L, D/heads)."""
    *lead, L, D = x.shape
    x = nx.reshape(x, tuple(lead) + (L, heads, D // heads))
    n = len(lead)
    return nx.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))


def merge_heads(x: Tensor) -> Tensor:
    """(..., heads, L, d) -> (..., L, heads*d)."""
    *lead, h, L, d = x.shape
    n = len(lead)
    x = nx.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))
    return nx.reshape(x, tuple(lead) + (L, h * d))


def scaled_dot_energy(Q, K) -> Tensor:
    """``e[i, j] = <Q_i, K_j> / sqrt(D)``."""
    Q, K = nx.as_tensor(Q), nx.as_tensor(K)
    D = Q.shape[-1]
    if D == 0:
        raise DomainError("energy over zero-width projections")
    if K.shape[-1] != D:
        raise DimensionError(f"query width {Q.shape} does not match key width {K.shape}")
    return nx.scale(nx.matmul(Q, nx.swapaxes(K, -1, -2)), 1.0 / math.sqrt(D))


def project(x, params: AttentionParams) -> tuple[Tensor, Tensor, Tensor]:
    return nx.linear(x, params.wq), nx.linear(x, params.wk), nx.linear(x, params.wv)


def soft_attention(y, h, params: AttentionParams) -> tuple[Tensor, Tensor]:
    """Queries ``y`` attend over memory ``h``.

    Returns the contexts ``(..., r, D)`` and the alignment weights; the latter
    are ``(..., r, H)`` for a single head and ``(..., heads, r, H)`` otherwise.
    """
    y, h = nx.as_tensor(y), nx.as_tensor(h)
    if h.shape[-2] == 0:
        raise DomainError("empty memory")
    nh = params.head_count
    q = nx.linear(y, params.wq)
    k = nx.linear(h, params.wk)
    v = nx.linear(h, params.wv)
    if nh == 1:
        align = nx.softmax(scaled_dot_energy(q, k), axis=-1)
        return nx.matmul(align, v), align
    qh, kh, vh = split_heads(q, nh), split_heads(k, nh), split_heads(v, nh)
    align = nx.softmax(scaled_dot_energy(qh, kh), axis=-1)
    return merge_heads(nx.matmul(align, vh)), align


def polar_self_attention(c, params: AttentionParams) -> Tensor:
    """Every ray slot attends over all contexts on its ray."""
    return soft_attention(c, c, params)[0]


def sinusoid_encoding(length: int, width: int, positions=None) -> np.ndarray:
    """Fixed encoding ``PE[p, 2i] = sin(p / 10000^(2i/C))``, ``PE[p, 2i+1] = cos(...)``.

    ``positions`` overrides the default integer positions ``0..length-1``.
    """
    if width % 2:
        raise ContractError(f"sinusoid width must be even, got {width}")
    pos = np.arange(length, dtype=np.float64) if positions is None else np.asarray(positions, np.float64)
    freq = 10000.0 ** (-np.arange(0, width, 2, dtype=np.float64) / width)
    ang = pos[:, None] * freq[None, :]
    pe = np.empty((len(pos), width))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang)
    return pe


class MultiHeadAttention(Module):
    def __init__(self, width: int, heads: int, rng, dtype=np.float64):
        self.proj = AttentionParams(width, width, rng, heads, dtype)
        self.out = Linear(width, width, rng, dtype)

    def __call__(self, q_in, kv_in) -> Tensor:
        ctx, _ = soft_attention(q_in, kv_in, self.proj)
        return self.out(ctx)


class FeedForward(Module):
    def __init__(self, width: int, hidden: int, rng, dtype=np.float64):
        self.fc1 = Linear(width, hidden, rng, dtype)
        self.fc2 = Linear(hidden, width, rng, dtype)

    def __call__(self, x):
        return self.fc2(nx.relu(self.fc1(x)))


def _with_pe(x: Tensor, pe) -> Tensor:
    return x if pe is None else nx.add(x, pe)


class EncoderLayer(Module):
    """Pre-norm self-attention + feed-forward block over one image column."""

    def __init__(self, width: int, heads: int, rng, dtype=np.float64, ffn_mult: int = 4):
        self.norm1 = LayerNorm(width, dtype)
        self.attn = MultiHeadAttention(width, heads, rng, dtype)
        self.norm2 = LayerNorm(width, dtype)
        self.ffn = FeedForward(width, ffn_mult * width, rng, dtype)

    def __call__(self, x: Tensor, pe=None) -> Tensor:
        a = _with_pe(self.norm1(x), pe)
        x = nx.add(x, self.attn(a, a))
        return nx.add(x, self.ffn(self.norm2(x)))


class DecoderLayer(Module):
    """Ray self-attention, then cross-attention into the column memory, then feed-forward.

    ``mode`` picks the cross-attention: ``soft`` looks both ways; ``mono_down``
    runs monotonic attention with infinite lookback scanning the column from the
    bottom row upward (lookback covers what lies below); ``mono_up`` scans from
    the top row (lookback covers what lies above).
    """

    def __init__(self, width: int, heads: int, rng, dtype=np.float64, ffn_mult: int = 4,
                 mode: str = "soft", mail_numerator: str = "slot_j"):
        if mode not in MODES:
            raise ContractError(f"unknown attention mode {mode!r}")
        self.mode = mode
        self.mail_numerator = mail_numerator
        self.norm1 = LayerNorm(width, dtype)
        self.self_attn = MultiHeadAttention(width, heads, rng, dtype)
        self.norm2 = LayerNorm(width, dtype)
        self.cross_attn = MultiHeadAttention(width, heads, rng, dtype)
        if mode != "soft":
            self.select = EnergyParams(width, width, rng, heads, dtype)
        self.norm3 = LayerNorm(width, dtype)
        self.ffn = FeedForward(width, ffn_mult * width, rng, dtype)

    def cross(self, q_in: Tensor, memory: Tensor) -> Tensor:
        if self.mode == "soft":
            return self.cross_attn(q_in, memory)
        from .monotonic import flip_direction, mail_attention
        mem = flip_direction(memory) if self.mode == "mono_down" else memory
        ctx = mail_attention(q_in, mem, self.select, self.cross_attn.proj, self.mail_numerator)
        return self.cross_attn.out(ctx)

    def __call__(self, x: Tensor, memory: Tensor, query_pe=None) -> Tensor:
        a = _with_pe(self.norm1(x), query_pe)
        x = nx.add(x, self.self_attn(a, a))
        b = _with_pe(self.norm2(x), query_pe)
        x = nx.add(x, self.cross(b, memory))
        return nx.add(x, self.ffn(self.norm3(x)))


class AxialAttention(Module):
    """Pre-norm residual self-attention along one axis of a feature tensor."""

    def __init__(self, width: int, heads: int, rng, dtype=np.float64):
        self.norm = LayerNorm(width, dtype)
        self.attn = MultiHeadAttention(width, heads, rng, dtype)

    def __call__(self, seq: Tensor, pe=None) -> Tensor:
        """``seq``: (..., L, C) sequences along the attended axis."""
        a = _with_pe(self.norm(seq), pe)
        return nx.add(seq, self.attn(a, a))
