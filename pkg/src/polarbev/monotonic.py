"""Monotonic attention with infinite lookback.

Each ray slot ``i`` scans the memory starting where slot ``i-1`` stopped,
stopping at entry ``j`` with probability ``p[i, j]``. Training and inference
both use the expected alignment ``alpha`` over stop positions; the lookback
distribution ``beta`` then spreads each stop's mass softly over the entries
up to it.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .attention import AttentionParams, merge_heads, scaled_dot_energy, split_heads
from .numerics import ContractError, Tensor

ENERGY_CLAMP = 15.0
P_EPS = 1e-6
NUMERATORS = ("slot_j", "stop_k")


class SizeError(ValueError):
    """Instance too large for exhaustive enumeration."""


def _energies(y, h, params: AttentionParams) -> Tensor:
    q = nx.linear(y, params.wq)
    k = nx.linear(h, params.wk)
    if params.head_count > 1:
        q, k = split_heads(q, params.head_count), split_heads(k, params.head_count)
    return scaled_dot_energy(q, k)


def selection_probs(y, h, params: AttentionParams) -> Tensor:
    """``p = sigmoid(energy)`` with energies clamped to +-15 and p kept inside (eps, 1-eps)."""
    e = nx.clip(_energies(y, h, params), -ENERGY_CLAMP, ENERGY_CLAMP)
    return nx.clip(nx.sigmoid(e), P_EPS, 1.0 - P_EPS)


def _alpha_forward(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # q[i, j] = alpha[i, j] / p[i, j] is the probability that slot i reaches entry j;
    # carrying q instead of alpha avoids dividing by p.
    *lead, r, H = p.shape
    q = np.zeros_like(p)
    alpha = np.zeros_like(p)
    prev = np.zeros(tuple(lead) + (H,), dtype=p.dtype)
    prev[..., 0] = 1.0
    for i in range(r):
        qi = q[..., i, :]
        qi[..., 0] = prev[..., 0]
        for j in range(1, H):
            qi[..., j] = (1.0 - p[..., i, j - 1]) * qi[..., j - 1] + prev[..., j]
        alpha[..., i, :] = p[..., i, :] * qi
        prev = alpha[..., i, :]
    return alpha, q


def _alpha_backward(g: np.ndarray, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    r, H = p.shape[-2:]
    ga = np.array(g, dtype=p.dtype, copy=True)
    gp = np.zeros_like(p)
    for i in reversed(range(r)):
        gai = ga[..., i, :]
        gq = gai * p[..., i, :]
        gp[..., i, :] += gai * q[..., i, :]
        gprev = np.zeros_like(gq)
        for j in reversed(range(1, H)):
            gprev[..., j] += gq[..., j]
            gq[..., j - 1] += gq[..., j] * (1.0 - p[..., i, j - 1])
            gp[..., i, j - 1] -= gq[..., j] * q[..., i, j - 1]
        gprev[..., 0] += gq[..., 0]
        if i > 0:
            ga[..., i - 1, :] += gprev
    return gp


def monotonic_alpha(p) -> Tensor:
    """Expected monotonic alignment from selection probabilities ``p`` (..., r, H).

    ``alpha[i, j] = p[i, j] * ((1 - p[i, j-1]) * alpha[i, j-1] / p[i, j-1] + alpha[i-1, j])``
    with the virtual row ``alpha[0] = [1, 0, ..., 0]`` and ``alpha[i, 0-slot] = 0``.
    Rows may sum to less than one: that mass ran off the end of the memory.
    """
    p = nx.as_tensor(p)
    alpha, q = _alpha_forward(p.data)
    pd = p.data
    return nx.custom(alpha, (p,), lambda g: (_alpha_backward(g, pd, q),), "monotonic_alpha")


def alpha_bruteforce_oracle(p) -> np.ndarray:
    """Marginal stop probabilities by enumerating every stop/advance path.

    A path fixes, slot by slot, where scanning stops (``t_1 <= t_2 <= ...``) or
    that it ran off the end, after which no later slot stops anywhere. Paths are
    walked depth-first; each complete path adds its probability to the entries
    it stopped at.
    """
    p = np.asarray(getattr(p, "data", p), dtype=np.float64)
    r, H = p.shape
    if H > 8 or r > 6:
        raise SizeError(f"enumeration limited to H <= 8, r <= 6; got H={H}, r={r}")
    alpha = np.zeros((r, H))

    def walk(i: int, start: int, prob: float, stops: list[int]) -> None:
        if i == r:
            for slot, t in enumerate(stops):
                alpha[slot, t] += prob
            return
        reach = prob
        for t in range(start, H):
            walk(i + 1, t, reach * p[i, t], stops + [t])
            reach *= 1.0 - p[i, t]
        # ran off the end: slots i.. never stop
        for slot, t in enumerate(stops):
            alpha[slot, t] += reach

    walk(0, 0, 1.0, [])
    return alpha


def mail_beta(alpha, e, numerator: str = "slot_j") -> Tensor:
    """Lookback distribution from stop marginals ``alpha`` and soft energies ``e``.

    ``slot_j``: ``beta[j] = sum_{k>=j} alpha[k] exp(e[j]) / sum_{l<=k} exp(e[l])``
    ``stop_k``: ``beta[j] = sum_{k>=j} alpha[k] exp(e[k]) / sum_{l<=k} exp(e[l])``

    Every ratio is evaluated as ``exp(e[j] - m[k]) / sum_l exp(e[l] - m[k])``
    with ``m[k]`` the running maximum of ``e`` up to ``k``, so each denominator
    is at least one.
    """
    if numerator not in NUMERATORS:
        raise ContractError(f"unknown lookback numerator {numerator!r}")
    alpha, e = nx.as_tensor(alpha), nx.as_tensor(e)
    if numerator == "slot_j":
        return _beta_slot_j(alpha, e)
    H = e.shape[-1]
    run_max = np.maximum.accumulate(e.data, axis=-1)
    lower = np.tril(np.ones((H, H), dtype=e.dtype)).T  # [j, k] = 1 iff j <= k
    # diff[..., j, k] = e[j] - m[k]; non-positive wherever j <= k
    diff = nx.sub(nx.reshape(e, e.shape + (1,)), run_max[..., None, :])
    P = nx.mul(nx.exp(nx.clip(diff, -np.inf, 0.0)), lower)
    denom = nx.tsum(P, axis=-2)  # (..., r, H) indexed by k
    w = nx.div(alpha, denom)
    diag = nx.exp(nx.sub(e, run_max))
    return nx.reverse_cumsum(nx.mul(w, diag), axis=-1)


def _beta_slot_j(alpha: Tensor, e: Tensor) -> Tensor:
    # Fused form of the slot_j lookback with a hand-written backward; the
    # (..., H, H) intermediates dominate the cost of monotonic attention.
    H = e.shape[-1]
    run_max = np.maximum.accumulate(e.data, axis=-1)
    lower = np.triu(np.ones((H, H), dtype=e.dtype))  # [j, k] = 1 iff j <= k
    diff = np.minimum(e.data[..., :, None] - run_max[..., None, :], 0.0)
    P = np.exp(diff) * lower
    denom = P.sum(axis=-2)
    w = alpha.data / denom
    beta = (P @ w[..., None])[..., 0]

    def bw(g):
        gw = (np.swapaxes(P, -1, -2) @ g[..., None])[..., 0]
        galpha = gw / denom
        gP = g[..., :, None] * w[..., None, :] - (gw * w / denom)[..., None, :]
        ge = (gP * P).sum(axis=-1)
        return galpha, ge

    return nx.custom(beta, (alpha, e), bw, "mail_beta")


def mail_context(beta, h, params: AttentionParams) -> Tensor:
    """``c_i = sum_j beta[i, j] V(h_j)``."""
    v = nx.linear(h, params.wv)
    if params.head_count > 1:
        return merge_heads(nx.matmul(beta, split_heads(v, params.head_count)))
    return nx.matmul(beta, v)


def flip_direction(x, axis: int = -2) -> Tensor:
    """Reverse entry order along the column (height) axis."""
    return nx.flip(x, axis)


def mail_attention(y, h, select: AttentionParams, params: AttentionParams,
                   numerator: str = "slot_j") -> Tensor:
    """Contexts from monotonic stops (``select`` energies) plus soft lookback (``params`` energies)."""
    p = selection_probs(y, h, select)
    alpha = monotonic_alpha(p)
    beta = mail_beta(alpha, _energies(y, h, params), numerator)
    return mail_context(beta, h, params)
