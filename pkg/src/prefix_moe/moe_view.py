"""Each attention-head row as a mixture-of-experts output, written out
literally: N shared linear experts f_j(X) = w_vᵀ x_j gated by quadratic
scores s_ij = x_iᵀ w_q w_kᵀ x_j / sqrt(d_v), plus, under prefix tuning, L
input-independent experts f_{N+j} = w_vᵀ p_v_j gated by scores linear in
x_i.

Everything here is deliberately loop-based plain numpy, one expert at a
time, so it forms an independent route against the vectorized attention
path.  The only shared conventions are the score scaling and the expert
index map (prefix expert j <-> prompt column j).
"""

from __future__ import annotations

import numpy as np

from .attention import HeadParams, Prefix

__all__ = [
    "pretrained_expert",
    "prefix_expert",
    "row_scores",
    "moe_head_row",
    "prefix_moe_head_row",
    "gate_weights",
    "softmax_vector",
]


def _as_array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def _check_row(i: int, n: int):
    if not 0 <= i < n:
        raise IndexError(f"row index {i} out of range for {n} rows")


def softmax_vector(s: np.ndarray) -> np.ndarray:
    """Stable softmax of a 1-d score vector (max subtraction)."""
    s = np.asarray(s, dtype=np.float64)
    e = np.exp(s - s.max())
    return e / e.sum()


def pretrained_expert(x: np.ndarray, head: HeadParams, j: int) -> np.ndarray:
    """f_j(X) = w_vᵀ x_j: depends on the sequence only through row j."""
    x = _as_array(x)
    _check_row(j, x.shape[0])
    return _as_array(head.w_v).T @ x[j]


def prefix_expert(head: HeadParams, prefix: Prefix, j: int) -> np.ndarray:
    """f_{N+j} = w_vᵀ p_v_j: constant in the input."""
    _check_row(j, prefix.length)
    return _as_array(head.w_v).T @ _as_array(prefix.p_v)[j]


def row_scores(x: np.ndarray, head: HeadParams, prefix: Prefix | None, i: int):
    """Scores of row i against every expert.

    Returns (pretrained_scores[N], prefix_scores[L]); both use the shared
    1/sqrt(d_v) scaling and the single (w_q, w_k) pair of the head.
    """
    x = _as_array(x)
    n = x.shape[0]
    _check_row(i, n)
    w_q = _as_array(head.w_q)
    w_k = _as_array(head.w_k)
    scale = 1.0 / np.sqrt(head.d_v)
    qi = x[i] @ w_q
    pre = np.array([qi @ (w_k.T @ x[j]) * scale for j in range(n)])
    if prefix is None or prefix.length == 0:
        return pre, np.zeros(0)
    p_k = _as_array(prefix.p_k)
    pro = np.array([qi @ (w_k.T @ p_k[j]) * scale for j in range(prefix.length)])
    return pre, pro


def moe_head_row(x: np.ndarray, head: HeadParams, i: int) -> np.ndarray:
    """Row i of the head output as a softmax-gated sum of the N shared
    experts."""
    x = _as_array(x)
    pre, _ = row_scores(x, head, None, i)
    w = softmax_vector(pre)
    out = np.zeros(head.d_v)
    for j in range(x.shape[0]):
        out += w[j] * pretrained_expert(x, head, j)
    return out


def prefix_moe_head_row(x: np.ndarray, head: HeadParams, prefix: Prefix, i: int,
                        prefix_score_fn=None) -> np.ndarray:
    """Row i under prefix tuning: N pretrained plus L prefix experts, all
    normalized by one shared denominator.

    `prefix_score_fn`, when given, maps each raw prefix score to its gated
    replacement before the softmax (the pretrained scores are never
    touched); this is how the residual-gated variant is recovered.
    """
    x = _as_array(x)
    pre, pro = row_scores(x, head, prefix, i)
    if prefix_score_fn is not None:
        pro = np.array([prefix_score_fn(s) for s in pro]) if pro.size else pro
    w = softmax_vector(np.concatenate([pre, pro]))
    n = x.shape[0]
    out = np.zeros(head.d_v)
    for j in range(n):
        out += w[j] * pretrained_expert(x, head, j)
    for j in range(prefix.length):
        out += w[n + j] * prefix_expert(head, prefix, j)
    return out


def gate_weights(x: np.ndarray, head: HeadParams, prefix: Prefix, i: int,
                 prefix_score_fn=None) -> np.ndarray:
    """Full gate of row i: probabilities over the N + L experts, pretrained
    first, prefix experts after, in column order."""
    pre, pro = row_scores(x, head, prefix, i)
    if prefix_score_fn is not None:
        pro = np.array([prefix_score_fn(s) for s in pro]) if pro.size else pro
    return softmax_vector(np.concatenate([pre, pro]))
