"""Scaled dot-product attention, multi-head self-attention, and prefix-tuned
attention over the autodiff engine.

These are the reference forward paths: the per-row mixture view in
`moe_view` and the gated variants in `norga` are all checked against the
outputs produced here.  No dropout, layer norm, or MLP blocks; the
mechanisms under study live entirely in the attention matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import (Rng, ShapeError, Tensor, _accumulate, as_tensor, concat, matmul,
                       softmax_rows, transpose)

__all__ = [
    "ConfigurationError",
    "HeadParams",
    "MsaParams",
    "Prefix",
    "sdpa",
    "msa_forward",
    "msa_head_outputs",
    "prefix_attention",
    "prefix_head_outputs",
    "attention_matrix",
    "init_head_params",
    "init_msa_params",
    "init_prefix",
    "empty_prefix",
]


class ConfigurationError(ValueError):
    """Model dimensions or options are inconsistent."""


@dataclass
class HeadParams:
    """Projection matrices of one attention head.

    w_q, w_k: d x d_k;  w_v: d x d_v.  Construction enforces d_k == d_v so
    that score scaling by 1/sqrt(d_v) and 1/sqrt(d_k) coincide and the
    mixture view and the attention path share one convention.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor

    def __post_init__(self):
        self.w_q = as_tensor(self.w_q)
        self.w_k = as_tensor(self.w_k)
        self.w_v = as_tensor(self.w_v)
        if self.w_q.shape != self.w_k.shape:
            raise ConfigurationError(
                f"w_q and w_k must match, got {self.w_q.shape} vs {self.w_k.shape}")
        if self.w_q.shape[0] != self.w_v.shape[0]:
            raise ConfigurationError(
                f"w_q and w_v disagree on model dim: {self.w_q.shape} vs {self.w_v.shape}")
        if self.w_q.shape[1] != self.w_v.shape[1]:
            raise ConfigurationError(
                f"d_k must equal d_v, got d_k={self.w_q.shape[1]} d_v={self.w_v.shape[1]}")

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1]

    @property
    def d_v(self) -> int:
        return self.w_v.shape[1]


@dataclass
class MsaParams:
    """Multi-head layer: m heads plus output projection w_o of shape
    (m * d_v) x d."""

    heads: list[HeadParams]
    w_o: Tensor

    def __post_init__(self):
        if not self.heads:
            raise ConfigurationError("MSA layer needs at least one head")
        self.w_o = as_tensor(self.w_o)
        d = self.heads[0].d
        d_v = self.heads[0].d_v
        for h in self.heads:
            if h.d != d or h.d_v != d_v:
                raise ConfigurationError("all heads must share d and d_v")
        if self.w_o.shape != (len(self.heads) * d_v, d):
            raise ConfigurationError(
                f"w_o must be {(len(self.heads) * d_v, d)}, got {self.w_o.shape}")

    @property
    def m(self) -> int:
        return len(self.heads)

    @property
    def d(self) -> int:
        return self.heads[0].d


@dataclass
class Prefix:
    """Learnable key/value prefix rows, each L x d in model space."""

    p_k: Tensor
    p_v: Tensor

    def __post_init__(self):
        self.p_k = as_tensor(self.p_k)
        self.p_v = as_tensor(self.p_v)
        if self.p_k.shape != self.p_v.shape:
            raise ConfigurationError(
                f"p_k and p_v must have identical shapes, got {self.p_k.shape} vs {self.p_v.shape}")

    @property
    def length(self) -> int:
        return self.p_k.shape[0]

    @property
    def d(self) -> int:
        return self.p_k.shape[1]


def sdpa(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q kᵀ / sqrt(d_k)) v with row-wise softmax."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query/key width mismatch: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key/value count mismatch: {k.shape} vs {v.shape}")
    d_k = q.shape[-1]
    scores = matmul(q, transpose(k)) * (1.0 / np.sqrt(d_k))
    return matmul(softmax_rows(scores), v)


def msa_head_outputs(x: Tensor, params: MsaParams) -> list[Tensor]:
    """Per-head sdpa outputs before concatenation, each N x d_v."""
    x = as_tensor(x)
    _check_input(x, params)
    outs = []
    for h in params.heads:
        outs.append(sdpa(matmul(x, h.w_q), matmul(x, h.w_k), matmul(x, h.w_v)))
    return outs

def msa_forward(x: Tensor, params: MsaParams) -> Tensor:
    """Concat(head_1, ..., head_m) w_o."""
    return matmul(concat(msa_head_outputs(x, params), axis=-1), params.w_o)


def prefix_head_outputs(x: Tensor, params: MsaParams, prefix: Prefix) -> list[Tensor]:
    """Per-head attention with keys [p_k; x] and values [p_v; x]; queries are
    untouched.  The prefix rows live in model space and go through each
    head's own key/value projections."""
    x = as_tensor(x)
    _check_input(x, params)
    if prefix.length > 0 and prefix.d != params.d:
        raise ConfigurationError(
            f"prefix dim {prefix.d} does not match model dim {params.d}")
    if prefix.length == 0:
        return msa_head_outputs(x, params)
    keys_in = concat([_expand_like(prefix.p_k, x), x], axis=-2)
    vals_in = concat([_expand_like(prefix.p_v, x), x], axis=-2)
    outs = []
    for h in params.heads:
        outs.append(sdpa(matmul(x, h.w_q), matmul(keys_in, h.w_k), matmul(vals_in, h.w_v)))
    return outs

def prefix_attention(x: Tensor, params: MsaParams, prefix: Prefix) -> Tensor:
    """Prefix-tuned MSA output, N x d."""
    return matmul(concat(prefix_head_outputs(x, params, prefix), axis=-1), params.w_o)


def attention_matrix(x: Tensor, head: HeadParams, prefix: Prefix):
    """Pre-softmax score blocks of one head, split as
    (prompt block N x L, pretrained block N x N).

    prompt block  = x w_q w_kᵀ p_kᵀ / sqrt(d_v)
    pretrain block = x w_q w_kᵀ xᵀ / sqrt(d_v)
    """
    x = as_tensor(x)
    if x.shape[-1] != head.d:
        raise ShapeError(f"input dim {x.shape[-1]} does not match head dim {head.d}")
    if prefix.length > 0 and prefix.d != head.d:
        raise ConfigurationError(
            f"prefix dim {prefix.d} does not match head dim {head.d}")
    scale = 1.0 / np.sqrt(head.d_v)
    q = matmul(x, head.w_q)
    a_pretrain = matmul(q, transpose(matmul(x, head.w_k))) * scale
    if prefix.length == 0:
        batch = x.shape[:-2]
        a_prompt = Tensor(np.zeros(batch + (x.shape[-2], 0)))
    else:
        a_prompt = matmul(q, transpose(_expand_pk(matmul(prefix.p_k, head.w_k), x))) * scale
    return a_prompt, a_pretrain


def _expand_like(p: Tensor, x: Tensor) -> Tensor:
    """Tile prefix rows across a leading batch axis when x is stacked."""
    if x.ndim == 2:
        return p
    reps = x.shape[0]
    data = np.broadcast_to(p.data, (reps,) + p.shape)
    out = Tensor(data.copy())
    if p.requires_grad:
        out.requires_grad = True
        out._parents = (p,)
        out._backward = lambda g: _accumulate(p, g.sum(axis=0))
    return out


def _expand_pk(pk_proj: Tensor, x: Tensor) -> Tensor:
    return _expand_like(pk_proj, x) if x.ndim == 3 else pk_proj


def _check_input(x: Tensor, params: MsaParams):
    if x.shape[-1] != params.d:
        raise ShapeError(f"input dim {x.shape[-1]} does not match model dim {params.d}")
    if params.d % params.m != 0:
        raise ConfigurationError(f"model dim {params.d} not divisible by {params.m} heads")


# initialization -----------------------------------------------------------


def init_head_params(rng: Rng, d: int, d_head: int, requires_grad: bool = False) -> HeadParams:
    """Seeded uniform [-0.5, 0.5] / sqrt(d) weights; bounded magnitudes keep
    the softmax well conditioned for the exact-equivalence checks."""
    scale = 1.0 / np.sqrt(d)

    def draw(shape):
        return Tensor(rng.uniform(-0.5, 0.5, size=shape) * scale, requires_grad=requires_grad)

    return HeadParams(w_q=draw((d, d_head)), w_k=draw((d, d_head)), w_v=draw((d, d_head)))


def init_msa_params(rng: Rng, d: int, m: int, requires_grad: bool = False) -> MsaParams:
    if d % m != 0:
        raise ConfigurationError(f"model dim {d} not divisible by {m} heads")
    d_head = d // m
    heads = [init_head_params(rng.child(i), d, d_head, requires_grad) for i in range(m)]
    w_o = Tensor(rng.child(m).uniform(-0.5, 0.5, size=(m * d_head, d)) / np.sqrt(d),
                 requires_grad=requires_grad)
    return MsaParams(heads=heads, w_o=w_o)


def init_prefix(rng: Rng, length: int, d: int, requires_grad: bool = True) -> Prefix:
    scale = 1.0 / np.sqrt(d)
    return Prefix(
        p_k=Tensor(rng.uniform(-0.5, 0.5, size=(length, d)) * scale, requires_grad=requires_grad),
        p_v=Tensor(rng.child(1).uniform(-0.5, 0.5, size=(length, d)) * scale, requires_grad=requires_grad),
    )


def empty_prefix(d: int) -> Prefix:
    return Prefix(p_k=Tensor(np.zeros((0, d))), p_v=Tensor(np.zeros((0, d))))
