"""Non-linear residual gating of prompt scores (NoRGa).

The gate rewrites every prompt-expert score s as

    s_hat = s + alpha * sigma(tau * s)

with learnable scalars alpha, tau and a fixed activation sigma among tanh,
sigmoid, and GELU.  In matrix form this transforms only the prompt block of
the attention score matrix; the pretrained block passes through untouched,
so alpha = 0 reduces the whole path to plain prefix tuning exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf as _erf

from . import numerics as nm
from .attention import HeadParams, MsaParams, Prefix, attention_matrix, prefix_head_outputs
from .moe_view import prefix_moe_head_row
from .numerics import NumericError, Tensor, as_tensor, concat, matmul, softmax_rows

__all__ = [
    "Activation",
    "ACTIVATIONS",
    "NorgaGate",
    "norga_score",
    "norga_head_output",
    "norga_attention",
    "norga_msa_forward",
    "norga_moe_row",
    "gate_param_count",
    "prefix_param_count",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class Activation:
    """An activation with analytic first and second derivatives (the second
    derivative feeds the algebraic-independence rank check)."""

    name: str
    tensor_fn: object
    value: object
    deriv: object
    deriv2: object


def _gelu_np(x):
    return x * 0.5 * (1.0 + _erf(x * _INV_SQRT2))


def _gelu_d1(x):
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return 0.5 * (1.0 + _erf(x * _INV_SQRT2)) + x * pdf


def _gelu_d2(x):
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return pdf * (2.0 - x * x)


def _sigmoid_np(x):
    return 1.0 / (1.0 + np.exp(-x))


ACTIVATIONS: dict[str, Activation] = {
    "tanh": Activation(
        "tanh", nm.tanh, np.tanh,
        lambda x: 1.0 - np.tanh(x) ** 2,
        lambda x: -2.0 * np.tanh(x) * (1.0 - np.tanh(x) ** 2)),
    "sigmoid": Activation(
        "sigmoid", nm.sigmoid, _sigmoid_np,
        lambda x: _sigmoid_np(x) * (1.0 - _sigmoid_np(x)),
        lambda x: _sigmoid_np(x) * (1.0 - _sigmoid_np(x)) * (1.0 - 2.0 * _sigmoid_np(x))),
    "gelu": Activation("gelu", nm.gelu, _gelu_np, _gelu_d1, _gelu_d2),
}


@dataclass
class NorgaGate:
    """Learnable scalar pair (alpha, tau) plus an activation choice.

    One gate is shared by all heads and rows of a layer.  `frozen` marks the
    scalars as excluded from optimizer updates; the continual-learning loop
    sets it after the first task.
    """

    alpha: Tensor = field(default_factory=lambda: Tensor(1.0, requires_grad=True))
    tau: Tensor = field(default_factory=lambda: Tensor(1.0, requires_grad=True))
    activation: str = "tanh"
    frozen: bool = False

    def __post_init__(self):
        self.alpha = as_tensor(self.alpha)
        self.tau = as_tensor(self.tau)
        if self.activation not in ACTIVATIONS:
            raise ValueError(
                f"unknown activation {self.activation!r}; choose from {sorted(ACTIVATIONS)}")

    @classmethod
    def fixed(cls, alpha: float = 1.0, tau: float = 1.0, activation: str = "tanh") -> "NorgaGate":
        """Non-learnable gate (the fixed-scalar ablation mode)."""
        return cls(alpha=Tensor(alpha), tau=Tensor(tau), activation=activation, frozen=True)

    def trainable_params(self) -> list[Tensor]:
        if self.frozen:
            return []
        return [t for t in (self.alpha, self.tau) if t.requires_grad]

    def sigma(self) -> Activation:
        return ACTIVATIONS[self.activation]


def norga_score(s, gate: NorgaGate):
    """s + alpha * sigma(tau * s); accepts a float (returns float) or a
    Tensor (returns Tensor, differentiable in s, alpha, tau)."""
    if isinstance(s, Tensor):
        if not np.isfinite(s.data).all():
            raise NumericError("norga_score received non-finite input")
        return s + gate.alpha * gate.sigma().tensor_fn(gate.tau * s)
    s = float(s)
    if not np.isfinite(s):
        raise NumericError(f"norga_score received non-finite input {s}")
    out = norga_score(Tensor(s), gate)
    return float(out.data)


def transform_prompt_block(a_prompt: Tensor, gate: NorgaGate) -> Tensor:
    """Apply the residual gate to the prompt score block (Tensor path)."""
    if a_prompt.shape[-1] == 0:
        return a_prompt
    return a_prompt + gate.alpha * gate.sigma().tensor_fn(gate.tau * a_prompt)


def norga_head_output(x: Tensor, head: HeadParams, prefix: Prefix, gate: NorgaGate) -> Tensor:
    """One head's output (N x d_v) with gated prompt scores.

    Builds the split score matrix, rewrites only the prompt block, applies
    the row softmax over [prompt | pretrain], and takes the value-weighted
    sum with values stacked prefix-first to match the score column order.
    """
    x = as_tensor(x)
    a_prompt, a_pretrain = attention_matrix(x, head, prefix)
    a_hat = concat([transform_prompt_block(a_prompt, gate), a_pretrain], axis=-1)
    weights = softmax_rows(a_hat)
    x_vals = matmul(x, head.w_v)
    if prefix.length == 0:
        return matmul(weights, x_vals)
    p_vals = matmul(prefix.p_v, head.w_v)
    if x.ndim == 3:
        from .attention import _expand_like
        p_vals = _expand_like(p_vals, x_vals)
    values = concat([p_vals, x_vals], axis=-2)
    return matmul(weights, values)


def norga_attention(x: Tensor, head: HeadParams, prefix: Prefix, gate: NorgaGate) -> Tensor:
    """Alias for the per-head gated output."""
    return norga_head_output(x, head, prefix, gate)


def norga_msa_forward(x: Tensor, params: MsaParams, prefix: Prefix,
                      gate: NorgaGate | None) -> Tensor:
    """Full gated MSA layer; gate=None falls back to plain prefix tuning."""
    x = as_tensor(x)
    if gate is None:
        from .attention import prefix_attention
        return prefix_attention(x, params, prefix)
    outs = [norga_head_output(x, h, prefix, gate) for h in params.heads]
    return matmul(concat(outs, axis=-1), params.w_o)


def norga_moe_row(x, head: HeadParams, prefix: Prefix, gate: NorgaGate, i: int) -> np.ndarray:
    """Row i of the gated mixture, evaluated through the expert-by-expert
    route with prompt scores rewritten scalar by scalar."""
    alpha = float(gate.alpha.data)
    tau = float(gate.tau.data)
    sig = gate.sigma().value

    def gated(s: float) -> float:
        return s + alpha * float(sig(tau * s))

    return prefix_moe_head_row(x, head, prefix, i, prefix_score_fn=gated)


def gate_param_count(gate: NorgaGate | None) -> int:
    """Scalars the gate adds at one gated site: exactly 2, or 0 without a
    gate."""
    return 0 if gate is None else 2


def prefix_param_count(prefix: Prefix) -> int:
    return prefix.p_k.size + prefix.p_v.size
