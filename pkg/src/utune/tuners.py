"""Prefix, prompt and adapter tuners in their original and parallel forms.

The parallel forms split attention over a concatenated key set into the
original attention and an attention over the extra keys, mixed per query by
a softmax-mass gate::

    lam = S_extra / (S_orig + S_extra),  S_* = sum_j exp(q . k_j / sqrt(d_h))

which makes ``(1 - lam) * Attn(Q, K, V) + lam * Attn(Q, K_x, V_x)`` equal
to ``Attn(Q, [K_x; K], [V_x; V])`` exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, NamedTuple, Optional

import numpy as np

from . import tensor as tn
from .backbone import AttentionProjections, attention, merge_heads, multi_head_attention, project_qkv, split_heads
from .tensor import DimensionError, Tensor, Variable

GateHook = Callable[[Tensor], Tensor]

PREFIX_INIT_STD = 0.02


@dataclass
class PrefixTuner:
    K_pre: Variable  # [h, m, d_h]
    V_pre: Variable

    @classmethod
    def init(cls, heads: int, length: int, head_dim: int, rng: np.random.Generator) -> "PrefixTuner":
        shape = (heads, length, head_dim)
        return cls(Variable(rng.normal(0.0, PREFIX_INIT_STD, shape), "K_pre"),
                   Variable(rng.normal(0.0, PREFIX_INIT_STD, shape), "V_pre"))

    @property
    def length(self) -> int:
        return self.K_pre.shape[-2]

    def variables(self) -> Dict[str, Variable]:
        return {"K_pre": self.K_pre, "V_pre": self.V_pre}


@dataclass
class PromptTuner:
    x_pro: Variable  # [n, d]

    @classmethod
    def init(cls, length: int, width: int, rng: np.random.Generator) -> "PromptTuner":
        return cls(Variable(rng.normal(0.0, PREFIX_INIT_STD, (length, width)), "x_pro"))

    @property
    def length(self) -> int:
        return self.x_pro.shape[0]

    def variables(self) -> Dict[str, Variable]:
        return {"x_pro": self.x_pro}


@dataclass
class AdapterTuner:
    W_down: Variable  # [d, r]
    W_up: Variable  # [r, d]
    b_down: Optional[Variable] = None
    b_up: Optional[Variable] = None
    activation: str = "gelu"

    @classmethod
    def init(cls, width: int, bottleneck: int, rng: np.random.Generator, bias: bool = False,
             activation: str = "gelu") -> "AdapterTuner":
        if not 1 <= bottleneck < width:
            raise ValueError(f"adapter bottleneck must satisfy 1 <= r < d, got r={bottleneck}, d={width}")
        bound = 1.0 / math.sqrt(width)
        return cls(
            W_down=Variable(rng.uniform(-bound, bound, (width, bottleneck)), "W_down"),
            W_up=Variable(np.zeros((bottleneck, width)), "W_up"),
            b_down=Variable(np.zeros(bottleneck), "b_down") if bias else None,
            b_up=Variable(np.zeros(width), "b_up") if bias else None,
            activation=activation,
        )

    @property
    def bottleneck(self) -> int:
        return self.W_down.shape[1]

    def variables(self) -> Dict[str, Variable]:
        out = {"W_down": self.W_down, "W_up": self.W_up}
        if self.b_down is not None:
            out["b_down"] = self.b_down
        if self.b_up is not None:
            out["b_up"] = self.b_up
        return out


SCALING_KINDS = ("direct", "scalar", "channel_wise", "input_dependent")


@dataclass
class ScalingStrategy:
    """How a tuner delta is weighted before it joins the stream.

    ``input_dependent`` is an SE-style gate sigmoid(gelu(x A) B) computed from
    the site input; B starts at zero so every gate starts at exactly 0.5.
    """

    kind: str = "channel_wise"
    s: Optional[Variable] = None
    gate_a: Optional[Variable] = None
    gate_b: Optional[Variable] = None

    @classmethod
    def init(cls, kind: str, width: int, rng: np.random.Generator) -> "ScalingStrategy":
        if kind == "direct":
            return cls(kind)
        if kind == "scalar":
            return cls(kind, s=Variable(np.ones(1), "s"))
        if kind == "channel_wise":
            return cls(kind, s=Variable(np.ones(width), "s"))
        if kind == "input_dependent":
            hidden = max(1, width // 4)
            bound = 1.0 / math.sqrt(width)
            return cls(kind,
                       gate_a=Variable(rng.uniform(-bound, bound, (width, hidden)), "gate_a"),
                       gate_b=Variable(np.zeros((hidden, width)), "gate_b"))
        raise ValueError(f"unknown scaling strategy {kind!r}; expected one of {SCALING_KINDS}")

    def variables(self) -> Dict[str, Variable]:
        return {k: v for k, v in (("s", self.s), ("gate_a", self.gate_a), ("gate_b", self.gate_b))
                if v is not None}


class GateVector(NamedTuple):
    lam: Tensor
    beta: Optional[Tensor] = None


# -------------------------------------------------------------------- gates


def compute_lambda_gate(Q: Tensor, K: Tensor, K_extra: Tensor, keepdims: bool = False) -> Tensor:
    """Share of softmax mass that each query puts on ``K_extra``.

    Shapes: ``Q [..., h, Tq, d_h]``, ``K [..., h, Tk, d_h]``,
    ``K_extra [..., h, m, d_h]`` (leading dims broadcast). Returns
    ``[..., h, Tq]`` (or ``[..., h, Tq, 1]`` with ``keepdims``). Logits use
    the same 1/sqrt(d_h) scaling as :func:`attention`, and both exponential
    sums share one max shift.
    """
    Q, K, K_extra = tn.as_tensor(Q), tn.as_tensor(K), tn.as_tensor(K_extra)
    if K_extra.shape[-2] == 0:
        shape = Q.shape[:-1] + ((1,) if keepdims else ())
        return Tensor(np.zeros(shape))
    scale = 1.0 / math.sqrt(Q.shape[-1])
    lo = tn.matmul(Q, K.swapaxes(-1, -2)) * scale
    le = tn.matmul(Q, K_extra.swapaxes(-1, -2)) * scale
    shift = np.maximum(lo.data.max(axis=-1, keepdims=True), le.data.max(axis=-1, keepdims=True))
    s_orig = tn.exp(lo - shift).sum(axis=-1, keepdims=True)
    s_extra = tn.exp(le - shift).sum(axis=-1, keepdims=True)
    lam = s_extra / (s_orig + s_extra)
    return lam if keepdims else lam.reshape(lam.shape[:-1])


def _check_heads(proj: AttentionProjections, tuner: PrefixTuner) -> None:
    h, _, dh = tuner.K_pre.shape
    if h != proj.heads or dh != proj.head_dim or tuner.V_pre.shape != tuner.K_pre.shape:
        raise DimensionError(
            f"prefix shape {tuner.K_pre.shape}/{tuner.V_pre.shape} does not match "
            f"{proj.heads} heads of width {proj.head_dim}")


def _lead_broadcast(p: Tensor, like: Tensor) -> Tensor:
    """Broadcast ``p [a, b, c]`` over the batch dims of ``like [..., a, x, c]``."""
    return tn.broadcast_to(p, (*like.shape[:-3], *p.shape))


# ------------------------------------------------------------------- prefix


def prefix_original(x: Tensor, proj: AttentionProjections, tuner: PrefixTuner) -> Tensor:
    """Attention with prefix keys/values prepended per head."""
    _check_heads(proj, tuner)
    q, k, v = project_qkv(tn.as_tensor(x), proj)
    k_cat = tn.concat([_lead_broadcast(tuner.K_pre, k), k], axis=-2)
    v_cat = tn.concat([_lead_broadcast(tuner.V_pre, v), v], axis=-2)
    return tn.matmul(merge_heads(attention(q, k_cat, v_cat)), proj.W_o)


def _prefix_branches(x, proj, tuner, gate_hook):
    q, k, v = project_qkv(tn.as_tensor(x), proj)
    base = attention(q, k, v)
    pre = attention(q, tuner.K_pre, tuner.V_pre)
    lam = compute_lambda_gate(q, k, tuner.K_pre, keepdims=True)
    if gate_hook is not None:
        lam = gate_hook(lam)
    return base, pre, lam


def prefix_parallel(x: Tensor, proj: AttentionProjections, tuner: PrefixTuner,
                    gate_hook: Optional[GateHook] = None) -> Tensor:
    """``(1 - lam) Attn(Q, K, V) + lam Attn(Q, K_pre, V_pre)`` per head, then W_o.

    ``gate_hook`` may rewrite lam (shape ``[..., h, T, 1]``) before mixing;
    it exists for negative controls and debugging.
    """
    _check_heads(proj, tuner)
    if tuner.length == 0:
        return multi_head_attention(x, proj)
    base, pre, lam = _prefix_branches(x, proj, tuner, gate_hook)
    mixed = (1.0 - lam) * base + lam * pre
    return tn.matmul(merge_heads(mixed), proj.W_o)


def prefix_delta(x: Tensor, proj: AttentionProjections, tuner: PrefixTuner) -> Tensor:
    """What prefix tuning adds on top of plain MHA: ``lam (Attn_pre - Attn) W_o``."""
    _check_heads(proj, tuner)
    if tuner.length == 0:
        return Tensor(np.zeros(tn.as_tensor(x).shape))
    base, pre, lam = _prefix_branches(x, proj, tuner, None)
    return tn.matmul(merge_heads(lam * (pre - base)), proj.W_o)


# ------------------------------------------------------------------- prompt


def _prompt_rows(tuner: PromptTuner, x: Tensor) -> Tensor:
    if tuner.x_pro.shape[-1] != x.shape[-1]:
        raise DimensionError(f"prompt width {tuner.x_pro.shape[-1]} != token width {x.shape[-1]}")
    return tn.broadcast_to(tuner.x_pro, (*x.shape[:-2], *tuner.x_pro.shape))


def prompt_original(x: Tensor, proj: AttentionProjections, tuner: PromptTuner,
                    discard_prompts: bool = True) -> Tensor:
    """Joint attention over ``[x; x_pro]``; optionally keep only the token rows."""
    x = tn.as_tensor(x)
    T = x.shape[-2]
    if tuner.length == 0:
        return multi_head_attention(x, proj)
    out = multi_head_attention(tn.concat([x, _prompt_rows(tuner, x)], axis=-2), proj)
    return out[..., :T, :] if discard_prompts else out


def _prompt_qkv(tuner: PromptTuner, proj: AttentionProjections, x: Tensor):
    if tuner.x_pro.shape[-1] != proj.width:
        raise DimensionError(f"prompt width {tuner.x_pro.shape[-1]} != attention width {proj.width}")
    h = proj.heads
    xp = tuner.x_pro
    return (split_heads(tn.matmul(xp, proj.W_q), h),
            split_heads(tn.matmul(xp, proj.W_k), h),
            split_heads(tn.matmul(xp, proj.W_v), h))


def prompt_parallel(x: Tensor, proj: AttentionProjections, tuner: PromptTuner,
                    discard_prompts: bool = True, gate_hook: Optional[GateHook] = None,
                    return_gates: bool = False):
    """Parallel form of prompt attention.

    Token rows mix original and prompt attention with lam; prompt rows (kept
    only when ``discard_prompts`` is false) mix prompt-to-prompt and
    prompt-to-token attention with beta.
    """
    x = tn.as_tensor(x)
    if tuner.length == 0:
        out = multi_head_attention(x, proj)
        return (out, None) if return_gates else out
    q, k, v = project_qkv(x, proj)
    qp, kp, vp = _prompt_qkv(tuner, proj, x)
    lam = compute_lambda_gate(q, k, kp, keepdims=True)
    if gate_hook is not None:
        lam = gate_hook(lam)
    tokens = (1.0 - lam) * attention(q, k, v) + lam * attention(q, kp, vp)
    beta = None
    if discard_prompts:
        heads = tokens
    else:
        beta = compute_lambda_gate(qp, kp, k, keepdims=True)
        if gate_hook is not None:
            beta = gate_hook(beta)
        prompts = (1.0 - beta) * attention(qp, kp, vp) + beta * attention(qp, k, v)
        heads = tn.concat([tokens, prompts], axis=-2)
    out = tn.matmul(merge_heads(heads), proj.W_o)
    return (out, GateVector(lam, beta)) if return_gates else out


def prompt_delta(x: Tensor, proj: AttentionProjections, tuner: PromptTuner) -> Tensor:
    """Token-row change caused by prompts: ``lam (Attn_pro - Attn) W_o``."""
    x = tn.as_tensor(x)
    if tuner.length == 0:
        return Tensor(np.zeros(x.shape))
    q, k, v = project_qkv(x, proj)
    qp, kp, vp = _prompt_qkv(tuner, proj, x)
    lam = compute_lambda_gate(q, k, kp, keepdims=True)
    return tn.matmul(merge_heads(lam * (attention(q, kp, vp) - attention(q, k, v))), proj.W_o)


# ------------------------------------------------------------------ adapter


def _bottleneck(x: Tensor, tuner: AdapterTuner) -> Tensor:
    if x.shape[-1] != tuner.W_down.shape[0]:
        raise DimensionError(f"input width {x.shape[-1]} != adapter width {tuner.W_down.shape[0]}")
    hdn = tn.matmul(x, tuner.W_down)
    if tuner.b_down is not None:
        hdn = hdn + tuner.b_down
    out = tn.matmul(tn.ACTIVATIONS[tuner.activation](hdn), tuner.W_up)
    if tuner.b_up is not None:
        out = out + tuner.b_up
    return out


def adapter_sequential(ffn_out: Tensor, tuner: AdapterTuner) -> Tensor:
    """Classic adapter after the FFN, inner residual included."""
    ffn_out = tn.as_tensor(ffn_out)
    return ffn_out + _bottleneck(ffn_out, tuner)


def adapter_parallel(x: Tensor, tuner: AdapterTuner) -> Tensor:
    """Bottleneck delta only; the caller adds it to the OP output."""
    return _bottleneck(tn.as_tensor(x), tuner)


# ------------------------------------------------------------------ scaling


def apply_scaling(delta: Tensor, strategy: ScalingStrategy, x: Optional[Tensor] = None) -> Tensor:
    kind = strategy.kind
    if kind == "direct":
        return delta
    if kind in ("scalar", "channel_wise"):
        if delta.shape[-1] != strategy.s.shape[-1] and strategy.s.shape[-1] != 1:
            raise DimensionError(f"scale width {strategy.s.shape} != delta width {delta.shape[-1]}")
        return delta * strategy.s
    if kind == "input_dependent":
        if x is None:
            raise ValueError("input-dependent scaling needs the site input")
        gate = tn.sigmoid(tn.matmul(tn.gelu(tn.matmul(x, strategy.gate_a)), strategy.gate_b))
        return delta * gate
    raise ValueError(f"unknown scaling strategy {kind!r}")
