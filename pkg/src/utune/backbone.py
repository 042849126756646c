"""Miniature pre-norm ViT-style transformer used as the frozen backbone."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Mapping, Optional

import numpy as np

from . import tensor as tn
from .tensor import DimensionError, Tensor, Variable


@dataclass(frozen=True)
class BackboneConfig:
    layers: int = 4
    width: int = 64
    heads: int = 4
    d_ff: int = 256
    seq_len: int = 16
    num_classes: int = 10
    input_dim: int = 64
    class_token: bool = False
    activation: str = "gelu"

    def __post_init__(self):
        for name in ("layers", "width", "heads", "d_ff", "seq_len", "num_classes", "input_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"BackboneConfig.{name} must be positive")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} is not divisible by heads {self.heads}")
        if self.d_ff < self.width:
            raise ValueError(f"d_ff {self.d_ff} must be >= width {self.width}")
        if self.activation not in tn.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "BackboneConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown backbone config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS: Dict[str, BackboneConfig] = {
    "desk": BackboneConfig(),
    # parameter counting only; never trained
    "vitb16": BackboneConfig(layers=12, width=768, heads=12, d_ff=3072, seq_len=196,
                             num_classes=100, input_dim=768, class_token=True),
}


@dataclass
class AttentionProjections:
    W_q: Variable
    W_k: Variable
    W_v: Variable
    W_o: Variable
    heads: int

    @property
    def width(self) -> int:
        return self.W_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    def variables(self) -> Dict[str, Variable]:
        return {"W_q": self.W_q, "W_k": self.W_k, "W_v": self.W_v, "W_o": self.W_o}


@dataclass
class FfnWeights:
    W_1: Variable
    b_1: Variable
    W_2: Variable
    b_2: Variable
    activation: str = "gelu"

    def variables(self) -> Dict[str, Variable]:
        return {"W_1": self.W_1, "b_1": self.b_1, "W_2": self.W_2, "b_2": self.b_2}


@dataclass
class Block:
    ln1_gamma: Variable
    ln1_beta: Variable
    attn: AttentionProjections
    ln2_gamma: Variable
    ln2_beta: Variable
    ffn: FfnWeights

    def variables(self) -> Dict[str, Variable]:
        out = {"ln1.gamma": self.ln1_gamma, "ln1.beta": self.ln1_beta}
        out.update({f"attn.{k}": v for k, v in self.attn.variables().items()})
        out.update({"ln2.gamma": self.ln2_gamma, "ln2.beta": self.ln2_beta})
        out.update({f"ffn.{k}": v for k, v in self.ffn.variables().items()})
        return out


@dataclass
class Backbone:
    config: BackboneConfig
    embed_W: Variable
    embed_b: Variable
    pos: Variable
    blocks: List[Block]
    lnf_gamma: Variable
    lnf_beta: Variable
    head_W: Variable
    head_b: Variable
    cls: Optional[Variable] = None
    pretrain_accuracy: Optional[float] = field(default=None, compare=False)

    @classmethod
    def build(cls, config: BackboneConfig, seed: int = 0, materialize: bool = True) -> "Backbone":
        """Randomly initialised backbone.

        With ``materialize=False`` every non-head weight is a zero-stride
        placeholder, enough for parameter counting at ViT-B scale without
        allocating the weights.
        """
        rng = np.random.default_rng(seed)
        d, f = config.width, config.d_ff

        def w(shape, scale, name):
            if not materialize:
                return Variable(np.broadcast_to(np.zeros((), tn.get_dtype()), shape), name, copy=False)
            return Variable(rng.normal(0.0, scale, size=shape), name)

        def const(shape, value, name):
            if not materialize:
                return Variable(np.broadcast_to(np.zeros((), tn.get_dtype()), shape), name, copy=False)
            return Variable(np.full(shape, value), name)

        n_tok = config.seq_len + (1 if config.class_token else 0)
        blocks = []
        for i in range(config.layers):
            p = f"blocks.{i}."
            attn = AttentionProjections(
                W_q=w((d, d), 1 / math.sqrt(d), p + "attn.W_q"),
                W_k=w((d, d), 1 / math.sqrt(d), p + "attn.W_k"),
                W_v=w((d, d), 1 / math.sqrt(d), p + "attn.W_v"),
                W_o=w((d, d), 1 / math.sqrt(d), p + "attn.W_o"),
                heads=config.heads,
            )
            ffn = FfnWeights(
                W_1=w((d, f), 1 / math.sqrt(d), p + "ffn.W_1"),
                b_1=const((f,), 0.0, p + "ffn.b_1"),
                W_2=w((f, d), 1 / math.sqrt(f), p + "ffn.W_2"),
                b_2=const((d,), 0.0, p + "ffn.b_2"),
                activation=config.activation,
            )
            blocks.append(Block(const((d,), 1.0, p + "ln1.gamma"), const((d,), 0.0, p + "ln1.beta"),
                                attn,
                                const((d,), 1.0, p + "ln2.gamma"), const((d,), 0.0, p + "ln2.beta"),
                                ffn))
        head_rng = np.random.default_rng([seed, 1])
        return cls(
            config=config,
            embed_W=w((config.input_dim, d), 1 / math.sqrt(config.input_dim), "embed.W"),
            embed_b=const((d,), 0.0, "embed.b"),
            pos=w((n_tok, d), 0.02, "pos"),
            blocks=blocks,
            lnf_gamma=const((d,), 1.0, "ln_f.gamma"),
            lnf_beta=const((d,), 0.0, "ln_f.beta"),
            head_W=Variable(head_rng.normal(0.0, 0.02, size=(d, config.num_classes)), "head.W"),
            head_b=Variable(np.zeros(config.num_classes), "head.b"),
            cls=w((1, d), 0.02, "cls") if config.class_token else None,
        )

    def variables(self) -> Dict[str, Variable]:
        out = {"embed.W": self.embed_W, "embed.b": self.embed_b, "pos": self.pos}
        if self.cls is not None:
            out["cls"] = self.cls
        for i, blk in enumerate(self.blocks):
            out.update({f"blocks.{i}.{k}": v for k, v in blk.variables().items()})
        out.update({"ln_f.gamma": self.lnf_gamma, "ln_f.beta": self.lnf_beta,
                    "head.W": self.head_W, "head.b": self.head_b})
        return out

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data for k, v in self.variables().items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        own = self.variables()
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise ValueError(f"backbone state mismatch: missing={sorted(missing)} "
                             f"unexpected={sorted(unexpected)}")
        for k, v in own.items():
            if tuple(state[k].shape) != v.shape:
                raise DimensionError(f"{k}: checkpoint shape {tuple(state[k].shape)} != {v.shape}")
            v.data = np.array(state[k], dtype=tn.get_dtype())
            v.zero_grad()


# ----------------------------------------------------------------- attention


def split_heads(t: Tensor, heads: int) -> Tensor:
    """``[..., T, d] -> [..., h, T, d/h]``."""
    *lead, T, d = t.shape
    return t.reshape(*lead, T, heads, d // heads).swapaxes(-2, -3)


def merge_heads(t: Tensor) -> Tensor:
    """``[..., h, T, d_h] -> [..., T, h*d_h]``."""
    *lead, h, T, dh = t.shape
    return t.swapaxes(-2, -3).reshape(*lead, T, h * dh)


def attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """softmax(q k^T / sqrt(d_h)) v with d_h = q's last extent."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    w = tn.softmax(tn.matmul(q, k.swapaxes(-1, -2)) * scale, axis=-1)
    out = tn.matmul(w, v)
    return (out, w) if return_weights else out


def project_qkv(x: Tensor, proj: AttentionProjections):
    if x.shape[-1] != proj.width:
        raise DimensionError(f"input width {x.shape[-1]} != attention width {proj.width}")
    h = proj.heads
    return (split_heads(tn.matmul(x, proj.W_q), h),
            split_heads(tn.matmul(x, proj.W_k), h),
            split_heads(tn.matmul(x, proj.W_v), h))


def multi_head_attention(x: Tensor, proj: AttentionProjections, return_weights: bool = False):
    q, k, v = project_qkv(x, proj)
    heads, w = attention(q, k, v, return_weights=True)
    out = tn.matmul(merge_heads(heads), proj.W_o)
    return (out, w) if return_weights else out


def feed_forward(x: Tensor, w: FfnWeights) -> Tensor:
    if x.shape[-1] != w.W_1.shape[0]:
        raise DimensionError(f"input width {x.shape[-1]} != FFN width {w.W_1.shape[0]}")
    act = tn.ACTIVATIONS[w.activation]
    return tn.matmul(act(tn.matmul(x, w.W_1) + w.b_1), w.W_2) + w.b_2


# ------------------------------------------------------------------- blocks

SiteHook = Callable[[Tensor], Tensor]


def transformer_block(x: Tensor, block: Block, hooks: Optional[Mapping[str, SiteHook]] = None,
                      trace: Optional[dict] = None) -> Tensor:
    """Pre-norm residual block.

    ``hooks`` maps a site ("mha", "ffn", "block") to a callable returning an
    additive delta computed from that site's input; the delta joins the
    stream right after the site's own output.
    """
    hooks = hooks or {}
    h1 = tn.layer_norm(x, block.ln1_gamma, block.ln1_beta)
    a = multi_head_attention(h1, block.attn)
    if "mha" in hooks:
        a = a + hooks["mha"](h1)
    u = x + a
    h2 = tn.layer_norm(u, block.ln2_gamma, block.ln2_beta)
    f = feed_forward(h2, block.ffn)
    if "ffn" in hooks:
        f = f + hooks["ffn"](h2)
    y = u + f
    if "block" in hooks:
        y = y + hooks["block"](x)
    if trace is not None:
        trace.update(mha_in=h1.data, mha_out=a.data, ffn_in=h2.data, ffn_out=f.data, block_out=y.data)
    return y


def embed(tokens, backbone: Backbone) -> Tensor:
    tokens = tn.as_tensor(tokens)
    cfg = backbone.config
    if tokens.shape[-1] != cfg.input_dim:
        raise DimensionError(f"token width {tokens.shape[-1]} != input_dim {cfg.input_dim}")
    x = tn.matmul(tokens, backbone.embed_W) + backbone.embed_b
    if backbone.cls is not None:
        lead = x.shape[:-2]
        x = tn.concat([tn.broadcast_to(backbone.cls, (*lead, 1, cfg.width)), x], axis=-2)
    return x + backbone.pos


def pool(x: Tensor, backbone: Backbone) -> Tensor:
    x = tn.layer_norm(x, backbone.lnf_gamma, backbone.lnf_beta)
    if backbone.cls is not None:
        return x[..., 0, :]
    return x.mean(axis=-2)


def forward_features(tokens, backbone: Backbone, hooks: Optional[List[Mapping[str, SiteHook]]] = None,
                     traces: Optional[List[dict]] = None) -> Tensor:
    x = embed(tokens, backbone)
    for i, blk in enumerate(backbone.blocks):
        trace = None
        if traces is not None:
            trace = {}
            traces.append(trace)
        x = transformer_block(x, blk, hooks[i] if hooks else None, trace)
    return pool(x, backbone)


def forward_classify(tokens, backbone: Backbone, hooks=None, head=None, traces=None) -> Tensor:
    """Logits ``[..., C]``: embed, blocks, final LN, pool, linear head."""
    feats = forward_features(tokens, backbone, hooks, traces)
    W, b = head if head is not None else (backbone.head_W, backbone.head_b)
    if feats.ndim == 1:
        return tn.matmul(feats.reshape(1, -1), W).reshape(-1) + b
    return tn.matmul(feats, W) + b


def freeze_backbone(backbone: Backbone) -> None:
    for name, v in backbone.variables().items():
        v.trainable = name.startswith("head.")


def unfreeze_backbone(backbone: Backbone) -> None:
    for v in backbone.variables().values():
        v.trainable = True
