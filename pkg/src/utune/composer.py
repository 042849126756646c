"""Attach parallel tuners to frozen operations: ``x' = OP(x) + s * tuner(x)``.

Sites are the attention sub-layer (``mha``), the feed-forward sub-layer
(``ffn``) and the whole block (``block``). At ``mha``/``ffn`` the tuner reads
the same post-LN input the operation reads; at ``block`` it reads the raw
block input.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as tn
from .backbone import (AttentionProjections, Backbone, attention, forward_classify, forward_features,
                       freeze_backbone)
from .tensor import Tensor, Variable
from .tuners import (SCALING_KINDS, AdapterTuner, PrefixTuner, PromptTuner, ScalingStrategy, adapter_parallel,
                     apply_scaling, prefix_delta, prompt_delta)


class ConfigError(ValueError):
    """Invalid tuning configuration; ``path`` points at the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class OpSite(str, Enum):
    MHA = "mha"
    FFN = "ffn"
    BLOCK = "block"


class TunerKind(str, Enum):
    P_ADAPTER = "p_adapter"
    P_PREFIX = "p_prefix"
    P_PROMPT = "p_prompt"

    @property
    def short(self) -> str:
        return self.value[2:]


@dataclass(frozen=True)
class TunerSpec:
    site: OpSite
    kind: TunerKind
    dim: int = 10
    scaling: str = "channel_wise"

    def __post_init__(self):
        object.__setattr__(self, "site", OpSite(self.site))
        object.__setattr__(self, "kind", TunerKind(self.kind))
        if self.dim < 1:
            raise ConfigError("dim", f"must be >= 1, got {self.dim}")
        if self.scaling not in SCALING_KINDS:
            raise ConfigError("scaling", f"expected one of {list(SCALING_KINDS)}, got {self.scaling!r}")

    def to_dict(self) -> dict:
        return {"site": self.site.value, "kind": self.kind.value, "dim": self.dim, "scaling": self.scaling}


_CONFIG_KEYS = {"name", "layer_range", "specs"}
_SPEC_KEYS = {"site", "kind", "dim", "scaling"}


@dataclass(frozen=True)
class UTuningConfig:
    """Which tuners sit at which sites, on which layers.

    ``layer_range=None`` means every layer of the backbone.
    """

    specs: Tuple[TunerSpec, ...] = ()
    layer_range: Optional[Tuple[int, ...]] = None
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))
        if self.layer_range is not None:
            object.__setattr__(self, "layer_range", tuple(sorted(set(self.layer_range))))
        seen = {}
        for i, spec in enumerate(self.specs):
            if spec.site in seen:
                raise ConfigError(f"specs[{i}].site",
                                  f"site {spec.site.value!r} already used by specs[{seen[spec.site]}]")
            seen[spec.site] = i

    def layers(self, n_layers: int) -> Tuple[int, ...]:
        return tuple(range(n_layers)) if self.layer_range is None else self.layer_range

    def to_dict(self) -> dict:
        return {"name": self.name,
                "layer_range": "all" if self.layer_range is None else list(self.layer_range),
                "specs": [s.to_dict() for s in self.specs]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, doc) -> "UTuningConfig":
        if not isinstance(doc, dict):
            raise ConfigError("", "config document must be a JSON object")
        unknown = set(doc) - _CONFIG_KEYS
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown key")
        name = doc.get("name", "")
        if not isinstance(name, str):
            raise ConfigError("name", "must be a string")
        layer_range = doc.get("layer_range", "all")
        if layer_range == "all":
            layer_range = None
        elif isinstance(layer_range, list):
            for i, v in enumerate(layer_range):
                if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                    raise ConfigError(f"layer_range[{i}]", f"must be a non-negative integer, got {v!r}")
            if not layer_range:
                raise ConfigError("layer_range", "must not be empty")
        else:
            raise ConfigError("layer_range", f'must be "all" or a list of integers, got {layer_range!r}')
        specs_doc = doc.get("specs", [])
        if not isinstance(specs_doc, list):
            raise ConfigError("specs", "must be a list")
        specs = []
        for i, sd in enumerate(specs_doc):
            path = f"specs[{i}]"
            if not isinstance(sd, dict):
                raise ConfigError(path, "must be an object")
            unknown = set(sd) - _SPEC_KEYS
            if unknown:
                raise ConfigError(f"{path}.{sorted(unknown)[0]}", "unknown key")
            for key in ("site", "kind"):
                if key not in sd:
                    raise ConfigError(f"{path}.{key}", "required")
            if sd["site"] not in [s.value for s in OpSite]:
                raise ConfigError(f"{path}.site", f"expected one of {[s.value for s in OpSite]}, got {sd['site']!r}")
            if sd["kind"] not in [k.value for k in TunerKind]:
                raise ConfigError(f"{path}.kind",
                                  f"expected one of {[k.value for k in TunerKind]}, got {sd['kind']!r}")
            dim = sd.get("dim", 10)
            if not isinstance(dim, int) or isinstance(dim, bool):
                raise ConfigError(f"{path}.dim", f"must be an integer, got {dim!r}")
            try:
                specs.append(TunerSpec(sd["site"], sd["kind"], dim, sd.get("scaling", "channel_wise")))
            except ConfigError as exc:
                raise ConfigError(f"{path}.{exc.path}", str(exc).split(": ", 1)[-1]) from None
        try:
            return cls(tuple(specs), None if layer_range is None else tuple(layer_range), name)
        except ConfigError as exc:
            raise ConfigError(exc.path, str(exc).split(": ", 1)[-1]) from None

    @classmethod
    def from_json(cls, text: str) -> "UTuningConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"invalid JSON: {exc}") from None
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "UTuningConfig":
        return cls.from_json(Path(path).read_text())

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_json() + "\n")


# ----------------------------------------------------------------- modules


@dataclass
class SiteAttention:
    """Single-head prefix/prompt attention for sites without native attention.

    Queries come from a trainable projection of the site input; keys/values
    are either free prefix rows or projected prompt tokens.
    """

    kind: TunerKind
    W_q: Variable
    K_pre: Optional[Variable] = None
    V_pre: Optional[Variable] = None
    x_pro: Optional[Variable] = None
    W_k: Optional[Variable] = None
    W_v: Optional[Variable] = None

    @classmethod
    def init(cls, kind: TunerKind, width: int, length: int, rng: np.random.Generator) -> "SiteAttention":
        bound = 1.0 / math.sqrt(width)

        def proj(name):
            return Variable(rng.uniform(-bound, bound, (width, width)), name)

        def rows(name):
            return Variable(rng.normal(0.0, 0.02, (length, width)), name)

        if kind is TunerKind.P_PREFIX:
            return cls(kind, proj("W_q"), K_pre=rows("K_pre"), V_pre=rows("V_pre"))
        return cls(kind, proj("W_q"), x_pro=rows("x_pro"), W_k=proj("W_k"), W_v=proj("W_v"))

    def __call__(self, h: Tensor) -> Tensor:
        q = tn.matmul(h, self.W_q)
        if self.kind is TunerKind.P_PREFIX:
            return attention(q, self.K_pre, self.V_pre)
        return attention(q, tn.matmul(self.x_pro, self.W_k), tn.matmul(self.x_pro, self.W_v))

    def variables(self) -> Dict[str, Variable]:
        names = ("W_q", "K_pre", "V_pre", "x_pro", "W_k", "W_v")
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}


TunerModule = Union[AdapterTuner, PrefixTuner, PromptTuner, SiteAttention]


@dataclass
class SiteTuner:
    layer: int
    spec: TunerSpec
    module: TunerModule
    scaling: ScalingStrategy
    proj: Optional[AttentionProjections] = None  # frozen projections, MHA-site prefix/prompt only
    zeroed: bool = False

    @property
    def prefix(self) -> str:
        return f"tuner.{self.layer}.{self.spec.site.value}.{self.spec.kind.short}"

    def raw_delta(self, h: Tensor) -> Tensor:
        m = self.module
        if isinstance(m, AdapterTuner):
            return adapter_parallel(h, m)
        if isinstance(m, PrefixTuner):
            return prefix_delta(h, self.proj, m)
        if isinstance(m, PromptTuner):
            return prompt_delta(h, self.proj, m)
        return m(h)

    def __call__(self, h: Tensor) -> Tensor:
        if self.zeroed:
            return Tensor(np.zeros(h.shape))
        return apply_scaling(self.raw_delta(h), self.scaling, h)

    def variables(self) -> Dict[str, Variable]:
        out = {f"{self.prefix}.{k}": v for k, v in self.module.variables().items()}
        out.update({f"{self.prefix}.{k}": v for k, v in self.scaling.variables().items()})
        return out


class ComposedModel:
    """Frozen backbone + parallel tuners + a trainable classifier head."""

    def __init__(self, backbone: Backbone, config: UTuningConfig, tuners: Dict[Tuple[int, str], SiteTuner],
                 head_W: Variable, head_b: Variable):
        self.backbone = backbone
        self.config = config
        self.tuners = tuners
        self.head_W = head_W
        self.head_b = head_b

    def hooks(self) -> Optional[List[Dict[str, SiteTuner]]]:
        if not self.tuners:
            return None
        out = [{} for _ in self.backbone.blocks]
        for (layer, site), t in self.tuners.items():
            out[layer][site] = t
        return out

    def forward(self, tokens, traces: Optional[list] = None) -> Tensor:
        return forward_classify(tokens, self.backbone, self.hooks(), (self.head_W, self.head_b), traces)

    __call__ = forward

    def features(self, tokens) -> Tensor:
        return forward_features(tokens, self.backbone, self.hooks())

    def set_zero_deltas(self, enabled: bool = True) -> None:
        for t in self.tuners.values():
            t.zeroed = enabled

    def tuner_variables(self) -> Dict[str, Variable]:
        out = {}
        for key in sorted(self.tuners):
            out.update(self.tuners[key].variables())
        return out

    def variables(self) -> Dict[str, Variable]:
        out = {k: v for k, v in self.backbone.variables().items() if not k.startswith("head.")}
        out.update({"head.W": self.head_W, "head.b": self.head_b})
        out.update(self.tuner_variables())
        return out

    def trainable_variables(self) -> Dict[str, Variable]:
        return {k: v for k, v in self.variables().items() if v.trainable}

    def frozen_variables(self) -> Dict[str, Variable]:
        return {k: v for k, v in self.variables().items() if not v.trainable}

    def tuner_state_dict(self) -> Dict[str, np.ndarray]:
        out = {"head.W": self.head_W.data, "head.b": self.head_b.data}
        out.update({k: v.data for k, v in self.tuner_variables().items()})
        return out

    def load_tuner_state(self, state: Dict[str, np.ndarray]) -> None:
        own = {"head.W": self.head_W, "head.b": self.head_b, **self.tuner_variables()}
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ConfigError("", f"tuner checkpoint does not match config {self.config.name or '<unnamed>'}: "
                                  f"missing={missing} unexpected={unexpected}")
        for k, v in own.items():
            if tuple(state[k].shape) != v.shape:
                raise ConfigError(k, f"checkpoint shape {tuple(state[k].shape)} != model shape {v.shape}")
            v.data = np.array(state[k], dtype=tn.get_dtype())
            v.zero_grad()


def _build_site(backbone: Backbone, layer: int, spec: TunerSpec, rng: np.random.Generator) -> SiteTuner:
    cfg = backbone.config
    d = cfg.width
    proj = None
    if spec.kind is TunerKind.P_ADAPTER:
        module: TunerModule = AdapterTuner.init(d, spec.dim, rng)
    elif spec.site is OpSite.MHA:
        proj = backbone.blocks[layer].attn
        if spec.kind is TunerKind.P_PREFIX:
            module = PrefixTuner.init(cfg.heads, spec.dim, cfg.head_dim, rng)
        else:
            module = PromptTuner.init(spec.dim, d, rng)
    else:
        module = SiteAttention.init(spec.kind, d, spec.dim, rng)
    return SiteTuner(layer, spec, module, ScalingStrategy.init(spec.scaling, d, rng), proj)


def validate_config(backbone: Backbone, config: UTuningConfig) -> None:
    cfg = backbone.config
    for i in config.layers(cfg.layers):
        if not 0 <= i < cfg.layers:
            raise ConfigError("layer_range", f"layer {i} outside backbone with {cfg.layers} layers")
    for i, spec in enumerate(config.specs):
        if spec.kind is TunerKind.P_ADAPTER and spec.dim >= cfg.width:
            raise ConfigError(f"specs[{i}].dim",
                              f"adapter bottleneck {spec.dim} must be < width {cfg.width} ({spec.to_dict()})")


def compose(backbone: Backbone, config: UTuningConfig, seed: int = 0) -> ComposedModel:
    """Freeze ``backbone`` and attach the tuners described by ``config``.

    The classifier head is copied, so several models composed from one
    backbone train independent heads.
    """
    validate_config(backbone, config)
    freeze_backbone(backbone)
    tuners = {}
    for layer in config.layers(backbone.config.layers):
        for j, spec in enumerate(config.specs):
            rng = np.random.default_rng([seed, layer, j, list(TunerKind).index(spec.kind)])
            tuners[(layer, spec.site.value)] = _build_site(backbone, layer, spec, rng)
    head_W = Variable(backbone.head_W.data, "head.W")
    head_b = Variable(backbone.head_b.data, "head.b")
    return ComposedModel(backbone, config, tuners, head_W, head_b)


def count_trainable_params(model) -> int:
    return int(sum(v.size for v in model.variables().values() if v.trainable))


def count_frozen_params(model) -> int:
    return int(sum(v.size for v in model.variables().values() if not v.trainable))


# -------------------------------------------------------------------- grids

KINDS = (TunerKind.P_ADAPTER, TunerKind.P_PREFIX, TunerKind.P_PROMPT)
SITES = (OpSite.MHA, OpSite.FFN, OpSite.BLOCK)


def default_config(dim: int = 10, scaling: str = "channel_wise",
                   layer_range: Optional[Sequence[int]] = None) -> UTuningConfig:
    return UTuningConfig((TunerSpec(OpSite.MHA, TunerKind.P_ADAPTER, dim, scaling),
                          TunerSpec(OpSite.FFN, TunerKind.P_ADAPTER, dim, scaling)),
                         None if layer_range is None else tuple(layer_range), "dual-mha_adapter-ffn_adapter")


def deep_prompt_config(n: int, layer_range: Optional[Sequence[int]] = None) -> UTuningConfig:
    """Prompts on every attention layer with no scaling: L * n * d parameters."""
    return UTuningConfig((TunerSpec(OpSite.MHA, TunerKind.P_PROMPT, n, "direct"),),
                         None if layer_range is None else tuple(layer_range), f"deep-prompt-{n}")


def enumerate_ablation_grid(dim: int = 10) -> List[UTuningConfig]:
    """25 configs: 9 single, 9 dual, 3 tri and 4 scaling variants."""
    grid = []
    for kind in KINDS:
        for site in SITES:
            grid.append(UTuningConfig((TunerSpec(site, kind, dim),), None, f"single-{site.value}-{kind.short}"))
    for mk in KINDS:
        for fk in KINDS:
            grid.append(UTuningConfig((TunerSpec(OpSite.MHA, mk, dim), TunerSpec(OpSite.FFN, fk, dim)), None,
                                      f"dual-mha_{mk.short}-ffn_{fk.short}"))
    for bk in KINDS:
        grid.append(UTuningConfig((TunerSpec(OpSite.MHA, TunerKind.P_ADAPTER, dim),
                                   TunerSpec(OpSite.FFN, TunerKind.P_ADAPTER, dim),
                                   TunerSpec(OpSite.BLOCK, bk, dim)), None, f"tri-block_{bk.short}"))
    for sk in SCALING_KINDS:
        grid.append(UTuningConfig(default_config(dim, sk).specs, None, f"scaling-{sk}"))
    return grid


def _preset(mha: TunerKind, ffn: TunerKind, name: str) -> UTuningConfig:
    return UTuningConfig((TunerSpec(OpSite.MHA, mha), TunerSpec(OpSite.FFN, ffn)), None, name)


# best MHA/FFN tuner kinds per fine-grained dataset; kinds only, dims are defaults
FGVC_PRESETS: Dict[str, UTuningConfig] = {
    "cub_200_2011": _preset(TunerKind.P_PROMPT, TunerKind.P_ADAPTER, "cub_200_2011"),
    "nabirds": _preset(TunerKind.P_ADAPTER, TunerKind.P_PREFIX, "nabirds"),
    "oxford_flowers": _preset(TunerKind.P_ADAPTER, TunerKind.P_PROMPT, "oxford_flowers"),
    "stanford_cars": _preset(TunerKind.P_ADAPTER, TunerKind.P_ADAPTER, "stanford_cars"),
    "stanford_dogs": _preset(TunerKind.P_PREFIX, TunerKind.P_ADAPTER, "stanford_dogs"),
}
