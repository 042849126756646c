"""Numerical certification: parallel-form equivalence, gate reconstruction, gradients, counts, statistics."""
from __future__ import annotations

import csv
import json
import math
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from . import __version__
from . import tensor as tn
from .backbone import (PRESETS, AttentionProjections, Backbone, BackboneConfig, FfnWeights, attention, feed_forward,
                       forward_classify, project_qkv, split_heads)
from .composer import (ComposedModel, OpSite, TunerKind, TunerSpec, UTuningConfig, compose, count_frozen_params,
                       count_trainable_params, deep_prompt_config, default_config, enumerate_ablation_grid)
from .tensor import Tensor, Variable
from .training import AdamW
from .tuners import (AdapterTuner, PrefixTuner, PromptTuner, adapter_parallel, adapter_sequential,
                     compute_lambda_gate, prefix_original, prefix_parallel, prompt_original, prompt_parallel)

EQUIVALENCE_TYPES = ("prefix", "prompt", "adapter")
DEFAULT_TOLERANCES = {"equivalence": 1e-9, "adapter": 1e-12, "gate": 1e-12, "grad": 1e-4, "identity": 1e-12,
                      "params_millions": 0.01}

# reference trainable-parameter figures (in millions) for a ViT-B/16 backbone with 100 classes
REFERENCE_MILLIONS = {"linear_probe": 0.07, "deep_prompt_n10": 0.17}


# ------------------------------------------------------------------ reports


@dataclass
class CaseResult:
    name: str
    metric: str
    value: float
    tolerance: float
    passed: bool
    details: dict = field(default_factory=dict)


@dataclass
class Report:
    command: str
    args: dict = field(default_factory=dict)
    cases: List[CaseResult] = field(default_factory=list)
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)
    error: Optional[str] = None

    def add(self, name: str, metric: str, value: float, tolerance: float, passed: Optional[bool] = None,
            **details) -> CaseResult:
        ok = bool(value < tolerance) if passed is None else bool(passed)
        case = CaseResult(name, metric, float(value), float(tolerance), ok, details)
        self.cases.append(case)
        return case

    @property
    def passed(self) -> bool:
        return self.error is None and all(c.passed for c in self.cases)

    def summary(self) -> dict:
        n_pass = sum(c.passed for c in self.cases)
        return {"total": len(self.cases), "passed": n_pass, "failed": len(self.cases) - n_pass,
                "all_passed": self.passed}

    def to_dict(self) -> dict:
        return {"command": self.command, "args": self.args, "version": __version__,
                "platform": platform.platform(), "wall_time_s": round(self.wall_time, 4),
                "summary": self.summary(), "error": self.error, "extra": self.extra,
                "cases": [asdict(c) for c in self.cases]}

    def write(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


# -------------------------------------------------------------- equivalence

REGIME = {"T": tuple(range(1, 9)), "d": (8, 16, 64), "h": (1, 2, 4), "length": (1, 4, 10)}


def break_gate(lam: Tensor) -> Tensor:
    """Negative control: halve every gate value."""
    return lam * 0.5


@dataclass
class EquivalenceCase:
    kind: str
    index: int
    arrays: Dict[str, np.ndarray]
    heads: int

    @property
    def name(self) -> str:
        return f"{self.kind}-{self.index:03d}"

    def projections(self) -> AttentionProjections:
        a = self.arrays
        return AttentionProjections(*(Variable(a[k], k) for k in ("W_q", "W_k", "W_v", "W_o")), heads=self.heads)


def sample_equivalence_case(kind: str, index: int, seed: int = 0) -> EquivalenceCase:
    """Random instance drawn from the certification regime; fully determined by its arguments."""
    rng = np.random.default_rng([seed, EQUIVALENCE_TYPES.index(kind), index])
    T = int(rng.choice(REGIME["T"]))
    d = int(rng.choice(REGIME["d"]))
    h = int(rng.choice(REGIME["h"]))
    n = int(rng.choice(REGIME["length"]))
    batch = int(rng.integers(1, 4))
    a = {"x": rng.normal(size=(batch, T, d))}
    for k in ("W_q", "W_k", "W_v", "W_o"):
        a[k] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d))
    if kind == "prefix":
        a["K_pre"] = rng.normal(size=(h, n, d // h))
        a["V_pre"] = rng.normal(size=(h, n, d // h))
    elif kind == "prompt":
        a["x_pro"] = rng.normal(size=(n, d))
    else:
        r = int(rng.choice([r for r in REGIME["length"] if r < d]))
        d_ff = 4 * d
        a.update(W_1=rng.normal(0.0, 1.0 / math.sqrt(d), (d, d_ff)), b_1=rng.normal(0.0, 0.1, d_ff),
                 W_2=rng.normal(0.0, 1.0 / math.sqrt(d_ff), (d_ff, d)), b_2=rng.normal(0.0, 0.1, d),
                 W_down=rng.uniform(-1, 1, (d, r)) / math.sqrt(d), W_up=rng.normal(0.0, 1.0 / math.sqrt(r), (r, d)))
    return EquivalenceCase(kind, index, a, h)


def _gate_reconstruction_error(q: Tensor, k_orig: Tensor, k_extra: Tensor, lam: Tensor) -> float:
    """max |full concat-softmax row - [lam * extra-softmax, (1 - lam) * orig-softmax]|."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    qd, ko, ke = q.data, k_orig.data, np.broadcast_to(k_extra.data, (*q.shape[:-2], *k_extra.shape[-2:]))
    full = _softmax(np.concatenate([qd @ np.swapaxes(ke, -1, -2), qd @ np.swapaxes(ko, -1, -2)], -1) * scale)
    extra = _softmax(qd @ np.swapaxes(ke, -1, -2) * scale)
    orig = _softmax(qd @ np.swapaxes(ko, -1, -2) * scale)
    lam = lam.data
    rebuilt = np.concatenate([lam * extra, (1.0 - lam) * orig], axis=-1)
    return float(np.abs(rebuilt - full).max())


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def run_equivalence_case(case: EquivalenceCase, broken: bool = False) -> dict:
    """Evaluate one case; returns max diffs, gate stats and gate reconstruction error."""
    hook = break_gate if broken else None
    a = case.arrays
    x = Tensor(a["x"])
    out: dict = {"shape": {"batch": a["x"].shape[0], "T": a["x"].shape[1], "d": a["x"].shape[2], "h": case.heads}}
    with tn.no_grad():
        if case.kind == "adapter":
            ffn = FfnWeights(*(Variable(a[k], k) for k in ("W_1", "b_1", "W_2", "b_2")))
            tuner = AdapterTuner(Variable(a["W_down"], "W_down"), Variable(a["W_up"], "W_up"))
            f = feed_forward(x, ffn)
            seq = adapter_sequential(f, tuner).data
            par = (f + adapter_parallel(f, tuner)).data
            out["max_abs_diff"] = float(np.abs(seq - par).max())
            out["r"] = a["W_down"].shape[1]
            return out
        proj = case.projections()
        q, k, _ = project_qkv(x, proj)
        if case.kind == "prefix":
            tuner = PrefixTuner(Variable(a["K_pre"], "K_pre"), Variable(a["V_pre"], "V_pre"))
            diff = np.abs(prefix_original(x, proj, tuner).data - prefix_parallel(x, proj, tuner, hook).data).max()
            lam = compute_lambda_gate(q, k, tuner.K_pre, keepdims=True)
            lam = hook(lam) if hook else lam
            out.update(max_abs_diff=float(diff), m=tuner.length)
            gates = [lam.data]
            recon = _gate_reconstruction_error(q, k, tuner.K_pre, lam)
        else:
            tuner = PromptTuner(Variable(a["x_pro"], "x_pro"))
            diffs = {}
            for discard in (True, False):
                ref = prompt_original(x, proj, tuner, discard_prompts=discard).data
                par, gv = prompt_parallel(x, proj, tuner, discard_prompts=discard, gate_hook=hook,
                                          return_gates=True)
                diffs["discard" if discard else "keep"] = float(np.abs(ref - par.data).max())
            xp = Tensor(np.broadcast_to(a["x_pro"], (a["x"].shape[0], *a["x_pro"].shape)))
            qp, kp, _ = project_qkv(xp, proj)
            lam = compute_lambda_gate(q, k, kp, keepdims=True)
            beta = compute_lambda_gate(qp, kp, k, keepdims=True)
            if hook:
                lam, beta = hook(lam), hook(beta)
            out.update(max_abs_diff=max(diffs.values()), by_mode=diffs, n=tuner.length)
            gates = [lam.data, beta.data]
            recon = max(_gate_reconstruction_error(q, k, kp, lam), _gate_reconstruction_error(qp, kp, k, beta))
    allg = np.concatenate([g.ravel() for g in gates])
    out.update(gate_min=float(allg.min()), gate_max=float(allg.max()), gate_in_open_unit=bool(
        (allg > 0).all() and (allg < 1).all()), gate_reconstruction_error=recon)
    return out


def save_replay(case: EquivalenceCase, path: Union[str, Path], broken: bool) -> None:
    np.savez(path, kind=case.kind, index=case.index, heads=case.heads, broken=broken, **case.arrays)


def replay_equivalence_case(path: Union[str, Path]) -> dict:
    """Re-run a dumped failing case from its saved inputs."""
    with np.load(path) as z:
        meta = {"kind", "index", "heads", "broken"}
        arrays = {k: z[k] for k in z.files if k not in meta}
        case = EquivalenceCase(str(z["kind"]), int(z["index"]), arrays, int(z["heads"]))
        broken = bool(z["broken"])
    return run_equivalence_case(case, broken)


def verify_equivalence(types: Sequence[str] = EQUIVALENCE_TYPES, cases: int = 100, seed: int = 0,
                       broken: bool = False, tolerances: Optional[dict] = None,
                       replay_dir: Optional[Union[str, Path]] = None, max_dumps: int = 25) -> Report:
    """Parallel vs original forms plus gate reconstruction over the randomized regime (64-bit)."""
    tol = {**DEFAULT_TOLERANCES, **(tolerances or {})}
    unknown = [t for t in types if t not in EQUIVALENCE_TYPES]
    if unknown:
        raise ValueError(f"unknown equivalence types {unknown}; expected {EQUIVALENCE_TYPES}")
    report = Report("verify-equivalence", {"types": list(types), "cases": cases, "seed": seed,
                                           "break_gate": broken})
    start = time.perf_counter()
    dumps = 0
    worst = {t: 0.0 for t in types}
    worst_gate = 0.0
    with tn.precision("f64"):
        for kind in types:
            for i in range(cases):
                case = sample_equivalence_case(kind, i, seed)
                res = run_equivalence_case(case, broken)
                limit = tol["adapter"] if kind == "adapter" else tol["equivalence"]
                ok = res["max_abs_diff"] < limit
                worst[kind] = max(worst[kind], res["max_abs_diff"])
                if kind != "adapter":
                    worst_gate = max(worst_gate, res["gate_reconstruction_error"])
                    gate_ok = res["gate_in_open_unit"] and res["gate_reconstruction_error"] < tol["gate"]
                    report.add(f"gate/{case.name}", "gate_reconstruction_error", res["gate_reconstruction_error"],
                               tol["gate"], passed=gate_ok, gate_min=res["gate_min"], gate_max=res["gate_max"],
                               gate_in_open_unit=res["gate_in_open_unit"])
                details = {k: v for k, v in res.items() if not k.startswith("gate")}
                if not ok and replay_dir is not None and dumps < max_dumps:
                    Path(replay_dir).mkdir(parents=True, exist_ok=True)
                    p = Path(replay_dir) / f"{case.name}.npz"
                    save_replay(case, p, broken)
                    details["replay"] = str(p)
                    dumps += 1
                report.add(f"equivalence/{case.name}", "max_abs_diff", res["max_abs_diff"], limit, passed=ok,
                           **details)
    report.wall_time = time.perf_counter() - start
    report.extra = {"worst_max_abs_diff": worst, "worst_gate_reconstruction_error": worst_gate,
                    "replay_dumps": dumps}
    return report


# ---------------------------------------------------------------- gradients

GRAD_BACKBONE = BackboneConfig(layers=2, width=8, heads=2, d_ff=16, seq_len=4, num_classes=3, input_dim=6)


def _randomize_trainables(model: ComposedModel, rng: np.random.Generator) -> None:
    """Move tuner parameters off their identity init so every gradient path is exercised."""
    for name, v in model.trainable_variables().items():
        if name.endswith(".s"):
            v.data = (1.0 + 0.3 * rng.normal(size=v.shape)).astype(v.data.dtype)
        else:
            v.data = (0.5 * rng.normal(size=v.shape)).astype(v.data.dtype)
        v.zero_grad()


def _grad_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(np.linalg.norm(analytic - numeric) / scale)


def grad_check_config(config: UTuningConfig, seed: int = 0, backbone_config: BackboneConfig = GRAD_BACKBONE,
                      batch: int = 2, h: float = 1e-5, tol: float = 1e-4, adam_steps: int = 10,
                      report: Optional[Report] = None) -> Report:
    """Central-difference check of every trainable tensor, then a frozen-weight audit after AdamW steps."""
    report = report or Report("grad-check")
    label = config.name or "custom"
    with tn.precision("f64"):
        rng = np.random.default_rng([seed, 11])
        backbone = Backbone.build(backbone_config, seed=seed)
        model = compose(backbone, config, seed=seed)
        _randomize_trainables(model, rng)
        x = rng.normal(size=(batch, backbone_config.seq_len, backbone_config.input_dim))
        y = rng.integers(0, backbone_config.num_classes, size=batch)

        def loss_value() -> float:
            with tn.no_grad():
                return tn.cross_entropy(model(x), y).item()

        tn.zero_grads(model.variables().values())
        tn.backward(tn.cross_entropy(model(x), y))
        for name, var in model.trainable_variables().items():
            analytic = var.grad.copy()
            original = var.data

            def f(arr, var=var):
                var.data = arr
                return loss_value()

            numeric = tn.finite_difference_gradient(f, original, h)
            var.data = original
            err = _grad_rel_error(analytic, numeric)
            worst = int(np.abs(analytic - numeric).argmax())
            report.add(f"{label}/{name}", "rel_err", err, tol, shape=list(var.shape),
                       worst_coordinate=list(np.unravel_index(worst, var.shape)),
                       analytic=float(analytic.reshape(-1)[worst]), numeric=float(numeric.reshape(-1)[worst]))

        frozen = {k: v.data.copy() for k, v in model.frozen_variables().items()}
        opt = AdamW(model.variables(), lr=1e-2)
        for _ in range(adam_steps):
            opt.zero_grad()
            tn.zero_grads(model.frozen_variables().values())
            tn.backward(tn.cross_entropy(model(x), y))
            opt.step()
        changed = [k for k, v in model.frozen_variables().items() if not np.array_equal(v.data, frozen[k])]
        report.add(f"{label}/frozen-after-{adam_steps}-adamw-steps", "changed_tensors", len(changed), 0.5,
                   passed=not changed, changed=changed[:10], frozen_tensors=len(frozen))
    return report


def grad_check_suite(configs: Optional[Sequence[UTuningConfig]] = None, seed: int = 0,
                     tolerances: Optional[dict] = None) -> Report:
    tol = {**DEFAULT_TOLERANCES, **(tolerances or {})}
    if configs is None:
        singles = [c for c in enumerate_ablation_grid(dim=3) if c.name.startswith("single-")]
        configs = [UTuningConfig(name="head-only"), *singles, default_config(dim=3)]
    report = Report("grad-check", {"seed": seed, "configs": [c.name for c in configs]})
    start = time.perf_counter()
    for cfg in configs:
        grad_check_config(_shrink_dims(cfg), seed=seed, tol=tol["grad"], report=report)
    report.wall_time = time.perf_counter() - start
    return report


def _shrink_dims(cfg: UTuningConfig, width: int = GRAD_BACKBONE.width) -> UTuningConfig:
    """Clamp adapter bottlenecks so a user config still fits the small grad-check backbone."""
    specs = tuple(TunerSpec(s.site, s.kind, min(s.dim, width - 1) if s.kind is TunerKind.P_ADAPTER else s.dim,
                            s.scaling) for s in cfg.specs)
    layer_range = None if cfg.layer_range is None else tuple(i for i in cfg.layer_range if i < GRAD_BACKBONE.layers)
    return UTuningConfig(specs, layer_range or None, cfg.name)


# ------------------------------------------------------------ param counts


def param_groups(model: ComposedModel) -> Dict[str, Dict[str, int]]:
    """Trainable/frozen element counts grouped by name prefix."""
    groups: Dict[str, Dict[str, int]] = {}
    for name, v in model.variables().items():
        if name.startswith("tuner."):
            _, _, site, kind, _ = name.split(".", 4)
            group = f"tuner.{site}.{kind}"
        elif name.startswith("head."):
            group = "head"
        elif name.startswith("blocks."):
            group = "backbone.blocks"
        else:
            group = "backbone.other"
        g = groups.setdefault(group, {"trainable": 0, "frozen": 0})
        g["trainable" if v.trainable else "frozen"] += v.size
    return groups


def count_params_report(backbone_config: BackboneConfig, config: UTuningConfig, seed: int = 0,
                        reference: bool = False, tolerances: Optional[dict] = None) -> Report:
    tol = {**DEFAULT_TOLERANCES, **(tolerances or {})}
    report = Report("count-params", {"backbone": backbone_config.to_dict(), "tuning": config.to_dict()})
    start = time.perf_counter()
    backbone = Backbone.build(backbone_config, seed=seed, materialize=False)
    model = compose(backbone, config, seed=seed)
    trainable, frozen = count_trainable_params(model), count_frozen_params(model)
    report.extra = {"groups": param_groups(model), "trainable": trainable, "frozen": frozen,
                    "trainable_millions": trainable / 1e6, "frozen_millions": frozen / 1e6}
    if reference:
        report.extra["reference"] = reference_counts(report, seed, tol["params_millions"])
    report.wall_time = time.perf_counter() - start
    return report


def reference_counts(report: Report, seed: int = 0, tol_millions: float = 0.01) -> dict:
    """ViT-B/16 with 100 classes: head-only and deep prompts (n=10) against the expected rounded figures."""
    cfg = PRESETS["vitb16"]
    backbone = Backbone.build(cfg, seed=seed, materialize=False)
    rows = {}
    for key, tcfg, closed in (
            ("linear_probe", UTuningConfig(name="linear-probe"), cfg.width * cfg.num_classes + cfg.num_classes),
            ("deep_prompt_n10", deep_prompt_config(10),
             cfg.layers * 10 * cfg.width + cfg.width * cfg.num_classes + cfg.num_classes)):
        count = count_trainable_params(compose(backbone, tcfg, seed=seed))
        ref = REFERENCE_MILLIONS[key]
        gap = abs(count / 1e6 - ref)
        report.add(f"vitb16/{key}", "abs_gap_millions", gap, tol_millions + 1e-12,
                   passed=gap <= tol_millions and count == closed, count=count, closed_form=closed,
                   millions=round(count / 1e6, 6), reference_millions=ref)
        rows[key] = {"count": count, "millions": count / 1e6, "reference_millions": ref}
    return rows


def deep_prompt_sweep(layers: Sequence[int] = (1, 4, 12), lengths: Sequence[int] = (1, 10, 50),
                      widths: Sequence[int] = (8, 64, 768), report: Optional[Report] = None) -> Report:
    """Prompt parameter count equals layers * n * width for every combination."""
    report = report or Report("count-params")
    for L in layers:
        for n in lengths:
            for d in widths:
                heads = 2 if d % 2 == 0 else 1
                cfg = BackboneConfig(layers=L, width=d, heads=heads, d_ff=d, seq_len=1, num_classes=2, input_dim=1)
                model = compose(Backbone.build(cfg, materialize=False), deep_prompt_config(n))
                counted = sum(v.size for k, v in model.trainable_variables().items() if k.startswith("tuner."))
                report.add(f"deep-prompt/L{L}-n{n}-d{d}", "abs_diff", abs(counted - L * n * d), 0.5,
                           counted=counted, formula=L * n * d)
    return report


# ----------------------------------------------------------- statistics

STAT_SITES = ("mha_in", "mha_out", "ffn_in", "ffn_out", "block_out")
STAT_NAMES = ("mean", "var", "channel_mean_min", "channel_mean_max", "channel_var_min", "channel_var_max")


def layer_statistics(model_forward: Callable, tokens: np.ndarray) -> List[dict]:
    """Long-form rows ``{layer, site, stat, value}`` from one traced forward pass.

    Statistics pool batch and token axes; channel_* summarise the per-channel
    mean and variance vectors.
    """
    traces: list = []
    with tn.no_grad():
        model_forward(tokens, traces)
    rows = []
    for layer, trace in enumerate(traces):
        for site in STAT_SITES:
            a = np.asarray(trace[site], dtype=np.float64).reshape(-1, trace[site].shape[-1])
            cm, cv = a.mean(axis=0), a.var(axis=0)
            vals = (a.mean(), a.var(), cm.min(), cm.max(), cv.min(), cv.max())
            rows.extend({"layer": layer, "site": site, "stat": s, "value": float(v)} for s, v in zip(STAT_NAMES, vals))
    return rows


def write_stats_csv(rows: Iterable[dict], path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=("layer", "site", "stat", "value"))
        w.writeheader()
        for r in rows:
            w.writerow({**r, "value": repr(r["value"])})


def compare_stats(a: List[dict], b: List[dict]) -> float:
    if [(r["layer"], r["site"], r["stat"]) for r in a] != [(r["layer"], r["site"], r["stat"]) for r in b]:
        raise ValueError("statistic tables have different row layouts")
    return max((abs(x["value"] - y["value"]) for x, y in zip(a, b)), default=0.0)


# ------------------------------------------------------------ zero-init


def zero_init_identity(backbone: Backbone, configs: Sequence[UTuningConfig], batches: int = 10, batch: int = 4,
                       seed: int = 0, tol: float = 1e-12, report: Optional[Report] = None) -> Report:
    """Each config vs the bare frozen backbone on random batches.

    Configs whose every tuner is an adapter are compared as initialised;
    the rest are compared with their deltas forced to zero.
    """
    report = report or Report("zero-init-identity")
    cfg = backbone.config
    rng = np.random.default_rng([seed, 21])
    xs = [rng.normal(size=(batch, cfg.seq_len, cfg.input_dim)).astype(tn.get_dtype()) for _ in range(batches)]
    with tn.no_grad():
        base = [forward_classify(x, backbone).data for x in xs]
        for c in configs:
            model = compose(backbone, c, seed=seed)
            natural = all(s.kind is TunerKind.P_ADAPTER for s in c.specs)
            model.set_zero_deltas(not natural)
            diff = max(float(np.abs(model(x).data - b).max()) for x, b in zip(xs, base))
            report.add(f"zero-init/{c.name}", "max_abs_diff", diff, tol,
                       mode="as-initialised" if natural else "zero-delta-hook")
    return report
