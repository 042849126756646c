import json

import numpy as np
import pytest

from utune import tensor as tn
from utune.backbone import PRESETS, Backbone, BackboneConfig, forward_classify
from utune.composer import (FGVC_PRESETS, ConfigError, OpSite, TunerKind, TunerSpec, UTuningConfig, compose,
                            count_trainable_params, deep_prompt_config, default_config, enumerate_ablation_grid)

SMALL = BackboneConfig(layers=2, width=16, heads=2, d_ff=32, seq_len=5, num_classes=3, input_dim=7)


@pytest.fixture
def backbone():
    return Backbone.build(SMALL, seed=0)


@pytest.fixture
def x():
    return np.random.default_rng(0).normal(size=(3, 5, 7))


def test_empty_config_is_bit_exact(backbone, x):
    model = compose(backbone, UTuningConfig())
    np.testing.assert_array_equal(model(x).data, forward_classify(x, backbone).data)


def test_single_adapter_zero_init_identity(backbone, x):
    model = compose(backbone, UTuningConfig((TunerSpec("mha", "p_adapter", 4),)))
    np.testing.assert_array_equal(model(x).data, forward_classify(x, backbone).data)


def test_dual_adapter_trainable_names(backbone):
    model = compose(backbone, default_config(dim=4))
    names = set(model.trainable_variables())
    expected = {"head.W", "head.b"}
    for layer in range(SMALL.layers):
        for site in ("mha", "ffn"):
            expected |= {f"tuner.{layer}.{site}.adapter.{p}" for p in ("W_down", "W_up", "s")}
    assert names == expected


def test_single_adapter_count_from_shapes():
    bb = Backbone.build(BackboneConfig(layers=1), seed=0)
    model = compose(bb, UTuningConfig((TunerSpec("ffn", "p_adapter", 10),)))
    assert count_trainable_params(model) == 2 * 64 * 10 + 64 + 64 * 10 + 10


def test_vitb16_counts():
    bb = Backbone.build(PRESETS["vitb16"], materialize=False)
    assert count_trainable_params(compose(bb, UTuningConfig())) == 76_900
    assert count_trainable_params(compose(bb, deep_prompt_config(10))) == 169_060


@pytest.mark.parametrize("L,n,d", [(L, n, d) for L in (1, 2, 3) for n in (1, 5, 10) for d in (8, 16, 32)])
def test_deep_prompt_formula(L, n, d):
    bb = Backbone.build(BackboneConfig(layers=L, width=d, heads=2, d_ff=d, seq_len=2, num_classes=2, input_dim=2),
                        materialize=False)
    model = compose(bb, deep_prompt_config(n))
    assert sum(v.size for k, v in model.trainable_variables().items() if k.startswith("tuner.")) == L * n * d


def test_trainable_set_is_head_and_tuners_only(backbone):
    for cfg in enumerate_ablation_grid(dim=4):
        model = compose(backbone, cfg)
        assert all(k.startswith(("head.", "tuner.")) for k in model.trainable_variables())
        assert all(not k.startswith(("head.", "tuner.")) for k in model.frozen_variables())


def test_grid_structure():
    grid = enumerate_ablation_grid()
    names = [c.name for c in grid]
    assert len(grid) == 25 and len(set(names)) == 25
    assert names == [c.name for c in enumerate_ablation_grid()]
    assert sum(n.startswith("single-") for n in names) == 9
    assert sum(n.startswith("dual-") for n in names) == 9
    assert sum(n.startswith("tri-") for n in names) == 3
    assert sum(n.startswith("scaling-") for n in names) == 4
    for c in grid:
        if c.name.startswith("dual-"):
            assert {s.site for s in c.specs} == {OpSite.MHA, OpSite.FFN}
        if c.name.startswith("tri-"):
            assert {s.site for s in c.specs} == {OpSite.MHA, OpSite.FFN, OpSite.BLOCK}


def test_every_grid_config_composes_and_keeps_shape(backbone, x):
    base = forward_classify(x, backbone).data
    for cfg in enumerate_ablation_grid(dim=4):
        model = compose(backbone, cfg)
        traces = []
        assert model.forward(x, traces).shape == base.shape
        assert all(t["block_out"].shape == (3, 5, 16) for t in traces)
        model.set_zero_deltas(True)
        assert np.abs(model(x).data - base).max() < 1e-12


def test_compose_is_idempotent_in_shapes(backbone):
    cfg = enumerate_ablation_grid()[13]
    a, b = compose(backbone, cfg, seed=1), compose(backbone, cfg, seed=1)
    va, vb = a.variables(), b.variables()
    assert list(va) == list(vb)
    assert all(va[k].shape == vb[k].shape for k in va)
    assert all(np.array_equal(va[k].data, vb[k].data) for k in va)


def test_heads_are_independent_copies(backbone):
    a, b = compose(backbone, UTuningConfig()), compose(backbone, UTuningConfig())
    a.head_W.data += 1.0
    assert not np.array_equal(a.head_W.data, b.head_W.data)


def test_layer_range(backbone):
    cfg = UTuningConfig((TunerSpec("mha", "p_adapter", 4),), layer_range=(1,))
    assert {k[0] for k in compose(backbone, cfg).tuners} == {1}
    with pytest.raises(ConfigError, match="layer"):
        compose(backbone, UTuningConfig((TunerSpec("mha", "p_adapter", 4),), layer_range=(5,)))


def test_invalid_combinations(backbone):
    with pytest.raises(ConfigError, match="dim"):
        TunerSpec("mha", "p_adapter", 0)
    with pytest.raises(ConfigError, match=r"specs\[0\].dim"):
        compose(backbone, UTuningConfig((TunerSpec("ffn", "p_adapter", 16),)))
    with pytest.raises(ConfigError, match=r"specs\[1\].site"):
        UTuningConfig((TunerSpec("mha", "p_adapter"), TunerSpec("mha", "p_prompt")))


def test_json_round_trip(tmp_path):
    for cfg in enumerate_ablation_grid() + [UTuningConfig((TunerSpec("block", "p_prefix", 5, "scalar"),), (0, 2),
                                                          "partial")]:
        assert UTuningConfig.from_json(cfg.to_json()) == cfg
    path = tmp_path / "c.json"
    default_config().save(path)
    assert json.loads(path.read_text())["specs"][0] == {"site": "mha", "kind": "p_adapter", "dim": 10,
                                                        "scaling": "channel_wise"}
    assert UTuningConfig.load(path) == default_config()


@pytest.mark.parametrize("doc,path", [
    ({"specs": [{"site": "attn", "kind": "p_adapter"}]}, "specs[0].site"),
    ({"specs": [{"site": "mha", "kind": "lora"}]}, "specs[0].kind"),
    ({"specs": [{"site": "mha", "kind": "p_adapter", "dim": 0}]}, "specs[0].dim"),
    ({"specs": [{"site": "mha", "kind": "p_adapter", "dim": "ten"}]}, "specs[0].dim"),
    ({"specs": [{"site": "mha", "kind": "p_adapter", "scaling": "gated"}]}, "specs[0].scaling"),
    ({"specs": [{"site": "mha", "kind": "p_adapter", "extra": 1}]}, "specs[0].extra"),
    ({"specs": [{"kind": "p_adapter"}]}, "specs[0].site"),
    ({"layer_range": [0, -1], "specs": []}, "layer_range[1]"),
    ({"layer_range": "first", "specs": []}, "layer_range"),
    ({"specs": {}}, "specs"),
    ({"speks": []}, "speks"),
])
def test_json_errors_name_the_path(doc, path):
    with pytest.raises(ConfigError) as info:
        UTuningConfig.from_dict(doc)
    assert info.value.path == path


def test_invalid_json_text():
    with pytest.raises(ConfigError, match="invalid JSON"):
        UTuningConfig.from_json("{")


def test_fgvc_presets_are_dual_configs():
    assert FGVC_PRESETS["cub_200_2011"].specs[0].kind is TunerKind.P_PROMPT
    assert FGVC_PRESETS["cub_200_2011"].specs[1].kind is TunerKind.P_ADAPTER
    assert all(len(c.specs) == 2 for c in FGVC_PRESETS.values())


def test_tuner_state_round_trip(backbone, x):
    cfg = enumerate_ablation_grid(dim=4)[10]
    a = compose(backbone, cfg, seed=1)
    for v in a.trainable_variables().values():
        v.data = v.data + 0.1
    b = compose(backbone, cfg, seed=2)
    b.load_tuner_state(a.tuner_state_dict())
    np.testing.assert_array_equal(a(x).data, b(x).data)
    with pytest.raises(ConfigError, match="missing"):
        compose(backbone, default_config(dim=4)).load_tuner_state(a.tuner_state_dict())
