import json

import numpy as np
import pytest

from depthgan.generator import (
    ConfigError,
    GeneratorConfig,
    StageConfig,
    default_config,
    generate,
    init_generator,
    isolate_residual,
    permute_labels,
    shortcut_path,
    stage_patch_size,
    tiny_config,
)
from depthgan.layers import SemanticLayout
from depthgan.tensor import Rng, ShapeError, no_grad

from conftest import random_layout


def run(cfg, seed=0, layout_seed=0, gp=None):
    gp = gp or init_generator(cfg, Rng(seed))
    m = random_layout(cfg.output_resolution, cfg.output_resolution, cfg.num_labels, layout_seed)
    with no_grad():
        d, r = generate(m, gp, cfg)
    return d.data, r.data, gp, m


class TestSchedule:
    def test_patch_rule(self):
        assert stage_patch_size(128, 128) == 4
        assert stage_patch_size(256, 256) == 4
        assert stage_patch_size(64, 128) == 2
        assert stage_patch_size(128, 256) == 2
        assert [stage_patch_size(r, 256) for r in (8, 16, 32)] == [1, 1, 1]
        assert [stage_patch_size(r, 128) for r in (8, 16)] == [1, 1]

    @pytest.mark.parametrize("res", [128, 256])
    def test_default_config_final_patch(self, res):
        cfg = default_config(res)
        assert cfg.stages[-1].patch == 4
        assert cfg.stages[0].resolution == 8 and cfg.stages[0].patch == 1
        assert [s.resolution for s in cfg.stages] == [8 * 2**i for i in range(len(cfg.stages))]

    def test_default_config_small_resolutions_clamp(self):
        assert [s.patch for s in default_config(32).stages] == [1, 1, 1]
        assert [s.patch for s in default_config(64).stages] == [1, 1, 1, 2]

    def test_unsupported(self):
        with pytest.raises(ConfigError):
            default_config(48)

    def test_json_roundtrip(self):
        cfg = default_config(64)
        assert GeneratorConfig.from_json(cfg.to_json()) == cfg

    def test_unknown_keys_rejected(self):
        doc = tiny_config().to_dict()
        doc["dropout"] = 0.1
        with pytest.raises(ConfigError, match="dropout"):
            GeneratorConfig.from_dict(doc)
        doc = tiny_config().to_dict()
        doc["stages"][0]["heads"] = 2
        with pytest.raises(ConfigError, match="heads"):
            GeneratorConfig.from_dict(doc)

    def test_type_checks(self):
        doc = tiny_config().to_dict()
        doc["z_dim"] = 3.5
        with pytest.raises(ConfigError):
            GeneratorConfig.from_dict(doc)
        doc = tiny_config().to_dict()
        doc["fuse_enabled"] = 1
        with pytest.raises(ConfigError):
            GeneratorConfig.from_dict(doc)

    def test_validation(self):
        with pytest.raises(ConfigError, match="double"):
            GeneratorConfig(16, [StageConfig(4, 8, 8, 1, 2, 1), StageConfig(16, 8, 8, 1, 2, 1)]).validate()
        with pytest.raises(ConfigError, match="channels"):
            GeneratorConfig(16, [StageConfig(8, 8, 4, 1, 2, 1), StageConfig(16, 8, 8, 1, 2, 1)]).validate()
        with pytest.raises(ConfigError, match="two stages"):
            GeneratorConfig(16, [StageConfig(16, 8, 8, 1, 2, 1)]).validate()


class TestForward:
    def test_shapes_and_range(self):
        d, r, _, _ = run(tiny_config(16))
        assert d.shape == (1, 16, 16) and r.shape == (3, 16, 16)
        assert np.all(np.abs(d) <= 1) and np.all(np.abs(r) <= 1)
        assert np.all(np.isfinite(d)) and np.all(np.isfinite(r))

    def test_default_32_shapes(self):
        d, r, _, _ = run(default_config(32))
        assert d.shape == (1, 32, 32) and r.shape == (3, 32, 32)

    def test_deterministic(self):
        a = run(tiny_config(16), seed=3)
        b = run(tiny_config(16), seed=3)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
        c = run(tiny_config(16), seed=4)
        assert not np.array_equal(a[0], c[0])

    def test_layout_sensitivity(self):
        cfg = tiny_config(16)
        a = run(cfg, layout_seed=0)
        b = run(cfg, layout_seed=1, gp=a[2])
        assert not np.array_equal(a[0], b[0])

    def test_branches_independent_without_fusion(self):
        cfg = tiny_config(16)
        cfg.fuse_enabled = False
        d, r, gp, m = run(cfg)
        for sp in gp.branches["rgb"]:
            sp.spade.w_proj.data = sp.spade.w_proj.data * 2.0 + 0.1
        with no_grad():
            d2, r2 = generate(m, gp, cfg)
        assert np.array_equal(d, d2.data)
        assert not np.array_equal(r, r2.data)

    def test_fusion_couples_branches(self):
        cfg = tiny_config(16)
        d, r, gp, m = run(cfg)
        for sp in gp.branches["rgb"][:1]:
            sp.spade.w_proj.data = sp.spade.w_proj.data * 2.0 + 0.1
        with no_grad():
            d2, _ = generate(m, gp, cfg)
        assert not np.array_equal(d, d2.data)

    def test_wrong_layout(self):
        cfg = tiny_config(16)
        gp = init_generator(cfg, Rng(0))
        with pytest.raises(ShapeError):
            generate(random_layout(8, 8, 4), gp, cfg)
        with pytest.raises(ShapeError):
            generate(random_layout(16, 16, 3), gp, cfg)

    def test_param_count_regression(self):
        assert init_generator(default_config(64), Rng(0)).store.count() == 22451750
        assert init_generator(default_config(32), Rng(0)).store.count() == 8652838

    def test_noise_dim(self):
        cfg = tiny_config(16)
        cfg.noise_dim = 2
        gp = init_generator(cfg, Rng(0))
        m = random_layout(16, 16, 4)
        with no_grad():
            a = generate(m, gp, cfg, noise=np.zeros(2))[0].data
            b = generate(m, gp, cfg, noise=np.ones(2))[0].data
        assert not np.array_equal(a, b)
        with pytest.raises(ValueError):
            generate(m, gp, cfg)


class TestStructure:
    @pytest.mark.parametrize("cfg", [tiny_config(16), tiny_config(32), default_config(32)], ids=["tiny16", "tiny32", "default32"])
    def test_residual_isolation(self, cfg):
        gp = init_generator(cfg, Rng(1))
        m = random_layout(cfg.output_resolution, cfg.output_resolution, cfg.num_labels, 2)
        isolate_residual(gp)
        with no_grad():
            d, r = generate(m, gp, cfg)
            sd, sr = shortcut_path(m, gp, cfg)
        assert np.array_equal(d.data, sd.data) and np.array_equal(r.data, sr.data)

    def test_token_path_matters_before_isolation(self):
        cfg = tiny_config(16)
        gp = init_generator(cfg, Rng(1))
        m = random_layout(16, 16, 4)
        with no_grad():
            d, _ = generate(m, gp, cfg)
            sd, _ = shortcut_path(m, gp, cfg)
        assert not np.array_equal(d.data, sd.data)

    @pytest.mark.parametrize("perm_seed", [0, 1])
    def test_label_permutation_equivariance(self, perm_seed):
        cfg = tiny_config(32, num_labels=5)
        d, r, gp, m = run(cfg)
        perm = np.random.default_rng(perm_seed).permutation(5)
        permute_labels(gp, perm)
        with no_grad():
            d2, r2 = generate(SemanticLayout(perm[m.labels], 5), gp, cfg)
        assert np.array_equal(d, d2.data) and np.array_equal(r, r2.data)

    def test_permutation_without_weight_change_differs(self):
        cfg = tiny_config(16, num_labels=4)
        d, _, gp, m = run(cfg)
        perm = np.array([1, 2, 3, 0])
        with no_grad():
            d2, _ = generate(SemanticLayout(perm[m.labels], 4), gp, cfg)
        assert not np.array_equal(d, d2.data)

    def test_literal_wiring_differs(self):
        cfg = tiny_config(16)
        a = run(cfg)
        cfg.literal_eq1 = True
        b = run(cfg, gp=a[2])
        assert not np.array_equal(a[0], b[0])


def test_encoder_separates_layouts():
    from depthgan.generator import encode_layout

    cfg = tiny_config(16)
    gp = init_generator(cfg, Rng(0))
    a = np.zeros((16, 16), dtype=int)
    b = a.copy()
    b[4:8, 4:8] = 2
    with no_grad():
        fa = encode_layout(SemanticLayout(a, 4), gp, cfg).data
        fb = encode_layout(SemanticLayout(b, 4), gp, cfg).data
    assert fa.shape == (8, 8, 8) and not np.array_equal(fa, fb)
