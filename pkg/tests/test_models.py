import numpy as np
import pytest

from sbp.engine import forward
from sbp.errors import ConfigurationError
from sbp.models import (
    TransformerBlockNode,
    build_model,
    mlp_spec,
    tiny_conv_spec,
    tiny_vit_spec,
    vit_tiny_preset,
)


class TestBuildModel:
    def test_deterministic_in_seed(self):
        spec = tiny_vit_spec(grid=(4, 4), in_channels=2, embed=8, heads=2, depth=2)
        a = build_model(spec, seed=42).params()
        b = build_model(spec, seed=42).params()
        assert set(a) == set(b)
        for key in a:
            assert np.array_equal(a[key], b[key])

    def test_different_seeds_differ(self):
        spec = mlp_spec(grid=(2, 2), in_channels=2, width=4, depth=1)
        a = build_model(spec, 0).params()
        b = build_model(spec, 1).params()
        assert any(not np.array_equal(a[k], b[k]) for k in a)

    def test_fd_scale_vit_under_2000_params(self):
        spec = tiny_vit_spec(grid=(4, 4), in_channels=2, embed=8, heads=2,
                             depth=3, mlp_ratio=2)
        assert build_model(spec, 0).n_params() <= 2000

    def test_preset_structure(self):
        spec = vit_tiny_preset()
        blocks = [e for e in spec.layers if e.kind == "block"]
        assert len(blocks) == 12
        assert blocks[0].options["embed"] == 192
        assert sum(e.sbp_enabled for e in blocks) == 8

    def test_unknown_layer_kind(self):
        from sbp.layers import LayerSpecEntry, NetworkSpec

        with pytest.raises(ConfigurationError):
            build_model(NetworkSpec((LayerSpecEntry("warp", "w"),), "xent"), 0)

    def test_embed_must_divide_heads(self):
        rng = np.random.Generator(np.random.PCG64(0))
        with pytest.raises(ConfigurationError):
            TransformerBlockNode("b", 4, 7, 2, 2, rng)


class TestSbpFlags:
    def test_last_layers_flagged(self):
        spec = tiny_vit_spec(depth=6, sbp_fraction=2 / 3)
        flags = [e.sbp_enabled for e in spec.layers if e.kind == "block"]
        assert flags == [False, False, True, True, True, True]

    def test_zero_fraction_disables_all(self):
        spec = mlp_spec(depth=3, sbp_fraction=0.0)
        assert not any(e.sbp_enabled for e in spec.layers if e.kind == "mlp_layer")

    def test_sbp_layers_lists_flagged_groups(self):
        spec = tiny_vit_spec(grid=(4, 4), depth=3, sbp_fraction=2 / 3)
        model = build_model(spec, 0)
        layers = model.sbp_layers()
        assert [lid for lid, _ in layers] == ["block1", "block2"]
        assert all(g == (4, 4) for _, g in layers)


class TestModelParams:
    def test_set_params_roundtrip(self):
        model = build_model(mlp_spec(grid=(2, 2), in_channels=2, width=4, depth=1), 0)
        params = {k: v + 1.0 for k, v in model.params().items()}
        model.set_params(params)
        after = model.params()
        for key in params:
            np.testing.assert_array_equal(after[key], params[key])

    def test_set_params_missing_key(self):
        model = build_model(mlp_spec(grid=(2, 2), in_channels=2, width=4, depth=1), 0)
        params = model.params()
        params.pop(sorted(params)[0])
        with pytest.raises(ConfigurationError):
            model.set_params(params)


class TestForwardShapes:
    @pytest.mark.parametrize("spec,n_classes", [
        (mlp_spec(grid=(2, 2), in_channels=2, width=4, depth=1, n_classes=3), 3),
        (tiny_vit_spec(grid=(2, 2), in_channels=2, embed=4, heads=2, depth=1,
                       n_classes=2), 2),
        (tiny_conv_spec(grid=(4, 4), in_channels=2, channels=3, depth=1,
                        n_classes=4), 4),
    ], ids=["mlp", "vit", "conv"])
    def test_logits_shape(self, spec, n_classes):
        model = build_model(spec, 0)
        rng = np.random.Generator(np.random.PCG64(0))
        grid = spec.layers[0].options["grid"]
        channels = spec.layers[0].options["in_channels"]
        x = rng.normal(size=(5, grid[0], grid[1], channels))
        labels = rng.integers(0, n_classes, size=5)
        tape = forward(model, x, labels)
        assert tape.logits.shape == (5, n_classes)
        assert np.isfinite(tape.loss)
