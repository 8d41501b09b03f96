import json

import numpy as np
import pytest

from nsbench import tensor as T
from nsbench.attention import multi_head_attention, patchify
from nsbench.grid import GridSpec, LabelMeta, Realization
from nsbench.models import (DESK_SPECS, PAPER_SPECS, BudgetError, ModelSpec, Swin, TrainedModel, build,
                            build_cnn, build_network, build_swin, build_vit, count_parameters, search_spec)
from nsbench.nn import module_grad_check, save_archive
from nsbench.tensor import ShapeError, Tensor

TINY = {
    "cnn": ModelSpec("cnn", 8, channels=(2, 3, 3, 2)),
    "vit": ModelSpec("vit", 8, patch=4, depth=2, embed_dim=8, heads=2, head_hidden=4),
    "swin": ModelSpec("swin", 8, patch=2, depth=(1, 1), embed_dim=4, heads=(1, 2), head_hidden=4, window=2),
}
BUDGETS = {"cnn": 240_000, "vit": 226_000, "swin": 233_000}


def real(values, range_m=100.0):
    v = np.asarray(values, dtype=np.float32)
    return Realization(GridSpec(v.shape[1], v.shape[0], 5.0), v, LabelMeta(range_m, 0.0, 0, "stationary"))


def swin_global_reference(net: Swin, x: Tensor) -> Tensor:
    """Swin forward with every window attention replaced by full attention over the flattened map."""
    B = x.shape[0]
    side = net.sides[0]
    z = net.embed_norm(net.embed(patchify(x, net.patch)))
    z = T.reshape(z, (B, side, side, z.shape[-1]))
    for s, blocks in enumerate(net.stages):
        if s > 0:
            z = net.merges[s - 1](z)
        _, H, W, C = z.shape
        for blk in blocks:
            flat = T.reshape(blk.norm1(z), (B, H * W, C))
            att = multi_head_attention(flat, blk.attn.msa.attn, bias=blk.attn.bias())
            z = T.add(z, T.reshape(att, (B, H, W, C)))
            z = T.add(z, blk.mlp(blk.norm2(z)))
    _, H, W, C = z.shape
    return net.head(T.mean(T.reshape(net.norm(z), (B, H * W, C)), axis=1))


class TestBudgets:
    @pytest.mark.parametrize("family", ["cnn", "vit", "swin"])
    def test_default_counts(self, family):
        n = build(PAPER_SPECS[family]).num_parameters
        assert abs(n - BUDGETS[family]) / BUDGETS[family] <= 0.15

    def test_frozen_counts(self):
        assert {f: count_parameters(s) for f, s in PAPER_SPECS.items()} == \
            {"cnn": 234_451, "vit": 226_085, "swin": 233_483}

    @pytest.mark.parametrize("family", ["cnn", "vit", "swin"])
    def test_search_reproduces_defaults(self, family):
        assert search_spec(family, BUDGETS[family]) == PAPER_SPECS[family]

    def test_budget_violation_reports_count(self):
        spec = ModelSpec("cnn", 64, channels=(8, 16, 32, 32), param_budget=240_000)
        with pytest.raises(BudgetError, match=str(count_parameters(spec))):
            build(spec)

    def test_family_mismatch(self):
        with pytest.raises(ValueError):
            build_cnn(PAPER_SPECS["vit"])


class TestForward:
    @pytest.mark.parametrize("family", ["cnn", "vit", "swin"])
    def test_output_shape(self, family):
        net = build_network(DESK_SPECS[family])
        x = np.random.default_rng(0).standard_normal((3, 1, 64, 64)).astype(np.float32)
        with T.no_grad():
            assert net(Tensor(x)).shape == (3, 1)

    @pytest.mark.parametrize("family", ["cnn", "vit", "swin"])
    def test_zero_input_finite(self, family):
        net = build_network(DESK_SPECS[family])
        with T.no_grad():
            out = net(Tensor(np.zeros((1, 1, 64, 64), dtype=np.float32)))
        assert np.all(np.isfinite(out.data))

    @pytest.mark.parametrize("family", ["cnn", "vit", "swin"])
    def test_nan_free_on_large_inputs(self, family):
        net = build_network(TINY[family])
        rng = np.random.default_rng(1)
        with T.no_grad():
            for trial in range(100):
                x = np.clip(rng.standard_normal((2, 1, 8, 8)) * 5, -5, 5).astype(np.float32)
                assert np.all(np.isfinite(net(Tensor(x)).data))

    def test_full_scale_vit_sequence_length(self):
        net = build_network(PAPER_SPECS["vit"])
        assert net.n_tokens == 64
        z = net.embed(Tensor(np.zeros((1, 1, 224, 224), dtype=np.float32)))
        assert z.shape == (1, 64, 60)

    def test_full_scale_swin_stage_sides(self):
        net = build_network(PAPER_SPECS["swin"])
        assert net.sides == [56, 28, 14, 7]
        assert [len(b) for b in net.stages] == [2, 2, 2, 2]

    def test_swin_stages_halve(self):
        net = build_network(DESK_SPECS["swin"])
        with T.no_grad():
            z = net.features(Tensor(np.zeros((1, 1, 64, 64), dtype=np.float32)))
        assert net.sides == [16, 8, 4, 2] and z.shape == (1, 2, 2, 192)

    def test_vit_depth_zero(self):
        spec = ModelSpec("vit", 8, patch=4, depth=0, embed_dim=8, heads=2, head_hidden=4)
        net = build_network(spec, dtype=np.float64)
        x = Tensor(np.random.default_rng(0).standard_normal((2, 1, 8, 8)))
        ref = net.head(T.mean(net.norm(net.embed(x)), axis=1))
        assert net.layers == [] and np.array_equal(net(x).data, ref.data)

    def test_learned_positional_embedding(self):
        spec = ModelSpec("vit", 8, patch=4, depth=1, embed_dim=8, heads=2, head_hidden=4, pos_embedding="learned")
        net = build_network(spec)
        assert "pos" in dict(net.named_parameters())

    def test_swin_global_window_matches_full_attention(self):
        spec = ModelSpec("swin", 16, patch=2, depth=(1, 1, 1), embed_dim=4, heads=(1, 2, 2), head_hidden=4,
                         window=2)
        net = Swin(spec, np.random.default_rng(3), np.float64, global_window=True)
        assert all(b.shift == 0 and b.window == side for blocks, side in zip(net.stages, net.sides)
                   for b in blocks)
        x = Tensor(np.random.default_rng(4).standard_normal((2, 1, 16, 16)))
        np.testing.assert_allclose(net(x).data, swin_global_reference(net, x).data, atol=1e-4)


class TestGradients:
    @pytest.mark.parametrize("family", ["cnn", "vit", "swin"])
    def test_tiny_model_end_to_end(self, family):
        net = build_network(TINY[family], seed=2, dtype=np.float64)
        x = np.random.default_rng(5).standard_normal((2, 1, 8, 8))
        y = np.array([[0.3], [0.7]])
        err = module_grad_check(net, lambda xt: T.mse_loss(net(xt), y), inputs=[x], max_entries=6)
        assert err < 1e-4


class TestTrainedModel:
    def test_denormalization_endpoints(self):
        for scale in ("linear", "log"):
            m = TrainedModel(DESK_SPECS["cnn"], None, range_min=12.0, range_max=115.0, label_scale=scale)
            assert m.denormalize(0.0) == pytest.approx(12.0, rel=1e-14)
            assert m.denormalize(1.0) == pytest.approx(115.0, rel=1e-14)
            np.testing.assert_allclose(m.normalize_labels([12.0, 115.0]), [0.0, 1.0], atol=1e-14)
            # no clamping outside the training span
            assert m.denormalize(1.5) > 115.0

    def test_log_scale_midpoint_is_geometric(self):
        m = TrainedModel(DESK_SPECS["cnn"], None, range_min=10.0, range_max=1000.0, label_scale="log")
        assert m.denormalize(0.5) == pytest.approx(100.0, rel=1e-12)

    def test_predict_deterministic_and_grid_checked(self):
        m = build(DESK_SPECS["vit"], seed=1)
        m.range_min, m.range_max = 10.0, 100.0
        r = real(np.random.default_rng(0).standard_normal((64, 64)))
        assert m.predict_range(r) == m.predict_range(r)
        with pytest.raises(ShapeError):
            m.predict_range(real(np.zeros((32, 32))))

    @pytest.mark.parametrize("family", ["cnn", "vit", "swin"])
    def test_save_load_bit_identical(self, family, tmp_path):
        m = build(DESK_SPECS[family], seed=4)
        m.range_min, m.range_max, m.input_mean, m.input_std = 11.4, 114.3, 0.01, 0.98
        m.history = {"best_epoch": 3}
        r = real(np.random.default_rng(1).standard_normal((64, 64)))
        m.save(tmp_path / "ck")
        back = TrainedModel.load(tmp_path / "ck")
        assert back.predict_range(r) == m.predict_range(r)
        assert back.spec == m.spec and back.history == m.history and back.label_scale == m.label_scale
        meta = json.loads((tmp_path / "ck" / "model.json").read_text())
        assert meta["normalization"]["range_min"] == 11.4

    def test_import_weights_validates(self, tmp_path):
        m = build(DESK_SPECS["swin"], seed=0)
        other = build(DESK_SPECS["swin"], seed=9)
        save_archive(other.network.state_dict(), tmp_path / "good")
        names = m.import_weights(tmp_path / "good")
        assert names == sorted(other.network.state_dict())
        r = real(np.random.default_rng(2).standard_normal((64, 64)))
        assert m.forward(r.values[None])[0] == other.forward(r.values[None])[0]

        state = other.network.state_dict()
        key = names[0]
        save_archive({**state, key: np.zeros(state[key].size + 1, dtype=np.float32)}, tmp_path / "shape")
        with pytest.raises(ValueError, match=key):
            m.import_weights(tmp_path / "shape")
        save_archive({k: v for k, v in state.items() if k != key}, tmp_path / "missing")
        with pytest.raises(ValueError, match="missing"):
            m.import_weights(tmp_path / "missing")
        save_archive(build(DESK_SPECS["cnn"]).network.state_dict(), tmp_path / "cnn")
        with pytest.raises(ValueError):
            m.import_weights(tmp_path / "cnn")

    def test_builders_default_to_full_scale_specs(self):
        assert build_vit().spec == PAPER_SPECS["vit"]
        assert build_swin().spec.window == 7
