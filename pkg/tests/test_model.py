import numpy as np
import pytest

from dota import model as M
from dota import tensor as T
from dota.grids import GeometryGrid
from dota.model import DoseTransformer, ModelConfig


TINY = ModelConfig(L=6, H=8, W=8, N=1, K=2, N_h=2, dropout_rate=0.0)


@pytest.fixture(scope="module")
def tiny_net():
    return DoseTransformer(TINY, seed=3)


def random_block(rng, cfg):
    return rng.uniform(0.0, 2.0, size=(cfg.L, cfg.H, cfg.W)).astype(np.float32)


class TestConfig:
    def test_token_width(self):
        assert ModelConfig.desk_scale().D == 32
        assert ModelConfig.paper_scale().D == 480

    def test_paper_scale_selected_architecture(self):
        cfg = ModelConfig.paper_scale()
        assert (cfg.N, cfg.K, cfg.N_h) == (1, 10, 16)

    def test_indivisible_heads_rejected(self):
        with pytest.raises(T.ConfigurationError):
            ModelConfig(L=4, H=8, W=8, K=3, N_h=5)

    def test_non_multiple_of_four_rejected(self):
        with pytest.raises(T.ConfigurationError):
            ModelConfig(L=4, H=6, W=8)

    def test_dict_roundtrip(self):
        cfg = ModelConfig.desk_scale()
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestEncoder:
    def test_identical_slices_identical_tokens(self, tiny_net, rng):
        x = random_block(rng, TINY)
        x[3] = x[1]
        tokens = tiny_net.encode_slices(x).data[0]
        assert np.array_equal(tokens[3], tokens[1])

    def test_paper_slice_geometry_gives_token_width_480(self):
        cfg = ModelConfig(L=2, H=48, W=16, K=10, N_h=16)
        net = DoseTransformer(cfg, seed=0)
        rng = np.random.default_rng(0)
        tokens = net.encode_slices(random_block(rng, cfg))
        assert tokens.shape == (1, 2, 480)

    def test_changing_one_slice_changes_only_its_token(self, tiny_net, rng):
        x = random_block(rng, TINY)
        base = tiny_net.encode_slices(x).data[0]
        x2 = x.copy()
        x2[4] += 0.25
        bumped = tiny_net.encode_slices(x2).data[0]
        for i in range(TINY.L):
            if i == 4:
                assert not np.array_equal(bumped[i], base[i])
            else:
                assert np.array_equal(bumped[i], base[i])


class TestEnergyToken:
    def test_minimum_energy_maps_to_zero_vector(self, tiny_net):
        lo = TINY.energy_range[0]
        z = tiny_net.embed_energy([lo]).data
        assert np.all(z == 0.0)

    def test_distinct_energies_distinct_tokens(self, tiny_net):
        a = tiny_net.embed_energy([90.0]).data
        b = tiny_net.embed_energy([120.0]).data
        assert not np.array_equal(a, b)

    def test_paper_single_energy_accepted(self, tiny_net, recwarn):
        tiny_net.embed_energy([104.25])
        assert not any(isinstance(w.message, M.EnergyRangeWarning) for w in recwarn.list)

    def test_out_of_range_warns_but_computes(self, tiny_net):
        with pytest.warns(M.EnergyRangeWarning):
            z = tiny_net.embed_energy([150.0])
        assert np.isfinite(z.data).all()


class TestCausalMask:
    def test_first_row_attends_only_to_itself(self):
        mask = M.causal_mask(7)
        assert mask[0].tolist() == [True] + [False] * 6

    def test_last_row_attends_everywhere(self):
        mask = M.causal_mask(7)
        assert mask[-1].all()

    def test_triangular_count(self):
        length = TINY.L + 1
        assert M.causal_mask(length).sum() == length * (length + 1) // 2


class TestTransformer:
    def test_zero_block_weights_give_residual_identity(self, rng):
        net = DoseTransformer(TINY, seed=1)
        for name, p in net.params.items():
            if name.startswith("blk0.") and name.endswith(".w"):
                p.data[:] = 0.0
            if name == "pos":
                p.data[:] = 0.0
        z = T.Tensor(rng.standard_normal((1, TINY.L + 1, TINY.D)).astype(np.float32))
        out = net.transformer_forward(z)
        assert np.array_equal(out.data, z.data)

    def test_attention_rows_sum_to_one_over_unmasked(self, tiny_net, rng):
        z = T.Tensor(rng.standard_normal((2, TINY.L + 1, TINY.D)).astype(np.float32))
        sink = []
        tiny_net.transformer_forward(z, attention_sink=sink)
        att = sink[0]
        np.testing.assert_allclose(att.sum(axis=-1), 1.0, atol=1e-5)
        mask = M.causal_mask(TINY.L + 1)
        assert np.all(att[..., ~mask] == 0.0)


class TestDecoder:
    def test_output_shape_matches_grid(self, tiny_net, rng):
        z = T.Tensor(rng.standard_normal((1, TINY.L + 1, TINY.D)).astype(np.float32))
        out = tiny_net.decode_tokens(z)
        assert out.shape == (1, TINY.L, TINY.H, TINY.W)

    def test_identical_tokens_decode_identically(self, tiny_net, rng):
        row = rng.standard_normal(TINY.D).astype(np.float32)
        z = np.tile(row, (1, TINY.L + 1, 1)).astype(np.float32)
        out = tiny_net.decode_tokens(T.Tensor(z)).data[0]
        for i in range(1, TINY.L):
            assert np.array_equal(out[i], out[0])

    def test_zero_tokens_decode_to_final_bias(self):
        net = DoseTransformer(TINY, seed=5)
        # with the intermediate decoder biases pinned at zero, a zero token
        # propagates as exact zeros until the last convolution's bias
        for name in ("dec.convt1.b", "dec.convt2.b", "dec.conv4.b"):
            net.params[name].data[:] = 0.0
        net.params["dec.conv5.b"].data[:] = 0.37
        z = T.Tensor(np.zeros((1, TINY.L + 1, TINY.D), np.float32))
        out = net.decode_tokens(z).data
        assert np.all(out == np.float32(0.37))


class TestPredict:
    def test_shape_and_spacing_contract(self, tiny_net, rng):
        g = GeometryGrid(random_block(rng, TINY), (3.0, 1.0, 3.0))
        dose = tiny_net.predict(g, 100.0)
        assert dose.values.shape == g.shape
        assert dose.spacing == g.spacing
        assert dose.energy == 100.0
        assert (dose.values >= 0).all()

    def test_bitwise_determinism(self, tiny_net, rng):
        g = random_block(rng, TINY)
        a = tiny_net.predict_batch(g[None], [95.0])
        b = tiny_net.predict_batch(g[None], [95.0])
        assert np.array_equal(a, b)

    def test_causality_bitwise_under_slice_perturbation(self, rng):
        net = DoseTransformer(TINY, seed=7)
        for _ in range(5):
            x = random_block(rng, TINY)
            j = int(rng.integers(1, TINY.L))
            x2 = x.copy()
            x2[j] += rng.uniform(0.1, 1.0)
            with T.no_grad():
                base = net.forward(x, [103.3]).data[0]
                bumped = net.forward(x2, [103.3]).data[0]
            assert np.array_equal(bumped[:j], base[:j])
            assert not np.array_equal(bumped[j:], base[j:])

    def test_causality_by_gradient_probing(self, rng):
        net = DoseTransformer(TINY, seed=9)
        x = T.Tensor(random_block(rng, TINY)[None], requires_grad=True)
        i = 2  # probe an interior output slice
        out = net.forward(x, [110.0])
        T.backward(T.sum_(out[:, i]))
        grad = x.grad[0]
        assert np.all(grad[i + 1 :] == 0.0)
        assert np.abs(grad[: i + 1]).max() > 0.0

    def test_every_output_slice_depends_on_energy(self, rng):
        net = DoseTransformer(TINY, seed=11)
        x = random_block(rng, TINY)
        lo, hi = TINY.energy_range
        for i in [0, 1, TINY.L // 2, TINY.L - 1]:
            norm = np.array([[[0.5]]], np.float32)
            leaf = T.Tensor(norm, requires_grad=True)
            z_e = T.matmul(leaf, T.transpose(net.params["energy.w"], (1, 0)))
            z = T.concat([z_e, net.encode_slices(x)], axis=1)
            out = net.decode_tokens(net.transformer_forward(z))
            T.backward(T.sum_(out[:, i]))
            assert abs(float(leaf.grad.ravel()[0])) > 0.0

    def test_shape_mismatch_rejected(self, tiny_net):
        bad = GeometryGrid(np.ones((TINY.L + 1, TINY.H, TINY.W), np.float32))
        with pytest.raises(T.DimensionError):
            tiny_net.predict(bad, 100.0)

    def test_paper_scale_forward_shape(self):
        cfg = ModelConfig.paper_scale()
        net = DoseTransformer(cfg, seed=0)
        x = np.ones((cfg.L, cfg.H, cfg.W), np.float32)
        out = net.predict_batch(x[None], [104.25])
        assert out.shape == (1, 256, 48, 16)


class TestParamsAndCheckpoints:
    def test_param_count_matches_independent_enumeration(self):
        for cfg in (TINY, ModelConfig.desk_scale(), ModelConfig.paper_scale()):
            # walk the architecture independently of parameter_shapes
            c1, c2 = cfg.encoder_channels
            d, k, r = cfg.D, cfg.K, cfg.mlp_ratio
            count = 0
            count += c1 * 1 * 9 + c1 + 2 * c1          # conv1 + group norm
            count += c2 * c1 * 9 + c2 + 2 * c2         # conv2 + group norm
            count += k * c2 * 9 + k                    # token conv
            count += d                                 # energy projection
            count += (cfg.L + 1) * d                   # positional embedding
            for _ in range(cfg.N):
                count += 2 * d                         # ln before attention
                count += d * 3 * d                     # qkv
                count += d * d                         # head projection
                count += 2 * d                         # ln before mlp
                count += d * (r * d) + r * d           # fc1
                count += (r * d) * d + d               # fc2
            count += k * c2 * 9 + c2 + 2 * c2          # transposed conv 1 + gn
            count += c2 * c1 * 9 + c1 + 2 * c1         # transposed conv 2 + gn
            count += c1 * c1 * 9 + c1                  # penultimate conv
            count += 1 * c1 * 9 + 1                    # output conv
            assert M.param_count(cfg) == count
            net = DoseTransformer(cfg, seed=0)
            assert sum(p.size for p in net.params.values()) == count

    def test_checkpoint_roundtrip_bitwise(self, tmp_path, tiny_net):
        path = tmp_path / "model.ckpt"
        M.save_checkpoint(path, TINY, tiny_net.params)
        restored = DoseTransformer.from_checkpoint(path)
        assert restored.config == TINY
        for name, p in tiny_net.params.items():
            assert np.array_equal(restored.params[name].data, p.data)

    def test_checkpoint_magic_validated(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(Exception, match="magic"):
            M.load_checkpoint(path)

    def test_extra_tensor_roundtrip(self, tmp_path, tiny_net):
        path = tmp_path / "state.ckpt"
        extra = dict(tiny_net.params)
        extra["opt.step"] = np.array(17.0, np.float32)
        M.save_checkpoint(path, TINY, extra)
        _, arrays = M.load_checkpoint(path)
        assert arrays["opt.step"] == 17.0
