"""Block assembly, layer norms, FFNs, input layer, heads, symmetry modes,
ablation switches, and checkpoint round-trips."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import tiny_config
from geomstream import geometry as G
from geomstream import model as M
from geomstream import tensor as T
from geomstream.tensor import Tensor


def rand_inputs(rng, b=1, n=4, vocab=2):
    types = rng.integers(0, vocab, size=(b, n))
    p0 = rng.normal(size=(b, n, 3))
    v0 = 0.5 * rng.normal(size=(b, n, 3))
    return types, p0, v0


class TestModelConfig:
    def test_defaults_match_reference_hyperparameters(self):
        cfg = M.ModelConfig()
        assert (cfg.layers, cfg.width, cfg.heads, cfg.ffn_width,
                cfg.kernels) == (4, 80, 8, 80, 64)

    def test_width_head_divisibility(self):
        with pytest.raises(M.ConfigError):
            M.ModelConfig(width=10, heads=3)

    def test_odd_width_with_velocities_rejected(self):
        with pytest.raises(M.ConfigError):
            M.ModelConfig(width=9, heads=3, velocity_input=True)

    def test_rate_range(self):
        with pytest.raises(M.ConfigError):
            M.ModelConfig(dropout_hidden=1.0)

    def test_unknown_symmetry(self):
        with pytest.raises(M.ConfigError):
            M.ModelConfig(symmetry="su2")


class TestInvLN:
    def test_constant_row_maps_to_zero(self):
        p = M.LNParams(Tensor(np.ones(4)), Tensor(np.zeros(4)))
        out = M.inv_ln(Tensor(np.full((2, 4), 7.0)), p)
        np.testing.assert_allclose(out.data, np.zeros((2, 4)), atol=1e-12)

    def test_standardizes_rows(self, rng):
        d = 16
        p = M.LNParams(Tensor(np.ones(d)), Tensor(np.zeros(d)))
        out = M.inv_ln(Tensor(rng.normal(size=(5, d))), p).data
        np.testing.assert_allclose(out.mean(axis=-1), np.zeros(5), atol=1e-10)
        np.testing.assert_allclose(out.var(axis=-1), np.ones(5), atol=1e-10)

    def test_shift_invariance(self, rng):
        d = 8
        p = M.LNParams(Tensor(np.ones(d)), Tensor(np.zeros(d)))
        z = rng.normal(size=(3, d))
        a = M.inv_ln(Tensor(z), p).data
        b = M.inv_ln(Tensor(z + 3.7), p).data
        np.testing.assert_allclose(a, b, atol=1e-10)


class TestEquLN:
    def _params(self, d):
        return M.EquLNParams(Tensor(np.ones(d)))

    def test_whitening_near_fixed_point(self, rng):
        # already-whitened input: output differs only through the epsilon
        # regularizer, so the deviation is O(eps/2) rather than exactly zero
        d = 64
        z = rng.normal(size=(1, 3, d))
        z = z - z.mean(axis=-1, keepdims=True)
        cov = z[0] @ z[0].T / d
        w = np.linalg.cholesky(np.linalg.inv(cov)).T
        z_white = (w @ z[0]).reshape(1, 3, d)
        out = M.equ_ln(Tensor(z_white), self._params(d)).data
        assert np.abs(out - z_white).max() < 2e-6

    def test_output_covariance_is_identity(self, rng):
        d = 64
        z = rng.normal(size=(1, 3, d))
        out = M.equ_ln(Tensor(z), self._params(d)).data[0]
        out = out - out.mean(axis=-1, keepdims=True)
        cov = out @ out.T / d
        assert np.linalg.norm(cov - np.eye(3)) < 5e-3

    def test_rotation_equivariance(self, rng):
        d = 16
        z = rng.normal(size=(2, 3, d))
        base = M.equ_ln(Tensor(z), self._params(d)).data
        for seed in range(10):
            g = G.random_rotation(seed)
            out = M.equ_ln(Tensor(np.einsum("ab,nbd->nad", g.R, z)),
                           self._params(d)).data
            ref = np.einsum("ab,nbd->nad", g.R, base)
            assert np.abs(out - ref).max() / (np.abs(base).max() + 1e-12) < 1e-8

    def test_rank_deficient_input_is_finite(self):
        d = 8
        z = np.zeros((1, 3, d))
        z[0, 0] = 1.0  # rank-1 covariance
        out = M.equ_ln(Tensor(z), self._params(d)).data
        assert np.all(np.isfinite(out))


class TestFFNs:
    def test_inv_ffn_zero_weights(self, rng):
        p = M.FFNParams(Tensor(np.zeros((4, 6))), Tensor(np.zeros((6, 4))))
        out = M.inv_ffn(Tensor(rng.normal(size=(3, 4))), p)
        np.testing.assert_array_equal(out.data, np.zeros((3, 4)))

    def test_inv_ffn_matches_brute_force(self, rng):
        p = M.FFNParams(Tensor(rng.normal(size=(4, 6))),
                        Tensor(rng.normal(size=(6, 4))))
        z = rng.normal(size=(2, 4))
        out = M.inv_ffn(Tensor(z), p).data
        hidden = z @ p.w1.data
        ref = (hidden * 0.5 * (1.0 + np.vectorize(__import__("math").erf)(hidden / np.sqrt(2)))) @ p.w2.data
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_equ_ffn_zero_gate(self, rng):
        d, r = 4, 6
        p = M.EquFFNParams(Tensor(rng.normal(size=(d, r))),
                           Tensor(np.full((d, r), -1e3)),
                           Tensor(rng.normal(size=(r, d))))
        z_equ = Tensor(rng.normal(size=(2, 3, d)))
        z_inv = Tensor(np.ones((2, d)))
        out = M.equ_ffn(z_equ, z_inv, p).data
        assert np.abs(out).max() < 1e-10

    def test_equ_ffn_homogeneous_in_equivariant_input(self, rng):
        d, r = 4, 6
        p = M.EquFFNParams(Tensor(rng.normal(size=(d, r))),
                           Tensor(rng.normal(size=(d, r))),
                           Tensor(rng.normal(size=(r, d))))
        z_equ = Tensor(rng.normal(size=(2, 3, d)))
        z_inv = Tensor(rng.normal(size=(2, d)))
        once = M.equ_ffn(z_equ, z_inv, p).data
        twice = M.equ_ffn(Tensor(2.0 * z_equ.data), z_inv, p).data
        np.testing.assert_allclose(twice, 2.0 * once, atol=1e-12)

    def test_equ_ffn_rotation_equivariance(self, rng):
        d, r = 4, 6
        p = M.EquFFNParams(Tensor(rng.normal(size=(d, r))),
                           Tensor(rng.normal(size=(d, r))),
                           Tensor(rng.normal(size=(r, d))))
        z_equ = rng.normal(size=(2, 3, d))
        z_inv = Tensor(rng.normal(size=(2, d)))
        g = G.random_rotation(1)
        out = M.equ_ffn(Tensor(np.einsum("ab,nbd->nad", g.R, z_equ)),
                        z_inv, p).data
        ref = np.einsum("ab,nbd->nad", g.R,
                        M.equ_ffn(Tensor(z_equ), z_inv, p).data)
        np.testing.assert_allclose(out, ref, atol=1e-10)


class TestInputLayer:
    def test_same_type_same_invariant_rows(self, rng):
        m = M.Model(tiny_config())
        types = np.zeros((1, 4), dtype=int)
        p0 = rng.normal(size=(1, 4, 3))
        v0 = rng.normal(size=(1, 4, 3))
        out = M.input_layer(m, types, p0, v0)
        rows = out.z_inv.data[0]
        assert np.abs(rows - rows[0]).max() == 0.0

    def test_translation_leaves_z_equ_unchanged(self, rng):
        m = M.Model(tiny_config())
        types, p0, v0 = rand_inputs(rng)
        a = M.input_layer(m, types, p0, v0).z_equ.data
        b = M.input_layer(m, types, p0 + 5.0, v0).z_equ.data
        assert np.abs(a - b).max() < 1e-10

    def test_rotation_rotates_z_equ(self, rng):
        m = M.Model(tiny_config())
        types, p0, v0 = rand_inputs(rng)
        g = G.random_rotation(7)
        a = M.input_layer(m, types, p0, v0).z_equ.data
        b = M.input_layer(m, types, p0 @ g.R.T, v0 @ g.R.T).z_equ.data
        ref = np.einsum("ab,snbd->snad", g.R, a)
        assert np.abs(b - ref).max() < 1e-10

    def test_velocity_channel_split(self, rng):
        m = M.Model(tiny_config())
        d = m.cfg.width
        types, p0, v0 = rand_inputs(rng)
        base = M.input_layer(m, types, p0, v0).z_equ.data
        other = M.input_layer(m, types, p0, 2.0 * v0).z_equ.data
        # position channels (first half) untouched by velocity changes
        np.testing.assert_array_equal(base[..., :d // 2], other[..., :d // 2])
        assert np.abs(base[..., d // 2:] - other[..., d // 2:]).max() > 0.0

    def test_vocabulary_violation(self, rng):
        m = M.Model(tiny_config())
        types = np.full((1, 3), 9)
        with pytest.raises(M.InputError):
            M.input_layer(m, types, np.zeros((1, 3, 3)), np.zeros((1, 3, 3)))

    def test_missing_velocities_rejected(self, rng):
        m = M.Model(tiny_config())
        with pytest.raises(M.InputError):
            M.input_layer(m, np.zeros((1, 3), dtype=int), np.zeros((1, 3, 3)))


class TestBlockAndForward:
    def test_all_sublayers_disabled_is_identity(self, rng):
        cfg = tiny_config(use_inv_self=False, use_equ_self=False,
                          use_inv_cross=False, use_equ_cross=False,
                          use_inv_ffn=False, use_equ_ffn=False)
        m = M.Model(cfg).randomize(3)
        types, p0, v0 = rand_inputs(rng)
        inp = M.input_layer(m, types, p0, v0)
        out = M.forward(m, types, p0, v0)
        np.testing.assert_array_equal(out.z_inv.data, inp.z_inv.data)
        np.testing.assert_array_equal(out.z_equ.data, inp.z_equ.data)

    def test_fresh_model_block_is_identity(self, rng):
        # zero-initialized output projections make each block the identity
        m = M.Model(tiny_config())
        types, p0, v0 = rand_inputs(rng)
        inp = M.input_layer(m, types, p0, v0)
        out = M.forward(m, types, p0, v0)
        np.testing.assert_allclose(out.z_inv.data, inp.z_inv.data, atol=1e-12)
        np.testing.assert_allclose(out.z_equ.data, inp.z_equ.data, atol=1e-12)

    def test_zero_layers_returns_input_layer(self, rng):
        m = M.Model(tiny_config(layers=0)).randomize(2)
        types, p0, v0 = rand_inputs(rng)
        inp = M.input_layer(m, types, p0, v0)
        out = M.forward(m, types, p0, v0)
        np.testing.assert_array_equal(out.z_inv.data, inp.z_inv.data)
        np.testing.assert_array_equal(out.z_equ.data, inp.z_equ.data)

    def test_forward_deterministic_without_dropout(self, rng, tiny_model):
        types, p0, v0 = rand_inputs(rng)
        a = M.forward(tiny_model, types, p0, v0)
        b = M.forward(tiny_model, types, p0, v0)
        np.testing.assert_array_equal(a.z_inv.data, b.z_inv.data)
        np.testing.assert_array_equal(a.z_equ.data, b.z_equ.data)

    @given(st.integers(0, 10_000))
    @settings(max_examples=15, deadline=None)
    def test_se3_contract_end_to_end(self, seed):
        rng = np.random.default_rng(seed)
        m = M.Model(tiny_config()).randomize(seed + 1)
        types, p0, v0 = rand_inputs(rng, n=int(rng.integers(2, 6)))
        g = G.random_rotation(seed)
        a = M.forward(m, types, p0, v0)
        b = M.forward(m, types, p0 @ g.R.T + g.t, v0 @ g.R.T)
        ref_equ = np.einsum("ab,snbd->snad", g.R, a.z_equ.data)
        scale_i = np.abs(a.z_inv.data).max() + 1e-12
        scale_e = np.abs(a.z_equ.data).max() + 1e-12
        assert np.abs(b.z_inv.data - a.z_inv.data).max() / scale_i <= 1e-8
        assert np.abs(b.z_equ.data - ref_equ).max() / scale_e <= 1e-8

    def test_permutation_equivariance(self, rng, tiny_model):
        types, p0, v0 = rand_inputs(rng, n=4)
        perm = rng.permutation(4)
        a = M.forward(tiny_model, types, p0, v0)
        b = M.forward(tiny_model, types[:, perm], p0[:, perm], v0[:, perm])
        scale_i = np.abs(a.z_inv.data).max() + 1e-12
        scale_e = np.abs(a.z_equ.data).max() + 1e-12
        assert np.abs(b.z_inv.data - a.z_inv.data[:, perm]).max() / scale_i <= 1e-12
        assert np.abs(b.z_equ.data - a.z_equ.data[:, perm]).max() / scale_e <= 1e-12


class TestHeads:
    def test_invariant_head_zero_final_layer(self, rng, tiny_model):
        tiny_model.head.inv_w2.data[...] = 0.0
        z = Tensor(rng.normal(size=(2, 4, tiny_model.cfg.width)))
        out = M.invariant_head(z, tiny_model.head)
        np.testing.assert_array_equal(out.data, np.zeros(2))

    def test_invariant_head_permutation_invariant(self, rng, tiny_model):
        z = rng.normal(size=(1, 5, tiny_model.cfg.width))
        perm = rng.permutation(5)
        a = M.invariant_head(Tensor(z), tiny_model.head).data
        b = M.invariant_head(Tensor(z[:, perm]), tiny_model.head).data
        np.testing.assert_array_equal(a, b)

    def test_invariant_head_matches_brute_force(self, rng, tiny_model):
        z = rng.normal(size=(1, 3, tiny_model.cfg.width))
        out = M.invariant_head(Tensor(z), tiny_model.head).data
        pooled = z.mean(axis=1)
        h = pooled @ tiny_model.head.inv_w1.data
        h = h * 0.5 * (1.0 + np.vectorize(__import__("math").erf)(h / np.sqrt(2.0)))
        ref = (h @ tiny_model.head.inv_w2.data)[:, 0]
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_equivariant_head_zero_weight_returns_p0(self, rng, tiny_model):
        types, p0, v0 = rand_inputs(rng)
        tiny_model.head.equ_w.data[...] = 0.0
        pred = M.predict_positions(tiny_model, types, p0, v0)
        np.testing.assert_array_equal(pred.data, p0)

    def test_equivariant_head_hand_value(self):
        streams = M.StreamPair(
            Tensor(np.zeros((1, 1, 1))),
            Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 1, 3, 1)))
        head = M.HeadParams(Tensor(np.zeros((1, 1))), Tensor(np.zeros((1, 1))),
                            Tensor(np.array([[2.0]])))
        p0 = np.array([[[10.0, 10.0, 10.0]]])
        pred = M.equivariant_head(streams, p0, head)
        np.testing.assert_array_equal(pred.data, [[[12.0, 14.0, 16.0]]])

    def test_predictions_rigidly_move(self, rng, tiny_model):
        types, p0, v0 = rand_inputs(rng)
        g = G.random_rotation(5)
        a = M.predict_positions(tiny_model, types, p0, v0).data
        b = M.predict_positions(tiny_model, types, p0 @ g.R.T + g.t,
                                v0 @ g.R.T).data
        ref = a @ g.R.T + g.t
        assert np.abs(b - ref).max() / (np.abs(a).max() + 1e-12) <= 1e-8


class TestE3Mode:
    def test_reflection_equivariance(self, rng):
        m = M.Model(tiny_config(symmetry="e3")).randomize(4)
        types, p0, v0 = rand_inputs(rng)
        a = M.predict_positions(m, types, p0, v0).data
        b = M.predict_positions(m, types, -p0, -v0).data
        assert np.abs(b + a).max() / (np.abs(a).max() + 1e-12) <= 1e-8

    def test_se3_contracts_still_hold_in_e3_mode(self, rng):
        m = M.Model(tiny_config(symmetry="e3")).randomize(4)
        types, p0, v0 = rand_inputs(rng)
        g = G.random_rotation(6)
        a = M.predict_positions(m, types, p0, v0).data
        b = M.predict_positions(m, types, p0 @ g.R.T + g.t, v0 @ g.R.T).data
        assert np.abs(b - (a @ g.R.T + g.t)).max() / (np.abs(a).max() + 1e-12) <= 1e-8

    def test_centered_channels_have_zero_mean(self, rng):
        from geomstream import attention as A
        z = Tensor(rng.normal(size=(2, 3, 8)))
        out = A.center_channels(z).data
        assert np.abs(out.mean(axis=-1)).max() < 1e-12


class TestAblationFlags:
    @pytest.mark.parametrize("flag", ["use_inv_self", "use_equ_self",
                                      "use_inv_cross", "use_equ_cross",
                                      "use_inv_ffn", "use_equ_ffn"])
    def test_disabling_equals_zeroing_the_branch(self, flag, rng):
        """Turning a module off must equal forcing its output projection to
        zero, leaving every other computation untouched."""
        types, p0, v0 = rand_inputs(rng)
        cfg_off = tiny_config(**{flag: False})
        m_off = M.Model(cfg_off).randomize(8)
        m_zero = M.Model(tiny_config()).randomize(8)
        zero_targets = {
            "use_inv_self": ["inv_self.w_o"],
            "use_equ_self": ["equ_self.w_o"],
            "use_inv_cross": ["inv_cross.w_o"],
            "use_equ_cross": ["equ_cross.w_o"],
            "use_inv_ffn": ["inv_ffn.w2"],
            "use_equ_ffn": ["equ_ffn.w_down"],
        }[flag]
        for name, t in m_zero.params().items():
            if any(name.endswith(f".{z}") for z in zero_targets):
                t.data[...] = 0.0
        a = M.predict_positions(m_off, types, p0, v0).data
        b = M.predict_positions(m_zero, types, p0, v0).data
        np.testing.assert_array_equal(a, b)

    def test_bias_disable_flags(self, rng):
        types, p0, v0 = rand_inputs(rng)
        m_nobias = M.Model(tiny_config(use_structural_bias=False)).randomize(8)
        m_zero = M.Model(tiny_config()).randomize(8)
        m_zero.bias_basis.w2.data[...] = 0.0
        a = M.predict_positions(m_nobias, types, p0, v0).data
        b = M.predict_positions(m_zero, types, p0, v0).data
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestCheckpoint:
    def test_round_trip_byte_exact(self, tmp_path, rng, tiny_model):
        types, p0, v0 = rand_inputs(rng)
        path = str(tmp_path / "model.bin")
        M.save_checkpoint(tiny_model, path)
        loaded = M.load_checkpoint(path)
        a = M.predict_positions(tiny_model, types, p0, v0).data
        b = M.predict_positions(loaded, types, p0, v0).data
        np.testing.assert_array_equal(a, b)
        path2 = str(tmp_path / "model2.bin")
        M.save_checkpoint(loaded, path2)
        assert open(path, "rb").read() == open(path2, "rb").read()

    def test_manifest_is_readable_json_line(self, tmp_path, tiny_model):
        import json
        path = str(tmp_path / "model.bin")
        M.save_checkpoint(tiny_model, path)
        with open(path, "rb") as fh:
            manifest = json.loads(fh.readline().decode("utf-8"))
        assert {"version", "config", "params"} <= set(manifest)
        for entry in manifest["params"]:
            assert {"name", "shape", "offset"} <= set(entry)

    def test_corrupt_manifest_names_problem(self, tmp_path, tiny_model):
        path = str(tmp_path / "model.bin")
        M.save_checkpoint(tiny_model, path)
        blob = open(path, "rb").read()
        header, rest = blob.split(b"\n", 1)
        bad = header.replace(b'"embedding"', b'"not_a_param"', 1)
        bad_path = str(tmp_path / "bad.bin")
        open(bad_path, "wb").write(bad + b"\n" + rest)
        with pytest.raises(M.CheckpointError, match="not_a_param"):
            M.load_checkpoint(bad_path)

    def test_truncated_blob_rejected(self, tmp_path, tiny_model):
        path = str(tmp_path / "model.bin")
        M.save_checkpoint(tiny_model, path)
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[:-100])
        with pytest.raises(M.CheckpointError):
            M.load_checkpoint(path)


class TestDropout:
    def test_seeded_dropout_repeatable(self, rng):
        cfg = tiny_config(dropout_hidden=0.3, dropout_attention=0.2,
                          dropout_embedding=0.1, droppath=0.1)
        m = M.Model(cfg).randomize(5)
        types, p0, v0 = rand_inputs(rng)
        a = M.predict_positions(m, types, p0, v0,
                                dropout_rng=np.random.default_rng(3)).data
        b = M.predict_positions(m, types, p0, v0,
                                dropout_rng=np.random.default_rng(3)).data
        np.testing.assert_array_equal(a, b)

    def test_dropout_preserves_equivariance(self, rng):
        cfg = tiny_config(dropout_hidden=0.3, dropout_attention=0.2,
                          dropout_embedding=0.1, droppath=0.1)
        m = M.Model(cfg).randomize(5)
        types, p0, v0 = rand_inputs(rng)
        g = G.random_rotation(2)
        a = M.predict_positions(m, types, p0, v0,
                                dropout_rng=np.random.default_rng(3)).data
        b = M.predict_positions(m, types, p0 @ g.R.T + g.t, v0 @ g.R.T,
                                dropout_rng=np.random.default_rng(3)).data
        assert np.abs(b - (a @ g.R.T + g.t)).max() / (np.abs(a).max() + 1e-12) <= 1e-8

    def test_zero_rates_match_no_dropout(self, rng, tiny_model):
        types, p0, v0 = rand_inputs(rng)
        a = M.predict_positions(tiny_model, types, p0, v0).data
        b = M.predict_positions(tiny_model, types, p0, v0,
                                dropout_rng=np.random.default_rng(1)).data
        np.testing.assert_array_equal(a, b)
