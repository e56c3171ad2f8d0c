"""The four attention kernels, the bridging operators, and their symmetry
contracts (rotation, translation via construction, permutation)."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geomstream import attention as A
from geomstream import geometry as G
from geomstream import tensor as T
from geomstream.tensor import DimensionError, Tensor


def params_for(rng, d, heads, cross, zero_output=False):
    return A.init_attention_params(rng, d, heads, cross, zero_output)


def rand_streams(rng, n, d):
    return (Tensor(rng.uniform(-1.0, 1.0, size=(n, d))),
            Tensor(rng.uniform(-1.0, 1.0, size=(n, 3, d))))


def rotate_equ(z, R):
    return Tensor(np.einsum("ab,nbd->nad", R, z.data))


class TestBridgingOps:
    def test_dot_product_hand_value(self):
        x = Tensor(np.array([[[1.0, 0.0], [0.0, 2.0], [0.0, 0.0]]]))
        y = Tensor(np.array([[[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]]))
        out = A.dot_product_pairwise(x, y)
        np.testing.assert_array_equal(out.data, [[1.0, 2.0]])

    def test_dot_product_self_nonnegative(self, rng):
        x = Tensor(rng.normal(size=(3, 3, 4)))
        assert np.all(A.dot_product_pairwise(x, x).data >= 0.0)

    def test_dot_product_rotation_invariant(self, rng):
        x = Tensor(rng.normal(size=(3, 3, 4)))
        y = Tensor(rng.normal(size=(3, 3, 4)))
        for seed in range(5):
            g = G.random_rotation(seed)
            lhs = A.dot_product_pairwise(rotate_equ(x, g.R), rotate_equ(y, g.R))
            np.testing.assert_allclose(lhs.data,
                                       A.dot_product_pairwise(x, y).data,
                                       atol=1e-10)

    def test_dot_product_shape_mismatch(self):
        with pytest.raises(DimensionError):
            A.dot_product_pairwise(Tensor(np.zeros((2, 3, 4))),
                                   Tensor(np.zeros((2, 3, 5))))

    def test_scalar_product_ones_identity(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4)))
        out = A.scalar_product(x, Tensor(np.ones((2, 4))))
        np.testing.assert_array_equal(out.data, x.data)

    def test_scalar_product_hand_value(self):
        x = Tensor(np.array([[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]]))
        y = Tensor(np.array([[2.0, 3.0]]))
        out = A.scalar_product(x, y)
        np.testing.assert_array_equal(
            out.data, [[[2.0, 0.0], [0.0, 3.0], [0.0, 0.0]]])

    def test_scalar_product_commutes_with_rotation(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4)))
        y = Tensor(rng.normal(size=(2, 4)))
        g = G.random_rotation(2)
        lhs = rotate_equ(A.scalar_product(x, y), g.R)
        rhs = A.scalar_product(rotate_equ(x, g.R), y)
        np.testing.assert_allclose(lhs.data, rhs.data, atol=1e-12)


class TestInvSelfAttn:
    def test_single_atom_softmax_is_one(self, rng):
        p = params_for(rng, 4, 2, cross=False)
        z = Tensor(rng.normal(size=(1, 4)))
        out = A.inv_self_attn(z, p)
        expected = (z.data @ p.w_v.data) @ p.w_o.data
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_large_negative_offdiagonal_bias_masks(self, rng):
        p = params_for(rng, 4, 2, cross=False)
        z = Tensor(rng.normal(size=(3, 4)))
        bias = np.full((3, 3), -1e9)
        np.fill_diagonal(bias, 0.0)
        out = A.inv_self_attn(z, p, bias=Tensor(bias))
        expected = (z.data @ p.w_v.data) @ p.w_o.data
        np.testing.assert_allclose(out.data, expected, atol=1e-10)

    def test_zero_values_zero_output(self, rng):
        p = params_for(rng, 4, 2, cross=False)
        p.w_v.data[...] = 0.0
        out = A.inv_self_attn(Tensor(rng.normal(size=(3, 4))), p)
        np.testing.assert_array_equal(out.data, np.zeros((3, 4)))

    def test_nonfinite_bias_rejected(self, rng):
        p = params_for(rng, 4, 2, cross=False)
        with pytest.raises(T.NumericError):
            A.inv_self_attn(Tensor(rng.normal(size=(2, 4))), p,
                            bias=Tensor(np.full((2, 2), np.inf)))


class TestEquSelfAttn:
    def test_single_atom(self, rng):
        p = params_for(rng, 4, 2, cross=False)
        z = Tensor(rng.normal(size=(1, 3, 4)))
        out = A.equ_self_attn(z, p)
        expected = (z.data @ p.w_v.data) @ p.w_o.data
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_rotation_equivariance(self, rng):
        p = params_for(rng, 8, 2, cross=False)
        _, z = rand_streams(rng, 4, 8)
        base = A.equ_self_attn(z, p).data
        for seed in range(20):
            g = G.random_rotation(seed)
            out = A.equ_self_attn(rotate_equ(z, g.R), p).data
            ref = np.einsum("ab,nbd->nad", g.R, base)
            assert np.abs(out - ref).max() / (np.abs(base).max() + 1e-12) < 1e-8

    def test_score_matrix_matches_brute_force(self, rng):
        d, h, n = 8, 1, 5
        p = params_for(rng, d, h, cross=False)
        z = rng.normal(size=(n, 3, d))
        q = z.reshape(n * 3, d) @ p.w_q.data
        k = z.reshape(n * 3, d) @ p.w_k.data
        q = q.reshape(n, 3, d)
        k = k.reshape(n, 3, d)
        brute = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                for c in range(d):
                    brute[i, j] += q[i, :, c] @ k[j, :, c]
        split = A._split_heads_equ(Tensor(z.reshape(1, n, 3, d) @ p.w_q.data), h)
        splik = A._split_heads_equ(Tensor(z.reshape(1, n, 3, d) @ p.w_k.data), h)
        fast = np.matmul(split.data, np.swapaxes(splik.data, -1, -2))[0, 0]
        assert np.abs(fast - brute).max() < 1e-10

    def test_alpha_invariant_under_rotation(self, rng):
        d, n = 6, 3
        p = params_for(rng, d, 1, cross=False)
        z = rng.normal(size=(1, n, 3, d))
        def scores(zz):
            q = A._split_heads_equ(Tensor(zz @ p.w_q.data), 1)
            k = A._split_heads_equ(Tensor(zz @ p.w_k.data), 1)
            return np.matmul(q.data, np.swapaxes(k.data, -1, -2))
        g = G.random_rotation(4)
        zrot = np.einsum("ab,nibd->niad", g.R, z)
        assert np.abs(scores(zrot) - scores(z)).max() < 1e-10


class TestInvCrossAttn:
    def test_rigid_motion_invariance(self, rng):
        p = params_for(rng, 8, 2, cross=True)
        z_inv, z_equ = rand_streams(rng, 4, 8)
        base = A.inv_cross_attn(z_inv, z_equ, p).data
        for seed in range(20):
            g = G.random_rotation(seed)
            out = A.inv_cross_attn(z_inv, rotate_equ(z_equ, g.R), p).data
            assert np.abs(out - base).max() / (np.abs(base).max() + 1e-12) < 1e-8

    def test_zero_equivariant_stream(self, rng):
        p = params_for(rng, 4, 2, cross=True)
        z_inv = Tensor(rng.normal(size=(3, 4)))
        out = A.inv_cross_attn(z_inv, Tensor(np.zeros((3, 3, 4))), p)
        np.testing.assert_array_equal(out.data, np.zeros((3, 4)))

    def test_single_atom(self, rng):
        p = params_for(rng, 4, 2, cross=True)
        z_inv = Tensor(rng.normal(size=(1, 4)))
        z_equ = Tensor(rng.normal(size=(1, 3, 4)))
        v = A.dot_product_pairwise(T.matmul(z_equ, p.w_v1),
                                   T.matmul(z_equ, p.w_v2))
        expected = v.data @ p.w_o.data
        np.testing.assert_allclose(A.inv_cross_attn(z_inv, z_equ, p).data,
                                   expected, atol=1e-12)

    def test_particle_count_mismatch(self, rng):
        p = params_for(rng, 4, 2, cross=True)
        with pytest.raises(DimensionError):
            A.inv_cross_attn(Tensor(np.zeros((2, 4))),
                             Tensor(np.zeros((3, 3, 4))), p)


class TestEquCrossAttn:
    def test_rotation_equivariance(self, rng):
        p = params_for(rng, 8, 2, cross=True)
        z_inv, z_equ = rand_streams(rng, 4, 8)
        base = A.equ_cross_attn(z_equ, z_inv, p).data
        for seed in range(20):
            g = G.random_rotation(seed)
            out = A.equ_cross_attn(rotate_equ(z_equ, g.R), z_inv, p).data
            ref = np.einsum("ab,nbd->nad", g.R, base)
            assert np.abs(out - ref).max() / (np.abs(base).max() + 1e-12) < 1e-8

    def test_identity_gates_reduce_to_self_attention(self, rng):
        d, h, n = 6, 2, 4
        self_p = params_for(rng, d, h, cross=False)
        cross_p = A.AttentionParams(
            heads=h, w_q=self_p.w_q, w_o=self_p.w_o,
            w_k1=self_p.w_k, w_k2=Tensor(np.eye(d)),
            w_v1=self_p.w_v, w_v2=Tensor(np.eye(d)))
        z_equ = Tensor(rng.normal(size=(n, 3, d)))
        ones = Tensor(np.ones((n, d)))
        out_cross = A.equ_cross_attn(z_equ, ones, cross_p).data
        out_self = A.equ_self_attn(z_equ, self_p).data
        np.testing.assert_allclose(out_cross, out_self, atol=1e-12)

    def test_zero_values_zero_output(self, rng):
        p = params_for(rng, 4, 2, cross=True)
        p.w_v1.data[...] = 0.0
        z_inv, z_equ = rand_streams(rng, 3, 4)
        out = A.equ_cross_attn(z_equ, z_inv, p)
        np.testing.assert_array_equal(out.data, np.zeros((3, 3, 4)))


class TestSharedContracts:
    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_permutation_equivariance_all_ops(self, seed):
        rng = np.random.default_rng(seed)
        n, d, h = int(rng.integers(2, 6)), 8, 2
        z_inv, z_equ = rand_streams(rng, n, d)
        bias = Tensor(rng.normal(size=(n, n)))
        perm = rng.permutation(n)
        pb = Tensor(bias.data[np.ix_(perm, perm)])
        pi = Tensor(z_inv.data[perm])
        pe = Tensor(z_equ.data[perm])
        ps = params_for(rng, d, h, cross=False)
        pc = params_for(rng, d, h, cross=True)
        cases = [
            (A.inv_self_attn(z_inv, ps, bias).data[perm],
             A.inv_self_attn(pi, ps, pb).data),
            (A.equ_self_attn(z_equ, ps, bias).data[perm],
             A.equ_self_attn(pe, ps, pb).data),
            (A.inv_cross_attn(z_inv, z_equ, pc, bias).data[perm],
             A.inv_cross_attn(pi, pe, pc, pb).data),
            (A.equ_cross_attn(z_equ, z_inv, pc, bias).data[perm],
             A.equ_cross_attn(pe, pi, pc, pb).data),
        ]
        for ref, out in cases:
            assert np.abs(out - ref).max() / (np.abs(ref).max() + 1e-12) <= 1e-12

    def test_attention_rows_sum_to_one(self, rng):
        n, d, h = 4, 8, 2
        z = Tensor(rng.normal(size=(1, n, d)))
        p = params_for(rng, d, h, cross=False)
        q = A._split_heads_inv(T.matmul(z, p.w_q), h)
        k = A._split_heads_inv(T.matmul(z, p.w_k), h)
        scores = T.matmul(q, k.transpose((0, 1, 3, 2))) * (1.0 / 2.0)
        probs = T.softmax(scores, axis=-1)
        np.testing.assert_allclose(probs.data.sum(axis=-1),
                                   np.ones((1, h, n)), atol=1e-12)

    def test_head_split_preserves_spatial_axis(self, rng):
        x = Tensor(rng.normal(size=(1, 3, 3, 8)))
        split = A._split_heads_equ(x, 2)
        assert split.shape == (1, 2, 3, 12)
        merged = A._merge_heads_equ(split)
        np.testing.assert_array_equal(merged.data, x.data)

    def test_unbatched_inputs_round_trip(self, rng):
        p = params_for(rng, 4, 2, cross=False)
        z = Tensor(rng.normal(size=(3, 4)))
        out = A.inv_self_attn(z, p)
        assert out.shape == (3, 4)
        ze = Tensor(rng.normal(size=(3, 3, 4)))
        assert A.equ_self_attn(ze, p).shape == (3, 3, 4)

    def test_gradients_flow_through_all_ops(self, rng):
        d, h, n = 4, 2, 3
        pc = params_for(rng, d, h, cross=True)
        z_inv, z_equ = rand_streams(rng, n, d)
        with T.Tape() as tape:
            tape.watch(pc.w_q)
            out = A.equ_cross_attn(z_equ, z_inv, pc)
            T.backward(T.mul(out, out).sum())
            g = tape.grad(pc.w_q)
        assert np.all(np.isfinite(g)) and np.abs(g).max() > 0.0
