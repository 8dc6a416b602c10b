import itertools

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from oracles import naive_conv3d, naive_transposed_conv3d, nn_up
from srgan3d.upsampling import (Upsample, UpsampleSpec, max_phase_discrepancy, n_blocks, nn_resize_t,
                                polyphase_components, resize_conv_block, subpixel_block,
                                subpixel_nn_block, subpixel_nn_init, subpixel_to_transposed,
                                voxel_shuffle, voxel_shuffle_t, voxel_unshuffle, voxel_unshuffle_t)


class TestVoxelShuffle:
    def test_shape(self):
        assert voxel_shuffle(np.zeros((2, 2, 2, 8)), 2).shape == (4, 4, 4, 1)

    def test_index_map(self):
        v = np.arange(8, dtype=float).reshape(1, 1, 1, 8)
        out = voxel_shuffle(v, 2)
        for dy, dx, dz in itertools.product(range(2), repeat=3):
            assert out[dy, dx, dz, 0] == 4 * dy + 2 * dx + dz

    def test_general_index_map(self):
        rng = np.random.default_rng(0)
        r, c = 2, 3
        v = rng.random((2, 3, 2, c * r**3))
        out = voxel_shuffle(v, r)
        for y, x, z, ch, dy, dx, dz in itertools.product(range(2), range(3), range(2), range(c),
                                                          range(r), range(r), range(r)):
            assert out[r * y + dy, r * x + dx, r * z + dz, ch] == v[y, x, z, ch * r**3 + (dy * r + dx) * r + dz]

    def test_unshuffle_of_enumerated_map(self):
        v = np.zeros((2, 2, 2, 1))
        for dy, dx, dz in itertools.product(range(2), repeat=3):
            v[dy, dx, dz, 0] = 4 * dy + 2 * dx + dz
        np.testing.assert_array_equal(voxel_unshuffle(v, 2).ravel(), np.arange(8))

    def test_r1_identity(self):
        v = np.random.default_rng(1).random((3, 4, 5, 2))
        np.testing.assert_array_equal(voxel_shuffle(v, 1), v)
        np.testing.assert_array_equal(voxel_unshuffle(v, 1), v)

    def test_round_trip(self):
        v = np.random.default_rng(2).random((2, 2, 2, 8))
        np.testing.assert_array_equal(voxel_unshuffle(voxel_shuffle(v, 2), 2), v)

    def test_torch_matches_numpy(self):
        v = np.random.default_rng(3).random((3, 2, 4, 16))
        t = torch.as_tensor(v.transpose(3, 0, 1, 2)[None])
        out = voxel_shuffle_t(t, 2)[0].numpy().transpose(1, 2, 3, 0)
        np.testing.assert_array_equal(out, voxel_shuffle(v, 2))
        np.testing.assert_array_equal(voxel_unshuffle_t(voxel_shuffle_t(t, 2), 2), t)

    def test_errors(self):
        with pytest.raises(ValueError):
            voxel_shuffle(np.zeros((2, 2, 2, 4)), 2)
        with pytest.raises(ValueError):
            voxel_unshuffle(np.zeros((3, 2, 2, 1)), 2)


class TestResizeConv:
    def test_replication(self):
        x = torch.full((1, 1, 1, 1, 1), 0.3)
        np.testing.assert_array_equal(nn_resize_t(x, 2).numpy(), np.full((1, 1, 2, 2, 2), np.float32(0.3)))

    def test_identity_kernel(self):
        x = torch.rand(1, 2, 3, 3, 3, dtype=torch.float64)
        w = torch.zeros(2, 2, 3, 3, 3, dtype=torch.float64)
        w[0, 0, 1, 1, 1] = w[1, 1, 1, 1, 1] = 1.0
        np.testing.assert_array_equal(resize_conv_block(x, w).numpy(), nn_resize_t(x).numpy())

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(4)
        x = rng.random((2, 3, 3, 3))
        w = rng.normal(size=(3, 2, 3, 3, 3))
        b = rng.normal(size=3)
        out = resize_conv_block(torch.as_tensor(x[None]), torch.as_tensor(w), torch.as_tensor(b))[0]
        np.testing.assert_allclose(out.numpy(), naive_conv3d(nn_up(x), w, b), atol=1e-6)
        assert out.shape == (3, 6, 6, 6)


class TestSubpixel:
    def test_shape(self):
        out = subpixel_block(torch.rand(1, 8, 4, 4, 4), torch.rand(8, 8, 3, 3, 3))
        assert out.shape == (1, 1, 8, 8, 8)

    def test_zero_kernels(self):
        out = subpixel_block(torch.rand(1, 8, 4, 4, 4), torch.zeros(8, 8, 3, 3, 3), torch.zeros(8))
        assert torch.count_nonzero(out) == 0

    def test_filter_divisibility(self):
        with pytest.raises(ValueError):
            subpixel_block(torch.rand(1, 2, 4, 4, 4), torch.rand(4, 2, 3, 3, 3))
        with pytest.raises(ValueError):
            UpsampleSpec("subpixel", filters=12)

    @pytest.mark.parametrize("seed", range(3))
    def test_equals_loop_transposed_conv(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.random((2, 3, 3, 3))
        w = rng.normal(size=(8, 2, 3, 3, 3))
        wt = subpixel_to_transposed(torch.as_tensor(w)).numpy()
        expected = naive_transposed_conv3d(x, wt, stride=2, padding=2)
        out = subpixel_block(torch.as_tensor(x[None]), torch.as_tensor(w))[0].numpy()
        np.testing.assert_allclose(out, expected, atol=1e-10)


class TestSubpixelNN:
    def test_scalar_kernel_replicated(self):
        spec = UpsampleSpec("subpixel_nn", kernel_size=1, filters=8)
        base = torch.full((8, 1, 1, 1, 1), 0.37)
        w = subpixel_nn_init(spec, base)
        assert w.shape == (8, 1, 2, 2, 2)
        assert torch.all(w == 0.37)

    def test_shape_and_zero(self):
        spec = UpsampleSpec("subpixel_nn", filters=8)
        w = subpixel_nn_init(spec, torch.rand(8, 1, 3, 3, 3))
        assert w.shape == (8, 1, 6, 6, 6)
        assert subpixel_nn_block(torch.rand(1, 8, 4, 4, 4), w).shape == (1, 1, 8, 8, 8)
        assert torch.count_nonzero(subpixel_nn_block(torch.rand(1, 8, 4, 4, 4), torch.zeros_like(w))) == 0

    def test_init_errors(self):
        with pytest.raises(ValueError):
            subpixel_nn_init(UpsampleSpec("subpixel", filters=8), torch.rand(8, 1, 3, 3, 3))
        with pytest.raises(ValueError):
            subpixel_nn_init(UpsampleSpec("subpixel_nn", filters=8), torch.rand(8, 1, 5, 5, 5))
        with pytest.raises(ValueError):
            subpixel_nn_init(UpsampleSpec("subpixel_nn", filters=8), torch.rand(8, 2, 3, 3, 3))

    def test_init_equals_conv_then_resize_loop_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.random((8, 3, 3, 3))
        base = rng.normal(size=(8, 1, 3, 3, 3))
        w = subpixel_nn_init(UpsampleSpec("subpixel_nn", filters=8), torch.as_tensor(base))
        out = subpixel_nn_block(torch.as_tensor(x[None]), w)[0].numpy()
        # stride-1 transposed conv == correlation with the channel-swapped, flipped kernel
        flipped = base.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1]
        np.testing.assert_allclose(out, nn_up(naive_conv3d(x, flipped)), atol=1e-10)
        for phase in polyphase_components(torch.as_tensor(out[None])):
            assert torch.equal(phase, polyphase_components(torch.as_tensor(out[None]))[0])

    def test_resize_then_conv_is_not_phase_equal(self):
        # resize-then-conv mixes neighbours differently per phase; only conv-then-resize
        # is reproducible by the replicated transposed kernel
        w = torch.zeros(1, 1, 3, 3, 3, dtype=torch.float64)
        w[0, 0, 0, 1, 1] = 1.0
        x = torch.rand(1, 1, 3, 3, 3, dtype=torch.float64)
        out = resize_conv_block(x, w)
        phases = polyphase_components(out)
        assert not torch.equal(phases[0], phases[4])


class TestUpsampleModule:
    @pytest.mark.parametrize("method", ["resize_conv", "subpixel", "subpixel_nn"])
    def test_doubles_and_chains(self, method):
        f = 8 if method == "resize_conv" else 64
        spec = UpsampleSpec(method, filters=f)
        gen = torch.Generator().manual_seed(0)
        a, b = Upsample(8, spec, gen), Upsample(8, spec, gen)
        x = torch.rand(1, 8, 3, 4, 5)
        y = b(a(x))
        assert y.shape == (1, 8, 12, 16, 20)

    def test_n_blocks(self):
        assert [n_blocks(r) for r in (1, 2, 4, 8)] == [0, 1, 2, 3]
        with pytest.raises(ValueError):
            n_blocks(3)

    def test_subpixel_nn_module_checkerboard_free(self):
        gen = torch.Generator().manual_seed(1)
        m = Upsample(4, UpsampleSpec("subpixel_nn", filters=32), gen)
        out = m(torch.rand(1, 4, 5, 5, 5))
        assert max_phase_discrepancy(out) == 0.0

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            UpsampleSpec("bilinear")
