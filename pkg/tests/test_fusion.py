import numpy as np
import torch

from bevlab.fusion import HierarchicalGatedFusion, depth_major_flatten
from conftest import rand_level
from fdcheck import module_grad_check
from oracles import aggregate_ref, fuse_scale_ref

import oracles


def _params(conv):
    return (conv.weight.detach().numpy().astype(np.float64),
            conv.bias.detach().numpy().astype(np.float64))


def _randomize_gates(fusion, seed=0):
    # gates are zero-initialized by design; give them weights for oracle tests
    g = torch.Generator().manual_seed(seed)
    for gate in (*fusion.scale_gates, fusion.level_gate):
        gate.weight.data = torch.randn(gate.weight.shape, generator=g, dtype=gate.weight.dtype)
        gate.bias.data = torch.randn(gate.bias.shape, generator=g, dtype=gate.bias.dtype)


def test_zero_init_gates_average_the_modalities(unit_grid):
    fusion = HierarchicalGatedFusion(unit_grid).double()
    f_l = rand_level(unit_grid, 0)
    f_c = rand_level(unit_grid, 0, rng=np.random.default_rng(1))
    out = fusion.fuse_scale(f_l, f_c, 0)
    np.testing.assert_allclose(out.detach(), ((f_l + f_c) / 2).numpy(), atol=1e-12)


def test_equal_operands_pass_through_any_gates(unit_grid):
    fusion = HierarchicalGatedFusion(unit_grid).double()
    _randomize_gates(fusion)
    x = rand_level(unit_grid, 1)
    out = fusion.fuse_scale(x, x, 1)
    np.testing.assert_allclose(out.detach(), x.numpy(), atol=1e-6)


def test_fuse_scale_matches_loop_reference(unit_grid):
    fusion = HierarchicalGatedFusion(unit_grid).double()
    _randomize_gates(fusion)
    rng = np.random.default_rng(2)
    f_l = rand_level(unit_grid, 0, rng=rng)
    f_c = rand_level(unit_grid, 0, rng=rng)
    got = fusion.fuse_scale(f_l, f_c, 0)[0].detach().numpy()
    ref = fuse_scale_ref(
        f_l[0].numpy(), f_c[0].numpy(),
        _params(fusion.lidar_convs[0]), _params(fusion.camera_convs[0]),
        _params(fusion.scale_gates[0]),
    )
    assert np.abs(got - ref).max() < 1e-6


def test_gate_weights_sum_to_one(unit_grid):
    fusion = HierarchicalGatedFusion(unit_grid).double()
    _randomize_gates(fusion, seed=3)
    rng = np.random.default_rng(4)
    f_l = rand_level(unit_grid, 0, rng=rng)
    f_c = rand_level(unit_grid, 0, rng=rng)
    mixed = torch.cat([fusion.lidar_convs[0](f_l), fusion.camera_convs[0](f_c)], dim=1)
    gates = torch.softmax(fusion.scale_gates[0](mixed), dim=1)
    assert (gates.sum(dim=1) - 1.0).abs().max() < 1e-6

    levels = [rand_level(unit_grid, i, rng=rng) for i in range(3)]
    target = levels[1].shape[-3:]
    f0r = torch.nn.functional.interpolate(levels[0], size=target, mode="trilinear",
                                          align_corners=False)
    f2r = torch.nn.functional.interpolate(levels[2], size=target, mode="trilinear",
                                          align_corners=False)
    stacked = torch.cat([fusion.level_convs[0](f0r), fusion.level_convs[1](levels[1]),
                         fusion.level_convs[2](f2r)], dim=1)
    gates3 = torch.softmax(fusion.level_gate(stacked), dim=1)
    assert (gates3.sum(dim=1) - 1.0).abs().max() < 1e-6


def test_fused_output_is_a_convex_combination(unit_grid):
    fusion = HierarchicalGatedFusion(unit_grid).double()
    _randomize_gates(fusion, seed=5)
    rng = np.random.default_rng(6)
    f_l = rand_level(unit_grid, 0, rng=rng)
    f_c = rand_level(unit_grid, 0, rng=rng)
    out = fusion.fuse_scale(f_l, f_c, 0).detach()
    lo = torch.minimum(f_l, f_c) - 1e-9
    hi = torch.maximum(f_l, f_c) + 1e-9
    assert bool((out >= lo).all() and (out <= hi).all())


def test_combine_levels_constant_input_passthrough(unit_grid):
    fusion = HierarchicalGatedFusion(unit_grid).double()
    _randomize_gates(fusion, seed=7)
    const = 1.7
    levels = [torch.full((1, unit_grid.channels, *unit_grid.level_shape(i)), const,
                         dtype=torch.float64) for i in range(3)]
    blended = fusion.combine_levels(*levels)
    np.testing.assert_allclose(blended.detach().numpy(), const, atol=1e-9)


def test_aggregate_matches_loop_reference(unit_grid):
    fusion = HierarchicalGatedFusion(unit_grid).double()
    _randomize_gates(fusion, seed=8)
    rng = np.random.default_rng(9)
    levels = [rand_level(unit_grid, i, rng=rng) for i in range(3)]
    got = fusion.aggregate(*levels)[0].detach().numpy()
    ref = aggregate_ref(
        levels[0][0].numpy(), levels[1][0].numpy(), levels[2][0].numpy(),
        [_params(c) for c in fusion.level_convs],
        _params(fusion.level_gate),
        _params(fusion.bev_reduce),
    )
    assert got.shape == ref.shape == (unit_grid.channels, *unit_grid.bev_shape)
    assert np.abs(got - ref).max() < 1e-6


def test_trilinear_reference_matches_torch(unit_grid):
    rng = np.random.default_rng(10)
    x = rng.standard_normal((1, 2, 4, 4, 4))
    t = torch.from_numpy(x)
    for out_shape in ((2, 2, 2), (8, 8, 8), (2, 4, 8)):
        ours = oracles.trilinear_resize_ref(x[0], out_shape)
        theirs = torch.nn.functional.interpolate(
            t, size=out_shape, mode="trilinear", align_corners=False
        )[0].numpy()
        assert np.abs(ours - theirs).max() < 1e-12


def test_depth_major_flatten_layout():
    x = torch.arange(2 * 3 * 2 * 2 * 2, dtype=torch.float64).reshape(2, 3, 2, 2, 2)
    flat = depth_major_flatten(x)
    assert flat.shape == (2, 6, 2, 2)
    assert torch.equal(flat[:, 0:3], x[:, :, 0])
    assert torch.equal(flat[:, 3:6], x[:, :, 1])


def test_full_forward_shape(unit_grid):
    from bevlab.pyramid import VoxelPyramid

    fusion = HierarchicalGatedFusion(unit_grid)
    rng = np.random.default_rng(11)
    lid = VoxelPyramid(tuple(rand_level(unit_grid, i, dtype=torch.float32, rng=rng)
                             for i in range(3)), "lidar")
    cam = VoxelPyramid(tuple(rand_level(unit_grid, i, dtype=torch.float32, rng=rng)
                             for i in range(3)), "camera")
    bev = fusion(lid, cam)
    assert bev.shape == (1, unit_grid.channels, *unit_grid.bev_shape)


def test_gradients_match_finite_differences(unit_grid):
    fusion = HierarchicalGatedFusion(unit_grid).double()
    _randomize_gates(fusion, seed=12)
    rng = np.random.default_rng(13)
    f_l = [rand_level(unit_grid, i, rng=rng) for i in range(3)]
    f_c = [rand_level(unit_grid, i, rng=rng) for i in range(3)]
    proj = torch.from_numpy(rng.standard_normal((1, unit_grid.channels, *unit_grid.bev_shape)))

    def loss_fn():
        fused = [fusion.fuse_scale(f_l[i], f_c[i], i) for i in range(3)]
        return (fusion.aggregate(*fused) * proj).sum()

    module_grad_check(fusion, loss_fn, n_dirs=4)
