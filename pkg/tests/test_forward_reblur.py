import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import convolve2d

from defocuslab.errors import ConfigError, RangeError, ShapeError
from defocuslab.forward_reblur import (
    SceneDescriptor,
    SceneSample,
    depth_to_coc,
    generate_scene,
    integer_boundaries,
    load_scene,
    quantize_map,
    reblur,
    save_scene,
    synthesize_dp_views,
)
from defocuslab.psf_kernel import identity_bank, init_bank, lookup


def direct_conv(img_chw, kernel):
    """Reflect-padded true convolution, one channel at a time."""
    k = np.asarray(kernel, dtype=np.float64)
    p = k.shape[0] // 2
    out = []
    for ch in np.asarray(img_chw, dtype=np.float64):
        out.append(convolve2d(np.pad(ch, p, mode="reflect"), k, mode="valid"))
    return np.stack(out)


@pytest.fixture(scope="module")
def bank64():
    return init_bank(25, trainable=False, dtype=torch.float64)


def test_quantize_zero_map():
    ms = quantize_map(torch.zeros(5, 6), integer_boundaries(25))
    assert ms.masks.shape == (1, 26, 5, 6)
    assert (ms.masks[0, 0] == 1).all() and ms.masks[0, 1:].sum() == 0


def test_quantize_top_value_closed():
    ms = quantize_map(torch.full((2, 2), 25.0), integer_boundaries(25), c_max=25)
    assert (ms.labels == 25).all()
    ms = quantize_map(torch.full((2, 2), 25.0), (0, 1, 5, 12, 25))
    assert (ms.labels == 3).all()


def test_quantize_matches_loop(rng):
    m = rng.uniform(0, 25, (17, 13))
    ms = quantize_map(torch.from_numpy(m), integer_boundaries(25), c_max=25)
    expect = np.empty(m.shape, dtype=int)
    for i in range(m.shape[0]):
        for j in range(m.shape[1]):
            expect[i, j] = min(int(np.floor(m[i, j])), 25)
    np.testing.assert_array_equal(ms.labels[0].numpy(), expect)


@given(st.lists(st.floats(0, 12, allow_nan=False), min_size=1, max_size=40))
@settings(max_examples=50, deadline=None)
def test_quantize_partition(values):
    m = torch.tensor(values, dtype=torch.float64).view(1, -1)
    ms = quantize_map(m, (0, 1, 5, 12))
    assert torch.equal(ms.masks.sum(1), torch.ones_like(m)[None])


@pytest.mark.parametrize("bad", [-0.5, 25.5, float("nan"), float("inf")])
def test_quantize_range_error(bad):
    m = torch.zeros(3, 3)
    m[1, 1] = bad
    with pytest.raises(RangeError):
        quantize_map(m, integer_boundaries(25), c_max=25)


def test_quantize_bad_boundaries():
    with pytest.raises(ConfigError):
        quantize_map(torch.zeros(2, 2), (0, 3, 3))


def test_reblur_zero_map_identity(bank64, rng):
    x = torch.from_numpy(rng.random((3, 20, 24)))
    assert torch.equal(reblur(x, torch.zeros(20, 24), bank64), x)


@pytest.mark.parametrize("c", [1, 6, 12])
def test_reblur_constant_map_matches_direct(bank64, rng, c):
    x = rng.random((3, 64, 64))
    got = reblur(torch.from_numpy(x), torch.full((64, 64), float(c)), bank64).numpy()
    want = direct_conv(x, lookup(bank64, c).detach().numpy())
    assert np.abs(got - want).max() <= 1e-6


def test_reblur_two_region(bank64, rng):
    x = rng.random((1, 40, 48))
    m = np.zeros((40, 48))
    m[:, 24:] = 6
    got = reblur(torch.from_numpy(x), torch.from_numpy(m), bank64).numpy()
    want6 = direct_conv(x, lookup(bank64, 6).detach().numpy())
    np.testing.assert_array_equal(got[:, :, :24], x[:, :, :24])
    np.testing.assert_allclose(got[:, :, 31:], want6[:, :, 31:], atol=1e-12)


def test_reblur_identity_bank_any_map(rng):
    x = torch.from_numpy(rng.random((2, 3, 30, 30)))
    m = torch.from_numpy(rng.uniform(0, 10, (2, 30, 30)))
    torch.testing.assert_close(reblur(x, m, identity_bank(10, dtype=torch.float64)), x, rtol=0, atol=1e-15)


def test_reblur_preserves_mean_in_interior(bank64, rng):
    x = torch.from_numpy(rng.random((1, 96, 96)))
    out = reblur(x, torch.full((96, 96), 8.0), bank64)
    a, b = x[..., 25:-25, 25:-25].mean(), out[..., 25:-25, 25:-25].mean()
    assert abs(float(a - b)) < 1e-2  # local means of white noise agree loosely
    flat = torch.full((1, 96, 96), 0.37, dtype=torch.float64)
    out = reblur(flat, torch.from_numpy(rng.uniform(0, 25, (96, 96))), bank64)
    assert float((out - 0.37).abs().max()) < 1e-4


def test_reblur_errors(bank64):
    with pytest.raises(ShapeError):
        reblur(torch.zeros(3, 8, 8), torch.zeros(8, 9), bank64)
    with pytest.raises(RangeError):
        reblur(torch.zeros(3, 8, 8), torch.full((8, 8), 26.0), bank64)


def test_reblur_bank_gradient_finite_differences(rng):
    bank = init_bank(3, dtype=torch.float64)
    x = torch.from_numpy(rng.random((1, 8, 8)))
    m = torch.from_numpy(rng.integers(0, 4, (8, 8)).astype(float))
    target = torch.from_numpy(rng.random((1, 8, 8)))
    loss = lambda: (reblur(x, m, bank) - target).abs().sum()
    loss().backward()
    k = bank.kernels[2]
    eps = 1e-6
    for idx in [(0, 0), (1, 3), (2, 2), (4, 1)]:
        with torch.no_grad():
            k[idx] += eps
            up = float(loss())
            k[idx] -= 2 * eps
            down = float(loss())
            k[idx] += eps
        fd = (up - down) / (2 * eps)
        assert abs(fd - float(k.grad[idx])) <= 1e-4 * max(1.0, abs(fd))


def test_soft_reblur_map_gradient_exists(bank64, rng):
    x = torch.from_numpy(rng.random((1, 16, 16)))
    m = torch.full((16, 16), 3.3, dtype=torch.float64, requires_grad=True)
    reblur(x, m, bank64, soft=True).sum().backward()
    assert m.grad is not None and m.grad.abs().sum() > 0
    # at integer values soft and hard compositing agree
    mi = torch.full((16, 16), 4.0, dtype=torch.float64)
    torch.testing.assert_close(reblur(x, mi, bank64, soft=True), reblur(x, mi, bank64))


def test_dp_views_zero_map(bank64, rng):
    x = torch.from_numpy(rng.random((3, 16, 16)))
    left, right = synthesize_dp_views(x, torch.zeros(16, 16), bank64)
    assert torch.equal(left, x) and torch.equal(right, x)


def test_dp_mean_equals_reblur(bank64, rng):
    x = torch.from_numpy(rng.random((3, 48, 48)))
    m = torch.from_numpy(rng.uniform(0, 12, (48, 48)))
    left, right = synthesize_dp_views(x, m, bank64)
    assert float(((left + right) / 2 - reblur(x, m, bank64)).abs().max()) <= 1e-5


def test_dp_step_edge_mirror(bank64):
    x = torch.zeros(1, 32, 64, dtype=torch.float64)
    x[..., 32:] = 1.0
    left, right = synthesize_dp_views(x, torch.full((32, 64), 6.0), bank64)
    lp, rp = left[0, 16].numpy(), right[0, 16].numpy()
    # mirror across the edge between columns 31 and 32: right(32 + k) = 1 - left(31 - k)
    np.testing.assert_allclose(rp[32:48], 1.0 - lp[16:32][::-1], atol=1e-12)
    assert not np.allclose(lp, rp)


def test_generate_scene_focal_plane():
    d = SceneDescriptor(size=(32, 32), depth_layout="uniform", depths=(2.0,), focal_depth=2.0)
    s = generate_scene(d, init_bank(25))
    assert float(s.gt_map.abs().max()) == 0.0
    assert torch.equal(s.oof, s.aif)


def test_generate_scene_two_plane_step():
    d = SceneDescriptor(size=(16, 20), depth_layout="two_plane", coc=(0, 6))
    s = generate_scene(d, init_bank(25))
    want = torch.zeros(16, 20)
    want[:, 10:] = 6
    assert torch.equal(s.gt_map, want) and s.synthetic


def test_generate_scene_deterministic():
    d = SceneDescriptor(size=(24, 24), texture="checkerboard", depth_layout="quadrants", coc=(0, 2, 4, 7), seed=3)
    a, b = generate_scene(d, init_bank(25)), generate_scene(d, init_bank(25))
    for k, v in a.rasters().items():
        assert torch.equal(v, b.rasters()[k])


def test_generate_scene_range_error():
    with pytest.raises(RangeError):
        generate_scene(SceneDescriptor(size=(8, 8), depth_layout="uniform", coc=(30,)), init_bank(25))


def test_depth_to_coc():
    assert depth_to_coc(2.0, 2.0, 10.0) == 0.0
    assert depth_to_coc(1.0, 2.0, 10.0) == pytest.approx(5.0)
    assert depth_to_coc(0.1, 2.0, 10.0, c_max=25) == 25.0


def test_descriptor_kv():
    d = SceneDescriptor.from_kv({"size": "32x48", "texture": "gradient", "depth_layout": "ramp", "coc": "1,5"})
    assert d.size == (32, 48) and d.coc == (1, 5)
    with pytest.raises(ConfigError):
        SceneDescriptor.from_kv({"colour": "red"})
    with pytest.raises(ConfigError):
        SceneDescriptor.from_kv({"texture": "plaid"})


def test_scene_sample_shape_check():
    z = torch.zeros(3, 4, 4)
    with pytest.raises(ShapeError):
        SceneSample(z, z, z, torch.zeros(3, 4, 5))


def test_save_load_scene(tmp_path):
    s = generate_scene(SceneDescriptor(size=(16, 16), coc=(0, 3)), init_bank(25))
    save_scene(s, tmp_path / "sc")
    names = sorted(p.name for p in (tmp_path / "sc").iterdir())
    assert names == ["aif.png", "dp_l.png", "dp_r.png", "gt_map.pfm", "oof.png"]
    back = load_scene(tmp_path / "sc")
    assert torch.equal(back.gt_map, s.gt_map)
    assert float((back.oof - s.oof).abs().max()) <= 0.5 / 65535 + 1e-7
