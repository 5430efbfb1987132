import numpy as np
import pytest
import torch

from defocuslab.errors import ConfigError, SizeError
from defocuslab.deconv_baseline import WienerConfig, two_stage_deblur, wiener_deconv
from defocuslab.evaluation import psnr
from defocuslab.forward_reblur import SceneDescriptor, generate_scene, reblur
from defocuslab.psf_kernel import gaussian_bank, init_bank, lookup


@pytest.fixture(scope="module")
def bank():
    return init_bank(25, trainable=False, dtype=torch.float64)


def smooth_image(size=96, seed=0):
    s = generate_scene(SceneDescriptor(size=(size, size), texture="smooth_noise", depth_layout="uniform", coc=(0,), seed=seed),
                       init_bank(25, trainable=False))
    return s.aif.double()


@pytest.mark.parametrize("boundary", ["symmetric", "taper", "periodic"])
def test_delta_identity(rng, boundary):
    x = torch.from_numpy(rng.random((3, 20, 17)))
    out = wiener_deconv(x, torch.ones(1, 1), WienerConfig(nsr=0.0, boundary=boundary))
    assert float((out - x).abs().max()) <= 1e-5


def test_round_trip_c6(bank):
    x = smooth_image()
    k = lookup(bank, 6).detach()
    y = reblur(x, torch.full((96, 96), 6.0, dtype=torch.float64), bank)
    out = wiener_deconv(y, k, WienerConfig(nsr=1e-6))
    assert psnr(out[:, 13:-13, 13:-13], x[:, 13:-13, 13:-13]) >= 40.0


def test_huge_nsr_attenuates(bank, rng):
    x = torch.from_numpy(rng.random((1, 32, 32)))
    out = wiener_deconv(x, lookup(bank, 3).detach(), WienerConfig(nsr=1e6))
    assert float((out**2).sum()) < 1e-6 * float((x**2).sum())


def test_linearity(bank, rng):
    a, b = torch.from_numpy(rng.random((2, 3, 24, 24)))
    k = lookup(bank, 4).detach()
    lhs = wiener_deconv(0.7 * a - 1.3 * b, k)
    rhs = 0.7 * wiener_deconv(a, k) - 1.3 * wiener_deconv(b, k)
    assert float((lhs - rhs).abs().max()) <= 1e-5


def test_errors(bank):
    with pytest.raises(SizeError):
        wiener_deconv(torch.rand(1, 8, 8), lookup(bank, 6).detach())
    with pytest.raises(ConfigError):
        wiener_deconv(torch.rand(1, 8, 8), torch.ones(1, 1), WienerConfig(nsr=-1))
    with pytest.raises(ConfigError):
        wiener_deconv(torch.rand(1, 8, 8), torch.ones(1, 1), WienerConfig(boundary="zero"))


def test_two_stage_zero_map(bank, rng):
    x = torch.from_numpy(rng.random((3, 16, 16)))
    assert torch.equal(two_stage_deblur(x, torch.zeros(16, 16), bank), x)


def test_two_stage_constant_scene_and_kernel_family(bank):
    x = smooth_image(seed=4)
    m = torch.full((96, 96), 6.0, dtype=torch.float64)
    y = reblur(x, m, bank)
    true_out = two_stage_deblur(y, m, bank, WienerConfig(nsr=1e-2))
    gauss_out = two_stage_deblur(y, m, gaussian_bank(25, dtype=torch.float64), WienerConfig(nsr=1e-2))
    base = psnr(y, x)
    assert psnr(true_out, x) >= base + 3.0
    assert psnr(gauss_out, x) < psnr(true_out, x)


def test_two_stage_brightness_and_dump(bank):
    s = generate_scene(SceneDescriptor(size=(96, 96), texture="smooth_noise", depth_layout="quadrants",
                                       coc=(0, 3, 6, 9), seed=1), bank)
    seen = []
    out = two_stage_deblur(s.oof.double(), s.gt_map, bank, dump=lambda c, img: seen.append(c))
    assert seen == [3, 6, 9]
    inner = (slice(None), slice(10, -10), slice(10, -10))
    assert abs(float(out[inner].mean() / s.aif[inner].double().mean()) - 1) < 0.02
    # class-0 quadrant passes through untouched
    assert torch.equal(out[:, :48, :48], s.oof.double()[:, :48, :48])
