import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from defocuslab.errors import ConfigError, DegenerateKernelError
from defocuslab.psf_kernel import (
    ButterworthParams,
    KernelBank,
    build_butterworth_kernel,
    butterworth_profile,
    export_kernel_png,
    gaussian_bank,
    init_bank,
    load_bank,
    lookup,
    reproject_bank,
    save_bank,
)
from make_butterworth_golden import normalize, raw_profile, smooth

from conftest import FIXTURES


def test_raw_value_at_cutoff_is_half():
    # r = d0 = 3 lands on grid point (0, 3) of the class-3 kernel
    p = ButterworthParams(d0=3.0)
    assert butterworth_profile(3, p)[3, 6] == pytest.approx(0.5, abs=1e-15)


def test_center_is_zero_and_outside_disc_is_zero():
    b = butterworth_profile(5, ButterworthParams(d0=5.0))
    assert b[5, 5] == 0.0
    assert b[0, 0] == 0.0  # corner, r = 7.07 > 5


def test_class_zero_is_delta():
    for p in (None, ButterworthParams(d0=0.1, order_n=7, kappa=5, sigma=3.0)):
        k = build_butterworth_kernel(0, p)
        assert k.shape == (1, 1) and k[0, 0] == 1.0


def test_golden_fixture_c4():
    gold = json.loads((FIXTURES / "butterworth_c4.json").read_text())
    p = ButterworthParams(gold["d0"], gold["n"], gold["kappa"], gold["sigma"])
    np.testing.assert_allclose(butterworth_profile(gold["c"], p), np.array(gold["raw"]), atol=1e-12, rtol=0)
    np.testing.assert_allclose(build_butterworth_kernel(gold["c"], p), np.array(gold["kernel"]), atol=1e-12, rtol=0)


@pytest.mark.parametrize("c,d0,n", [(1, 1.0, 1), (3, 2.0, 2), (6, 6.0, 3), (10, 4.5, 4), (25, 25.0, 3)])
def test_profile_matches_loop_oracle(c, d0, n):
    got = butterworth_profile(c, ButterworthParams(d0=d0, order_n=n))
    np.testing.assert_allclose(got, np.array(raw_profile(c, d0, n)), atol=1e-9, rtol=0)


def test_smoothed_kernel_matches_loop_oracle():
    c, p = 7, ButterworthParams(d0=5.0, order_n=2, kappa=5, sigma=1.5)
    want = normalize(smooth(raw_profile(c, 5.0, 2), 5, 1.5))
    np.testing.assert_allclose(build_butterworth_kernel(c, p), np.array(want), atol=1e-12)


@pytest.mark.parametrize("bad", [dict(d0=0.0), dict(d0=-1.0), dict(d0=1.0, order_n=0), dict(d0=1.0, kappa=4),
                                 dict(d0=1.0, sigma=0.0), dict(d0=float("nan"))])
def test_invalid_params(bad):
    with pytest.raises(ConfigError):
        build_butterworth_kernel(3, ButterworthParams(**bad))


def test_degenerate_kernel_reports_class():
    # huge cutoff with a high order underflows the whole disc to zero
    with pytest.raises(DegenerateKernelError) as err:
        build_butterworth_kernel(2, ButterworthParams(d0=1e6, order_n=200))
    assert err.value.radius_class == 2


def test_default_bank_shape_and_invariants():
    bank = init_bank(25)
    assert len(bank) == 26 and bank.c_max == 25 and bank.trainable
    for c, k in enumerate(bank.numpy()):
        assert k.shape == (2 * c + 1, 2 * c + 1)
        assert (k >= 0).all()
        assert abs(k.sum() - 1) < 1e-6
    assert bank.numpy()[25].shape == (51, 51)


def test_small_bank():
    bank = init_bank(1)
    assert [k.shape for k in bank.numpy()] == [(1, 1), (3, 3)]


def test_init_bank_error_names_class():
    with pytest.raises(DegenerateKernelError) as err:
        init_bank(3, params_per_class=lambda c: ButterworthParams(d0=1e6, order_n=200))
    assert err.value.radius_class == 1


@given(c=st.integers(1, 12), d0=st.floats(0.5, 15.0), n=st.integers(1, 5))
@settings(max_examples=40, deadline=None)
def test_profile_monotone_in_radius(c, d0, n):
    r = np.hypot(*np.meshgrid(np.arange(-c, c + 1), np.arange(-c, c + 1)))
    b = butterworth_profile(c, ButterworthParams(d0=d0, order_n=n))
    inside = (r > 0) & (r <= c)
    order = np.argsort(r[inside], kind="stable")
    vals, radii = b[inside][order], r[inside][order]
    # nondecreasing across distinct radii
    assert np.all(np.diff(vals)[np.diff(radii) > 0] >= -1e-15)


@given(c=st.integers(1, 10))
@settings(max_examples=10, deadline=None)
def test_rotational_symmetry(c):
    raw = butterworth_profile(c, ButterworthParams(d0=float(c)))
    k = build_butterworth_kernel(c)
    for grid, tol in ((raw, 1e-9), (k, 1e-6)):
        np.testing.assert_allclose(grid, grid.T, atol=tol)
        np.testing.assert_allclose(grid, grid[::-1], atol=tol)
        np.testing.assert_allclose(grid, grid[:, ::-1], atol=tol)


def test_lookup():
    bank = init_bank(25)
    assert lookup(bank, 0).shape == (1, 1) and float(lookup(bank, 0).detach()) == 1.0
    with pytest.raises(IndexError):
        lookup(bank, 26)
    with pytest.raises(IndexError):
        lookup(bank, -1)


def test_lookup_after_single_class_step():
    bank = init_bank(8)
    before5 = lookup(bank, 5).detach().clone()
    before6 = lookup(bank, 6).detach().clone()
    opt = torch.optim.SGD(bank.parameters(), lr=1e-5)
    loss = (lookup(bank, 6) * torch.arange(169.0).view(13, 13)).sum()
    loss.backward()
    opt.step()
    reproject_bank(bank)
    assert not torch.equal(lookup(bank, 6), before6)
    assert torch.equal(lookup(bank, 5), before5)


def test_reproject_arithmetic():
    bank = KernelBank([np.ones((1, 1)), np.array([[0.5, -0.1, 0.6]] * 3) / 3.0], trainable=True, dtype=torch.float64)
    # only the values of the 3x3 entries matter; rows are identical
    reproject_bank(bank)
    row = bank.kernels[1].detach().numpy()[0] * 3
    np.testing.assert_allclose(row, [0.5 / 1.1, 0.0, 0.6 / 1.1], atol=1e-12)


def test_reproject_idempotent_and_feasible(rng):
    bank = init_bank(6, dtype=torch.float64)
    with torch.no_grad():
        for k in bank.kernels:
            k.add_(torch.from_numpy(rng.normal(0, 0.02, k.shape)))
    reproject_bank(bank)
    once = [k.detach().clone() for k in bank.kernels]
    for k in once:
        assert (k >= 0).all() and abs(float(k.sum()) - 1) < 1e-12
    reproject_bank(bank)
    for a, b in zip(once, bank.kernels):
        torch.testing.assert_close(a, b.detach(), rtol=0, atol=1e-15)


def test_reproject_degenerate():
    bank = init_bank(2)
    with torch.no_grad():
        bank.kernels[2].fill_(-1.0)
    with pytest.raises(DegenerateKernelError) as err:
        reproject_bank(bank)
    assert err.value.radius_class == 2


def test_bank_roundtrip(tmp_path):
    bank = init_bank(5)
    save_bank(bank, tmp_path / "b.npz")
    back = load_bank(tmp_path / "b.npz")
    assert back.c_max == 5 and back.trainable
    for a, b in zip(bank.numpy(), back.numpy()):
        np.testing.assert_array_equal(a.astype(np.float32), b.astype(np.float32))
    assert back.params[3] == bank.params[3]
    g = gaussian_bank(3)
    save_bank(g, tmp_path / "g.npz")
    assert load_bank(tmp_path / "g.npz").params[1] is None


def test_bank_archive_bytes_deterministic(tmp_path):
    save_bank(init_bank(4), tmp_path / "a.npz")
    save_bank(init_bank(4), tmp_path / "b.npz")
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()


def test_export_png(tmp_path):
    from defocuslab.io import read_png

    export_kernel_png(init_bank(6), 6, tmp_path / "k.png", scale=2)
    img = read_png(tmp_path / "k.png")
    assert img.shape[:2] == (26, 26) and img.max() == 1.0
