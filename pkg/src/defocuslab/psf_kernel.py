"""Circle-of-confusion blur kernels: Butterworth initialization and the learnable bank.

Each integer CoC radius ``c`` owns a (2c+1) x (2c+1) kernel. The initial
profile is a Butterworth high-pass response restricted to a disc and lightly
smoothed, which gives the ring-shaped PSF typical of real lenses. During
training the individual kernel entries are free parameters, kept feasible
(nonnegative, unit sum) by :func:`reproject_bank`.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import convolve
from torch import nn

from .errors import ConfigError, DegenerateKernelError
from .io import read_archive, write_archive, write_png

DEFAULT_C_MAX = 25


@dataclass(frozen=True)
class ButterworthParams:
    d0: float
    order_n: int = 3
    kappa: int = 3
    sigma: float = 1.0

    def validate(self):
        if not (np.isfinite(self.d0) and self.d0 > 0):
            raise ConfigError(f"d0 must be > 0, got {self.d0}")
        if int(self.order_n) != self.order_n or self.order_n < 1:
            raise ConfigError(f"order_n must be a positive integer, got {self.order_n}")
        if int(self.kappa) != self.kappa or self.kappa < 1 or self.kappa % 2 == 0:
            raise ConfigError(f"kappa must be an odd positive integer, got {self.kappa}")
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")
        return self


def default_params(c: int) -> ButterworthParams:
    """Cutoff scales with the radius class; order, window and sigma are fixed."""
    return ButterworthParams(d0=float(max(c, 1)), order_n=3, kappa=3, sigma=1.0)


def _radius_grid(c: int) -> np.ndarray:
    ax = np.arange(-c, c + 1, dtype=np.float64)
    return np.hypot(ax[:, None], ax[None, :])


def butterworth_profile(c: int, params: ButterworthParams) -> np.ndarray:
    """Raw high-pass response times the disc indicator, before smoothing."""
    r = _radius_grid(c)
    with np.errstate(divide="ignore", over="ignore"):
        ratio = np.where(r > 0, params.d0 / np.where(r > 0, r, 1.0), np.inf)
        b = 1.0 / (1.0 + ratio ** (2 * int(params.order_n)))
    b[r == 0] = 0.0
    b[r > c] = 0.0
    return b


def gaussian_window(kappa: int, sigma: float) -> np.ndarray:
    ax = np.arange(kappa, dtype=np.float64) - (kappa - 1) / 2
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma**2))
    return g / g.sum()


def build_butterworth_kernel(c: int, params: ButterworthParams | None = None) -> np.ndarray:
    """Initial blur kernel for radius class ``c`` as a float64 (2c+1, 2c+1) grid."""
    if int(c) != c or c < 0:
        raise ConfigError(f"radius class must be a nonnegative integer, got {c}")
    c = int(c)
    if c == 0:
        return np.ones((1, 1))
    params = (params or default_params(c)).validate()
    raw = butterworth_profile(c, params)
    if not np.any(raw > 0):
        raise DegenerateKernelError(c, "Butterworth profile is zero everywhere")
    smoothed = convolve(raw, gaussian_window(params.kappa, params.sigma), mode="constant", cval=0.0)
    smoothed = np.clip(smoothed, 0.0, None)
    total = smoothed.sum()
    if not total > 0:
        raise DegenerateKernelError(c, "smoothed kernel has no positive mass")
    return smoothed / total


def gaussian_kernel(c: int, sigma: float | None = None) -> np.ndarray:
    """Gaussian on the class-c support; sigma defaults to c/2 (the std of a uniform disc)."""
    if c == 0:
        return np.ones((1, 1))
    sigma = c / 2.0 if sigma is None else sigma
    r = _radius_grid(c)
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    return g / g.sum()


def disc_kernel(c: int) -> np.ndarray:
    if c == 0:
        return np.ones((1, 1))
    d = (_radius_grid(c) <= c).astype(np.float64)
    return d / d.sum()


class KernelBank(nn.Module):
    """One normalized kernel per integer radius class 0..c_max.

    The kernels are ``nn.Parameter`` objects so the bank can be optimized like
    any other module; ``trainable`` toggles ``requires_grad`` on all of them.
    """

    def __init__(self, kernels, params=None, trainable=True, dtype=torch.float32):
        super().__init__()
        if len(kernels) < 2:
            raise ConfigError("a bank needs at least classes 0 and 1")
        for c, k in enumerate(kernels):
            if tuple(np.shape(k)) != (2 * c + 1, 2 * c + 1):
                raise ConfigError(f"class {c} kernel must be {2 * c + 1}x{2 * c + 1}, got {np.shape(k)}")
        self.kernels = nn.ParameterList(
            nn.Parameter(torch.as_tensor(np.asarray(k), dtype=dtype).clone(), requires_grad=trainable)
            for k in kernels
        )
        self.params = list(params) if params is not None else [None] * len(kernels)
        self._trainable = bool(trainable)

    @property
    def c_max(self) -> int:
        return len(self.kernels) - 1

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, flag: bool):
        self._trainable = bool(flag)
        for k in self.kernels:
            k.requires_grad_(self._trainable)

    def __len__(self):
        return len(self.kernels)

    def numpy(self) -> list[np.ndarray]:
        return [k.detach().cpu().numpy().astype(np.float64) for k in self.kernels]

    def copy(self) -> "KernelBank":
        return KernelBank(self.numpy(), self.params, self.trainable, dtype=self.kernels[0].dtype)


def init_bank(c_max: int = DEFAULT_C_MAX, params_per_class=None, trainable=True, dtype=torch.float32) -> KernelBank:
    """Butterworth-initialized bank.

    ``params_per_class`` may be a callable ``c -> ButterworthParams``, a
    sequence indexed by class, or None for :func:`default_params`.
    """
    if int(c_max) != c_max or c_max < 1:
        raise ConfigError(f"c_max must be an integer >= 1, got {c_max}")
    if params_per_class is None:
        params_per_class = default_params
    kernels, params = [np.ones((1, 1))], [None]
    for c in range(1, c_max + 1):
        p = params_per_class(c) if callable(params_per_class) else params_per_class[c]
        try:
            kernels.append(build_butterworth_kernel(c, p))
        except ConfigError as exc:
            raise ConfigError(f"class {c}: {exc}") from exc
        params.append(p)
    return KernelBank(kernels, params, trainable=trainable, dtype=dtype)


def gaussian_bank(c_max: int = DEFAULT_C_MAX, trainable=False, dtype=torch.float32) -> KernelBank:
    return KernelBank([gaussian_kernel(c) for c in range(c_max + 1)], trainable=trainable, dtype=dtype)


def identity_bank(c_max: int = DEFAULT_C_MAX, dtype=torch.float32) -> KernelBank:
    kernels = []
    for c in range(c_max + 1):
        k = np.zeros((2 * c + 1, 2 * c + 1))
        k[c, c] = 1.0
        kernels.append(k)
    return KernelBank(kernels, trainable=False, dtype=dtype)


def lookup(bank: KernelBank, c: int) -> torch.Tensor:
    """Current kernel for class ``c``; returns the live parameter, not a copy."""
    if int(c) != c or not 0 <= c <= bank.c_max:
        raise IndexError(f"radius class {c} outside bank range 0..{bank.c_max}")
    return bank.kernels[int(c)]


@torch.no_grad()
def reproject_bank(bank: KernelBank) -> KernelBank:
    """Clamp negatives to zero and renormalize every kernel in place.

    Kernels that are already feasible (to rounding) are left bit-identical.
    """
    for c, k in enumerate(bank.kernels):
        tol = torch.finfo(k.dtype).eps * k.numel()
        if bool((k >= 0).all()) and abs(float(k.sum()) - 1.0) <= tol:
            continue
        k.clamp_(min=0.0)
        total = k.sum()
        if not torch.isfinite(total) or total <= 0:
            raise DegenerateKernelError(c, "all entries nonpositive after a training step")
        k.div_(total)
    return bank


# -- serialization -----------------------------------------------------------

def save_bank(bank: KernelBank, path):
    arrays = {f"kernel_{c:02d}": k for c, k in enumerate(bank.numpy())}
    params = np.full((len(bank), 4), np.nan)
    for c, p in enumerate(bank.params):
        if p is not None:
            params[c] = (p.d0, p.order_n, p.kappa, p.sigma)
    arrays["params"] = params
    header = {"kind": "kernel_bank", "c_max": bank.c_max, "trainable": bank.trainable}
    write_archive(path, header, arrays)


def load_bank(path, dtype=torch.float32) -> KernelBank:
    header, arrays = read_archive(path)
    if header.get("kind") != "kernel_bank":
        raise ConfigError(f"{path} is not a kernel bank archive")
    c_max = int(header["c_max"])
    kernels = [arrays[f"kernel_{c:02d}"].astype(np.float64) for c in range(c_max + 1)]
    params = []
    for row in arrays["params"]:
        if np.isnan(row[0]):
            params.append(None)
        else:
            params.append(ButterworthParams(float(row[0]), int(row[1]), int(row[2]), float(row[3])))
    return KernelBank(kernels, params, trainable=bool(header["trainable"]), dtype=dtype)


def export_kernel_png(bank: KernelBank, c: int, path, scale: int = 8):
    """Max-normalized grayscale image of one kernel, upscaled with nearest neighbour."""
    k = lookup(bank, c).detach().cpu().numpy().astype(np.float64)
    img = k / k.max() if k.max() > 0 else k
    img = np.kron(img, np.ones((scale, scale)))
    write_png(Path(path), img, bits=8)
