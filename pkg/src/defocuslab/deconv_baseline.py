"""Two-stage deblurring: a defocus map followed by per-class Wiener deconvolution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import fft

from .errors import ConfigError, SizeError
from .forward_reblur import as_image_batch, as_map_batch, integer_boundaries, quantize_map
from .psf_kernel import KernelBank, lookup

BOUNDARIES = ("taper", "symmetric", "periodic")


@dataclass(frozen=True)
class WienerConfig:
    nsr: float = 1e-2
    boundary: str = "symmetric"

    def validate(self):
        if not self.nsr >= 0:
            raise ConfigError(f"nsr must be >= 0, got {self.nsr}")
        if self.boundary not in BOUNDARIES:
            raise ConfigError(f"boundary must be one of {BOUNDARIES}, got {self.boundary!r}")
        return self


def psf2otf(kernel: np.ndarray, shape) -> np.ndarray:
    """OTF of a centered kernel on a grid of ``shape``."""
    kh, kw = kernel.shape
    padded = np.zeros(shape)
    padded[:kh, :kw] = kernel
    padded = np.roll(padded, (-(kh // 2), -(kw // 2)), axis=(0, 1))
    return fft.fft2(padded)


def _taper_weights(kernel: np.ndarray, shape) -> np.ndarray:
    """Blend weights for edge tapering, from the autocorrelation of the PSF projections."""
    alphas = []
    for axis, n in zip((1, 0), shape):
        proj = kernel.sum(axis=axis)
        acorr = np.correlate(proj, proj, mode="full")
        acorr = acorr / acorr.max()
        k = len(proj)
        beta = np.zeros(n)
        # the rising half of the autocorrelation fades in from each border
        beta[:k] = acorr[k - 1 :]
        beta[n - k + 1 :] = np.maximum(beta[n - k + 1 :], acorr[1:k])
        alphas.append(1.0 - beta)
    return np.outer(alphas[0], alphas[1])


def edge_taper(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Blend the image toward its circularly blurred copy near the borders."""
    otf = psf2otf(kernel, image.shape)
    blurred = np.real(fft.ifft2(fft.fft2(image) * otf))
    alpha = _taper_weights(kernel, image.shape)
    return alpha * image + (1.0 - alpha) * blurred


def _wiener_plane(plane: np.ndarray, kernel: np.ndarray, cfg: WienerConfig) -> np.ndarray:
    h, w = plane.shape
    kh, kw = kernel.shape
    if cfg.boundary == "symmetric":
        # whole-sample mirror: periodic with period 2n - 2, matches reflect-padded blur
        ext = np.pad(plane, ((0, max(h - 2, 0)), (0, max(w - 2, 0))), mode="reflect")
    elif cfg.boundary == "taper":
        ph, pw = min(kh, h - 1), min(kw, w - 1)
        ext = np.pad(plane, ((ph, ph), (pw, pw)), mode="reflect")
        ext = edge_taper(ext, kernel)
    else:
        ext = plane
    otf = psf2otf(kernel, ext.shape)
    denom = np.abs(otf) ** 2 + cfg.nsr
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = np.where(denom > 0, np.conj(otf) / denom, 0.0)
    out = np.real(fft.ifft2(fft.fft2(ext) * gain))
    if cfg.boundary == "taper":
        return out[ph : ph + h, pw : pw + w]
    return out[:h, :w]


def wiener_deconv(image, kernel, cfg: WienerConfig = WienerConfig()) -> torch.Tensor:
    """Per-channel frequency-domain Wiener filter: conj(K) Y / (|K|^2 + nsr)."""
    cfg.validate()
    x, batched = as_image_batch(image)
    k = np.asarray(torch.as_tensor(kernel).detach().cpu(), dtype=np.float64)
    if k.shape[0] > x.shape[-2] or k.shape[1] > x.shape[-1]:
        raise SizeError(f"kernel {k.shape} larger than image {tuple(x.shape[-2:])}")
    arr = x.detach().cpu().numpy().astype(np.float64)
    out = np.empty_like(arr)
    for n in range(arr.shape[0]):
        for ch in range(arr.shape[1]):
            out[n, ch] = _wiener_plane(arr[n, ch], k, cfg)
    res = torch.from_numpy(out).to(x.dtype)
    return res if batched else res[0]


def two_stage_deblur(oof, dmap, bank: KernelBank, cfg: WienerConfig = WienerConfig(), dump=None) -> torch.Tensor:
    """Deconvolve the whole image once per radius class present and composite.

    Class-0 pixels are passed through. ``dump``, if given, is called as
    ``dump(c, deconvolved)`` for every class for debugging.
    """
    x, batched = as_image_batch(oof)
    m = as_map_batch(dmap, n=x.shape[0]).to(torch.float64)
    labels = quantize_map(m, integer_boundaries(bank.c_max), c_max=bank.c_max).labels[:, None]
    out = x.clone()
    for c in torch.unique(labels).tolist():
        if c == 0:
            continue
        restored = wiener_deconv(x, lookup(bank, c), cfg)
        if dump is not None:
            dump(c, restored)
        out = torch.where(labels == c, restored, out)
    return out if batched else out[0]
