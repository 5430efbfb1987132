"""Spatially varying defocus blur, dual-pixel view synthesis and synthetic scenes.

Images are torch tensors laid out ``(C, H, W)`` or ``(N, C, H, W)``; defocus
maps are ``(H, W)``, ``(N, H, W)`` or ``(N, 1, H, W)``. Every convolution uses
reflect padding. The blur is composed blur-then-mask: the whole image is
convolved with each radius class present in the map and the results are
composited per pixel.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DegenerateKernelError, RangeError, ShapeError
from .io import read_pfm, read_png, write_pfm, write_png
from .psf_kernel import KernelBank, lookup


# -- tensor plumbing ---------------------------------------------------------

def as_image_batch(image) -> tuple[torch.Tensor, bool]:
    x = torch.as_tensor(image)
    if x.ndim == 3:
        return x.unsqueeze(0), False
    if x.ndim == 4:
        return x, True
    raise ShapeError(f"image must be (C, H, W) or (N, C, H, W), got {tuple(x.shape)}")


def as_map_batch(dmap, n: int | None = None) -> torch.Tensor:
    m = torch.as_tensor(dmap)
    if m.ndim == 2:
        m = m[None, None]
    elif m.ndim == 3:
        m = m[:, None]
    elif m.ndim != 4 or m.shape[1] != 1:
        raise ShapeError(f"defocus map must be (H, W), (N, H, W) or (N, 1, H, W), got {tuple(m.shape)}")
    if n is not None and m.shape[0] == 1 and n > 1:
        m = m.expand(n, -1, -1, -1)
    return m


def _restore(x: torch.Tensor, batched: bool) -> torch.Tensor:
    return x if batched else x[0]


def validate_map(dmap: torch.Tensor, c_max: float, low: float = 0.0):
    if not torch.isfinite(dmap).all():
        raise RangeError("defocus map contains non-finite values")
    lo, hi = float(dmap.detach().min()), float(dmap.detach().max())
    if lo < low or hi > c_max:
        raise RangeError(f"defocus map values [{lo:g}, {hi:g}] outside [{low:g}, {c_max:g}]")


# -- quantization ------------------------------------------------------------

@dataclass
class MaskSet:
    """Binary per-class masks, shape (N, K, H, W), plus the class boundaries."""

    masks: torch.Tensor
    labels: torch.Tensor
    boundaries: tuple

    @property
    def num_classes(self) -> int:
        return len(self.boundaries) - 1


def integer_boundaries(c_max: int) -> tuple:
    """Boundaries 0, 1, ..., c_max + 1 so that class ``c`` holds values in [c, c+1)."""
    return tuple(range(int(c_max) + 2))


def quantize_map(dmap, boundaries, c_max: float | None = None) -> MaskSet:
    """Assign each pixel to the interval ``boundaries[i] <= v < boundaries[i+1]``.

    The last interval is closed above. Values must lie in
    ``[boundaries[0], c_max]`` where ``c_max`` defaults to the last boundary.
    """
    b = [float(v) for v in boundaries]
    if len(b) < 2 or any(b1 <= b0 for b0, b1 in zip(b, b[1:])):
        raise ConfigError(f"boundaries must be strictly increasing with >= 2 entries, got {boundaries}")
    m = as_map_batch(dmap)
    upper = b[-1] if c_max is None else float(c_max)
    validate_map(m, upper, low=b[0])
    edges = torch.tensor(b, dtype=m.dtype, device=m.device)
    labels = torch.searchsorted(edges, m.contiguous(), right=True) - 1
    labels = labels.clamp_(0, len(b) - 2)[:, 0]
    masks = F.one_hot(labels, len(b) - 1).permute(0, 3, 1, 2).to(m.dtype)
    return MaskSet(masks=masks, labels=labels, boundaries=tuple(boundaries))


# -- convolution -------------------------------------------------------------

def convolve_image(x: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """True 2D convolution of every channel with one odd-sized kernel, reflect padding."""
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    if kh == 1 and kw == 1:
        return x * kernel.reshape(())
    n, ch, h, w = x.shape
    if ph >= h or pw >= w:
        raise ShapeError(f"image {h}x{w} too small for reflect padding of a {kh}x{kw} kernel")
    weight = kernel.flip(0, 1).to(x.dtype).expand(ch, 1, kh, kw)
    xp = F.pad(x, (pw, pw, ph, ph), mode="reflect")
    return F.conv2d(xp, weight, groups=ch)


def _class_weights(m: torch.Tensor, c_max: int, soft: bool) -> dict[int, torch.Tensor]:
    """Per-class compositing weights, each (N, 1, H, W).

    Hard mode: indicator of floor(v) == c. Soft mode: linear cross-fade
    between the two neighbouring classes, max(0, 1 - |v - c|), which is
    differentiable in the map and coincides with hard mode at integer values.
    """
    if soft:
        lo = int(math.floor(float(m.detach().min())))
        hi = min(int(math.ceil(float(m.detach().max()))), c_max)
        out = {}
        for c in range(lo, hi + 1):
            w = (1.0 - (m - c).abs()).clamp(min=0.0)
            if c == c_max:
                w = torch.where(m >= c_max, torch.ones_like(w), w)
            out[c] = w
        return out
    labels = quantize_map(m.detach(), integer_boundaries(c_max), c_max=c_max).labels[:, None]
    present = torch.unique(labels).tolist()
    return {int(c): (labels == c).to(m.dtype) for c in present}


def _composite(x, m, c_max, kernel_for, soft):
    out = None
    for c, w in _class_weights(m, c_max, soft).items():
        blurred = x if c == 0 else convolve_image(x, kernel_for(c))
        term = blurred * w
        out = term if out is None else out + term
    return out


def _check_inputs(aif, dmap, bank):
    x, batched = as_image_batch(aif)
    m = as_map_batch(dmap, n=x.shape[0]).to(x.dtype)
    if m.shape[0] != x.shape[0] or m.shape[-2:] != x.shape[-2:]:
        raise ShapeError(f"image {tuple(x.shape)} and map {tuple(m.shape)} disagree")
    validate_map(m, bank.c_max)
    return x, m, batched


def reblur(aif, dmap, bank: KernelBank, soft: bool = False) -> torch.Tensor:
    """Render the defocused image from an all-in-focus image and a CoC map.

    Differentiable with respect to the bank kernels (and, with ``soft=True``,
    with respect to the map). Output is not clamped.
    """
    x, m, batched = _check_inputs(aif, dmap, bank)
    out = _composite(x, m, bank.c_max, lambda c: lookup(bank, c), soft)
    return _restore(out, batched)


def half_aperture_weights(size: int, side: str, dtype=torch.float64) -> torch.Tensor:
    c = size // 2
    cols = torch.zeros(size, dtype=dtype)
    cols[:c] = 1.0
    cols[c] = 0.5
    if side == "right":
        cols = cols.flip(0)
    elif side != "left":
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    return cols[None, :].expand(size, size)


def half_kernel(kernel: torch.Tensor, side: str) -> torch.Tensor:
    k = kernel * half_aperture_weights(kernel.shape[-1], side, kernel.dtype)
    total = k.sum()
    if not total > 0:
        raise DegenerateKernelError(kernel.shape[-1] // 2, f"no mass in {side} half")
    return k / total


def synthesize_dp_views(aif, dmap, bank: KernelBank, soft: bool = False):
    """Left/right dual-pixel views from half-aperture kernels."""
    x, m, batched = _check_inputs(aif, dmap, bank)
    views = []
    for side in ("left", "right"):
        out = _composite(x, m, bank.c_max, lambda c, s=side: half_kernel(lookup(bank, c), s), soft)
        views.append(_restore(out, batched))
    return tuple(views)


# -- synthetic scenes ----------------------------------------------------------

@dataclass
class SceneSample:
    aif: torch.Tensor
    oof: torch.Tensor
    dp_left: torch.Tensor
    dp_right: torch.Tensor
    gt_map: torch.Tensor | None = None
    depth: torch.Tensor | None = None
    scene_id: str = ""

    def __post_init__(self):
        hw = self.aif.shape[-2:]
        for name in ("oof", "dp_left", "dp_right"):
            if getattr(self, name).shape[-2:] != hw:
                raise ShapeError(f"{name} is {tuple(getattr(self, name).shape)}, expected spatial {tuple(hw)}")
        for name in ("gt_map", "depth"):
            v = getattr(self, name)
            if v is not None and v.shape[-2:] != hw:
                raise ShapeError(f"{name} is {tuple(v.shape)}, expected spatial {tuple(hw)}")

    @property
    def synthetic(self) -> bool:
        return self.gt_map is not None

    def rasters(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        return {k: v for k, v in out.items() if isinstance(v, torch.Tensor)}


TEXTURES = ("noise", "smooth_noise", "checkerboard", "gradient")
LAYOUTS = ("uniform", "two_plane", "quadrants", "ramp")


@dataclass
class SceneDescriptor:
    """What to render. ``coc`` (direct CoC per region) overrides the depth mapping."""

    size: tuple = (64, 64)
    texture: str = "noise"
    depth_layout: str = "two_plane"
    depths: tuple = (1.0, 2.0)
    coc: tuple | None = None
    focal_depth: float = 1.0
    aperture: float = 10.0
    channels: int = 3
    seed: int = 0

    @classmethod
    def from_kv(cls, values: dict) -> "SceneDescriptor":
        known = set(cls.__dataclass_fields__)
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown scene keys: {sorted(unknown)}")
        kw = dict(values)
        for key in ("size", "depths", "coc"):
            if key in kw and kw[key] is not None:
                kw[key] = _as_tuple(kw[key])
        return cls(**kw).validated()

    def validated(self) -> "SceneDescriptor":
        size = tuple(int(s) for s in (self.size if len(self.size) == 2 else (self.size[0],) * 2))
        if min(size) < 1:
            raise ConfigError(f"size must be positive, got {self.size}")
        if self.depth_layout not in LAYOUTS:
            raise ConfigError(f"depth_layout must be one of {LAYOUTS}, got {self.depth_layout!r}")
        if self.texture not in TEXTURES and not Path(str(self.texture)).is_file():
            raise ConfigError(f"texture must be one of {TEXTURES} or an image path, got {self.texture!r}")
        if self.coc is None and (self.focal_depth <= 0 or any(d <= 0 for d in self.depths)):
            raise ConfigError("depths and focal_depth must be positive")
        return replace(self, size=size)

    def to_kv(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def _as_tuple(v):
    if isinstance(v, str):
        v = v.replace("x", ",").split(",")
        return tuple(float(s) if "." in s else int(s) for s in v if s.strip())
    if isinstance(v, (int, float)):
        return (v,)
    return tuple(v)


def depth_to_coc(depth, focal_depth: float, aperture: float, c_max: float | None = None):
    """Thin-lens CoC radius in pixels: aperture * |1/d - 1/d_focus|, optionally clamped."""
    coc = aperture * np.abs(1.0 / np.asarray(depth, dtype=np.float64) - 1.0 / focal_depth)
    if c_max is not None:
        coc = np.clip(coc, 0.0, c_max)
    return coc


def _layout_field(layout: str, values, h: int, w: int) -> np.ndarray:
    """Per-pixel value from a region layout; ``values`` lists one value per region."""
    values = list(values)
    need = {"uniform": 1, "two_plane": 2, "quadrants": 4, "ramp": 2}[layout]
    if len(values) < need:
        raise ConfigError(f"layout {layout!r} needs {need} values, got {values}")
    out = np.empty((h, w))
    if layout == "uniform":
        out[:] = values[0]
    elif layout == "two_plane":
        out[:, : w // 2] = values[0]
        out[:, w // 2 :] = values[1]
    elif layout == "quadrants":
        out[: h // 2, : w // 2] = values[0]
        out[: h // 2, w // 2 :] = values[1]
        out[h // 2 :, : w // 2] = values[2]
        out[h // 2 :, w // 2 :] = values[3]
    else:
        out[:] = np.linspace(values[0], values[1], w)[None, :]
    return out


def make_texture(texture: str, h: int, w: int, channels: int, rng: np.random.Generator) -> np.ndarray:
    """(H, W, C) float64 texture in [0, 1]."""
    if texture == "noise":
        return rng.random((h, w, channels))
    if texture == "smooth_noise":
        img = gaussian_filter(rng.random((h, w, channels)), sigma=(3, 3, 0), mode="wrap")
        lo, hi = img.min(), img.max()
        return 0.1 + 0.8 * (img - lo) / max(hi - lo, 1e-12)
    if texture == "checkerboard":
        block = 8
        cells = rng.random((h // block + 1, w // block + 1, channels))
        return np.kron(cells, np.ones((block, block, 1)))[:h, :w]
    if texture == "gradient":
        yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
        img = np.empty((h, w, channels))
        for ch in range(channels):
            a, b, c0 = rng.uniform(-1, 1, 3)
            img[..., ch] = a * xx + b * yy + c0
            img[..., ch] -= img[..., ch].min()
            img[..., ch] /= max(img[..., ch].max(), 1e-12)
        return img
    img = read_png(texture).astype(np.float64)
    if img.shape[0] < h or img.shape[1] < w:
        raise ConfigError(f"texture image {texture} smaller than {h}x{w}")
    top, left = (img.shape[0] - h) // 2, (img.shape[1] - w) // 2
    img = img[top : top + h, left : left + w]
    if img.shape[2] != channels:
        img = np.repeat(img[..., :1], channels, axis=2)
    return img


def _chw(arr: np.ndarray, dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).to(dtype)


def generate_scene(desc: SceneDescriptor, bank: KernelBank, seed: int | None = None) -> SceneSample:
    """Deterministic synthetic sample with a ground-truth defocus map."""
    desc = desc.validated()
    rng = np.random.default_rng(desc.seed if seed is None else seed)
    h, w = desc.size
    aif = make_texture(str(desc.texture), h, w, desc.channels, rng)
    depth = None
    if desc.coc is not None:
        coc = _layout_field(desc.depth_layout, desc.coc, h, w)
    else:
        depth = _layout_field(desc.depth_layout, desc.depths, h, w)
        coc = depth_to_coc(depth, desc.focal_depth, desc.aperture)
    if coc.min() < 0 or coc.max() > bank.c_max:
        raise RangeError(f"scene CoC range [{coc.min():g}, {coc.max():g}] exceeds bank range 0..{bank.c_max}")

    dtype = bank.kernels[0].dtype
    aif_t = _chw(aif, dtype)
    map_t = torch.from_numpy(coc).to(dtype)
    with torch.no_grad():
        oof = reblur(aif_t, map_t, bank)
        left, right = synthesize_dp_views(aif_t, map_t, bank)
    return SceneSample(
        aif=aif_t.float(),
        oof=oof.clamp(0, 1).float(),
        dp_left=left.clamp(0, 1).float(),
        dp_right=right.clamp(0, 1).float(),
        gt_map=map_t.float(),
        depth=None if depth is None else torch.from_numpy(depth).float(),
    )


# -- scene export ----------------------------------------------------------------

SCENE_FILES = {"aif": "aif.png", "oof": "oof.png", "dp_left": "dp_l.png", "dp_right": "dp_r.png"}


def _hwc(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().transpose(1, 2, 0)


def save_scene(sample: SceneSample, directory) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    for attr, fname in SCENE_FILES.items():
        write_png(d / fname, _hwc(getattr(sample, attr)), bits=16)
        written.append(d / fname)
    if sample.gt_map is not None:
        write_pfm(d / "gt_map.pfm", sample.gt_map.cpu().numpy())
        written.append(d / "gt_map.pfm")
    if sample.depth is not None:
        write_pfm(d / "depth.pfm", sample.depth.cpu().numpy())
        written.append(d / "depth.pfm")
    return written


def load_scene(directory, scene_id: str | None = None) -> SceneSample:
    d = Path(directory)
    rasters = {attr: _chw(read_png(d / fname), torch.float32) for attr, fname in SCENE_FILES.items()}
    gt = torch.from_numpy(read_pfm(d / "gt_map.pfm").copy()) if (d / "gt_map.pfm").exists() else None
    depth = torch.from_numpy(read_pfm(d / "depth.pfm").copy()) if (d / "depth.pfm").exists() else None
    return SceneSample(**rasters, gt_map=gt, depth=depth, scene_id=scene_id or d.name)
