"""Defocus-map-guided multi-scale deblurring generator.

A defocus map guide block (DGB) runs several branches over the same
features, each sized for one range of CoC radii, and blends them with
per-pixel masks derived from the defocus map. The blend weight on the masks
is annealed to zero during training, after which the generator no longer
needs a map.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError
from .forward_reblur import as_map_batch, quantize_map
from .io import read_archive, write_archive


@dataclass(frozen=True)
class DGBConfig:
    branch_boundaries: tuple = (0, 1, 5, 12, 25)
    # 0 means one plain convolution, k > 0 means k RCABs
    branch_depths: tuple = (0, 1, 2, 3)
    base_channels: int = 32
    # downsample factors relative to the input: full, 1/4, 1/8
    scales: tuple = (1, 4, 8)
    in_channels: int = 3
    reduction: int = 4
    c_max: int = 25

    def validate(self):
        b = tuple(self.branch_boundaries)
        if len(b) < 2 or any(y <= x for x, y in zip(b, b[1:])) or b[0] != 0 or b[-1] != self.c_max:
            raise ConfigError(f"branch_boundaries must increase from 0 to c_max={self.c_max}, got {b}")
        if len(self.branch_depths) != len(b) - 1:
            raise ConfigError("need one branch depth per CoC range")
        if any(d < 0 for d in self.branch_depths):
            raise ConfigError("branch depths must be >= 0")
        s = tuple(self.scales)
        if not s or s[0] != 1 or any(y <= x or y % x for x, y in zip(s, s[1:])):
            raise ConfigError(f"scales must start at 1 and increase by integer ratios, got {s}")
        if self.base_channels < 4 or self.in_channels < 1 or self.reduction < 1:
            raise ConfigError("base_channels >= 4, in_channels >= 1, reduction >= 1 required")
        return self

    @property
    def num_branches(self) -> int:
        return len(self.branch_depths)

    def with_ablation(self, no_dg=False, no_ms=False, no_rcab=False) -> "DGBConfig":
        kw = asdict(self)
        if no_dg:
            kw["branch_boundaries"] = (0, self.c_max)
            kw["branch_depths"] = (max(self.branch_depths),)
        if no_rcab:
            kw["branch_depths"] = tuple(0 for _ in kw["branch_depths"])
        if no_ms:
            kw["scales"] = (1,)
        return DGBConfig(**kw).validate()


# -- annealing --------------------------------------------------------------------

@dataclass(frozen=True)
class AnnealSchedule:
    w0: float = 1.0
    total_iters: int = 20_000
    kind: str = "exponential"
    tau: float | None = None

    @property
    def time_constant(self) -> float:
        return self.tau if self.tau is not None else self.total_iters / 5.0


def guidance_weight(schedule: AnnealSchedule, t: int) -> float:
    """Mask-guidance weight at iteration ``t``; exactly zero from ``total_iters`` on."""
    if t < 0:
        raise ValueError("iteration must be >= 0")
    if t >= schedule.total_iters:
        return 0.0
    if schedule.kind == "exponential":
        return schedule.w0 * math.exp(-t / schedule.time_constant)
    if schedule.kind == "linear":
        return schedule.w0 * (1.0 - t / schedule.total_iters)
    raise ConfigError(f"unknown schedule kind {schedule.kind!r}")


# -- building blocks ----------------------------------------------------------------

def conv3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


class ChannelAttention(nn.Module):
    def __init__(self, channels, reduction=4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.squeeze = nn.Conv2d(channels, hidden, 1)
        self.excite = nn.Conv2d(hidden, channels, 1)

    def scales(self, x):
        return torch.sigmoid(self.excite(F.relu(self.squeeze(self.pool(x)))))

    def forward(self, x):
        return x * self.scales(x)


class RCAB(nn.Module):
    """conv -> ReLU -> conv -> channel attention, plus identity skip."""

    def __init__(self, channels, reduction=4):
        super().__init__()
        self.conv1 = conv3(channels, channels)
        self.conv2 = conv3(channels, channels)
        self.attention = ChannelAttention(channels, reduction)

    def forward(self, x):
        return x + self.attention(self.conv2(F.relu(self.conv1(x))))


def rcab_forward(block: RCAB, features: torch.Tensor) -> torch.Tensor:
    return block(features)


class Branch(nn.Module):
    """U-Net-like branch: two encoder convs, one stride-2 descent, a body of
    plain conv or RCABs at half resolution, and a decoder with a skip."""

    def __init__(self, channels, depth, reduction=4):
        super().__init__()
        c2 = 2 * channels
        self.head = conv3(channels, channels)
        self.enc = conv3(channels, channels)
        self.down = conv3(channels, c2, stride=2)
        self.mid = conv3(c2, c2)
        if depth == 0:
            self.body = nn.Sequential(conv3(c2, c2), nn.LeakyReLU(0.2))
        else:
            self.body = nn.Sequential(*[RCAB(c2, reduction) for _ in range(depth)])
        self.up = conv3(c2, channels)
        self.dec = conv3(channels, channels)
        self.tail = conv3(channels, channels)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x):
        a = self.act
        skip = a(self.enc(a(self.head(x))))
        y = self.body(a(self.mid(a(self.down(skip)))))
        y = a(self.up(F.interpolate(y, size=skip.shape[-2:], mode="bilinear", align_corners=False)))
        return self.tail(a(self.dec(y + skip)))


def blend_masks(dmap, weight: float, boundaries, c_max) -> torch.Tensor:
    """M_i = weight * K_i + (1 - weight) / N, shape (N, K, H, W)."""
    k = quantize_map(dmap, boundaries, c_max=c_max).masks
    return weight * k + (1.0 - weight) / k.shape[1]


class DGB(nn.Module):
    def __init__(self, channels, cfg: DGBConfig):
        super().__init__()
        self.cfg = cfg
        self.branches = nn.ModuleList(Branch(channels, d, cfg.reduction) for d in cfg.branch_depths)

    def forward(self, x, dmap=None, weight: float = 0.0):
        if not 0.0 <= weight <= 1.0:
            raise ValueError(f"guidance weight must be in [0, 1], got {weight}")
        n = len(self.branches)
        outs = [b(x) for b in self.branches]
        if weight == 0.0 or n == 1:
            # unguided mixture, independent of the map
            total = outs[0] * (1.0 / n)
            for o in outs[1:]:
                total = total + o * (1.0 / n)
            return total
        if dmap is None:
            raise ValueError("guidance weight > 0 requires a defocus map")
        m = as_map_batch(dmap, n=x.shape[0]).to(x.dtype)
        if m.shape[-2:] != x.shape[-2:]:
            raise ShapeError(f"map {tuple(m.shape[-2:])} does not match features {tuple(x.shape[-2:])}")
        masks = blend_masks(m, weight, self.cfg.branch_boundaries, self.cfg.c_max)
        total = outs[0] * masks[:, 0:1]
        for i in range(1, n):
            total = total + outs[i] * masks[:, i : i + 1]
        return total


def dgb_forward(block: DGB, features, dmap, weight: float):
    return block(features, dmap, weight)


def downscale_map(dmap: torch.Tensor, factor: int) -> torch.Tensor:
    """Area average; the DGB re-quantizes the result."""
    return dmap if factor == 1 else F.avg_pool2d(dmap, factor)


class DefocusGenerator(nn.Module):
    def __init__(self, cfg: DGBConfig = DGBConfig()):
        super().__init__()
        self.cfg = cfg.validate()
        # half the channels at 1/4, a quarter at 1/8
        chans = [max(4, cfg.base_channels >> i) for i in range(len(cfg.scales))]
        self.channels = chans
        self.head = conv3(cfg.in_channels, chans[0])
        self.downs = nn.ModuleList(conv3(chans[i - 1], chans[i]) for i in range(1, len(chans)))
        self.dgbs = nn.ModuleList(DGB(c, cfg) for c in chans)
        self.fuses = nn.ModuleList(nn.Conv2d(chans[i] + chans[i + 1], chans[i], 1) for i in range(len(chans) - 1))
        self.tail = conv3(chans[0], cfg.in_channels)
        with torch.no_grad():
            self.tail.weight.mul_(0.1)
            self.tail.bias.zero_()
        self.act = nn.LeakyReLU(0.2)

    @property
    def multiple(self) -> int:
        return 8 if len(self.cfg.scales) == 1 else self.cfg.scales[-1]

    def forward(self, oof, dmap=None, weight: float = 0.0):
        if weight > 0 and dmap is None:
            raise ValueError("guidance weight > 0 requires a defocus map")
        batched = oof.ndim == 4
        x = oof if batched else oof[None]
        h, w = x.shape[-2:]
        k = self.multiple
        ph, pw = (-h) % k, (-w) % k
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="reflect")
        m = None
        if dmap is not None and weight > 0:
            m = as_map_batch(dmap, n=x.shape[0]).to(x.dtype)
            if m.shape[-2:] != (h, w):
                raise ShapeError(f"map {tuple(m.shape[-2:])} does not match image {(h, w)}")
            if ph or pw:
                m = F.pad(m, (0, pw, 0, ph), mode="reflect")

        feats = []
        f = self.act(self.head(x))
        prev = 1
        for i, s in enumerate(self.cfg.scales):
            if i > 0:
                f = self.act(self.downs[i - 1](F.avg_pool2d(f, s // prev)))
            mi = None if m is None else downscale_map(m, s)
            f = self.dgbs[i](f, mi, weight)
            feats.append(f)
            prev = s
        g = feats[-1]
        for i in range(len(feats) - 2, -1, -1):
            up = F.interpolate(g, size=feats[i].shape[-2:], mode="bilinear", align_corners=False)
            g = self.act(self.fuses[i](torch.cat([feats[i], up], dim=1)))
        out = x + self.tail(g)
        out = out[..., :h, :w]
        return out if batched else out[0]


def generator_forward(generator: DefocusGenerator, oof, dmap=None, weight: float = 0.0):
    return generator(oof, dmap, weight)


def _tile_starts(length: int, tile: int, step: int) -> list[int]:
    starts = [0]
    while starts[-1] + tile < length:
        starts.append(starts[-1] + step)
    return starts


def _ramp(length: int, start: int, end: int, overlap: int, total: int) -> torch.Tensor:
    """1-D blend weights for core [start, end); ramps only where a neighbour overlaps."""
    x = torch.arange(start, end, dtype=torch.float64)
    w = torch.ones(end - start, dtype=torch.float64)
    if start > 0:
        w = torch.minimum(w, (x - start + 0.5) / overlap)
    if end < total:
        w = torch.minimum(w, (end - x - 0.5) / overlap)
    return w


@torch.no_grad()
def tiled_forward(generator: DefocusGenerator, oof, tile: int = 512, overlap: int = 64, halo: int = 192,
                  align: int = 16) -> torch.Tensor:
    """Map-free inference in overlapping tiles with linear blending.

    Each tile core is computed with ``halo`` pixels of extra context and tile
    origins sit on multiples of ``align`` so pooling grids line up with the
    untiled pass. With a halo wider than the receptive field and image sides
    that are multiples of ``align`` the result matches the untiled pass up to
    rounding. Channel attention pools over its window rather than the whole
    image, so RCAB generators can differ by a small amount everywhere.
    """
    if tile % align or overlap % align or halo % align or not 0 < overlap < tile:
        raise ConfigError(f"tile, overlap and halo must be multiples of {align} with 0 < overlap < tile")
    batched = oof.ndim == 4
    x = oof if batched else oof[None]
    h, w = x.shape[-2:]
    if h <= tile and w <= tile:
        out = generator(x)
        return out if batched else out[0]
    out = torch.zeros(x.shape, dtype=torch.float64)
    wsum = torch.zeros((1, 1, h, w), dtype=torch.float64)
    step = tile - overlap
    for top in _tile_starts(h, tile, step):
        bottom = min(top + tile, h)
        wy = _ramp(h, top, bottom, overlap, h)
        for left in _tile_starts(w, tile, step):
            right = min(left + tile, w)
            wx = _ramp(w, left, right, overlap, w)
            y0, x0 = max(0, top - halo), max(0, left - halo)
            # window extents on the same grid so stride-2 paths resample identically
            y1 = min(h, y0 + -(-(bottom + halo - y0) // align) * align)
            x1 = min(w, x0 + -(-(right + halo - x0) // align) * align)
            pred = generator(x[..., y0:y1, x0:x1]).double()
            core = pred[..., top - y0 : bottom - y0, left - x0 : right - x0]
            weight = (wy[:, None] * wx[None, :])[None, None]
            out[..., top:bottom, left:right] += core * weight
            wsum[..., top:bottom, left:right] += weight
    out = (out / wsum).to(x.dtype)
    return out if batched else out[0]


def branch_parameters(generator: DefocusGenerator, index: int):
    """All parameters of branch ``index`` across every scale."""
    for dgb in generator.dgbs:
        yield from dgb.branches[index].parameters()


# -- checkpoints ----------------------------------------------------------------------

def _header_from(cfg, kind):
    return {"kind": kind, **{k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()}}


def save_generator(g: DefocusGenerator, path):
    write_archive(path, _header_from(g.cfg, "generator"), {k: v.detach().cpu().numpy() for k, v in g.state_dict().items()})


def load_generator(path) -> DefocusGenerator:
    header, arrays = read_archive(path)
    if header.get("kind") != "generator":
        raise ConfigError(f"{path} is not a generator checkpoint")
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in header.items() if k in DGBConfig.__dataclass_fields__}
    g = DefocusGenerator(DGBConfig(**kw))
    g.load_state_dict({k: torch.from_numpy(v.astype(np.float32)) for k, v in arrays.items()})
    g.eval()
    return g
