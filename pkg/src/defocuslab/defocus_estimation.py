"""Unsupervised defocus-map estimation from dual-pixel views.

The estimator ``f`` maps stacked DP views to a CoC map. There is no ground
truth for the map, so ``f`` is trained through the forward model: the
all-in-focus image is reblurred with the predicted map and the kernel bank,
and the result is compared with the captured blurred image. The kernel bank
itself is refined in alternating phases.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, NumericalError, ShapeError
from .forward_reblur import as_image_batch, as_map_batch, convolve_image, reblur
from .io import read_archive, write_archive
from .psf_kernel import KernelBank, lookup, reproject_bank

log = logging.getLogger(__name__)


@dataclass
class EstimatorConfig:
    lambda_reg: float = 1e-5
    lr: float = 2e-5
    warmup_epochs: int = 10
    alternation_period: int = 5
    total_epochs: int = 30
    c_max: int = 25
    bank_lr: float | None = None
    batch_size: int = 1
    steps_per_epoch: int | None = None
    soft_masks: bool = True
    seed: int = 0

    def validate(self):
        if self.lambda_reg < 0:
            raise ConfigError("lambda_reg must be >= 0")
        if self.lr <= 0 or (self.bank_lr is not None and self.bank_lr <= 0):
            raise ConfigError("learning rates must be > 0")
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ConfigError("need 0 <= warmup_epochs <= total_epochs")
        if self.alternation_period < 1:
            raise ConfigError("alternation_period must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        return self


# -- losses --------------------------------------------------------------------

def reblur_geometric_loss(reblurred, oof) -> torch.Tensor:
    """Mean absolute difference over pixels and channels."""
    a, b = torch.as_tensor(reblurred), torch.as_tensor(oof)
    if a.shape != b.shape:
        raise ShapeError(f"reblurred {tuple(a.shape)} vs oof {tuple(b.shape)}")
    return (a - b).abs().mean()


def map_smoothness(dmap) -> torch.Tensor:
    """Mean over pixels of |dx| + |dy|, forward differences, zero past the far edges."""
    m = as_map_batch(dmap)
    dx = F.pad(m[..., :, 1:] - m[..., :, :-1], (0, 1, 0, 0))
    dy = F.pad(m[..., 1:, :] - m[..., :-1, :], (0, 0, 0, 1))
    return (dx.abs() + dy.abs()).mean()


def total_map_loss(reblurred, oof, dmap, cfg: EstimatorConfig) -> torch.Tensor:
    return reblur_geometric_loss(reblurred, oof) + cfg.lambda_reg * map_smoothness(dmap)


# -- brute-force oracle --------------------------------------------------------------

@torch.no_grad()
def oracle_estimate_map(aif, oof, bank: KernelBank, window: int = 9) -> torch.Tensor:
    """Per-pixel argmin over radius classes of the windowed reblur error.

    Ties go to the smaller class. Returns an (H, W) float map of class values.
    """
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"window must be an odd positive integer, got {window}")
    x, batched = as_image_batch(aif)
    y, _ = as_image_batch(oof)
    if x.shape != y.shape:
        raise ShapeError(f"aif {tuple(x.shape)} vs oof {tuple(y.shape)}")
    x, y = x.double(), y.double()
    half = window // 2
    best_cost = best_class = None
    for c in range(bank.c_max + 1):
        if c > 0 and (2 * c + 1 > 2 * x.shape[-1] - 1 or 2 * c + 1 > 2 * x.shape[-2] - 1):
            break
        blurred = x if c == 0 else convolve_image(x, lookup(bank, c).double())
        err = (blurred - y).abs().mean(dim=1, keepdim=True)
        if half:
            err = F.avg_pool2d(F.pad(err, (half,) * 4, mode="replicate"), window, stride=1)
        if best_cost is None:
            best_cost, best_class = err, torch.zeros_like(err)
        else:
            better = err < best_cost
            best_cost = torch.where(better, err, best_cost)
            best_class = torch.where(better, torch.full_like(err, c), best_class)
    out = best_class[:, 0].float()
    return out if batched else out[0]


# -- estimator network ------------------------------------------------------------------

@dataclass
class EstimatorArch:
    in_channels: int = 6
    width: int = 16
    c_max: int = 25

    def validate(self):
        if self.in_channels < 1 or self.width < 1 or self.c_max < 1:
            raise ConfigError(f"invalid estimator architecture {self}")
        return self


def _conv(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, padding_mode="reflect")


class DefocusEstimator(nn.Module):
    """Two-level encoder-decoder, eight 3x3 convolutions, additive skips.

    The output is squashed with a sigmoid and scaled to [0, c_max].
    """

    def __init__(self, arch: EstimatorArch):
        super().__init__()
        self.arch = arch.validate()
        w = arch.width
        self.inc = _conv(arch.in_channels, w)
        self.down1 = _conv(w, 2 * w, stride=2)
        self.enc2 = _conv(2 * w, 2 * w)
        self.down2 = _conv(2 * w, 4 * w, stride=2)
        self.mid = _conv(4 * w, 4 * w)
        self.up2 = _conv(4 * w, 2 * w)
        self.up1 = _conv(2 * w, w)
        self.head = _conv(w, 1)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x):
        a = self.act
        e1 = a(self.inc(x))
        e2 = a(self.enc2(a(self.down1(e1))))
        b = a(self.mid(a(self.down2(e2))))
        d2 = a(self.up2(F.interpolate(b, size=e2.shape[-2:], mode="bilinear", align_corners=False))) + e2
        d1 = a(self.up1(F.interpolate(d2, size=e1.shape[-2:], mode="bilinear", align_corners=False))) + e1
        return self.arch.c_max * torch.sigmoid(self.head(d1))


def build_estimator_f(arch: EstimatorArch | None = None, seed: int | None = None) -> DefocusEstimator:
    arch = arch or EstimatorArch()
    if seed is None:
        return DefocusEstimator(arch)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return DefocusEstimator(arch)


def stack_dp(left, right) -> torch.Tensor:
    l, _ = as_image_batch(left)
    r, _ = as_image_batch(right)
    return torch.cat([l, r], dim=1)


def predict_map(f: DefocusEstimator, left, right) -> torch.Tensor:
    """Continuous (N, 1, H, W) map from DP views."""
    return f(stack_dp(left, right).to(next(f.parameters()).dtype))


# -- training --------------------------------------------------------------------------

def phase_schedule(cfg: EstimatorConfig) -> list[str]:
    """Which parameter set trains in each epoch: 'f' or 'bank'."""
    phases = ["f"] * cfg.warmup_epochs
    k = 0
    while len(phases) < cfg.total_epochs:
        phase = "bank" if k % 2 == 0 else "f"
        phases.extend([phase] * min(cfg.alternation_period, cfg.total_epochs - len(phases)))
        k += 1
    return phases


@dataclass
class EstimatorHistory:
    rows: list = field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    @property
    def losses(self) -> list[float]:
        return [r["mean_loss"] for r in self.rows]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "phase", "mean_loss", "mean_smoothness"])
            w.writeheader()
            for r in self.rows:
                w.writerow({**r, "mean_loss": f"{r['mean_loss']:.8g}", "mean_smoothness": f"{r['mean_smoothness']:.8g}"})


def _batches(dataset, cfg, gen):
    n = len(dataset)
    steps = cfg.steps_per_epoch or max(1, n // cfg.batch_size)
    order = torch.randperm(n, generator=gen).tolist()
    for s in range(steps):
        idx = [order[(s * cfg.batch_size + j) % n] for j in range(cfg.batch_size)]
        items = [dataset[i] for i in idx]
        yield idx, {
            k: torch.stack([getattr(it, k) for it in items]) for k in ("aif", "oof", "dp_left", "dp_right")
        }


def train_defocus_estimator(dataset, f: DefocusEstimator, bank: KernelBank, cfg: EstimatorConfig, on_epoch=None):
    """Alternating optimization of the estimator and the kernel bank.

    Returns ``(f, bank, history)``; both models are updated in place.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise ConfigError("empty training set")
    if bank.c_max != f.arch.c_max:
        raise ConfigError(f"bank c_max {bank.c_max} != estimator c_max {f.arch.c_max}")
    dtype = next(f.parameters()).dtype
    gen = torch.Generator().manual_seed(cfg.seed)
    f_opt = torch.optim.Adam(f.parameters(), lr=cfg.lr, betas=(0.9, 0.999))
    bank_opt = torch.optim.Adam(bank.parameters(), lr=cfg.bank_lr or cfg.lr, betas=(0.9, 0.999))
    history = EstimatorHistory()

    for epoch, phase in enumerate(phase_schedule(cfg), 1):
        train_f = phase == "f"
        f.train(train_f)
        for p in f.parameters():
            p.requires_grad_(train_f)
        bank.trainable = not train_f
        opt = f_opt if train_f else bank_opt
        losses, smooth = [], []
        for idx, batch in _batches(dataset, cfg, gen):
            aif = batch["aif"].to(dtype)
            oof = batch["oof"].to(dtype)
            with torch.set_grad_enabled(train_f):
                dmap = predict_map(f, batch["dp_left"], batch["dp_right"])
            reblurred = reblur(aif, dmap, bank, soft=cfg.soft_masks)
            loss = total_map_loss(reblurred, oof, dmap, cfg)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch} ({phase} phase), samples {idx}")
            # a bank step on an all-zero map touches no trainable kernel
            if loss.requires_grad:
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                if not train_f:
                    reproject_bank(bank)
            losses.append(float(loss.detach()))
            smooth.append(float(map_smoothness(dmap.detach())))
        row = dict(epoch=epoch, phase=phase, mean_loss=float(np.mean(losses)), mean_smoothness=float(np.mean(smooth)))
        history.append(**row)
        log.info("epoch %d [%s] L_DM=%.6f smooth=%.4f", epoch, phase, row["mean_loss"], row["mean_smoothness"])
        if on_epoch is not None:
            on_epoch(row)

    for p in f.parameters():
        p.requires_grad_(True)
    bank.trainable = False
    f.eval()
    return f, bank, history


# -- checkpoints ----------------------------------------------------------------------

def save_estimator(f: DefocusEstimator, path):
    header = {"kind": "defocus_estimator", **asdict(f.arch)}
    write_archive(path, header, {k: v.detach().cpu().numpy() for k, v in f.state_dict().items()})


def load_estimator(path) -> DefocusEstimator:
    header, arrays = read_archive(path)
    if header.get("kind") != "defocus_estimator":
        raise ConfigError(f"{path} is not an estimator checkpoint")
    arch = EstimatorArch(**{k: header[k] for k in ("in_channels", "width", "c_max")})
    f = DefocusEstimator(arch)
    f.load_state_dict({k: torch.from_numpy(v.astype(np.float32)) for k, v in arrays.items()})
    f.eval()
    return f
