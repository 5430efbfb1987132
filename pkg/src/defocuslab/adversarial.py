"""Patch critic, defocus-weighted adversarial losses and the GAN training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .deblur_generator import AnnealSchedule, DefocusGenerator, guidance_weight
from .errors import CapabilityError, ConfigError, NumericalError, ShapeError
from .forward_reblur import as_map_batch
from .io import read_archive, write_archive

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.012
    beta: float = 0.002
    gp_coeff: float = 10.0
    gamma: float = 1.0

    def validate(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ConfigError(f"{k} must be >= 0, got {v}")
        return self


# -- discriminator ---------------------------------------------------------------

@dataclass(frozen=True)
class DiscriminatorConfig:
    in_channels: int = 3
    width: int = 64


class PatchDiscriminator(nn.Module):
    """Three stride-2 4x4 convolutions; unbounded patch scores, 1/8 input resolution."""

    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        if cfg.in_channels < 1 or cfg.width < 1:
            raise ConfigError(f"invalid discriminator config {cfg}")
        self.cfg = cfg
        w = cfg.width
        self.net = nn.Sequential(
            nn.Conv2d(cfg.in_channels, w, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(w, 2 * w, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * w, 1, 4, stride=2, padding=1),
        )

    def forward(self, x):
        return self.net(x)


def build_discriminator(cfg: DiscriminatorConfig = DiscriminatorConfig(), seed: int | None = None) -> PatchDiscriminator:
    if seed is None:
        return PatchDiscriminator(cfg)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return PatchDiscriminator(cfg)


def score_grid_size(size: int) -> int:
    for _ in range(3):
        size = (size + 2 - 4) // 2 + 1
    return size


# -- defocus weights and adversarial losses ---------------------------------------------

def defocus_weights(dmap, out_shape, gamma: float = 1.0, c_max: float = 25.0) -> torch.Tensor:
    """Per-sample mean-1 weights that grow with the pooled CoC, shape (N, 1, h, w)."""
    m = as_map_batch(dmap).to(torch.float64)
    pooled = F.adaptive_avg_pool2d(m, tuple(out_shape))
    raw = 1.0 + gamma * pooled / c_max
    flat = raw.flatten(1)
    constant = (flat == flat[:, :1]).all(dim=1)
    w = raw / flat.mean(dim=1).view(-1, 1, 1, 1)
    w = torch.where(constant.view(-1, 1, 1, 1), torch.ones_like(w), w)
    src = torch.as_tensor(dmap)
    return w.to(src.dtype if src.is_floating_point() else torch.float32)


def _check(scores, wmap):
    try:
        ok = torch.broadcast_shapes(scores.shape, wmap.shape) == scores.shape
    except RuntimeError:
        ok = False
    if not ok:
        raise ShapeError(f"scores {tuple(scores.shape)} vs weights {tuple(wmap.shape)}")


def defocus_adv_loss_G(disc_scores, wmap) -> torch.Tensor:
    """Negative weighted mean critic score on generated images."""
    _check(disc_scores, wmap)
    return -(wmap.to(disc_scores.dtype) * disc_scores).mean()


def disc_loss(real_scores, fake_scores, wmap, gp, gp_coeff: float = 10.0) -> torch.Tensor:
    """Weighted critic loss; the same weights apply to real and fake scores."""
    _check(real_scores, wmap)
    _check(fake_scores, wmap)
    w = wmap.to(real_scores.dtype)
    return (w * fake_scores).mean() - (w * real_scores).mean() + gp_coeff * gp


def gradient_penalty(disc, real, fake, generator: torch.Generator | None = None, create_graph: bool = True):
    """Mean over samples of (||grad of mean patch score at interpolates|| - 1)^2."""
    if real.shape != fake.shape:
        raise ShapeError(f"real {tuple(real.shape)} vs fake {tuple(fake.shape)}")
    n = real.shape[0]
    eps = torch.rand((n, 1, 1, 1), generator=generator, dtype=real.dtype, device=real.device)
    x_hat = (eps * real.detach() + (1 - eps) * fake.detach()).requires_grad_(True)
    scores = disc(x_hat).flatten(1).mean(dim=1)
    (grad,) = torch.autograd.grad(scores.sum(), x_hat, create_graph=create_graph)
    norms = grad.flatten(1).norm(dim=1)
    if not torch.isfinite(norms).all():
        raise NumericalError("non-finite critic gradient in gradient penalty")
    return ((norms - 1.0) ** 2).mean()


# -- perceptual loss ----------------------------------------------------------------

class RandomConvExtractor(nn.Module):
    """Frozen fixed-seed 3-layer conv feature map, for tests and offline runs."""

    def __init__(self, in_channels=3, width=8, seed=0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        shapes = [(width, in_channels, 3, 3), (width, width, 3, 3), (width, width, 3, 3)]
        self.weights = nn.ParameterList(
            nn.Parameter(torch.randn(s, generator=g) / np.sqrt(s[1] * 9), requires_grad=False) for s in shapes
        )

    def forward(self, x):
        w = [p.to(x.dtype) for p in self.weights]
        x = F.relu(F.conv2d(x, w[0], padding=1))
        x = F.relu(F.conv2d(x, w[1], padding=1, stride=2))
        return F.conv2d(x, w[2], padding=1)


class VGGConv33Extractor(nn.Module):
    """VGG19 features up to conv3_3 (pre-activation), ImageNet normalization."""

    def __init__(self, weights_path=None):
        super().__init__()
        try:
            from torchvision.models import vgg19
        except ImportError as exc:
            raise CapabilityError("torchvision is required for the VGG19 perceptual extractor") from exc
        path = Path(weights_path) if weights_path else self.default_weights_path()
        if path is None or not path.is_file():
            raise CapabilityError(
                f"pretrained VGG19 weights not found ({path}); pass weights_path or use RandomConvExtractor"
            )
        net = vgg19(weights=None)
        net.load_state_dict(torch.load(path, map_location="cpu"))
        self.features = net.features[:15].eval()
        for p in self.features.parameters():
            p.requires_grad_(False)
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    @staticmethod
    def default_weights_path():
        hub = Path(torch.hub.get_dir()) / "checkpoints"
        found = sorted(hub.glob("vgg19-*.pth")) if hub.is_dir() else []
        return found[0] if found else None

    def forward(self, x):
        return self.features((x - self.mean.to(x.dtype)) / self.std.to(x.dtype))


def perceptual_loss(pred, target, extractor) -> torch.Tensor:
    if extractor is None:
        raise CapabilityError("no feature extractor configured for the perceptual loss")
    return F.mse_loss(extractor(pred), extractor(target))


def content_loss(pred, target) -> torch.Tensor:
    return (pred - target).abs().mean()


def generator_loss(pred, target, disc_scores, wmap, cfg: LossConfig, extractor=None):
    """Content L1 + alpha * perceptual + beta * defocus adversarial.

    Returns ``(total, components)``; a zero-weighted term is not evaluated.
    """
    lc = content_loss(pred, target)
    zero = lc.new_zeros(())
    lp = perceptual_loss(pred, target, extractor) if cfg.alpha > 0 else zero
    ladv = defocus_adv_loss_G(disc_scores, wmap) if (cfg.beta > 0 and disc_scores is not None) else zero
    total = lc + cfg.alpha * lp + cfg.beta * ladv
    return total, {"L_c": lc, "L_p": lp, "L_adv": ladv}


# -- training loop -------------------------------------------------------------------

@dataclass
class GanTrainConfig:
    lr: float = 2e-4
    betas: tuple = (0.9, 0.999)
    batch_size: int = 4
    lr_halving_epochs: int = 30
    epochs: int = 90
    max_iters: int | None = None
    steps_per_epoch: int | None = None
    loss: LossConfig = field(default_factory=LossConfig)
    use_gan: bool = True
    c_max: int = 25
    seed: int = 0

    def validate(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1 or self.lr_halving_epochs < 1:
            raise ConfigError(f"invalid GAN training config {self}")
        self.loss.validate()
        return self


def lr_at_epoch(base_lr: float, epoch: int, halving: int = 30) -> float:
    """Learning rate for 1-based ``epoch``; halves after every ``halving`` epochs."""
    return base_lr * 0.5 ** ((epoch - 1) // halving)


GAN_HISTORY_FIELDS = ["epoch", "iter", "L_c", "L_p", "L_adv", "L_D", "gp", "guidance_weight", "lr"]


@dataclass
class GanHistory:
    rows: list = field(default_factory=list)
    iter_content: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=GAN_HISTORY_FIELDS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in r.items()})


def _nan_guard(values: dict, it: int, idx):
    for k, v in values.items():
        if not torch.isfinite(torch.as_tensor(v)).all():
            raise NumericalError(f"non-finite {k} at iteration {it}, batch samples {idx}")


def train_defocusgan(dataset, generator: DefocusGenerator, disc: PatchDiscriminator | None, maps_source,
                     cfg: GanTrainConfig, schedule: AnnealSchedule = AnnealSchedule(), extractor=None,
                     on_epoch=None):
    """Alternate one critic step and one generator step per batch.

    ``maps_source(i)`` returns the defocus map for sample ``i``; it is treated
    as frozen input. Returns ``(generator, disc, history)``.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise ConfigError("empty training set")
    use_gan = cfg.use_gan and disc is not None and cfg.loss.beta > 0
    gen_rng = torch.Generator().manual_seed(cfg.seed)
    gp_rng = torch.Generator().manual_seed(cfg.seed + 1)
    g_opt = torch.optim.Adam(generator.parameters(), lr=cfg.lr, betas=tuple(cfg.betas))
    d_opt = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=tuple(cfg.betas)) if use_gan else None
    history = GanHistory()
    n = len(dataset)
    steps = cfg.steps_per_epoch or max(1, n // cfg.batch_size)
    it = 0

    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at_epoch(cfg.lr, epoch, cfg.lr_halving_epochs)
        for opt in (g_opt, d_opt):
            if opt is not None:
                for group in opt.param_groups:
                    group["lr"] = lr
        generator.train()
        sums = {k: 0.0 for k in ("L_c", "L_p", "L_adv", "L_D", "gp")}
        count = 0
        order = torch.randperm(n, generator=gen_rng).tolist()
        for s in range(steps):
            if cfg.max_iters is not None and it >= cfg.max_iters:
                break
            idx = [order[(s * cfg.batch_size + j) % n] for j in range(cfg.batch_size)]
            oof = torch.stack([dataset[i].oof for i in idx])
            aif = torch.stack([dataset[i].aif for i in idx])
            dmap = torch.stack([torch.as_tensor(maps_source(i)).float() for i in idx])
            w = guidance_weight(schedule, it)

            ld = gp = torch.zeros(())
            fake = generator(oof, dmap, w)
            if use_gan:
                wmap_shape = disc(aif[:1]).shape[-2:]
                wmap = defocus_weights(dmap, wmap_shape, cfg.loss.gamma, cfg.c_max).float()
                for p in disc.parameters():
                    p.requires_grad_(True)
                gp = gradient_penalty(disc, aif, fake, gp_rng)
                ld = disc_loss(disc(aif), disc(fake.detach()), wmap, gp, cfg.loss.gp_coeff)
                _nan_guard({"L_D": ld}, it, idx)
                d_opt.zero_grad(set_to_none=True)
                ld.backward()
                d_opt.step()
                for p in disc.parameters():
                    p.requires_grad_(False)
                scores = disc(fake)
            else:
                scores = wmap = None
            loss_cfg = cfg.loss if use_gan else LossConfig(cfg.loss.alpha, 0.0, cfg.loss.gp_coeff, cfg.loss.gamma)
            lg, parts = generator_loss(fake, aif, scores, wmap, loss_cfg, extractor)
            _nan_guard({"L_G": lg, **parts}, it, idx)
            g_opt.zero_grad(set_to_none=True)
            lg.backward()
            g_opt.step()

            history.iter_content.append(float(parts["L_c"].detach()))
            for k, v in (*parts.items(), ("L_D", ld), ("gp", gp)):
                sums[k] += float(v.detach())
            count += 1
            it += 1
        if count == 0:
            break
        row = {"epoch": epoch, "iter": it, **{k: v / count for k, v in sums.items()},
               "guidance_weight": float(guidance_weight(schedule, it - 1)), "lr": lr}
        history.rows.append(row)
        log.info("epoch %d iter %d L_c=%.5f L_D=%.5f w=%.4f", epoch, it, row["L_c"], row["L_D"], row["guidance_weight"])
        if on_epoch is not None:
            on_epoch(row)

    if use_gan:
        for p in disc.parameters():
            p.requires_grad_(True)
    generator.eval()
    if guidance_weight(schedule, it) == 0.0:
        # annealing finished: single-image inference must work without a map
        with torch.no_grad():
            out = generator(dataset[0].oof[None], None, 0.0)
        _nan_guard({"map-free validation output": out}, it, [0])
    return generator, disc, history


# -- checkpoints ------------------------------------------------------------------------

def save_discriminator(d: PatchDiscriminator, path):
    header = {"kind": "discriminator", **asdict(d.cfg)}
    write_archive(path, header, {k: v.detach().cpu().numpy() for k, v in d.state_dict().items()})


def load_discriminator(path) -> PatchDiscriminator:
    header, arrays = read_archive(path)
    if header.get("kind") != "discriminator":
        raise ConfigError(f"{path} is not a discriminator checkpoint")
    d = PatchDiscriminator(DiscriminatorConfig(header["in_channels"], header["width"]))
    d.load_state_dict({k: torch.from_numpy(v.astype(np.float32)) for k, v in arrays.items()})
    return d
