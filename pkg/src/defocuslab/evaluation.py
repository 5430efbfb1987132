"""Image-quality metrics and report tables.

Metric inputs may be torch tensors laid out (C, H, W) or numpy arrays laid
out (H, W, C) / (H, W), all with values in [0, 1].
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import torch
from scipy.ndimage import correlate1d

from .defocus_estimation import reblur_geometric_loss
from .errors import ShapeError, SizeError

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
LUMA = np.array([0.299, 0.587, 0.114])
CSV_FIELDS = ["scene_id", "psnr_db", "ssim", "mae", "lpips"]
SSIM_FOOTNOTE = (
    "SSIM: luminance (Rec. 601), 11x11 Gaussian window sigma 1.5, K1=0.01, K2=0.03, range 1, "
    "valid windows only. Published numbers may use other conventions; compare orderings, not absolutes."
)


def to_hwc(image) -> np.ndarray:
    if isinstance(image, torch.Tensor):
        arr = image.detach().cpu().double().numpy()
        if arr.ndim == 3:
            arr = arr.transpose(1, 2, 0)
        elif arr.ndim != 2:
            raise ShapeError(f"expected (C, H, W) tensor, got {tuple(image.shape)}")
    else:
        arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise ShapeError(f"expected an image, got shape {arr.shape}")
    return arr


def _pair(pred, target):
    a, b = to_hwc(pred), to_hwc(target)
    if a.shape != b.shape:
        raise ShapeError(f"pred {a.shape} vs target {b.shape}")
    return a, b


def psnr(pred, target) -> float:
    """PSNR in dB with peak 1; identical images give the 100 dB cap."""
    a, b = _pair(pred, target)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def luminance(img: np.ndarray) -> np.ndarray:
    if img.shape[2] == 1:
        return img[..., 0]
    if img.shape[2] != 3:
        raise ShapeError(f"need 1 or 3 channels, got {img.shape[2]}")
    return img @ LUMA


def _gauss1d():
    ax = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(ax**2) / (2 * SSIM_SIGMA**2))
    return g / g.sum()


def _filter_valid(x, g):
    y = correlate1d(correlate1d(x, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    r = SSIM_WINDOW // 2
    return y[r:-r, r:-r]


def ssim(pred, target) -> float:
    a, b = _pair(pred, target)
    x, y = luminance(a), luminance(b)
    if min(x.shape) < SSIM_WINDOW:
        raise SizeError(f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = _gauss1d()
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def mae(pred, target) -> float:
    """Mean absolute error; same computation as the reblur geometric loss."""
    a, b = _pair(pred, target)
    return float(reblur_geometric_loss(torch.from_numpy(a), torch.from_numpy(b)))


# -- reports -------------------------------------------------------------------

def reference_rows(table: str | None = None) -> list[dict]:
    """Published comparison numbers bundled with the package."""
    text = resources.files("defocuslab").joinpath("data/reference_results.csv").read_text()
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        if table is not None and r["table"] != table:
            continue
        for k in ("psnr_db", "ssim", "mae", "lpips"):
            r[k] = float(r[k]) if r[k] else None
        rows.append(r)
    return rows


@dataclass
class MetricsReport:
    rows: list
    aggregates: dict
    metadata: dict = field(default_factory=dict)
    references: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.rows:
            w.writerow([r["scene_id"]] + [_fmt(r[k]) for k in CSV_FIELDS[1:]])
        w.writerow(["mean"] + [_fmt(self.aggregates.get(k)) for k in CSV_FIELDS[1:]])
        return buf.getvalue()

    def to_table(self) -> str:
        header = ["scene / method", "PSNR(dB)", "SSIM", "MAE", "LPIPS"]
        body = [[r["scene_id"]] + [_fmt(r[k], 4) for k in CSV_FIELDS[1:]] for r in self.rows]
        body.append(["mean"] + [_fmt(self.aggregates.get(k), 4) for k in CSV_FIELDS[1:]])
        refs = [[f"{r['method']} [{r['table']}]"] + [_fmt(r[k], 3) for k in CSV_FIELDS[1:]] for r in self.references]
        widths = [max(len(row[i]) for row in [header] + body + refs) for i in range(len(header))]
        line = lambda row: "  ".join(c.ljust(widths[0]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(row))
        rule = "-" * len(line(header))
        out = [line(header), rule, *map(line, body)]
        if refs:
            out += [rule, "published reference rows", *map(line, refs)]
        if self.metadata:
            out += [rule] + [f"{k}: {v}" for k, v in sorted(self.metadata.items())]
        out += [rule, SSIM_FOOTNOTE]
        return "\n".join(out) + "\n"


def _fmt(v, digits=None):
    if v is None:
        return "NA"
    if isinstance(v, str):
        return v
    return f"{v:.{digits}f}" if digits is not None else f"{v:.10g}"


def make_report(pairs, scene_ids=None, lpips_scorer=None, metadata=None, reference_tables=()) -> MetricsReport:
    """Per-pair PSNR/SSIM/MAE (and LPIPS when a scorer is given) with means.

    A missing scorer leaves the LPIPS column absent ("NA"); a failing scorer
    marks the row "ERR" and drops LPIPS from the aggregates.
    """
    pairs = list(pairs)
    scene_ids = list(scene_ids) if scene_ids is not None else [f"{i:04d}" for i in range(len(pairs))]
    if len(scene_ids) != len(pairs):
        raise ShapeError("one scene id per pair required")
    rows = []
    lpips_ok = lpips_scorer is not None
    for sid, (pred, target) in zip(scene_ids, pairs):
        row = {"scene_id": sid, "psnr_db": psnr(pred, target), "ssim": ssim(pred, target), "mae": mae(pred, target)}
        if lpips_scorer is None:
            row["lpips"] = None
        else:
            try:
                row["lpips"] = float(lpips_scorer(pred, target))
            except Exception:  # scorer is external code
                row["lpips"] = "ERR"
                lpips_ok = False
        rows.append(row)
    aggregates = {k: float(np.mean([r[k] for r in rows])) if rows else None for k in ("psnr_db", "ssim", "mae")}
    aggregates["lpips"] = float(np.mean([r["lpips"] for r in rows])) if (lpips_ok and rows) else None
    refs = [r for t in reference_tables for r in reference_rows(t)]
    return MetricsReport(rows, aggregates, dict(metadata or {}), refs)
