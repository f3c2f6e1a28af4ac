"""Multi-granulation training loss and PSNR/SSIM evaluation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, Tensor, absolute, mean


@dataclass(frozen=True)
class LossWeights:
    lambda_r: float = 1.0
    lambda_s: float = 1.0

    def __post_init__(self):
        if self.lambda_r < 0 or self.lambda_s < 0:
            raise ValueError("loss weights must be non-negative")


def _outputs(outputs):
    if hasattr(outputs, "supervised"):
        return outputs.supervised()
    return list(outputs)


def l1(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"L1: shape mismatch {a.shape} vs {b.shape}")
    return mean(absolute(a - b))


def reconstruction_loss(outputs, target: Tensor) -> Tensor:
    """Sum over supervised outputs of the mean absolute error to ``target``.

    The plain SGN-1 pass is not supervised when a back output exists.
    """
    outs = _outputs(outputs)
    loss = l1(outs[0], target)
    for o in outs[1:]:
        loss = loss + l1(o, target)
    return loss


def total_variation(x: Tensor) -> Tensor:
    """mean |forward difference in x| + mean |forward difference in y|."""
    if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise DimensionError(f"total variation needs at least 2x2 spatial extent, got {x.shape}")
    dx = x[:, :, :, 1:] - x[:, :, :, :-1]
    dy = x[:, :, 1:, :] - x[:, :, :-1, :]
    return mean(absolute(dx)) + mean(absolute(dy))


def smoothness_loss(outputs) -> Tensor:
    outs = _outputs(outputs)
    loss = total_variation(outs[0])
    for o in outs[1:]:
        loss = loss + total_variation(o)
    return loss


def multi_granulation_loss(outputs, target: Tensor, weights: LossWeights = LossWeights(),
                           parts: dict | None = None) -> Tensor:
    """lambda_r * reconstruction + lambda_s * smoothness.

    Means run over the whole batch tensor, which averages per-image losses.
    If ``parts`` is given it receives the float values of both terms.
    """
    rec = reconstruction_loss(outputs, target)
    smooth = smoothness_loss(outputs)
    if parts is not None:
        parts["recon"] = float(rec.data)
        parts["smooth"] = float(smooth.data)
    return rec * weights.lambda_r + smooth * weights.lambda_s


# -- metrics -------------------------------------------------------------------

def _arr(x):
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise DimensionError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, g):
    rows = sliding_window_view(img, g.size, axis=0) @ g
    return sliding_window_view(rows, g.size, axis=1) @ g


def _ssim_plane(a, b, g, c1, c2):
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         peak: float = 1.0) -> float:
    """Mean local SSIM with a Gaussian window, averaged over channels.

    Accepts (H, W), (C, H, W) or (1, C, H, W) arrays.
    """
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise DimensionError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 4:
        a, b = a.reshape(-1, *a.shape[2:]), b.reshape(-1, *b.shape[2:])
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape[1] < window or a.shape[2] < window:
        raise DimensionError(f"ssim: image {a.shape[1]}x{a.shape[2]} smaller than {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    return float(np.mean([_ssim_plane(pa, pb, g, c1, c2) for pa, pb in zip(a, b)]))


@dataclass
class MetricsReport:
    image_ids: list = field(default_factory=list)
    psnr_db: list = field(default_factory=list)
    ssim: list = field(default_factory=list)

    def add(self, image_id, psnr_value, ssim_value):
        self.image_ids.append(str(image_id))
        self.psnr_db.append(float(psnr_value))
        self.ssim.append(float(ssim_value))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_db)) if self.psnr_db else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else math.nan

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image_id", "psnr_db", "ssim"])
            for row in zip(self.image_ids, self.psnr_db, self.ssim):
                w.writerow([row[0], f"{row[1]:.6f}", f"{row[2]:.6f}"])
            w.writerow(["mean", f"{self.mean_psnr:.6f}", f"{self.mean_ssim:.6f}"])

    @classmethod
    def read_csv(cls, path) -> "MetricsReport":
        rep = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                if row["image_id"] == "mean":
                    continue
                rep.add(row["image_id"], float(row["psnr_db"]), float(row["ssim"]))
        return rep
