"""Image quality metrics and evaluation reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 99.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW, SIGMA, K1, K2 = 11, 1.5, 0.01, 0.03


def _check(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, data_range: float = 1.0) -> float:
    a, b = _check(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range**2 / mse))


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    g = np.exp(-((np.arange(size) - (size - 1) / 2) ** 2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _filter(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    return np.tensordot(sliding_window_view(x, win.shape), win, axes=([-2, -1], [0, 1]))


def _ssim_terms(a, b, data_range):
    win = gaussian_window()
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mu_a, mu_b = _filter(a, win), _filter(b, win)
    var_a = _filter(a * a, win) - mu_a**2
    var_b = _filter(b * b, win) - mu_b**2
    cov = _filter(a * b, win) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def ssim(a, b, data_range: float = 1.0) -> float:
    a, b = _check(a, b)
    if min(a.shape) < WINDOW:
        raise ValueError(f"images must be at least {WINDOW} pixels on a side")
    return _ssim_terms(a, b, data_range)[0]


def n_scales(size: int, max_scales: int = 5) -> int:
    """Scales whose downsampled image still holds an 11x11 window."""
    if size < WINDOW:
        raise ValueError(f"image side {size} too small for MS-SSIM")
    count = 1
    while count < max_scales and size // 2**count >= WINDOW:
        count += 1
    return count


def scale_weights(count: int) -> np.ndarray:
    w = np.array(MS_SSIM_WEIGHTS[:count])
    return w / w.sum()


def _downsample(x: np.ndarray) -> np.ndarray:
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim(a, b, data_range: float = 1.0) -> float:
    a, b = _check(a, b)
    count = n_scales(min(a.shape))
    weights = scale_weights(count)
    value = 1.0
    for j in range(count):
        s, cs = _ssim_terms(a, b, data_range)
        term = s if j == count - 1 else cs
        value *= max(term, 0.0) ** weights[j]
        a, b = _downsample(a), _downsample(b)
    return value


# -- reports ------------------------------------------------------------------
ROW_FIELDS = ["scenario", "setting", "method", "psnr_mean", "ssim_mean", "count"]
IMAGE_FIELDS = ["scenario", "setting", "method", "image", "psnr", "ssim"]


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    images: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, scenario: str, setting: str, method: str, image: str, p: float, s: float) -> None:
        self.images.append({"scenario": scenario, "setting": setting, "method": method, "image": image, "psnr": p, "ssim": s})

    def aggregate(self) -> None:
        """Rebuild mean rows from per-image values, keeping first-seen order."""
        groups: dict[tuple, list[dict]] = {}
        for rec in self.images:
            groups.setdefault((rec["scenario"], rec["setting"], rec["method"]), []).append(rec)
        self.rows = [
            {
                "scenario": k[0],
                "setting": k[1],
                "method": k[2],
                "psnr_mean": float(np.mean([r["psnr"] for r in recs])),
                "ssim_mean": float(np.mean([r["ssim"] for r in recs])),
                "count": len(recs),
            }
            for k, recs in groups.items()
        ]

    def row(self, setting: str, method: str) -> dict:
        for r in self.rows:
            if r["setting"] == setting and r["method"] == method:
                return r
        raise KeyError((setting, method))

    def to_csv(self) -> str:
        """Summary table, per-image table and metadata in one deterministic text file."""
        out = io.StringIO()
        out.write("# metadata\n")
        for key in sorted(self.metadata):
            out.write(f"# {key}={self.metadata[key]}\n")
        w = csv.writer(out, lineterminator="\n")
        w.writerow(ROW_FIELDS)
        for r in self.rows:
            w.writerow([r["scenario"], r["setting"], r["method"], repr(r["psnr_mean"]), repr(r["ssim_mean"]), r["count"]])
        out.write("\n")
        w.writerow(IMAGE_FIELDS)
        for r in self.images:
            w.writerow([r["scenario"], r["setting"], r["method"], r["image"], repr(r["psnr"]), repr(r["ssim"])])
        return out.getvalue()

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        lines = text.splitlines()
        meta = {}
        body = []
        for line in lines:
            if line.startswith("# ") and "=" in line:
                key, _, value = line[2:].partition("=")
                meta[key] = value
            elif not line.startswith("#"):
                body.append(line)
        blank = body.index("")
        summary = list(csv.DictReader(body[:blank]))
        per_image = list(csv.DictReader(body[blank + 1 :]))
        rows = [
            {**r, "psnr_mean": float(r["psnr_mean"]), "ssim_mean": float(r["ssim_mean"]), "count": int(r["count"])}
            for r in summary
        ]
        images = [{**r, "psnr": float(r["psnr"]), "ssim": float(r["ssim"])} for r in per_image]
        return cls(rows, images, meta)

    @classmethod
    def load(cls, path) -> "EvalReport":
        with open(path) as fh:
            return cls.from_csv(fh.read())

    def __eq__(self, other) -> bool:
        return isinstance(other, EvalReport) and self.to_csv() == other.to_csv()
