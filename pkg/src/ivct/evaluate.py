"""Batch evaluation over settings, with PNG panels and performance-profile plots."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image as PILImage, ImageDraw

from .io import read_grayscale, to_uint16
from .metrics import EvalReport, psnr, ssim
from .physics import NoiseModel, ScanGeometry
from .sampling import SettingSpec
from .training import PhantomDataset, predict

IMAGE_SUFFIXES = (".png", ".pgm", ".tif", ".tiff", ".jpg", ".jpeg", ".bmp")


def load_dataset_dir(path, size: int) -> tuple[list[np.ndarray], list[str]]:
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"dataset directory {path} does not exist")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"no images found in {path}")
    return [read_grayscale(f, size) for f in files], [f.name for f in files]


def evaluate(
    model,
    images,
    settings: list[SettingSpec],
    geometry: ScanGeometry,
    out_path=None,
    *,
    phantom: np.ndarray,
    noise: NoiseModel = NoiseModel(),
    seed: int = 0,
    names: list[str] | None = None,
    dual=None,
    panels_dir=None,
    checksum: str = "",
) -> EvalReport:
    """FBP baseline plus model rows (and the fused dual-domain output when ``dual`` is given)."""
    if not settings:
        raise ValueError("no settings to evaluate")
    if isinstance(images, (str, Path)):
        images, names = load_dataset_dir(images, geometry.image_size)
    if not len(images):
        raise ValueError("empty dataset")
    names = names or [f"img{i:04d}" for i in range(len(images))]
    data = PhantomDataset(images, geometry, noise, phantom, seed)
    idx = list(range(len(data)))
    report = EvalReport(
        metadata={
            "geometry": json.dumps(geometry.summary(), sort_keys=True),
            "seed": seed,
            "checkpoint": checksum or "none",
            "noise": json.dumps([noise.photon_intensity, noise.gaussian_std, noise.enabled]),
        }
    )
    panels_dir = Path(panels_dir) if panels_dir else None
    if panels_dir:
        panels_dir.mkdir(parents=True, exist_ok=True)
    for t in settings:
        outputs = {"fbp": np.stack([data.input(i, data.vector(t)) for i in idx])}
        if model is not None:
            if dual is not None:
                from .dual import predict_dual

                res = predict_dual(model, dual, data, idx, t)
                outputs["proct"], outputs["proct-dual"] = res["image"], res["fused"]
            else:
                outputs["proct"] = predict(model, data, idx, t)
        for method, preds in outputs.items():
            for i in idx:
                target = data.targets[i]
                report.add(t.tag, t.label, method, names[i], psnr(preds[i], target), ssim(preds[i], target))
        if panels_dir:
            best = outputs.get("proct-dual", outputs.get("proct", outputs["fbp"]))
            for i in idx:
                write_panel(panels_dir / f"{t.label}_{Path(names[i]).stem}.png", outputs["fbp"][i], best[i], data.targets[i])
    report.aggregate()
    if out_path:
        report.save(out_path)
    return report


# -- figures ----------------------------------------------------------------------------
def _gray8(a: np.ndarray) -> np.ndarray:
    return (to_uint16(a) >> 8).astype(np.uint8)


def write_panel(path, x: np.ndarray, pred: np.ndarray, target: np.ndarray) -> None:
    """input | output | target, each labelled with its PSNR against the target."""
    h, w = target.shape
    canvas = PILImage.new("L", (3 * w + 4, h + 12), 0)
    draw = ImageDraw.Draw(canvas)
    for k, (img, label) in enumerate([(x, "in"), (pred, "out"), (target, "ref")]):
        canvas.paste(PILImage.fromarray(_gray8(img)), (k * (w + 2), 12))
        text = label if label == "ref" else f"{label} {psnr(img, target):.1f}"
        draw.text((k * (w + 2) + 1, 0), text, fill=255)
    canvas.save(path)


_COLOURS = [(31, 119, 180), (214, 39, 40), (44, 160, 44), (148, 103, 189)]


def plot_profile(report: EvalReport, path, width: int = 480, height: int = 320) -> None:
    """PSNR against setting, one polyline per method, drawn in report row order."""
    settings = list(dict.fromkeys(r["setting"] for r in report.rows))
    methods = list(dict.fromkeys(r["method"] for r in report.rows))
    values = [r["psnr_mean"] for r in report.rows]
    lo, hi = min(values), max(values)
    hi = hi if hi > lo else lo + 1.0
    left, right, top, bottom = 48, 12, 12, 36
    img = PILImage.new("RGB", (width, height), (255, 255, 255))
    draw = ImageDraw.Draw(img)
    draw.rectangle([left, top, width - right, height - bottom], outline=(0, 0, 0))

    def xy(i, value):
        span = max(1, len(settings) - 1)
        x = left + (width - left - right) * (i / span if len(settings) > 1 else 0.5)
        y = height - bottom - (height - top - bottom) * (value - lo) / (hi - lo)
        return x, y

    for i, s in enumerate(settings):
        x, _ = xy(i, lo)
        draw.text((x - 12, height - bottom + 4), s, fill=(0, 0, 0))
    for frac in (0.0, 0.5, 1.0):
        v = lo + frac * (hi - lo)
        draw.text((2, xy(0, v)[1] - 5), f"{v:.1f}", fill=(0, 0, 0))
    for m, method in enumerate(methods):
        colour = _COLOURS[m % len(_COLOURS)]
        pts = [xy(i, report.row(s, method)["psnr_mean"]) for i, s in enumerate(settings)]
        if len(pts) > 1:
            draw.line(pts, fill=colour, width=2)
        for x, y in pts:
            draw.ellipse([x - 3, y - 3, x + 3, y + 3], fill=colour)
        draw.text((left + 6, top + 4 + 12 * m), method, fill=colour)
    img.save(path)
