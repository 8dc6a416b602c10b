"""Baseline-vs-model evaluation on held-out volumes, plus slice figures."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .metrics import EvalReport, aggregate, psnr, ssim3d
from .volume import DegradationConfig, cubic_interpolate, degrade

ZOOM_COLOR = (40, 90, 255)


def evaluate_volumes(volumes, dc: DegradationConfig, model, method: str, image_dir=None,
                     zoom_box=(8, 8, 16), image_scale: int = 4) -> EvalReport:
    """Score cubic interpolation and ``model`` on ``(volume_id, hr)`` pairs.

    ``model`` maps an LR volume to its SR estimate. Metrics are computed on
    whole (stitched) volumes.
    """
    rows = []
    for vid, hr in volumes:
        lr = degrade(hr, dc)
        cubic = cubic_interpolate(lr, dc.factor).astype(np.float32)
        sr = np.asarray(model(lr), dtype=np.float32)
        if sr.shape != hr.shape:
            raise ValueError(f"{vid}: model output {sr.shape} does not match HR shape {hr.shape}")
        if not np.all(np.isfinite(sr)):
            raise FloatingPointError(f"{vid}: model produced non-finite values")
        for name, est in (("cubic", cubic), (method, sr)):
            rows.append({"volume_id": vid, "scale": dc.factor, "method": name,
                         "psnr": psnr(hr, est), "ssim": ssim3d(hr, est)})
        if image_dir is not None:
            write_figures(Path(image_dir), vid, hr, cubic, sr, zoom_box, image_scale)
    return aggregate(rows)


def _to_u8(slice2d: np.ndarray) -> np.ndarray:
    return np.round(np.clip(slice2d, 0.0, 1.0) * 255.0).astype(np.uint8)


def _panel(slice2d, scale) -> Image.Image:
    img = Image.fromarray(_to_u8(slice2d), mode="L").convert("RGB")
    return img.resize((img.width * scale, img.height * scale), Image.NEAREST)


def _row(panels, gap=2) -> Image.Image:
    w = sum(p.width for p in panels) + gap * (len(panels) - 1)
    out = Image.new("RGB", (w, max(p.height for p in panels)), (255, 255, 255))
    x = 0
    for p in panels:
        out.paste(p, (x, 0))
        x += p.width + gap
    return out


def write_figures(out_dir: Path, vid: str, hr, cubic, sr, zoom_box, scale: int) -> None:
    """Mid-depth axial triptych (original | cubic | SR) and a zoom of one box."""
    out_dir.mkdir(parents=True, exist_ok=True)
    z = hr.shape[2] // 2
    slices = [v[:, :, z, 0] for v in (hr, cubic, sr)]
    y0, x0, size = zoom_box
    y0 = min(max(y0, 0), max(hr.shape[0] - size, 0))
    x0 = min(max(x0, 0), max(hr.shape[1] - size, 0))
    size = min(size, hr.shape[0], hr.shape[1])
    panels = []
    for s in slices:
        p = _panel(s, scale)
        ImageDraw.Draw(p).rectangle([x0 * scale, y0 * scale, (x0 + size) * scale - 1, (y0 + size) * scale - 1],
                                    outline=ZOOM_COLOR)
        panels.append(p)
    _row(panels).save(out_dir / f"{vid}_slice.png")
    crops = [_panel(s[y0:y0 + size, x0:x0 + size], 2 * scale) for s in slices]
    _row(crops).save(out_dir / f"{vid}_zoom.png")


def write_report(report: EvalReport, out_dir) -> None:
    out_dir = Path(out_dir)
    (out_dir / "report.csv").write_text(report.to_csv())
    (out_dir / "report.json").write_text(report.to_json() + "\n")
    (out_dir / "aggregate.csv").write_text(report.aggregate_csv())
    (out_dir / "table.txt").write_text(report.render_table())


def merge_reports(reports) -> EvalReport:
    """Union of per-volume rows; duplicate (volume, scale, method) rows must agree."""
    seen = {}
    for rep in reports:
        for row in rep.per_volume:
            key = (row["volume_id"], row["scale"], row["method"])
            if key in seen:
                if seen[key] != row:
                    raise ValueError(f"conflicting results for {key}")
                continue
            seen[key] = row
    return aggregate(seen.values())
