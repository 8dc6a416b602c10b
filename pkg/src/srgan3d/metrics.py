"""Volumetric PSNR / SSIM and the mean-std-min-max report."""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .volume import as_volume

METHOD_ORDER = ("cubic", "resize_conv", "subpixel", "subpixel_nn")
METHOD_TITLES = {
    "cubic": "Cubic Int.",
    "resize_conv": "Resize Conv.",
    "subpixel": "Subpixel",
    "subpixel_nn": "Subpixel-NN",
}
STATS = ("mean", "std", "min", "max")


def psnr(ref, test, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    if peak <= 0:
        raise ValueError(f"peak must be > 0, got {peak}")
    a, b = as_volume(ref, np.float64), as_volume(test, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


@dataclass(frozen=True)
class SSIMParams:
    window: int = 7
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    peak: float = 1.0

    def weights1d(self) -> np.ndarray:
        x = np.arange(self.window) - (self.window - 1) / 2
        g = np.exp(-0.5 * (x / self.sigma) ** 2)
        return g / g.sum()


def _filter_valid(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    for axis in range(3):
        a = np.tensordot(sliding_window_view(a, len(w), axis=axis), w, axes=([-1], [0]))
    return a


def ssim_map(ref, test, params: SSIMParams = SSIMParams()) -> np.ndarray:
    """SSIM at every window position fully inside the volume."""
    a, b = as_volume(ref, np.float64), as_volume(test, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape[:3]) < params.window:
        raise ValueError(f"volume {a.shape[:3]} smaller than SSIM window {params.window}")
    w = params.weights1d()
    c1 = (params.k1 * params.peak) ** 2
    c2 = (params.k2 * params.peak) ** 2
    mu_a, mu_b = _filter_valid(a, w), _filter_valid(b, w)
    var_a = _filter_valid(a * a, w) - mu_a**2
    var_b = _filter_valid(b * b, w) - mu_b**2
    cov = _filter_valid(a * b, w) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))


def ssim3d(ref, test, params: SSIMParams = SSIMParams()) -> float:
    return float(ssim_map(ref, test, params).mean())


@dataclass
class EvalReport:
    """Per-volume rows and per-(scale, method) statistics.

    ``per_volume`` rows are dicts with keys ``volume_id, scale, method,
    psnr, ssim``. ``aggregate`` maps ``(scale, method)`` to
    ``{"psnr": {stat: value}, "ssim": {...}}``.
    """

    per_volume: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["volume_id", "scale", "method", "psnr", "ssim"])
        for row in self.per_volume:
            wr.writerow([row["volume_id"], row["scale"], row["method"], repr(float(row["psnr"])),
                         repr(float(row["ssim"]))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        rows = []
        for rec in csv.DictReader(io.StringIO(text)):
            rows.append({
                "volume_id": rec["volume_id"],
                "scale": int(rec["scale"]),
                "method": rec["method"],
                "psnr": float(rec["psnr"]),
                "ssim": float(rec["ssim"]),
            })
        return aggregate(rows)

    def to_json(self) -> str:
        blocks = {}
        for (scale, method), stats in self.aggregate.items():
            blocks.setdefault(f"x{scale}", {})[method] = stats
        return json.dumps({"aggregate": blocks, "per_volume": self.per_volume}, indent=2, sort_keys=True)

    def aggregate_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["scale", "method", "metric"] + list(STATS))
        for (scale, method), stats in sorted(self.aggregate.items(), key=_block_key):
            for metric in ("psnr", "ssim"):
                wr.writerow([scale, method, metric] + [repr(stats[metric][s]) for s in STATS])
        return buf.getvalue()

    def render_table(self) -> str:
        """Plain-text table: one block per scale, PSNR/SSIM column pair per method."""
        lines = []
        for scale in sorted({s for s, _ in self.aggregate}):
            methods = sorted((m for s, m in self.aggregate if s == scale), key=_method_rank)
            lines.append(f"Upsample x{scale}")
            lines.append(" " * 6 + "".join(f"{METHOD_TITLES.get(m, m):>20}" for m in methods))
            lines.append(" " * 6 + "".join(f"{'PSNR':>10}{'SSIM':>10}" for _ in methods))
            for stat in STATS:
                cells = []
                for m in methods:
                    st = self.aggregate[(scale, m)]
                    p_fmt = "{:>10.2f}" if stat != "std" else "{:>10.4f}"
                    cells.append(p_fmt.format(st["psnr"][stat]) + f"{st['ssim'][stat]:>10.4f}")
                lines.append(f"{stat.capitalize():<6}" + "".join(cells))
            lines.append("")
        return "\n".join(lines)


def _method_rank(m):
    return (METHOD_ORDER.index(m) if m in METHOD_ORDER else len(METHOD_ORDER), m)


def _block_key(item):
    (scale, method), _ = item
    return (scale, _method_rank(method))


def _stats(values) -> dict:
    a = np.asarray(values, dtype=np.float64)
    return {"mean": float(a.mean()), "std": float(a.std()), "min": float(a.min()), "max": float(a.max())}


def aggregate(rows) -> EvalReport:
    """Mean, population std, min and max per (scale, method).

    Infinite PSNR values (identical volumes) are left out of the PSNR
    statistics with a warning.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("cannot aggregate an empty list of results")
    groups: dict = {}
    for row in rows:
        groups.setdefault((int(row["scale"]), row["method"]), []).append(row)
    agg = {}
    for key, grp in groups.items():
        ps = [r["psnr"] for r in grp if math.isfinite(r["psnr"])]
        if len(ps) < len(grp):
            warnings.warn(f"{key}: {len(grp) - len(ps)} infinite PSNR value(s) excluded from aggregate")
        nan = {s: math.nan for s in STATS}
        agg[key] = {"psnr": _stats(ps) if ps else nan, "ssim": _stats([r["ssim"] for r in grp])}
    return EvalReport(per_volume=rows, aggregate=agg)
