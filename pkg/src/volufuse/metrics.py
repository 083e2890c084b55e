"""Evaluation metrics (MAE, 3D SSIM, nSSIM, nIOU) and Table-style aggregation."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .volcore import Volume, percentile_normalize

WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03
METRIC_FIELDS = ("ssim", "mae", "nssim", "niou")


def _arr(v) -> np.ndarray:
    return np.asarray(v.data if isinstance(v, Volume) else v, dtype=np.float64)


def _check(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def gaussian_window_1d(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    k = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(k**2) / (2.0 * sigma**2))
    return w / w.sum()


def _local_mean(x: np.ndarray, kernel: np.ndarray, norm: np.ndarray) -> np.ndarray:
    for axis in range(x.ndim):
        x = ndimage.correlate1d(x, kernel, axis=axis, mode="constant", cval=0.0)
    return x / norm


def ssim_map(a, b, data_range: float = 1.0) -> np.ndarray:
    """Local SSIM with an 11^3 Gaussian window renormalised at the borders."""
    a, b = _arr(a), _arr(b)
    _check(a, b)
    kernel = gaussian_window_1d()
    norm = np.ones_like(a)
    for axis in range(a.ndim):
        norm = ndimage.correlate1d(norm, kernel, axis=axis, mode="constant", cval=0.0)
    mu_a = _local_mean(a, kernel, norm)
    mu_b = _local_mean(b, kernel, norm)
    var_a = _local_mean(a * a, kernel, norm) - mu_a * mu_a
    var_b = _local_mean(b * b, kernel, norm) - mu_b * mu_b
    cov = _local_mean(a * b, kernel, norm) - mu_a * mu_b
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim3d(a, b) -> float:
    return float(ssim_map(a, b).mean())


def mae(a, b) -> float:
    a, b = _arr(a), _arr(b)
    _check(a, b)
    return float(np.abs(a - b).mean())


def nssim(input_v, output_v, gt, *, ssim_in: Optional[float] = None) -> float:
    """SSIM gain of ``output`` over ``input``, scaled by the input's headroom to 1.

    Zero for the identity mapping, one for a perfect output, negative when the
    output is further from ``gt`` than the input was.
    """
    _check(_arr(input_v), _arr(gt))
    s_in = ssim3d(input_v, gt) if ssim_in is None else ssim_in
    s_out = ssim3d(output_v, gt)
    den = 1.0 - s_in
    if den < 1e-9:
        return 0.0
    return (s_out - s_in) / den


def foreground(v, threshold_fraction: float = 0.90) -> np.ndarray:
    x = _arr(v)
    return x > np.quantile(x, threshold_fraction)


def niou(output_v, gt, threshold_fraction: float = 0.90) -> float:
    """IoU of the voxels above each volume's ``threshold_fraction`` quantile.

    A percentile-thresholded variant; returns 1 when both masks are empty.
    """
    mo = foreground(output_v, threshold_fraction)
    mg = foreground(gt, threshold_fraction)
    _check(mo, mg)
    union = np.logical_or(mo, mg).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(mo, mg).sum() / union)


@dataclass
class CaseReport:
    case_id: str
    channel: str
    ssim: float
    mae: float
    nssim: float
    niou: Optional[float] = None
    method: str = ""


def evaluate_case(
    input_v,
    output_v,
    gt,
    channel: str = "synthetic",
    *,
    case_id: str = "",
    method: str = "",
    with_niou: bool = True,
    normalize: bool = True,
    percentiles: Tuple[float, float] = (0.02, 0.98),
) -> CaseReport:
    """Score one case; all three volumes are percentile-normalised first by default."""
    vols = [v if isinstance(v, Volume) else Volume(np.asarray(v, dtype=np.float32)) for v in (input_v, output_v, gt)]
    if normalize:
        vols = [percentile_normalize(v, *percentiles) for v in vols]
    i, o, g = vols
    s_in = ssim3d(i, g)
    s_out = ssim3d(o, g)
    den = 1.0 - s_in
    n = 0.0 if den < 1e-9 else (s_out - s_in) / den
    return CaseReport(
        case_id=case_id,
        channel=channel,
        ssim=s_out,
        mae=mae(o, g),
        nssim=n,
        niou=niou(o, g) if with_niou else None,
        method=method,
    )


# -------------------------------------------------------------------- aggregation


@dataclass
class GroupStats:
    n: int
    mean: Dict[str, float]
    std: Dict[str, float]
    median: Dict[str, float]


def aggregate(reports: Iterable[CaseReport]) -> Dict[Tuple[str, str], GroupStats]:
    """Mean, population std and median per ``(method, channel)`` group."""
    groups: Dict[Tuple[str, str], List[CaseReport]] = {}
    for r in reports:
        groups.setdefault((r.method, r.channel), []).append(r)
    if not groups:
        raise ValueError("aggregate needs at least one report")
    out = {}
    for key in sorted(groups):
        rows = sorted(groups[key], key=lambda r: r.case_id)
        mean, std, median = {}, {}, {}
        for f in METRIC_FIELDS:
            vals = [getattr(r, f) for r in rows if getattr(r, f) is not None]
            if vals:
                arr = np.asarray(vals, dtype=np.float64)
                mean[f], std[f], median[f] = float(arr.mean()), float(arr.std()), float(np.median(arr))
            else:
                mean[f] = std[f] = median[f] = math.nan
        out[key] = GroupStats(len(rows), mean, std, median)
    return out


def _cell(stats: GroupStats, f: str) -> str:
    if math.isnan(stats.mean[f]):
        return "N/A"
    return f"{stats.mean[f]:.2f} ± {stats.std[f]:.2f}"


def render_table(agg: Dict[Tuple[str, str], GroupStats], methods: Optional[Sequence[str]] = None) -> str:
    """Text table: one row per method, ``SSIM MAE nSSIM nIOU`` column block per channel."""
    channels = sorted({c for _, c in agg})
    if methods is None:
        methods = list(dict.fromkeys(m for m, _ in agg))
    header = ["Method"] + [f"{c} {f.upper() if f != 'nssim' else 'nSSIM'}" for c in channels for f in METRIC_FIELDS]
    rows = [header]
    for m in methods:
        row = [m or "-"]
        for c in channels:
            st = agg.get((m, c))
            row += [_cell(st, f) if st else "N/A" for f in METRIC_FIELDS]
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = [" | ".join(cell.ljust(w) for cell, w in zip(r, widths)) for r in rows]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    medians = ["median nSSIM"]
    for m in methods:
        parts = [f"{c}={agg[(m, c)].median['nssim']:.3f}" for c in channels if (m, c) in agg]
        medians.append(f"  {m or '-'}: " + ", ".join(parts))
    return "\n".join(lines + [""] + medians) + "\n"


def write_csv(reports: Iterable[CaseReport], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "channel", "method", "ssim", "mae", "nssim", "niou"])
        for r in reports:
            niou_s = "" if r.niou is None else f"{r.niou:.8f}"
            writer.writerow([r.case_id, r.channel, r.method, f"{r.ssim:.8f}", f"{r.mae:.8f}", f"{r.nssim:.8f}", niou_s])
    return path


def read_csv(path) -> List[CaseReport]:
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                CaseReport(
                    case_id=row["id"],
                    channel=row["channel"],
                    method=row["method"],
                    ssim=float(row["ssim"]),
                    mae=float(row["mae"]),
                    nssim=float(row["nssim"]),
                    niou=float(row["niou"]) if row["niou"] else None,
                )
            )
    return out


def report_dict(r: CaseReport) -> dict:
    return asdict(r)
