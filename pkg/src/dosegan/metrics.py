"""Image-quality metrics (PSNR, SSIM, NRMSE) and per-DRF evaluation reports."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dosesim import DRF_LEVELS, Dataset, VolumePair

SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
LOW_DOSE = "Low-Dose"


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    return p, g


def psnr(pred, gt) -> float:
    """Peak signal-to-noise ratio in dB with the peak taken as ``max(gt)``.

    Returns ``math.inf`` when the volumes are identical.
    """
    p, g = _pair(pred, gt)
    peak = g.max()
    if peak <= 0:
        raise ValueError("gt maximum must be positive")
    mse = np.mean((p - g) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(peak**2 / mse))


def nrmse(pred, gt) -> float:
    """Root-mean-square error as a percentage of the gt intensity range."""
    p, g = _pair(pred, gt)
    span = g.max() - g.min()
    if span == 0:
        raise ValueError("gt is constant; its range cannot normalize the error")
    return float(100.0 * np.sqrt(np.mean((p - g) ** 2)) / span)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(v: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable, valid-only weighted window means
    for axis in range(v.ndim):
        v = sliding_window_view(v, g.size, axis=axis) @ g
    return v


def ssim_map(pred, gt, data_range: float | None = None, window: int = SSIM_WINDOW,
             sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Local SSIM at every centre whose window lies fully inside the volume."""
    p, g = _pair(pred, gt)
    if p.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {p.shape}")
    if min(p.shape) < window:
        raise ValueError(f"volume {p.shape} smaller than the {window}^3 window")
    L = float(g.max() - g.min()) if data_range is None else float(data_range)
    if L <= 0:
        raise ValueError("dynamic range is zero; pass data_range explicitly for constant gt")
    c1 = (SSIM_K1 * L) ** 2
    c2 = (SSIM_K2 * L) ** 2
    w = gaussian_window(window, sigma)
    mx, my = _filter_valid(p, w), _filter_valid(g, w)
    sxx = _filter_valid(p * p, w) - mx * mx
    syy = _filter_valid(g * g, w) - my * my
    sxy = _filter_valid(p * g, w) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim3d(pred, gt, data_range: float | None = None) -> float:
    """Mean 3D SSIM: gaussian 7^3 window, sigma 1.5, K1 0.01, K2 0.03, L = gt range."""
    return float(ssim_map(pred, gt, data_range).mean())


# ----------------------------------------------------------------------------
# reports


@dataclass
class MetricsRow:
    method: str
    drf_value: int
    psnr: float
    ssim: float
    nrmse: float
    count: int = 1


@dataclass
class VolumeScore:
    method: str
    drf_value: int
    volume_id: int
    psnr: float
    ssim: float
    nrmse: float


def _json_float(v: float):
    return "inf" if v == math.inf else v


@dataclass
class MetricsReport:
    rows: list[MetricsRow]
    volumes: list[VolumeScore] = field(default_factory=list)
    split: str = "test"

    def row(self, method: str, drf: int) -> MetricsRow:
        for r in self.rows:
            if r.method == method and r.drf_value == drf:
                return r
        raise KeyError((method, drf))

    def methods(self) -> list[str]:
        seen: list[str] = []
        for r in self.rows:
            if r.method not in seen:
                seen.append(r.method)
        return seen

    def to_text(self) -> str:
        lines = [f"{'DRF':>4}  {'Method':<14}{'PSNR':>9}{'SSIM':>8}{'NRMSE(%)':>10}"]
        for r in self.rows:
            p = "inf" if r.psnr == math.inf else f"{r.psnr:.3f}"
            lines.append(f"{r.drf_value:>4}  {r.method:<14}{p:>9}{r.ssim:>8.3f}{r.nrmse:>10.3f}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        def enc(obj):
            d = asdict(obj)
            d["psnr"] = _json_float(d["psnr"])
            return d

        payload = {"split": self.split, "rows": [enc(r) for r in self.rows],
                   "volumes": [enc(v) for v in self.volumes]}
        return json.dumps(payload, sort_keys=True, indent=1) + "\n"

    def overall(self, method: str) -> MetricsRow:
        """Mean over every evaluated volume regardless of DRF."""
        scores = [v for v in self.volumes if v.method == method]
        if not scores:
            raise KeyError(method)
        return _mean_row(method, 0, scores)


def _mean_row(method: str, drf: int, scores: list[VolumeScore]) -> MetricsRow:
    # a single identical volume makes the mean PSNR inf, which is the intended sentinel
    return MetricsRow(
        method, drf,
        psnr=float(np.mean([s.psnr for s in scores])),
        ssim=float(np.mean([s.ssim for s in scores])),
        nrmse=float(np.mean([s.nrmse for s in scores])),
        count=len(scores),
    )


Predictor = Callable[[list[VolumePair]], list[np.ndarray]]


def evaluate(
    dataset: Dataset,
    predictors: dict[str, Predictor] | None = None,
    split: str = "test",
    drfs: tuple[int, ...] | None = None,
    batch_size: int = 4,
) -> MetricsReport:
    """Score the low-dose input and each predictor against the standard dose.

    Predictors receive a batch of pairs and return volumes in the same units
    as the stored data. Rows are ordered by DRF, Low-Dose first.
    """
    predictors = dict(predictors or {})
    if LOW_DOSE in predictors:
        raise ValueError(f"{LOW_DOSE!r} is reserved for the unprocessed input")
    levels = DRF_LEVELS if drfs is None else tuple(drfs)
    for d in levels:
        if d not in DRF_LEVELS:
            raise ValueError(f"unknown DRF {d}")
    pairs = [p for p in dataset.pairs(split) if p.drf_value in levels]
    if not pairs:
        raise ValueError(f"split {split!r} has no pairs for DRF {levels}")

    outputs: dict[str, list[np.ndarray]] = {LOW_DOSE: [p.x for p in pairs]}
    for name, fn in predictors.items():
        out: list[np.ndarray] = []
        for i in range(0, len(pairs), batch_size):
            out.extend(fn(pairs[i:i + batch_size]))
        outputs[name] = out

    scores: list[VolumeScore] = []
    for name, vols in outputs.items():
        for p, v in zip(pairs, vols):
            scores.append(VolumeScore(name, p.drf_value, p.volume_id,
                                      psnr(v, p.y_s), ssim3d(v, p.y_s), nrmse(v, p.y_s)))
    rows = []
    for d in levels:
        for name in outputs:
            sel = [s for s in scores if s.method == name and s.drf_value == d]
            if sel:
                rows.append(_mean_row(name, d, sel))
    return MetricsReport(rows, scores, split)


def ablation_table(results: dict[str, MetricsRow | None]) -> str:
    """One row per variant with PSNR, SSIM and NRMSE; a failed variant shows FAILED."""
    lines = [f"{'Method':<14}{'PSNR':>9}{'SSIM':>8}{'NRMSE(%)':>10}"]
    for label, r in results.items():
        if r is None:
            lines.append(f"{label:<14}{'FAILED':>9}{'FAILED':>8}{'FAILED':>10}")
        else:
            lines.append(f"{label:<14}{r.psnr:>9.3f}{r.ssim:>8.3f}{r.nrmse:>10.3f}")
    return "\n".join(lines) + "\n"
