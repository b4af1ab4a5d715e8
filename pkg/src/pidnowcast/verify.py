"""Forecast verification: pixel skill, contingency scores, FSS and extreme-event PR curves.

Undefined scores (empty denominators, zero variance) are returned as ``None``
rather than 0 so that dry cases never inflate skill.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

from .grid import KIND_METEO, GridShape, PrecipSequence, read_raw, write_raw


class MaskError(ValueError):
    pass


class NoExtremesError(ValueError):
    pass


def _default_sweep():
    return tuple(round(0.5 * k, 10) for k in range(1, 21))


@dataclass
class VerificationConfig:
    csi_far_thresholds: tuple = (1.0, 8.0)
    fss_scales_km: tuple = (1.0, 10.0, 20.0)
    fss_threshold: float = 1.0
    extreme_threshold: float = 5.0
    pr_sweep: tuple = field(default_factory=_default_sweep)
    pooled: bool = True

    def __post_init__(self):
        for name in ("csi_far_thresholds", "fss_scales_km", "pr_sweep"):
            vals = tuple(float(v) for v in getattr(self, name))
            if not vals or min(vals) <= 0 or list(vals) != sorted(vals):
                raise ValueError(f"{name} must be positive and sorted, got {vals}")
            setattr(self, name, vals)
        if self.fss_threshold <= 0 or self.extreme_threshold <= 0:
            raise ValueError("thresholds must be positive")


@dataclass
class CatchmentMask:
    catchment_id: int
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if not self.mask.any():
            raise MaskError(f"catchment {self.catchment_id}: empty mask")


@dataclass(frozen=True)
class ContingencyTable:
    hits: int
    misses: int
    false_alarms: int
    correct_negatives: int

    @property
    def total(self):
        return self.hits + self.misses + self.false_alarms + self.correct_negatives


@dataclass
class PrCurve:
    points: list  # (threshold, precision or None, recall)
    auc: float


def _values(x):
    return np.asarray(x.array if isinstance(x, PrecipSequence) else x, dtype=np.float64)


def _pair(pred, obs):
    p, o = _values(pred), _values(obs)
    if p.shape != o.shape:
        raise ValueError(f"prediction shape {p.shape} does not match observation shape {o.shape}")
    return p, o


def _pearson(p, o):
    dp, do = p - p.mean(), o - o.mean()
    den = math.sqrt(float((dp * dp).sum()) * float((do * do).sum()))
    if den == 0.0:
        return None
    return float(np.clip((dp * do).sum() / den, -1.0, 1.0))


def pixel_metrics(pred, obs, pooled: bool = True):
    """(mse, mae, pcc) over all pixels and frames; ``pooled=False`` averages per-frame values.

    PCC is ``None`` when either side has zero variance (or, per frame, when
    no frame has a defined correlation).
    """
    p, o = _pair(pred, obs)
    if pooled or p.ndim < 3:
        d = p - o
        return float((d * d).mean()), float(np.abs(d).mean()), _pearson(p.ravel(), o.ravel())
    per = [pixel_metrics(pf, of) for pf, of in zip(p, o)]
    pccs = [r[2] for r in per if r[2] is not None]
    return (float(np.mean([r[0] for r in per])), float(np.mean([r[1] for r in per])),
            float(np.mean(pccs)) if pccs else None)


def contingency(pred, obs, threshold: float) -> ContingencyTable:
    """Exceedance counts with closed thresholds (value >= threshold)."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    p, o = _pair(pred, obs)
    pe, oe = p >= threshold, o >= threshold
    return ContingencyTable(int((pe & oe).sum()), int((~pe & oe).sum()), int((pe & ~oe).sum()),
                            int((~pe & ~oe).sum()))


def csi(table: ContingencyTable):
    den = table.hits + table.misses + table.false_alarms
    return table.hits / den if den else None


def far(table: ContingencyTable):
    den = table.hits + table.false_alarms
    return table.false_alarms / den if den else None


def fss_window(scale_km: float, pixel_size_km: float) -> int:
    """Neighbourhood width in pixels: nearest integer, bumped up to odd, at least 1."""
    if scale_km < pixel_size_km:
        raise ValueError(f"scale {scale_km} km is below the pixel size {pixel_size_km} km")
    n = max(1, int(math.floor(scale_km / pixel_size_km + 0.5)))
    return n if n % 2 else n + 1


def fractions(binary, n: int):
    """Fraction of exceeding pixels in an n x n window, zero outside the domain."""
    b = np.asarray(binary, dtype=np.float64)
    size = (1,) * (b.ndim - 2) + (n, n)
    return uniform_filter(b, size=size, mode="constant", cval=0.0)


def fss(pred, obs, threshold: float, scale_km: float, pixel_size_km: float = 1.0):
    """Fractions skill score; sums pooled over frames. ``None`` if both fraction fields vanish."""
    p, o = _pair(pred, obs)
    n = fss_window(scale_km, pixel_size_km)
    fp, fo = fractions(p >= threshold, n), fractions(o >= threshold, n)
    den = float((fp * fp).sum() + (fo * fo).sum())
    if den == 0.0:
        return None
    return float(np.clip(1.0 - ((fp - fo) ** 2).sum() / den, 0.0, 1.0))


def catchment_reduce(seq, masks, step_minutes=None):
    """3-hour catchment means (mm/3h): spatial mean, then mean over frames, times 3 h.

    ``seq`` must span 3 hours, e.g. six 30-minute frames.
    """
    if isinstance(seq, PrecipSequence):
        step_minutes = seq.step_minutes
    a = _values(seq)
    if a.ndim == 2:
        a = a[None]
    if step_minutes is not None and a.shape[0] * step_minutes != 180:
        raise ValueError(f"{a.shape[0]} frames of {step_minutes} min do not span 3 hours")
    out = []
    for m in masks:
        if not isinstance(m, CatchmentMask):
            m = CatchmentMask(len(out), m)
        if m.mask.shape != a.shape[1:]:
            raise MaskError(f"catchment {m.catchment_id}: mask shape {m.mask.shape} != grid {a.shape[1:]}")
        out.append(float(a[:, m.mask].mean() * 3.0))
    return np.array(out)


def extreme_pr_curve(pred_means, obs_means, cfg: VerificationConfig = VerificationConfig()) -> PrCurve:
    """Precision/recall of ``pred > t`` against ``obs > extreme_threshold`` for t in the sweep.

    Each (event, catchment) pair is one sample. Precision is ``None`` where no
    sample is predicted positive; such points are kept in ``points`` but do
    not enter the area. The area is the trapezoid over swept points in order
    of increasing recall, divided by the recall span they cover (0 when no
    point is defined, the mean precision when they all share one recall).
    """
    p = np.asarray(pred_means, dtype=np.float64).ravel()
    o = np.asarray(obs_means, dtype=np.float64).ravel()
    if p.shape != o.shape:
        raise ValueError("prediction and observation catchment means differ in length")
    truth = o > cfg.extreme_threshold
    n_pos = int(truth.sum())
    if n_pos == 0:
        raise NoExtremesError("no observed extremes: recall is undefined; use a dataset with extreme events")
    points = []
    for t in cfg.pr_sweep:
        hit = p > t
        tp = int((hit & truth).sum())
        npred = int(hit.sum())
        points.append((t, tp / npred if npred else None, tp / n_pos))
    return PrCurve(points, pr_auc(points))


def pr_auc(points) -> float:
    # descending threshold gives ascending recall; ties keep the higher threshold first
    pts = [(r, pr) for t, pr, r in sorted(points, key=lambda x: -x[0]) if pr is not None]
    if not pts:
        return 0.0
    r = np.array([x[0] for x in pts])
    pr = np.array([x[1] for x in pts])
    span = r[-1] - r[0]
    if span <= 0:
        return float(pr.mean())
    area = float(np.sum(np.diff(r) * (pr[1:] + pr[:-1]) / 2.0))
    return float(np.clip(area / span, 0.0, 1.0))


# -- masks --------------------------------------------------------------------

def tile_masks(shape: GridShape, grid=(2, 2)):
    """Rectangular catchments tiling the domain, numbered row-major."""
    ch, cw = grid
    th, tw = shape.height // ch, shape.width // cw
    out = []
    for i in range(ch):
        for j in range(cw):
            m = np.zeros((shape.height, shape.width), dtype=bool)
            m[i * th:(i + 1) * th, j * tw:(j + 1) * tw] = True
            out.append(CatchmentMask(i * cw + j, m))
    return out


def write_masks(masks, path, pixel_size_km=1.0):
    """One meteo-kind frame with a 0/1 channel per catchment."""
    data = np.stack([m.mask.astype(np.float32) for m in masks], axis=-1)[None]
    write_raw(path, KIND_METEO, data, 0, pixel_size_km, 0)


def read_masks(path):
    raw = read_raw(path)
    data = raw.data[0]
    if not np.all((data == 0) | (data == 1)):
        raise MaskError(f"{path}: mask values must be 0 or 1")
    return [CatchmentMask(k, data[..., k] > 0.5) for k in range(data.shape[-1])]


# -- reports ------------------------------------------------------------------

def _fmt(v):
    return "" if v is None else repr(float(v))


def verification_metrics(pred, obs, cfg: VerificationConfig = VerificationConfig(), pixel_size_km=1.0):
    """Ordered (name, value) rows for pixel skill, CSI/FAR and FSS."""
    mse, mae, pcc = pixel_metrics(pred, obs, cfg.pooled)
    rows = [("mse", mse), ("mae", mae), ("pcc", pcc)]
    for t in cfg.csi_far_thresholds:
        tab = contingency(pred, obs, t)
        rows += [(f"csi_{t:g}mm", csi(tab)), (f"far_{t:g}mm", far(tab))]
    for s in cfg.fss_scales_km:
        rows.append((f"fss_{s:g}km", fss(pred, obs, cfg.fss_threshold, s, pixel_size_km)))
    return rows


def write_metrics_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["metric", "value"])
        for name, v in rows:
            wr.writerow([name, _fmt(v)])


def write_pr_csv(curve: PrCurve, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["threshold", "precision", "recall"])
        for t, p, r in curve.points:
            wr.writerow([repr(float(t)), _fmt(p), repr(float(r))])
