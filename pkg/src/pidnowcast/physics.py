"""Moisture-conservation residual and physics consistency scores.

Per pixel and predicted step the residual is::

    R = -dq/dt - u10 dq/dx - v10 dq/dy - u100 dq/dx - v100 dq/dy + ET - P

Humidity terms (1/s) are converted to mm/h water equivalent with an effective
column mass, so every term shares the unit of ET and P. The time derivative
is a backward difference and spatial derivatives are taken on the current
humidity field: central differences inside, first-order one-sided at edges.
Both 10 m and 100 m advection terms are included as the constraint is
written, even though that counts horizontal transport twice.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import MeteoStack, PrecipFrame, PrecipSequence
from .tensor import autograd as ag

STANDARD_PRESSURE_KPA = 101.325


class PhysicsShapeError(ValueError):
    pass


class MissingTimestepError(KeyError):
    pass


def saturation_vapor_pressure(temp_c):
    """Magnus saturation vapour pressure (kPa) at ``temp_c`` deg C."""
    t = np.asarray(temp_c, dtype=np.float64)
    return 0.6108 * np.exp(17.27 * t / (t + 237.3))


def svp_slope(temp_c):
    """d e_s / dT in kPa/degC."""
    t = np.asarray(temp_c, dtype=np.float64)
    return 4098.0 * saturation_vapor_pressure(t) / (t + 237.3) ** 2


def specific_humidity_from_dew(dew_c, pressure_kpa=STANDARD_PRESSURE_KPA):
    e = saturation_vapor_pressure(dew_c)
    return 0.622 * e / (pressure_kpa - 0.378 * e)


def dew_from_specific_humidity(q, pressure_kpa=STANDARD_PRESSURE_KPA):
    q = np.asarray(q, dtype=np.float64)
    e = q * pressure_kpa / (0.622 + 0.378 * q)
    ln = np.log(np.maximum(e, 1e-12) / 0.6108)
    return 237.3 * ln / (17.27 - ln)


@dataclass(frozen=True)
class MakkinkInputs:
    temp: object
    r_s: object
    gamma: float = 0.066
    lambda_v: float = 2.45e6

    def __post_init__(self):
        if np.any(np.asarray(self.r_s) < 0):
            raise ValueError("global radiation r_s must be non-negative")
        if not self.gamma > 0 or not self.lambda_v > 0:
            raise ValueError("gamma and lambda_v must be positive")


def makkink_et(inp: MakkinkInputs):
    """Makkink evapotranspiration in mm/h (r_s in W/m^2, gamma in kPa/degC, lambda_v in J/kg)."""
    delta = svp_slope(inp.temp)
    r_s = np.asarray(inp.r_s, dtype=np.float64)
    return 0.65 * delta / (delta + inp.gamma) * r_s / inp.lambda_v * 3600.0


@dataclass(frozen=True)
class ResidualConfig:
    column_mass: float = 10000.0
    dx_km: float = 1.0
    dy_km: float = 1.0
    dt_minutes: float = 30.0
    boundary: str = "one-sided"
    gamma: float = 0.066
    lambda_v: float = 2.45e6

    def __post_init__(self):
        for name in ("column_mass", "dx_km", "dy_km", "dt_minutes"):
            if not getattr(self, name) > 0:
                raise ValueError(f"ResidualConfig.{name} must be positive")
        if self.boundary != "one-sided":
            raise ValueError(f"unsupported boundary rule {self.boundary!r}")


@dataclass(frozen=True)
class ConsistencyConfig:
    lambda_sharpness: float = 1.0
    aggregation: str = "mean-abs"

    def __post_init__(self):
        if not self.lambda_sharpness > 0:
            raise ValueError("lambda_sharpness must be positive")
        if self.aggregation not in ("mean-abs", "rms"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")


@dataclass
class ResidualField:
    values: np.ndarray
    terms: dict = field(default_factory=dict)
    scalar: float | None = None
    score: float | None = None

    @property
    def mean_abs(self) -> float:
        return float(np.mean(np.abs(self.values)))

    @property
    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.values ** 2)))


def _grid(arr):
    return np.asarray(arr, dtype=np.float64)


def spatial_gradient(q, dx_km, dy_km):
    """(dq/dx, dq/dy) per metre; x along columns, y along rows."""
    q = _grid(q)
    ddx = np.gradient(q, dx_km * 1000.0, axis=1, edge_order=1) if q.shape[1] > 1 else np.zeros_like(q)
    ddy = np.gradient(q, dy_km * 1000.0, axis=0, edge_order=1) if q.shape[0] > 1 else np.zeros_like(q)
    return ddx, ddy


def residual_terms(q_prev, q_curr, meteo: MeteoStack, cfg: ResidualConfig):
    """Decomposed precipitation-free residual terms, each in mm/h."""
    q_prev, q_curr = _grid(q_prev), _grid(q_curr)
    shape = q_curr.shape
    if q_prev.shape != shape or meteo.q.shape != shape:
        raise PhysicsShapeError(f"grids not co-registered: q_prev {q_prev.shape}, q_curr {shape}, "
                                f"meteo {meteo.q.shape}")
    to_mm_h = cfg.column_mass * 3600.0
    dqdx, dqdy = spatial_gradient(q_curr, cfg.dx_km, cfg.dy_km)
    dqdt = (q_curr - q_prev) / (cfg.dt_minutes * 60.0)
    return {
        "tendency": -dqdt * to_mm_h,
        "adv10": -(_grid(meteo.u10) * dqdx + _grid(meteo.v10) * dqdy) * to_mm_h,
        "adv100": -(_grid(meteo.u100) * dqdx + _grid(meteo.v100) * dqdy) * to_mm_h,
        "et": makkink_et(MakkinkInputs(_grid(meteo.temp), _grid(meteo.r_s), cfg.gamma, cfg.lambda_v)),
    }


def residual_without_precip(q_prev, q_curr, meteo, cfg):
    t = residual_terms(q_prev, q_curr, meteo, cfg)
    return t["tendency"] + t["adv10"] + t["adv100"] + t["et"]


def moisture_residual(q_prev, q_curr, meteo: MeteoStack, precip, cfg: ResidualConfig = ResidualConfig()):
    """Pixel-level residual field (mm/h) for one step; ``precip`` is a PrecipFrame or array."""
    p = _grid(precip.values if isinstance(precip, PrecipFrame) else precip)
    terms = residual_terms(q_prev, q_curr, meteo, cfg)
    if p.shape != meteo.q.shape:
        raise PhysicsShapeError(f"precipitation grid {p.shape} does not match meteo grid {meteo.q.shape}")
    terms["precip"] = -p
    values = terms["tendency"] + terms["adv10"] + terms["adv100"] + terms["et"] - p
    return ResidualField(values, terms)


def aggregate(values, how: str = "mean-abs") -> float:
    v = np.asarray(values, dtype=np.float64)
    if how == "mean-abs":
        return float(np.mean(np.abs(v)))
    if how == "rms":
        return float(np.sqrt(np.mean(v * v)))
    raise ValueError(f"unknown aggregation {how!r}")


def score_from_scalar(scalar, lambda_sharpness: float = 1.0):
    return np.exp(-lambda_sharpness * np.asarray(scalar, dtype=np.float64))


def consistency_score(res, cfg: ConsistencyConfig = ConsistencyConfig()):
    """eta = exp(-lambda * aggregate(|R|)).

    Accepts one ResidualField (returns a float and fills ``scalar``/``score``)
    or a sequence of them (returns the per-frame vector).
    """
    if isinstance(res, ResidualField):
        res.scalar = aggregate(res.values, cfg.aggregation)
        res.score = float(score_from_scalar(res.scalar, cfg.lambda_sharpness))
        return res.score
    return np.array([consistency_score(r, cfg) for r in res])


def _by_timestamp(meteo):
    return {m.timestamp: m for m in meteo}


def frame_residuals(pred: PrecipSequence, meteo, rcfg: ResidualConfig = ResidualConfig()):
    """ResidualField for every frame of ``pred`` (meteo must cover each frame and its predecessor)."""
    lookup = _by_timestamp(meteo)
    out = []
    for fr in pred.frames:
        prev_t = fr.timestamp - pred.step_minutes
        for t in (fr.timestamp, prev_t):
            if t not in lookup:
                raise MissingTimestepError(f"no meteorology at t={t} min (needed for frame at {fr.timestamp})")
        out.append(moisture_residual(lookup[prev_t].q, lookup[fr.timestamp].q, lookup[fr.timestamp],
                                     fr, rcfg))
    return out


def sequence_scores(pred: PrecipSequence, meteo, rcfg: ResidualConfig = ResidualConfig(),
                    ccfg: ConsistencyConfig = ConsistencyConfig(), physics_enabled: bool = True):
    """Per-frame consistency scores for a predicted sequence.

    With ``physics_enabled=False`` (the no-physics ablation) every score is 1.
    """
    if not physics_enabled:
        return np.ones(len(pred))
    return consistency_score(frame_residuals(pred, meteo, rcfg), ccfg)


def precip_free_terms(target_timestamps, meteo, step_minutes, rcfg: ResidualConfig = ResidualConfig()):
    """Stack of ``R + P`` grids (mm/h) for the given timestamps, shape (M, H, W)."""
    lookup = _by_timestamp(meteo)
    out = []
    for t in target_timestamps:
        prev_t = t - step_minutes
        for tt in (t, prev_t):
            if tt not in lookup:
                raise MissingTimestepError(f"no meteorology at t={tt} min")
        out.append(residual_without_precip(lookup[prev_t].q, lookup[t].q, lookup[t], rcfg))
    return np.stack(out)


def differentiable_scores(precip, free_terms, ccfg: ConsistencyConfig = ConsistencyConfig()):
    """Consistency scores as a tensor so gradients reach predicted precipitation.

    ``precip`` is a tensor of shape (..., H, W) in mm/h and ``free_terms`` the
    matching ``R + P`` array from ``precip_free_terms``. Returns eta of shape (...).
    """
    resid = ag.sub(ag.Tensor(free_terms), precip)
    if ccfg.aggregation == "mean-abs":
        scalar = ag.mean(ag.absolute(resid), axis=(-2, -1))
    else:
        scalar = ag.power(ag.mean(ag.mul(resid, resid), axis=(-2, -1)) + 1e-12, 0.5)
    return ag.exp(ag.mul(scalar, -ccfg.lambda_sharpness))
