"""Gridded half-hourly meteorology from sparse hourly station reports.

Each station series is first resampled in time with a natural cubic spline,
then every target time is mapped onto the grid with ordinary kriging.
Pixel (i, j) is centred at x = j * pixel_size_km, y = i * pixel_size_km.
"""

from __future__ import annotations

import warnings
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import lu_factor, lu_solve
from scipy.optimize import curve_fit
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

from .grid import GridShape, MeteoStack, StationObservation
from .physics import dew_from_specific_humidity, specific_humidity_from_dew


class InsufficientDataError(ValueError):
    pass


class ExtrapolationError(ValueError):
    pass


class DegenerateFieldError(ValueError):
    """All stations report the same value; callers fall back to a constant field."""

    def __init__(self, value, msg="zero variance across stations"):
        super().__init__(msg)
        self.value = value


class MissingVariableError(KeyError):
    pass


# -- temporal interpolation --------------------------------------------------

def cubic_time_interp(series, query_times):
    """Natural cubic spline through ``(timestamp_min, value)`` knots.

    Query times equal to a knot return that knot's value exactly.
    """
    if len(series) < 2:
        raise InsufficientDataError(f"cubic interpolation needs >= 2 knots, got {len(series)}")
    t = np.array([float(s[0]) for s in series])
    v = np.array([float(s[1]) for s in series])
    if np.any(np.diff(t) <= 0):
        raise ValueError("knot timestamps must be strictly increasing")
    q = np.asarray(query_times, dtype=np.float64)
    if q.size and (q.min() < t[0] or q.max() > t[-1]):
        raise ExtrapolationError(f"query times outside knot range [{t[0]:g}, {t[-1]:g}]")
    out = CubicSpline(t, v, bc_type="natural")(q)
    pos = np.searchsorted(t, q)
    hit = (pos < t.size) & (t[np.minimum(pos, t.size - 1)] == q)
    out[hit] = v[pos[hit]]
    return out.tolist()


# -- variograms --------------------------------------------------------------

@dataclass(frozen=True)
class VariogramModel:
    """Isotropic variogram; ``range_km`` is the practical range for every family."""

    kind: str = "spherical"
    nugget: float = 0.0
    sill: float = 1.0
    range_km: float = 50.0

    def __post_init__(self):
        if self.kind not in ("spherical", "exponential", "gaussian"):
            raise ValueError(f"unknown variogram kind {self.kind!r}")
        if self.nugget < 0 or self.sill < self.nugget or not self.range_km > 0:
            raise ValueError(f"invalid variogram parameters {self}")

    def __call__(self, h):
        return _variogram(self.kind, np.asarray(h, dtype=np.float64), self.nugget,
                          self.sill - self.nugget, self.range_km)


def _variogram(kind, h, nugget, psill, rng):
    r = h / rng
    if kind == "spherical":
        shape = np.where(r < 1.0, 1.5 * r - 0.5 * r ** 3, 1.0)
    elif kind == "exponential":
        shape = 1.0 - np.exp(-3.0 * r)
    else:
        shape = 1.0 - np.exp(-3.0 * r * r)
    return nugget + psill * shape


@dataclass(frozen=True)
class KrigingConfig:
    variogram: object = "auto-fit"
    max_neighbors: int = 16
    fit_bins: int = 12
    fit_kind: str = "spherical"

    def __post_init__(self):
        if self.max_neighbors < 1:
            raise ValueError("max_neighbors must be >= 1")
        if self.fit_bins < 4:
            raise ValueError("fit_bins must be >= 4")
        if not (self.variogram == "auto-fit" or isinstance(self.variogram, VariogramModel)):
            raise ValueError("variogram must be a VariogramModel or 'auto-fit'")


def _check_single(obs):
    if len({o.variable for o in obs}) > 1 or len({o.timestamp for o in obs}) > 1:
        raise ValueError("observations must share one variable and one timestamp")


def _positions_values(obs):
    xy = np.array([[o.x_km, o.y_km] for o in obs], dtype=np.float64).reshape(-1, 2)
    val = np.array([o.value for o in obs], dtype=np.float64)
    return xy, val


def empirical_variogram(xy, values, n_bins=12, max_lag=None):
    """Binned semivariances on fixed, equal-width edges over [0, max_lag].

    ``max_lag`` defaults to half the largest station separation. Returns
    (bin centres, semivariance, pair counts) for non-empty bins.
    """
    d = pdist(xy)
    sq = 0.5 * pdist(values[:, None], "sqeuclidean")
    if max_lag is None:
        max_lag = d.max() / 2.0
    edges = np.linspace(0.0, max_lag, n_bins + 1)
    idx = np.digitize(d, edges) - 1
    keep = (idx >= 0) & (idx < n_bins)
    counts = np.bincount(idx[keep], minlength=n_bins)
    sums = np.bincount(idx[keep], weights=sq[keep], minlength=n_bins)
    lag_sums = np.bincount(idx[keep], weights=d[keep], minlength=n_bins)
    ok = counts > 0
    return lag_sums[ok] / counts[ok], sums[ok] / counts[ok], counts[ok]


def fit_variogram(obs, kind: str = "spherical", n_bins: int = 12, max_lag=None) -> VariogramModel:
    """Weighted least-squares fit of a variogram family to binned semivariances."""
    _check_single(obs)
    xy, val = _positions_values(obs)
    if len({(x, y) for x, y in xy}) < 4:
        raise InsufficientDataError(f"variogram fit needs >= 4 distinct stations, got {len(obs)}")
    if np.ptp(val) == 0.0:
        raise DegenerateFieldError(float(val[0]))
    lag, gamma, counts = empirical_variogram(xy, val, n_bins, max_lag)
    var = float(np.var(val))
    top = float(lag.max()) if lag.size else 1.0
    p0 = [0.0, max(var, 1e-12), top / 2.0]
    lo, hi = [0.0, 1e-12, 1e-6], [max(var, gamma.max()) * 10, max(var, gamma.max()) * 10, top * 10]

    def model(h, nugget, sill, rng):
        return _variogram(kind, h, nugget, max(sill - nugget, 0.0), rng)

    if lag.size >= 3:
        (nugget, sill, rng), _ = curve_fit(model, lag, gamma, p0=p0, bounds=(lo, hi),
                                          sigma=1.0 / np.sqrt(counts), maxfev=20000)
    else:
        nugget, sill, rng = p0
    nugget = float(min(max(nugget, 0.0), sill))
    return VariogramModel(kind, nugget, float(sill), float(rng))


def default_variogram(values, shape: GridShape, pixel_size_km, kind="spherical"):
    """Fallback for too few stations: sill = sample variance, range = half the grid diagonal."""
    var = float(np.var(values)) or 1.0
    diag = np.hypot(shape.height, shape.width) * pixel_size_km
    return VariogramModel(kind, 0.0, var, max(diag / 2.0, pixel_size_km))


# -- ordinary kriging --------------------------------------------------------

def dedupe_stations(xy, values):
    """Average stations sharing a position (they would make the system singular)."""
    keys, inverse, counts = np.unique(xy, axis=0, return_inverse=True, return_counts=True)
    if len(keys) == len(xy):
        return xy, values
    warnings.warn(f"{len(xy) - len(keys)} duplicate station position(s) averaged", stacklevel=3)
    inverse = inverse.reshape(-1)
    return keys, np.bincount(inverse, weights=values) / counts


@dataclass
class KrigingWeights:
    """Neighbour indices (P, k), weights (P, k) and Lagrange multipliers (P,) per target."""

    neighbors: np.ndarray
    weights: np.ndarray
    lagrange: np.ndarray = field(default=None)

    def apply(self, values):
        return np.einsum("pk,pk->p", self.weights, np.asarray(values, dtype=np.float64)[self.neighbors])


def _system(pts, vg):
    k = len(pts)
    a = np.ones((k + 1, k + 1))
    a[:k, :k] = vg(np.hypot(*(pts[:, None, :] - pts[None, :, :]).transpose(2, 0, 1)))
    np.fill_diagonal(a[:k, :k], 0.0)
    a[k, k] = 0.0
    return a


def kriging_weights(xy, targets, vg: VariogramModel, max_neighbors: int = 16, chunk: int = 4096):
    """Solve the ordinary-kriging system for every target point.

    Uses the ``max_neighbors`` nearest stations. Asserts that every weight
    vector sums to one within 1e-8.
    """
    xy = np.asarray(xy, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n = len(xy)
    k = min(max_neighbors, n)
    if k == 1:
        nb = np.zeros((len(targets), 1), dtype=np.intp) if n == 1 else \
            cKDTree(xy).query(targets, k=1)[1].reshape(-1, 1)
        return KrigingWeights(nb, np.ones((len(targets), 1)), np.zeros(len(targets)))
    if k == n:
        nb = np.broadcast_to(np.arange(n), (len(targets), n))
        rhs = np.ones((k + 1, len(targets)))
        rhs[:k] = vg(np.hypot(targets[None, :, 0] - xy[:, None, 0], targets[None, :, 1] - xy[:, None, 1]))
        sol = lu_solve(lu_factor(_system(xy, vg)), rhs).T
    else:
        nb = np.sort(cKDTree(xy).query(targets, k=k)[1], axis=1)
        sol = np.empty((len(targets), k + 1))
        for s in range(0, len(targets), chunk):
            idx = nb[s:s + chunk]
            pts = xy[idx]  # (P, k, 2)
            a = np.ones((len(idx), k + 1, k + 1))
            a[:, :k, :k] = vg(np.linalg.norm(pts[:, :, None, :] - pts[:, None, :, :], axis=-1))
            a[:, np.arange(k), np.arange(k)] = 0.0
            a[:, k, k] = 0.0
            b = np.ones((len(idx), k + 1))
            b[:, :k] = vg(np.linalg.norm(pts - targets[s:s + chunk, None, :], axis=-1))
            sol[s:s + chunk] = np.linalg.solve(a, b[..., None])[..., 0]
    w = sol[:, :k]
    err = np.abs(w.sum(axis=1) - 1.0).max()
    assert err < 1e-8, f"kriging weights do not sum to one (max error {err:.3g})"
    return KrigingWeights(np.asarray(nb), w, sol[:, k])


def pixel_centres(shape: GridShape, pixel_size_km: float = 1.0):
    ii, jj = np.meshgrid(np.arange(shape.height), np.arange(shape.width), indexing="ij")
    return np.column_stack([jj.ravel() * pixel_size_km, ii.ravel() * pixel_size_km])


def krige_values(xy, values, shape: GridShape, cfg: KrigingConfig = KrigingConfig(),
                 pixel_size_km: float = 1.0, variable: str = ""):
    """Ordinary kriging of point values onto the grid; returns a float64 (H, W) array."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        raise InsufficientDataError(f"no stations to krige {variable}".strip())
    xy, values = dedupe_stations(xy, values)
    if len(values) == 1 or np.ptp(values) == 0.0:
        return np.full((shape.height, shape.width), values[0])
    vg = cfg.variogram
    if vg == "auto-fit":
        if len(values) >= 4:
            obs = [StationObservation(str(i), x, y, 0, variable or "v", v)
                   for i, ((x, y), v) in enumerate(zip(xy, values))]
            vg = fit_variogram(obs, cfg.fit_kind, cfg.fit_bins)
        else:
            vg = default_variogram(values, shape, pixel_size_km, cfg.fit_kind)
    w = kriging_weights(xy, pixel_centres(shape, pixel_size_km), vg, cfg.max_neighbors)
    return w.apply(values).reshape(shape.height, shape.width)


def krige_to_grid(obs, shape: GridShape, cfg: KrigingConfig = KrigingConfig(), pixel_size_km: float = 1.0):
    """Grid one variable at one timestamp from station observations."""
    if not obs:
        raise InsufficientDataError("kriging needs at least one station")
    _check_single(obs)
    xy, val = _positions_values(obs)
    return krige_values(xy, val, shape, cfg, pixel_size_km, obs[0].variable)


# -- full stack --------------------------------------------------------------

BASE_VARIABLES = ("temp", "u10", "v10", "u100", "v100", "r_s")


def interpolate_stations(obs, times):
    """Per-station temporal resampling; returns {station: (x, y, values at ``times``)}."""
    by_station = defaultdict(list)
    for o in obs:
        by_station[o.station_id].append(o)
    out = {}
    for sid in sorted(by_station):
        rows = sorted(by_station[sid], key=lambda o: o.timestamp)
        x, y = rows[0].x_km, rows[0].y_km
        out[sid] = (x, y, np.array(cubic_time_interp([(o.timestamp, o.value) for o in rows], times)))
    return out


def build_meteo_stack(obs_by_variable, times, shape: GridShape, cfg: KrigingConfig = KrigingConfig(),
                      pixel_size_km: float = 1.0):
    """Half-hourly MeteoStacks from hourly station observations.

    ``obs_by_variable`` maps variable name to its observations (all times).
    Humidity may be given as ``q`` or as ``dew``; the missing one is derived
    with the Magnus formula at standard surface pressure. Gridded dew point is
    capped at temperature, and r_s and q are clipped to their valid ranges.
    """
    for name in BASE_VARIABLES:
        if not obs_by_variable.get(name):
            raise MissingVariableError(f"missing variable {name!r}")
    hum = "q" if obs_by_variable.get("q") else "dew" if obs_by_variable.get("dew") else None
    if hum is None:
        raise MissingVariableError("missing humidity: need 'q' or 'dew'")
    times = [int(t) for t in times]
    series = {v: interpolate_stations(obs_by_variable[v], times) for v in BASE_VARIABLES + (hum,)}
    stacks = []
    for k, t in enumerate(times):
        fields = {}
        for v, per_station in series.items():
            xy = np.array([[s[0], s[1]] for s in per_station.values()])
            vals = np.array([s[2][k] for s in per_station.values()])
            fields[v] = krige_values(xy, vals, shape, cfg, pixel_size_km, v)
        fields["r_s"] = np.maximum(fields["r_s"], 0.0)
        if hum == "q":
            q = np.clip(fields.pop("q"), 0.0, 0.1)
            dew = np.minimum(dew_from_specific_humidity(q), fields["temp"])
        else:
            dew = np.minimum(fields.pop("dew"), fields["temp"])
            q = np.clip(specific_humidity_from_dew(dew), 0.0, 0.1)
        dew32 = np.minimum(dew.astype(np.float32), fields["temp"].astype(np.float32))
        stacks.append(MeteoStack(q=q, u10=fields["u10"], v10=fields["v10"], u100=fields["u100"],
                                 v100=fields["v100"], r_s=fields["r_s"], temp=fields["temp"], dew=dew32,
                                 timestamp=t, pixel_size_km=pixel_size_km))
    return stacks


def group_observations(obs):
    out = defaultdict(list)
    for o in obs:
        out[o.variable].append(o)
    return dict(out)
