"""Synthetic precipitation and meteorology with a known moisture residual.

Rain is a sum of Gaussian blobs drifting with a constant wind. Humidity is a
static smooth pattern that moistens uniformly over time. The tendency and
advection terms are evaluated on the stored float32 fields with the same
discrete operators the residual uses, and the radiation field is then chosen
pixel-wise so that Makkink ET closes the budget. In exact mode the recomputed
residual is zero up to float32 rounding of ``r_s``; in noisy mode it equals a
prescribed Gaussian error field (negated).
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .grid import (METEO_FIELDS, GridShape, MeteoStack, PrecipSequence, StationObservation,
                   write_grid_file)
from .physics import (MakkinkInputs, ResidualConfig, dew_from_specific_humidity, makkink_et,
                      residual_terms)
from .verify import catchment_reduce, read_masks, tile_masks, write_masks

EXTREME_MM_PER_3H = 5.0
LABEL_COLUMNS = ("sequence_id", "catchment_id", "obs_mm_per_3h", "extreme")


@dataclass
class SynthConfig:
    height: int = 32
    width: int = 32
    n_sequences: int = 10
    seed: int = 0
    n_frames: int = 9
    n_cond: int = 3
    step_minutes: int = 30
    pixel_size_km: float = 1.0
    advection_speed: float = 2.0
    blob_count: int = 3
    blob_radius_km: float = 4.0
    blob_intensity: float = 4.0
    extreme_fraction: float = 0.05
    conservation_mode: str = "exact"
    noise_sigma: float = 1.0
    catchment_grid: tuple = (2, 2)
    column_mass: float = 10000.0
    base_q: float = 0.014
    q_pattern_amplitude: float = 0.002
    moistening_mm_h: float = 8.0

    def __post_init__(self):
        self.catchment_grid = tuple(int(c) for c in self.catchment_grid)
        if not 0.0 <= self.extreme_fraction <= 1.0:
            raise ValueError("extreme_fraction must be in [0, 1]")
        if self.conservation_mode not in ("exact", "noisy"):
            raise ValueError(f"conservation_mode must be 'exact' or 'noisy', got {self.conservation_mode!r}")
        if self.n_frames - self.n_cond < 1 or self.n_cond < 1:
            raise ValueError("need at least one conditioning and one target frame")
        if self.height < 2 or self.width < 2 or self.n_sequences < 0:
            raise ValueError("grid must be at least 2x2")
        ch, cw = self.catchment_grid
        if self.height % ch or self.width % cw:
            raise ValueError("catchment grid must tile the domain")

    @property
    def m_pred(self):
        return self.n_frames - self.n_cond

    def residual_config(self):
        return ResidualConfig(column_mass=self.column_mass, dx_km=self.pixel_size_km,
                              dy_km=self.pixel_size_km, dt_minutes=self.step_minutes)

    def to_dict(self):
        d = asdict(self)
        d["catchment_grid"] = list(self.catchment_grid)
        return d


@dataclass
class Label:
    sequence_id: int
    catchment_id: int
    obs_mm_per_3h: float
    extreme: bool


@dataclass
class SynthSample:
    precip: PrecipSequence
    meteo: list  # MeteoStacks at t0 - step ... last frame
    labels: list = field(default_factory=list)
    noise: np.ndarray | None = None


@dataclass
class SynthDataset:
    config: SynthConfig
    samples: list
    masks: list

    @property
    def labels(self):
        return [lab for s in self.samples for lab in s.labels]

    def precip_array(self):
        return np.stack([s.precip.array for s in self.samples]) if self.samples else np.zeros((0,))


def catchment_means_3h(frames, masks):
    """Mean over mask pixels and target frames, times 3 h: mm per 3 h per catchment."""
    return catchment_reduce(frames, masks)


def _blob_field(centres, radii, amps, xx, yy):
    out = np.zeros(xx.shape)
    for (cx, cy), r, a in zip(centres, radii, amps):
        out += a * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * r * r))
    return out


def rain_frames(cfg, rng, wind):
    """Unit-amplitude rain (T, H, W) from blobs drifting with ``wind`` (m/s)."""
    h, w, px = cfg.height, cfg.width, cfg.pixel_size_km
    yy, xx = np.mgrid[0:h, 0:w] * px
    shift_km = np.asarray(wind) * cfg.step_minutes * 60.0 / 1000.0
    path = shift_km * (cfg.n_frames - 1)
    start = np.column_stack([rng.uniform(0, w * px, cfg.blob_count),
                             rng.uniform(0, h * px, cfg.blob_count)]) - 0.5 * path
    radii = cfg.blob_radius_km * rng.uniform(0.6, 1.4, cfg.blob_count)
    amps = rng.uniform(0.5, 1.5, cfg.blob_count)
    return np.stack([_blob_field(start + k * shift_km, radii, amps, xx, yy)
                     for k in range(cfg.n_frames)])


def _smooth_field(rng, h, w, mean, amp):
    yy, xx = np.mgrid[0:h, 0:w]
    kx, ky = rng.uniform(0.5, 1.5, 2) * 2 * np.pi / max(h, w)
    ph = rng.uniform(0, 2 * np.pi, 2)
    return mean + amp * np.sin(kx * xx + ph[0]) * np.cos(ky * yy + ph[1])


def _f32(a):
    return np.asarray(a, dtype=np.float32)


def _sequence(cfg: SynthConfig, seq_id: int, extreme: bool, rng: np.random.Generator) -> SynthSample:
    h, w = cfg.height, cfg.width
    rcfg = cfg.residual_config()
    masks = tile_masks(GridShape(h, w), cfg.catchment_grid)
    angle = rng.uniform(0, 2 * np.pi)
    wind10 = cfg.advection_speed * np.array([np.cos(angle), np.sin(angle)])
    wind100 = 1.5 * wind10
    unit = rain_frames(cfg, rng, wind10)
    rain = cfg.blob_intensity * unit
    peak = catchment_means_3h(rain[cfg.n_cond:], masks).max()
    # rescale only when the natural peak falls on the wrong side of the threshold
    if extreme and peak <= EXTREME_MM_PER_3H:
        rain *= rng.uniform(1.2, 2.4) * EXTREME_MM_PER_3H / max(peak, 1e-12)
    elif not extreme and peak > EXTREME_MM_PER_3H:
        rain *= rng.uniform(0.2, 0.8) * EXTREME_MM_PER_3H / peak
    rain = _f32(rain)

    temp = _f32(_smooth_field(rng, h, w, 16.0, 3.0))
    rs_base = _smooth_field(rng, h, w, 250.0, 80.0)
    et_factor = makkink_et(MakkinkInputs(temp.astype(np.float64), 1.0))
    fields = {"u10": np.full((h, w), wind10[0], np.float32), "v10": np.full((h, w), wind10[1], np.float32),
              "u100": np.full((h, w), wind100[0], np.float32),
              "v100": np.full((h, w), wind100[1], np.float32), "temp": temp}

    # q: static smooth pattern plus uniform moistening; ET closes the budget pixel-wise
    noise = np.zeros((cfg.n_frames, h, w))
    if cfg.conservation_mode == "noisy":
        noise = rng.normal(0.0, cfg.noise_sigma, noise.shape)
    pattern = _f32(_smooth_field(rng, h, w, cfg.base_q, cfg.q_pattern_amplitude * cfg.base_q))
    probe = _stack(pattern, np.zeros((h, w), np.float32), fields, 0, cfg)
    adv = residual_terms(pattern, pattern, probe, rcfg)
    adv = adv["adv10"] + adv["adv100"]
    # ET = P - noise + moistening - advection must stay non-negative
    moist = max(cfg.moistening_mm_h, 1.05 * float((noise + adv - rain).max()) + 1.0)
    dq_step = moist * rcfg.dt_minutes / 60.0 / rcfg.column_mass
    q_prev = pattern
    stacks = [_stack(q_prev, _f32(rs_base), fields, -cfg.step_minutes, cfg)]
    for k in range(cfg.n_frames):
        p = rain[k].astype(np.float64)
        q32 = _f32(pattern.astype(np.float64) + (k + 1) * dq_step)
        # terms are recomputed from the float32 fields so storage rounding is absorbed too
        probe = _stack(q32, np.zeros((h, w), np.float32), fields, k * cfg.step_minutes, cfg)
        t = residual_terms(q_prev, q32, probe, rcfg)
        et_needed = np.maximum(p - noise[k] - (t["tendency"] + t["adv10"] + t["adv100"]), 0.0)
        r_s = _f32(et_needed / et_factor)
        stacks.append(_stack(q32, r_s, fields, k * cfg.step_minutes, cfg))
        q_prev = q32
    precip = PrecipSequence.from_array(rain, cfg.step_minutes, 0, cfg.pixel_size_km)
    obs = catchment_means_3h(precip.array[cfg.n_cond:], masks)
    labels = [Label(seq_id, m.catchment_id, float(v), bool(v > EXTREME_MM_PER_3H)) for m, v in zip(masks, obs)]
    return SynthSample(precip, stacks, labels, noise if cfg.conservation_mode == "noisy" else None)


def _stack(q, r_s, fields, t, cfg):
    dew = np.minimum(_f32(dew_from_specific_humidity(q.astype(np.float64))), fields["temp"])
    return MeteoStack(q=q, r_s=r_s, dew=dew, timestamp=t, pixel_size_km=cfg.pixel_size_km, **fields)


def generate(cfg: SynthConfig) -> SynthDataset:
    """Seeded dataset of precipitation sequences, meteorology and catchment labels.

    ``round(extreme_fraction * n_sequences)`` sequences get a catchment whose
    3-hour target mean exceeds 5 mm; all others stay at or below it. Rain
    starts at ``blob_intensity`` and is rescaled only when needed for that.
    """
    rng = np.random.default_rng(cfg.seed)
    n_ext = int(round(cfg.extreme_fraction * cfg.n_sequences))
    extreme = np.zeros(cfg.n_sequences, dtype=bool)
    extreme[rng.permutation(cfg.n_sequences)[:n_ext]] = True
    seeds = rng.integers(0, 2 ** 63, size=cfg.n_sequences)
    samples = [_sequence(cfg, i, bool(extreme[i]), np.random.default_rng(seeds[i]))
               for i in range(cfg.n_sequences)]
    return SynthDataset(cfg, samples, tile_masks(GridShape(cfg.height, cfg.width), cfg.catchment_grid))


def station_subsample(stack: MeteoStack, n_stations: int, seed: int = 0, variables=METEO_FIELDS):
    """Point observations of ``variables`` at ``n_stations`` distinct random pixels."""
    h, w = stack.q.shape
    if not 1 <= n_stations <= h * w:
        raise ValueError(f"n_stations must be in [1, {h * w}]")
    idx = np.sort(np.random.default_rng(seed).choice(h * w, size=n_stations, replace=False))
    out = []
    for k in idx:
        i, j = divmod(int(k), w)
        for var in variables:
            out.append(StationObservation(f"st{k:05d}", j * stack.pixel_size_km, i * stack.pixel_size_km,
                                          stack.timestamp, var, float(getattr(stack, var)[i, j])))
    return out


def write_dataset(ds: SynthDataset, out_dir):
    """Write ``seq_XXXX_precip.pnwg``, ``seq_XXXX_meteo.pnwg``, ``masks.pnwg`` and ``labels.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(ds.samples):
        write_grid_file(s.precip, out / f"seq_{i:04d}_precip.pnwg")
        write_grid_file(s.meteo, out / f"seq_{i:04d}_meteo.pnwg")
    write_masks(ds.masks, out / "masks.pnwg", ds.config.pixel_size_km)
    write_labels(ds.labels, out / "labels.csv")
    return out


def write_labels(labels, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(LABEL_COLUMNS)
        for lab in labels:
            wr.writerow([lab.sequence_id, lab.catchment_id, repr(lab.obs_mm_per_3h), int(lab.extreme)])


def read_dataset(in_dir):
    """Load sequences and meteorology written by ``write_dataset``; returns (samples, masks)."""
    from .grid import read_grid_file

    d = Path(in_dir)
    samples = []
    for p in sorted(d.glob("seq_*_precip.pnwg")):
        meteo_path = p.with_name(p.name.replace("_precip", "_meteo"))
        samples.append(SynthSample(read_grid_file(p), read_grid_file(meteo_path)))
    masks = read_masks(d / "masks.pnwg") if (d / "masks.pnwg").exists() else []
    return samples, masks
