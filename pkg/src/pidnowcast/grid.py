"""Gridded spatio-temporal weather data and the PNWG / station-CSV file formats.

Grids are row-major ``[T, H, W, C]`` float32. Row index increases northward
(y), column index increases eastward (x). Timestamps are integer minutes
relative to a sequence origin.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PNWG"
FORMAT_VERSION = 1
DTYPE_F32LE = 1
KIND_PRECIP = 1
KIND_METEO = 2
# magic, version, dtype, kind, T, H, W, C, step_minutes, pixel_size_km, t0_minutes
_HEADER = struct.Struct("<4sHBBIIIIIfi")
HEADER_SIZE = 64
_RESERVED = HEADER_SIZE - _HEADER.size

METEO_FIELDS = ("q", "u10", "v10", "u100", "v100", "r_s", "temp", "dew")
STATION_CSV_HEADER = ("station_id", "x_km", "y_km", "timestamp_min", "variable", "value")


class GridValidationError(ValueError):
    """A value violates a data-model invariant."""


class GridFormatError(ValueError):
    """A file is not a readable PNWG file."""


class GridLengthError(GridFormatError):
    """A PNWG payload is shorter or longer than its header declares."""


class ArityError(ValueError):
    """Wrong number of frames for the requested operation."""


@dataclass(frozen=True)
class GridShape:
    height: int
    width: int
    channels: int = 1

    def __post_init__(self):
        for name in ("height", "width", "channels"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise GridValidationError(f"GridShape.{name} must be a positive integer, got {v!r}")
        if self.height * self.width * self.channels > np.iinfo(np.intp).max // 4:
            raise GridValidationError("GridShape element count exceeds addressable size")


def _frozen_f32(values, name):
    arr = np.array(values, dtype=np.float32, copy=True)
    arr.flags.writeable = False
    return arr


def _first_bad(mask):
    return tuple(int(i) for i in np.argwhere(mask)[0])


def _check_finite(arr, name):
    bad = ~np.isfinite(arr)
    if bad.any():
        raise GridValidationError(f"{name}: non-finite value at index {_first_bad(bad)}")


@dataclass(frozen=True, eq=False)
class PrecipFrame:
    """One precipitation grid in mm/h."""

    values: np.ndarray
    timestamp: int = 0

    def __post_init__(self):
        arr = _frozen_f32(self.values, "values")
        if arr.ndim != 2:
            raise GridValidationError(f"PrecipFrame.values must be 2-D (H, W), got shape {arr.shape}")
        GridShape(*arr.shape)
        _check_finite(arr, "PrecipFrame.values")
        neg = arr < 0
        if neg.any():
            raise GridValidationError(f"PrecipFrame.values: negative precipitation at index {_first_bad(neg)}")
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "timestamp", int(self.timestamp))

    @property
    def shape(self) -> GridShape:
        return GridShape(self.values.shape[0], self.values.shape[1], 1)

    def __eq__(self, other):
        return (isinstance(other, PrecipFrame) and self.timestamp == other.timestamp
                and self.values.shape == other.values.shape
                and self.values.tobytes() == other.values.tobytes())

    __hash__ = None


@dataclass(frozen=True, eq=False)
class PrecipSequence:
    frames: tuple
    step_minutes: int = 30
    pixel_size_km: float = 1.0

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise GridValidationError("PrecipSequence needs at least one frame")
        if self.step_minutes <= 0:
            raise GridValidationError(f"step_minutes must be positive, got {self.step_minutes}")
        shape = frames[0].values.shape
        for i, fr in enumerate(frames):
            if not isinstance(fr, PrecipFrame):
                raise GridValidationError(f"frames[{i}] is not a PrecipFrame")
            if fr.values.shape != shape:
                raise GridValidationError(f"frames[{i}] shape {fr.values.shape} differs from {shape}")
            if i and fr.timestamp - frames[i - 1].timestamp != self.step_minutes:
                raise GridValidationError(
                    f"frames[{i}] timestamp {fr.timestamp} is not previous + {self.step_minutes}")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "step_minutes", int(self.step_minutes))
        object.__setattr__(self, "pixel_size_km", float(np.float32(self.pixel_size_km)))

    @classmethod
    def from_array(cls, arr, step_minutes: int = 30, start: int = 0, pixel_size_km: float = 1.0):
        arr = np.asarray(arr)
        if arr.ndim != 3:
            raise GridValidationError(f"expected (T, H, W) array, got shape {arr.shape}")
        frames = tuple(PrecipFrame(a, start + i * step_minutes) for i, a in enumerate(arr))
        return cls(frames, step_minutes, pixel_size_km)

    @property
    def array(self) -> np.ndarray:
        return np.stack([f.values for f in self.frames])

    @property
    def timestamps(self) -> list:
        return [f.timestamp for f in self.frames]

    @property
    def shape(self) -> GridShape:
        return self.frames[0].shape

    def __len__(self):
        return len(self.frames)

    def __eq__(self, other):
        return (isinstance(other, PrecipSequence) and self.step_minutes == other.step_minutes
                and self.pixel_size_km == other.pixel_size_km and self.frames == other.frames)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class MeteoStack:
    """Co-registered meteorological fields at one timestep.

    Units: q in g/g, winds in m/s, r_s in W/m^2, temp and dew in deg C.
    """

    q: np.ndarray
    u10: np.ndarray
    v10: np.ndarray
    u100: np.ndarray
    v100: np.ndarray
    r_s: np.ndarray
    temp: np.ndarray
    dew: np.ndarray
    timestamp: int = 0
    pixel_size_km: float = 1.0

    def __post_init__(self):
        shape = None
        for name in METEO_FIELDS:
            arr = _frozen_f32(getattr(self, name), name)
            if arr.ndim != 2:
                raise GridValidationError(f"MeteoStack.{name} must be 2-D, got shape {arr.shape}")
            if shape is None:
                shape = arr.shape
                GridShape(*shape)
            elif arr.shape != shape:
                raise GridValidationError(f"MeteoStack.{name} shape {arr.shape} differs from {shape}")
            _check_finite(arr, f"MeteoStack.{name}")
            object.__setattr__(self, name, arr)
        if (self.q < 0).any() or (self.q > 0.1).any():
            raise GridValidationError(
                f"MeteoStack.q outside [0, 0.1] at index {_first_bad((self.q < 0) | (self.q > 0.1))}")
        if (self.r_s < 0).any():
            raise GridValidationError(f"MeteoStack.r_s negative at index {_first_bad(self.r_s < 0)}")
        if (self.dew > self.temp).any():
            raise GridValidationError(f"MeteoStack.dew exceeds temp at index {_first_bad(self.dew > self.temp)}")
        if not self.pixel_size_km > 0:
            raise GridValidationError(f"pixel_size_km must be positive, got {self.pixel_size_km}")
        object.__setattr__(self, "timestamp", int(self.timestamp))
        object.__setattr__(self, "pixel_size_km", float(np.float32(self.pixel_size_km)))

    @property
    def shape(self) -> GridShape:
        return GridShape(self.q.shape[0], self.q.shape[1], 1)

    def channels(self) -> np.ndarray:
        """Fields stacked as (H, W, C) in ``METEO_FIELDS`` order."""
        return np.stack([getattr(self, n) for n in METEO_FIELDS], axis=-1)

    @classmethod
    def from_channels(cls, arr, timestamp=0, pixel_size_km=1.0):
        return cls(*(arr[..., i] for i in range(len(METEO_FIELDS))),
                   timestamp=timestamp, pixel_size_km=pixel_size_km)

    def replace(self, **changes):
        kw = {n: getattr(self, n) for n in METEO_FIELDS + ("timestamp", "pixel_size_km")}
        kw.update(changes)
        return MeteoStack(**kw)

    def __eq__(self, other):
        return (isinstance(other, MeteoStack) and self.timestamp == other.timestamp
                and self.pixel_size_km == other.pixel_size_km
                and all(getattr(self, n).tobytes() == getattr(other, n).tobytes()
                        and getattr(self, n).shape == getattr(other, n).shape for n in METEO_FIELDS))

    __hash__ = None


@dataclass(frozen=True)
class StationObservation:
    station_id: str
    x_km: float
    y_km: float
    timestamp: int
    variable: str
    value: float

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise GridValidationError(f"station {self.station_id}: non-finite {self.variable} value")
        if not (np.isfinite(self.x_km) and np.isfinite(self.y_km)):
            raise GridValidationError(f"station {self.station_id}: non-finite position")

    def check_inside(self, shape: GridShape, pixel_size_km: float = 1.0, margin_km: float = 10.0):
        w = shape.width * pixel_size_km
        h = shape.height * pixel_size_km
        if not (-margin_km <= self.x_km <= w + margin_km and -margin_km <= self.y_km <= h + margin_km):
            raise GridValidationError(
                f"station {self.station_id} at ({self.x_km}, {self.y_km}) km lies outside the grid "
                f"bounding box (margin {margin_km} km)")


# -- PNWG binary format ------------------------------------------------------

@dataclass
class RawGrid:
    kind: int
    data: np.ndarray  # (T, H, W, C) float32
    step_minutes: int
    pixel_size_km: float
    t0: int = 0
    extra: dict = field(default_factory=dict)


def write_raw(path, kind, data, step_minutes, pixel_size_km=1.0, t0=0):
    data = np.ascontiguousarray(data, dtype="<f4")
    if data.ndim != 4:
        raise GridValidationError(f"PNWG payload must be (T, H, W, C), got shape {data.shape}")
    t, h, w, c = data.shape
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, DTYPE_F32LE, kind, t, h, w, c,
                          int(step_minutes), float(pixel_size_km), int(t0))
    try:
        with open(path, "wb") as fh:
            fh.write(header + bytes(_RESERVED))
            fh.write(data.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write grid file {path}: {exc}") from exc


def read_raw(path) -> RawGrid:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read grid file {path}: {exc}") from exc
    if len(raw) < HEADER_SIZE:
        raise GridLengthError(f"{path}: file shorter than the {HEADER_SIZE}-byte header")
    magic, version, dtype, kind, t, h, w, c, step, px, t0 = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise GridFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise GridFormatError(f"{path}: unsupported format version {version}")
    if dtype != DTYPE_F32LE:
        raise GridFormatError(f"{path}: unsupported dtype code {dtype}")
    if kind not in (KIND_PRECIP, KIND_METEO):
        raise GridFormatError(f"{path}: unknown kind {kind}")
    expected = t * h * w * c * 4
    payload = raw[HEADER_SIZE:]
    if len(payload) != expected:
        raise GridLengthError(f"{path}: payload has {len(payload)} bytes, header declares "
                              f"{t}x{h}x{w}x{c} floats ({expected} bytes)")
    data = np.frombuffer(payload, dtype="<f4").reshape(t, h, w, c).astype(np.float32)
    return RawGrid(kind, data, step, px, t0)


def write_grid_file(obj, path):
    """Write a PrecipSequence, a MeteoStack, or a list of MeteoStacks as PNWG."""
    path = Path(path)
    if not path.parent.exists():
        raise FileNotFoundError(f"parent directory of {path} does not exist")
    if isinstance(obj, PrecipSequence):
        write_raw(path, KIND_PRECIP, obj.array[..., None], obj.step_minutes, obj.pixel_size_km,
                  obj.frames[0].timestamp)
        return
    stacks = [obj] if isinstance(obj, MeteoStack) else list(obj)
    if not stacks or not all(isinstance(s, MeteoStack) for s in stacks):
        raise TypeError("write_grid_file expects a PrecipSequence or MeteoStack(s)")
    step = _meteo_step(stacks)
    write_raw(path, KIND_METEO, np.stack([s.channels() for s in stacks]), step,
              stacks[0].pixel_size_km, stacks[0].timestamp)


def _meteo_step(stacks):
    if len(stacks) == 1:
        return 30
    step = stacks[1].timestamp - stacks[0].timestamp
    for i in range(1, len(stacks)):
        if stacks[i].timestamp - stacks[i - 1].timestamp != step or step <= 0:
            raise GridValidationError(f"meteo stack {i}: timestamps not evenly increasing")
        if stacks[i].q.shape != stacks[0].q.shape:
            raise GridValidationError(f"meteo stack {i}: grid shape differs")
    return step


def read_grid_file(path):
    """Read a PNWG file: a PrecipSequence (kind 1) or a list of MeteoStack (kind 2)."""
    raw = read_raw(path)
    t = raw.data.shape[0]
    if raw.kind == KIND_PRECIP:
        if raw.data.shape[3] != 1:
            raise GridFormatError(f"{path}: precipitation file must have C=1")
        try:
            return PrecipSequence.from_array(raw.data[..., 0], raw.step_minutes or 30, raw.t0,
                                             raw.pixel_size_km)
        except GridValidationError as exc:
            raise GridValidationError(f"{path}: {exc}") from None
    if raw.data.shape[3] != len(METEO_FIELDS):
        raise GridFormatError(f"{path}: meteo file must have C={len(METEO_FIELDS)}, got {raw.data.shape[3]}")
    try:
        return [MeteoStack.from_channels(raw.data[i], raw.t0 + i * raw.step_minutes, raw.pixel_size_km)
                for i in range(t)]
    except GridValidationError as exc:
        raise GridValidationError(f"{path}: {exc}") from None


# -- station CSV -------------------------------------------------------------

def write_station_csv(obs, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(STATION_CSV_HEADER)
        for o in obs:
            writer.writerow([o.station_id, repr(float(o.x_km)), repr(float(o.y_km)), int(o.timestamp),
                             o.variable, repr(float(o.value))])


def read_station_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != STATION_CSV_HEADER:
            raise GridFormatError(f"{path}: expected header {','.join(STATION_CSV_HEADER)}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                sid, x, y, ts, var, val = row
                out.append(StationObservation(sid, float(x), float(y), int(ts), var, float(val)))
            except ValueError as exc:
                raise GridFormatError(f"{path}:{lineno}: {exc}") from None
    return out


# -- sequence operations -----------------------------------------------------

def split_sequence(seq: PrecipSequence, n_cond: int, m_pred: int):
    """Split into (conditioning, target) sequences; timestamps are preserved."""
    if n_cond < 1 or m_pred < 1 or len(seq) != n_cond + m_pred:
        raise ArityError(f"sequence has {len(seq)} frames, expected n_cond + m_pred = {n_cond + m_pred}")
    return (PrecipSequence(seq.frames[:n_cond], seq.step_minutes, seq.pixel_size_km),
            PrecipSequence(seq.frames[n_cond:], seq.step_minutes, seq.pixel_size_km))


def aggregate_frames(seq: PrecipSequence, window_minutes: int = 30, how: str = "mean"):
    """Aggregate fine radar frames (e.g. 5-minute) into coarser windows.

    Each output frame covers ``window_minutes`` starting at its timestamp.
    ``how`` is ``"mean"`` (default) or ``"max"``; trailing partial windows are dropped.
    """
    if window_minutes % seq.step_minutes:
        raise ArityError(f"window {window_minutes} min is not a multiple of step {seq.step_minutes} min")
    k = window_minutes // seq.step_minutes
    n = len(seq) // k
    if n == 0:
        raise ArityError(f"sequence of {len(seq)} frames is shorter than one {window_minutes}-min window")
    arr = seq.array[: n * k].reshape(n, k, *seq.array.shape[1:]).astype(np.float64)
    if how == "mean":
        agg = arr.mean(axis=1)
    elif how == "max":
        agg = arr.max(axis=1)
    else:
        raise ValueError(f"unknown aggregation {how!r}")
    return PrecipSequence.from_array(agg, window_minutes, seq.frames[0].timestamp, seq.pixel_size_km)
