import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pidnowcast.grid import (HEADER_SIZE, ArityError, GridFormatError, GridLengthError, GridShape,
                             GridValidationError, MeteoStack, PrecipFrame, PrecipSequence,
                             StationObservation, aggregate_frames, read_grid_file, read_station_csv,
                             split_sequence, write_grid_file, write_station_csv)


def seq_of(t, h=4, w=5, seed=0, start=0, step=30):
    arr = np.random.default_rng(seed).gamma(0.5, 2.0, size=(t, h, w))
    return PrecipSequence.from_array(arr, step, start)


def meteo(h=3, w=3, t=0, seed=0):
    rng = np.random.default_rng(seed)
    temp = rng.uniform(5, 25, (h, w))
    return MeteoStack(q=rng.uniform(0.005, 0.015, (h, w)), u10=rng.normal(size=(h, w)),
                      v10=rng.normal(size=(h, w)), u100=rng.normal(size=(h, w)),
                      v100=rng.normal(size=(h, w)), r_s=rng.uniform(0, 600, (h, w)),
                      temp=temp, dew=temp - rng.uniform(0, 5, (h, w)), timestamp=t)


def test_tiny_zero_grid_layout(tmp_path):
    seq = PrecipSequence.from_array(np.zeros((1, 2, 2)))
    path = tmp_path / "z.pnwg"
    write_grid_file(seq, path)
    raw = path.read_bytes()
    assert len(raw) == HEADER_SIZE + 16
    assert raw[:4] == b"PNWG"
    version, dtype, kind, t, h, w, c, step = struct.unpack_from("<HBBIIIII", raw, 4)
    assert (version, dtype, kind, t, h, w, c, step) == (1, 1, 1, 1, 2, 2, 1, 30)
    assert raw[HEADER_SIZE - 28:HEADER_SIZE] == bytes(28)
    assert read_grid_file(path) == seq


def test_full_size_roundtrip(tmp_path):
    seq = seq_of(9, 256, 256, seed=3)
    write_grid_file(seq, tmp_path / "big.pnwg")
    back = read_grid_file(tmp_path / "big.pnwg")
    assert back == seq
    assert back.array.tobytes() == seq.array.tobytes()


def test_meteo_roundtrip(tmp_path):
    stacks = [meteo(t=30 * i, seed=i) for i in range(3)]
    write_grid_file(stacks, tmp_path / "m.pnwg")
    back = read_grid_file(tmp_path / "m.pnwg")
    assert back == stacks


@settings(max_examples=30, deadline=None)
@given(t=st.integers(1, 4), h=st.integers(1, 6), w=st.integers(1, 6), seed=st.integers(0, 2**16),
       start=st.integers(-600, 600), step=st.sampled_from([5, 30, 60]))
def test_roundtrip_property(tmp_path_factory, t, h, w, seed, start, step):
    seq = seq_of(t, h, w, seed, start, step)
    path = tmp_path_factory.mktemp("rt") / "s.pnwg"
    write_grid_file(seq, path)
    assert read_grid_file(path) == seq


def test_nan_rejected_with_index():
    arr = np.zeros((2, 2))
    arr[1, 0] = np.nan
    with pytest.raises(GridValidationError, match=r"\(1, 0\)"):
        PrecipFrame(arr)


def test_negative_rejected_at_construction():
    with pytest.raises(GridValidationError, match="negative"):
        PrecipSequence.from_array(-np.ones((1, 2, 2)))


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.pnwg"
    write_grid_file(seq_of(1), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(GridFormatError, match="magic"):
        read_grid_file(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "short.pnwg"
    write_grid_file(PrecipSequence.from_array(np.zeros((1, 2, 2))), path)
    path.write_bytes(path.read_bytes()[:-4])  # 3 floats for a 2x2x1 grid
    with pytest.raises(GridLengthError):
        read_grid_file(path)


def test_nan_payload_rejected(tmp_path):
    path = tmp_path / "nan.pnwg"
    write_grid_file(PrecipSequence.from_array(np.zeros((1, 2, 2))), path)
    raw = bytearray(path.read_bytes())
    raw[HEADER_SIZE + 8:HEADER_SIZE + 12] = struct.pack("<f", float("nan"))
    path.write_bytes(bytes(raw))
    with pytest.raises(GridValidationError, match="non-finite"):
        read_grid_file(path)


def test_missing_parent_dir(tmp_path):
    with pytest.raises(FileNotFoundError):
        write_grid_file(seq_of(1), tmp_path / "nope" / "x.pnwg")


def test_timestamps_must_step():
    frames = (PrecipFrame(np.zeros((2, 2)), 0), PrecipFrame(np.zeros((2, 2)), 60))
    with pytest.raises(GridValidationError, match="timestamp"):
        PrecipSequence(frames, 30)


def test_meteo_invariants():
    m = meteo()
    with pytest.raises(GridValidationError, match="dew"):
        m.replace(dew=m.temp + 1.0)
    with pytest.raises(GridValidationError, match="r_s"):
        m.replace(r_s=-np.ones((3, 3)))
    with pytest.raises(GridValidationError, match="q"):
        m.replace(q=np.full((3, 3), 0.2))


def test_grid_shape_positive():
    with pytest.raises(GridValidationError):
        GridShape(0, 3)


def test_split_three_cond_six_target():
    seq = seq_of(9)
    cond, target = split_sequence(seq, 3, 6)
    assert cond.timestamps == [0, 30, 60]
    assert target.timestamps == [90 + 30 * i for i in range(6)]
    assert cond.frames == seq.frames[:3] and target.frames == seq.frames[3:]


def test_split_minimal_and_arity():
    a, b = split_sequence(seq_of(2), 1, 1)
    assert len(a) == len(b) == 1
    with pytest.raises(ArityError):
        split_sequence(seq_of(5), 3, 6)


def test_aggregate_mean_and_max():
    arr = np.arange(12.0).reshape(12, 1, 1)
    seq = PrecipSequence.from_array(arr, 5)
    mean = aggregate_frames(seq, 30)
    assert mean.step_minutes == 30 and mean.timestamps == [0, 30]
    np.testing.assert_allclose(mean.array[:, 0, 0], [2.5, 8.5])
    np.testing.assert_allclose(aggregate_frames(seq, 30, "max").array[:, 0, 0], [5.0, 11.0])


def test_station_csv_roundtrip(tmp_path):
    obs = [StationObservation("s1", 1.5, 2.25, 60, "temp", 12.125),
           StationObservation("s2", 0.1, 30.0, 60, "u10", -3.3)]
    path = tmp_path / "st.csv"
    write_station_csv(obs, path)
    assert path.read_text().splitlines()[0] == "station_id,x_km,y_km,timestamp_min,variable,value"
    assert read_station_csv(path) == obs


def test_station_outside_grid():
    obs = StationObservation("far", 500.0, 5.0, 0, "temp", 1.0)
    with pytest.raises(GridValidationError, match="outside"):
        obs.check_inside(GridShape(32, 32), margin_km=10)
    StationObservation("near", 35.0, 5.0, 0, "temp", 1.0).check_inside(GridShape(32, 32), margin_km=10)


def test_frames_immutable():
    fr = PrecipFrame(np.ones((2, 2)))
    with pytest.raises(ValueError):
        fr.values[0, 0] = 3.0
