import numpy as np
import pytest
from numpy.testing import assert_allclose

from pidnowcast.grid import GridShape, read_grid_file
from pidnowcast.ingest import KrigingConfig, krige_to_grid
from pidnowcast.physics import frame_residuals, sequence_scores
from pidnowcast.synth import (EXTREME_MM_PER_3H, SynthConfig, catchment_means_3h, generate, rain_frames,
                              read_dataset, station_subsample, write_dataset)
from pidnowcast.verify import read_masks, tile_masks, write_masks


@pytest.fixture(scope="module")
def exact_ds():
    return generate(SynthConfig(n_sequences=20, seed=3, extreme_fraction=0.2))


def _mean_abs_residual(ds):
    return np.mean([np.abs(r.values).mean() for s in ds.samples for r in frame_residuals(s.precip, s.meteo)])


def test_exact_mode_residual_vanishes(exact_ds):
    assert _mean_abs_residual(exact_ds) < 1e-6
    for s in exact_ds.samples:
        assert np.min(sequence_scores(s.precip, s.meteo)) >= 0.99


def test_noisy_mode_residual_is_the_injected_noise():
    ds = generate(SynthConfig(n_sequences=10, seed=4, conservation_mode="noisy", noise_sigma=1.0))
    assert 0.5 <= _mean_abs_residual(ds) <= 1.5
    s = ds.samples[0]
    res = np.stack([r.values for r in frame_residuals(s.precip, s.meteo)])
    assert_allclose(res, -s.noise, atol=1e-5)


def test_noise_scale_follows_sigma():
    ds = generate(SynthConfig(n_sequences=4, seed=5, conservation_mode="noisy", noise_sigma=0.25))
    assert_allclose(_mean_abs_residual(ds), 0.25 * np.sqrt(2 / np.pi), rtol=0.05)


def test_meteo_covers_previous_step(exact_ds):
    s = exact_ds.samples[0]
    assert [m.timestamp for m in s.meteo] == [-30] + s.precip.timestamps
    assert all(m.q.min() > 0 and m.r_s.min() >= 0 for m in s.meteo)
    assert all(np.all(m.dew <= m.temp) for m in s.meteo)


def test_rain_blob_drifts_with_wind():
    cfg = SynthConfig(height=64, width=64, blob_count=1, blob_radius_km=2.0)
    wind = np.array([1.5, -0.5])
    checked = 0
    for seed in range(6):
        a = rain_frames(cfg, np.random.default_rng(seed), wind)
        mass = a.sum(axis=(1, 2))
        inside = np.flatnonzero(mass > 0.9999 * mass.max())
        yy, xx = np.mgrid[0:64, 0:64]
        for k0, k1 in zip(inside[:-1], inside[1:]):
            dx = (a[k1] * xx).sum() / mass[k1] - (a[k0] * xx).sum() / mass[k0]
            dy = (a[k1] * yy).sum() / mass[k1] - (a[k0] * yy).sum() / mass[k0]
            # m/s times 1800 s, in 1 km pixels
            assert_allclose([dx, dy], (k1 - k0) * wind * 1.8, atol=1e-3)
            checked += 1
    assert checked > 10


def test_label_consistency(exact_ds):
    labels = exact_ds.labels
    assert len(labels) == 20 * 4
    for s in exact_ds.samples:
        obs = catchment_means_3h(s.precip.array[3:], exact_ds.masks)
        for lab in s.labels:
            assert lab.obs_mm_per_3h == pytest.approx(obs[lab.catchment_id])
            assert lab.extreme == (lab.obs_mm_per_3h > EXTREME_MM_PER_3H)


def test_extreme_fraction_counts_sequences(exact_ds):
    flagged = {lab.sequence_id for lab in exact_ds.labels if lab.extreme}
    assert len(flagged) == 4


def test_zero_extreme_fraction_has_no_positives():
    ds = generate(SynthConfig(n_sequences=15, seed=6, extreme_fraction=0.0, blob_intensity=20.0))
    assert not any(lab.extreme for lab in ds.labels)


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(extreme_fraction=1.5)
    with pytest.raises(ValueError):
        SynthConfig(conservation_mode="approximate")
    with pytest.raises(ValueError):
        SynthConfig(height=30, catchment_grid=(4, 4))


def test_deterministic():
    a = generate(SynthConfig(n_sequences=3, seed=11, conservation_mode="noisy"))
    b = generate(SynthConfig(n_sequences=3, seed=11, conservation_mode="noisy"))
    for sa, sb in zip(a.samples, b.samples):
        assert np.array_equal(sa.precip.array, sb.precip.array)
        assert all(np.array_equal(ma.r_s, mb.r_s) and np.array_equal(ma.q, mb.q)
                   for ma, mb in zip(sa.meteo, sb.meteo))
    c = generate(SynthConfig(n_sequences=3, seed=12))
    assert not np.array_equal(a.samples[0].precip.array, c.samples[0].precip.array)


def test_write_dataset_roundtrip_and_bytes(tmp_path):
    ds = generate(SynthConfig(n_sequences=2, seed=2, height=16, width=16))
    write_dataset(ds, tmp_path / "a")
    write_dataset(generate(SynthConfig(n_sequences=2, seed=2, height=16, width=16)), tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["labels.csv", "masks.pnwg", "seq_0000_meteo.pnwg", "seq_0000_precip.pnwg",
                     "seq_0001_meteo.pnwg", "seq_0001_precip.pnwg"]
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    samples, masks = read_dataset(tmp_path / "a")
    assert np.array_equal(samples[1].precip.array, ds.samples[1].precip.array)
    assert [m.timestamp for m in samples[0].meteo] == [m.timestamp for m in ds.samples[0].meteo]
    assert len(masks) == 4 and masks[3].mask[15, 15]
    header = (tmp_path / "a" / "labels.csv").read_text().splitlines()[0]
    assert header == "sequence_id,catchment_id,obs_mm_per_3h,extreme"


def test_mask_roundtrip(tmp_path):
    masks = tile_masks(GridShape(8, 12), (2, 3))
    write_masks(masks, tmp_path / "m.pnwg")
    back = read_masks(tmp_path / "m.pnwg")
    assert len(back) == 6
    for a, b in zip(masks, back):
        assert np.array_equal(a.mask, b.mask)
    total = np.sum([m.mask for m in back], axis=0)
    assert np.all(total == 1)


def test_station_subsample_dense_kriging_roundtrip(exact_ds):
    stack = exact_ds.samples[0].meteo[2]
    obs = station_subsample(stack, 32 * 32, seed=0, variables=("temp",))
    grid = krige_to_grid(obs, GridShape(32, 32), KrigingConfig())
    assert np.sqrt(np.mean((grid - stack.temp) ** 2)) < 1e-4


def test_station_subsample_single_and_seeded(exact_ds):
    stack = exact_ds.samples[0].meteo[0]
    obs = station_subsample(stack, 1, seed=3, variables=("temp",))
    grid = krige_to_grid(obs, GridShape(32, 32))
    assert np.all(grid == grid[0, 0]) and grid[0, 0] == pytest.approx(obs[0].value)
    a = station_subsample(stack, 20, seed=8)
    b = station_subsample(stack, 20, seed=8)
    assert a == b and len(a) == 20 * 8
    ids = {o.station_id for o in a}
    assert len(ids) == 20
    for o in a[:8]:
        i, j = int(round(o.y_km)), int(round(o.x_km))
        assert o.value == pytest.approx(float(getattr(stack, o.variable)[i, j]))
    with pytest.raises(ValueError):
        station_subsample(stack, 32 * 32 + 1)


def test_written_meteo_reads_back(tmp_path, exact_ds):
    write_dataset(exact_ds, tmp_path)
    back = read_grid_file(tmp_path / "seq_0004_meteo.pnwg")
    assert np.array_equal(back[3].r_s, exact_ds.samples[4].meteo[3].r_s)
