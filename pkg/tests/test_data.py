import numpy as np
import pytest
from hypothesis import given, strategies as st

from traffic_s2s.data import (BINS_PER_DAY, NormalizationStats, Service, TrafficSeries, chronological_split,
                              compute_stats, denormalize, filter_active_antennas, ingest_csv, normalize,
                              read_catalog, stack_windows, to_grid, window_dataset, write_catalog, write_csv)
from traffic_s2s.errors import ContractError, GapError, ParseError
from traffic_s2s.gridmap import AntennaSite, map_antennas_to_grid
from traffic_s2s.synthetic import (SyntheticConfig, assign_categories, exponent_for_top_share,
                                   powerlaw_shares, synthesize_traffic)

HEADER = "timestamp_utc,antenna_id,lon,lat,service_id,bytes_up,bytes_down\n"


def series_from(volumes, start="2026-01-01T00:00:00"):
    t, s, a = volumes.shape
    ts = np.datetime64(start) + np.arange(t) * np.timedelta64(300, "s")
    ants = [AntennaSite(f"A{i}", float(i), 0.0, 9.0 + 0.01 * i, 45.0) for i in range(a)]
    svcs = [Service(f"S{i}", f"s{i}", "web") for i in range(s)]
    return TrafficSeries(ts, ants, svcs, volumes)


def test_ingest_merges_up_and_down(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text(HEADER + "2026-01-01T00:00:00Z,A1,9.1,45.4,S1,3,4\n"
                          "2026-01-01T00:05:00Z,A1,9.1,45.4,S1,0,1\n")
    s = ingest_csv(p)
    assert s.volumes[:, 0, 0].tolist() == [7.0, 1.0]


def test_ingest_errors(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("")
    with pytest.raises(ParseError):
        ingest_csv(p)
    p.write_text(HEADER + "2026-01-01T00:00:00Z,A1,9.1,45.4,S1,3,4\n2026-01-01T00:05:00Z,A1,9.1,45.4,S1,x,4\n")
    with pytest.raises(ParseError, match="line 3"):
        ingest_csv(p)
    p.write_text(HEADER + "2026-01-01T00:00:00Z,A1,9.1,45.4,S1,3,-4\n")
    with pytest.raises(ParseError, match="line 2"):
        ingest_csv(p)
    p.write_text(HEADER + "2026-01-01T00:02:00Z,A1,9.1,45.4,S1,3,4\n")
    with pytest.raises(ParseError, match="5-minute"):
        ingest_csv(p)
    p.write_text(HEADER + "2026-01-01T00:00:00Z,A1,9.1,45.4,S1,3,4\n2026-01-01T00:00:00Z,A1,9.1,45.4,S1,3,4\n")
    with pytest.raises(ParseError, match="line 3"):
        ingest_csv(p)
    p.write_text(HEADER + "2026-01-01T00:00:00Z,A1,9.1,45.4,S1,3,4\n2026-01-01T00:15:00Z,A1,9.1,45.4,S1,3,4\n")
    with pytest.raises(GapError) as err:
        ingest_csv(p)
    assert err.value.missing == ["2026-01-01T00:05:00Z", "2026-01-01T00:10:00Z"]


def test_ingest_order_independent(tmp_path, rng):
    s = series_from(rng.integers(0, 100, size=(6, 2, 3)).astype(float))
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_csv(s, a)
    lines = a.read_text().splitlines()
    body = lines[1:]
    rng.shuffle(body)
    b.write_text("\n".join([lines[0]] + body) + "\n")
    sa, sb = ingest_csv(a), ingest_csv(b)
    assert np.array_equal(sa.volumes, sb.volumes) and np.array_equal(sa.volumes, s.volumes)
    assert sa.antenna_ids == sb.antenna_ids and np.array_equal(sa.timestamps, sb.timestamps)


def test_catalog_roundtrip_and_errors(tmp_path):
    svcs = [Service("S1", "video, hd", "streaming"), Service("S2", "mail", "web")]
    p = tmp_path / "c.csv"
    write_catalog(svcs, p)
    assert read_catalog(p) == svcs
    p.write_text("service_id,service_name,category\nS1,x,telepathy\n")
    with pytest.raises(ParseError, match="line 2"):
        read_catalog(p)


def test_filter_active_antennas():
    v = np.zeros((10, 1, 3))
    v[:, 0, 0] = 1            # always on
    v[:9, 0, 1] = 1           # 9 of 10
    v[:5, 0, 2] = 1           # half
    s = series_from(v)
    assert filter_active_antennas(s, 0.9).antenna_ids == ["A0", "A1"]
    assert filter_active_antennas(s, 0.5).antenna_ids == ["A0", "A1", "A2"]
    with pytest.raises(ContractError):
        filter_active_antennas(series_from(np.zeros((4, 1, 2))), 0.9)
    with pytest.raises(ContractError):
        filter_active_antennas(s, 0.0)


def test_normalization_examples():
    stats = compute_stats(np.array([0.0, 2.0]).reshape(2, 1, 1))
    assert stats.mean.tolist() == [1.0] and stats.std.tolist() == [1.0]
    assert normalize(np.array([0.0, 2.0]).reshape(2, 1, 1), stats).ravel().tolist() == [-1.0, 1.0]
    const = np.full((5, 1, 3), 7.0)
    assert np.all(normalize(const, compute_stats(const)) == 0)
    assert compute_stats(const).std[0] == 1e-8


@given(st.integers(0, 2**31 - 1))
def test_normalize_roundtrip(seed):
    r = np.random.default_rng(seed)
    x = r.lognormal(10, 2, size=(20, 3, 4))
    stats = compute_stats(x)
    assert np.max(np.abs(denormalize(normalize(x, stats), stats) - x) / np.maximum(np.abs(x), 1)) < 1e-9


def test_stats_ignore_test_split(rng):
    s = series_from(rng.random((40, 2, 3)))
    train, test = chronological_split(s, 0.8, 2, 2)
    a = compute_stats(train.volumes)
    s.volumes[32:] *= 1000
    train2, _ = chronological_split(s, 0.8, 2, 2)
    b = compute_stats(train2.volumes)
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.std, b.std)


def small_grid(series):
    return map_antennas_to_grid(series.antennas, 2, 2)


def test_window_counts(rng):
    for extra, want in ((0, 1), (2, 3)):
        s = series_from(rng.random((5 + extra, 2, 3)))
        w = window_dataset(s, small_grid(s), compute_stats(s.volumes), 3, 2)
        assert len(w) == want
    with pytest.raises(ContractError):
        s = series_from(rng.random((4, 2, 3)))
        window_dataset(s, small_grid(s), compute_stats(s.volumes), 3, 2)


@given(st.integers(0, 2**31 - 1), st.integers(1, 3))
def test_window_values_match_lookup(seed, stride):
    r = np.random.default_rng(seed)
    s = series_from(r.random((12, 2, 3)))
    grid = small_grid(s)
    stats = compute_stats(s.volumes)
    wins = window_dataset(s, grid, stats, 3, 2, stride)
    assert len(wins) == len(range(0, 12 - 5 + 1, stride))
    z = normalize(s.volumes, stats)
    for i, w in zip(range(0, 8, stride), wins):
        assert w.start == s.timestamps[i]
        for a, aid in enumerate(s.antenna_ids):
            r_, c_ = grid.cells[aid]
            assert np.array_equal(w.input[:, :, r_, c_], z[i:i + 3, :, a])
            assert np.array_equal(w.target[:, :, r_, c_], z[i + 3:i + 5, :, a])
        assert np.all(w.input[:, :, ~grid.mask] == 0) and np.all(w.target[:, :, ~grid.mask] == 0)


def test_grid_scatter_conserves_volume(rng):
    s = series_from(rng.integers(0, 10**9, size=(8, 2, 3)).astype(float))
    assert to_grid(s, small_grid(s)).sum() == s.volumes.sum()


def test_chronological_split():
    s = series_from(np.ones((100, 1, 1)))
    a, b = chronological_split(s, 0.8, 1, 1)
    assert (len(a), len(b)) == (80, 20) and b.timestamps[0] == s.timestamps[80]
    with pytest.raises(ContractError):
        chronological_split(s, 0.8, 12, 12)
    s = series_from(np.ones((85 * BINS_PER_DAY, 1, 1)))
    _, test = chronological_split(s, 0.8, 12, 12)
    assert len(test) == 17 * BINS_PER_DAY


def test_series_invariants():
    with pytest.raises(ContractError):
        series_from(-np.ones((2, 1, 1)))
    s = series_from(np.ones((3, 1, 1)))
    with pytest.raises(GapError):
        TrafficSeries(s.timestamps[[0, 2]], s.antennas, s.services, np.ones((2, 1, 1)))


# -- synthetic generator --------------------------------------------------------------

def test_noise_free_is_periodic():
    s = synthesize_traffic(SyntheticConfig(n_antennas=4, days=2, noise_scale=0.0, seed=3))
    np.testing.assert_allclose(s.volumes[:BINS_PER_DAY], s.volumes[BINS_PER_DAY:], rtol=1e-12)


def test_top_share_and_powerlaw():
    alpha = exponent_for_top_share(0.4, 8)
    assert powerlaw_shares(8, alpha)[0] == pytest.approx(0.4, abs=1e-12)
    analytic = np.arange(1, 9) ** -alpha / np.sum(np.arange(1, 9) ** -alpha)
    for noise, tol in ((0.0, 1e-12), (0.35, 0.005)):
        s = synthesize_traffic(SyntheticConfig(n_antennas=9, days=7, top_share=0.4, noise_scale=noise, seed=1))
        empirical = s.volumes.sum(axis=(0, 2)) / s.volumes.sum()
        assert np.max(np.abs(empirical - analytic)) < tol


def test_noise_free_shares_monotone():
    s = synthesize_traffic(SyntheticConfig(n_antennas=9, days=1, noise_scale=0.0, exponent=0.7))
    share = s.volumes.sum(axis=(0, 2))
    assert np.all(np.diff(share) <= 0)


def test_generator_deterministic_and_sporadic():
    cfg = SyntheticConfig(n_antennas=4, days=1, n_sporadic=2, seed=11)
    a, b = synthesize_traffic(cfg), synthesize_traffic(cfg)
    assert np.array_equal(a.volumes, b.volumes) and a.antennas == b.antennas
    assert len(filter_active_antennas(a).antennas) == 4


def test_category_assignment():
    cats = assign_categories(8, (("streaming", 0.5), ("web", 0.25), ("social media", 0.25)))
    assert cats.count("streaming") == 4 and cats.count("web") == 2 and cats[0] == "streaming"
    with pytest.raises(ContractError):
        SyntheticConfig(category_mix=(("sports", 1.0),))
    with pytest.raises(ContractError):
        SyntheticConfig(days=0)


def test_csv_roundtrip_exact(tmp_path):
    s = synthesize_traffic(SyntheticConfig(n_antennas=4, n_services=3, days=0.5, seed=2))
    write_csv(s, tmp_path / "d.csv")
    back = ingest_csv(tmp_path / "d.csv", s.services)
    assert np.array_equal(back.volumes, np.rint(s.volumes))
    assert [(a.lon, a.lat) for a in back.antennas] == pytest.approx(
        [(round(a.lon, 6), round(a.lat, 6)) for a in s.antennas])
