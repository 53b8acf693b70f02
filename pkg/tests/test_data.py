import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advcast.data import (
    ArimaParams,
    Dataset,
    Dims,
    LaneChangeParams,
    Sample,
    arima_generate,
    build_scheme,
    dataset_io,
    lane_change_generate,
    load_dataset,
    normalize_stats,
    save_dataset,
    split_by_speed,
)
from advcast.errors import (
    DimensionMismatch,
    DimsHeaderMismatch,
    EmptyDataset,
    GeneratorRequired,
    InvalidParams,
    MissingChannels,
    ParseError,
)


def tiny_arima(**kw):
    base = dict(sigma=0.01, T=8, H=4, F=4)
    base.update(kw)
    return ArimaParams(**base)


class TestArimaGenerate:
    def test_determinism(self):
        a = arima_generate(tiny_arima(), 5, seed=3)
        b = arima_generate(tiny_arima(), 5, seed=3)
        for sa, sb in zip(a.samples, b.samples):
            assert np.array_equal(sa.s_H, sb.s_H)
            assert np.array_equal(sa.s_F, sb.s_F)
        c = arima_generate(tiny_arima(), 5, seed=4)
        assert not np.array_equal(a.samples[0].s_H, c.samples[0].s_H)

    def test_noise_free_recurrence(self):
        # sigma=0 with fixed params: s_{t+1} = mu + alpha s_t exactly
        p = tiny_arima(sigma=0.0, mu=0.5, alpha=0.8, beta=0.3, s0=2.0)
        ds = arima_generate(p, 1, seed=0)
        series = np.concatenate([ds.samples[0].s_H[0], ds.samples[0].s_F[0]])
        assert series[0] == 2.0
        for t in range(1, 8):
            assert series[t] == pytest.approx(0.5 + 0.8 * series[t - 1])

    def test_constant_params_unit(self):
        # mu=1, alpha=1, beta=0, sigma=0, s0=1: series is 1, 2, 3, ...
        p = tiny_arima(sigma=0.0, mu=1.0, alpha=1.0, beta=0.0, s0=1.0)
        ds = arima_generate(p, 1, seed=0)
        series = np.concatenate([ds.samples[0].s_H[0], ds.samples[0].s_F[0]])
        assert np.allclose(series, np.arange(1.0, 9.0))

    def test_fixed_point(self):
        # alpha=0.5, mu=0.5, s0=1 is a fixed point: series stays at 1
        p = tiny_arima(sigma=0.0, mu=0.5, alpha=0.5, beta=0.0, s0=1.0)
        ds = arima_generate(p, 1, seed=0)
        assert np.allclose(ds.samples[0].s_H, 1.0)
        assert np.allclose(ds.samples[0].s_F, 1.0)

    def test_params_drawn_once_per_dataset(self):
        ds = arima_generate(tiny_arima(), 4, seed=7)
        assert {"mu", "alpha", "beta"} <= set(ds.meta)
        assert -0.1 <= ds.meta["mu"] <= 0.1
        assert 0.5 <= ds.meta["alpha"] <= 0.95
        assert -0.5 <= ds.meta["beta"] <= 0.5

    def test_s0_range_per_sample(self):
        p = tiny_arima(sigma=0.0, s0_range=(-2.0, 2.0))
        ds = arima_generate(p, 50, seed=1)
        starts = np.array([s.s_H[0, 0] for s in ds.samples])
        assert np.all(starts >= -2.0) and np.all(starts <= 2.0)
        assert starts.std() > 0.5      # actually varies across samples

    def test_dims_and_shapes(self):
        ds = arima_generate(tiny_arima(), 3, seed=0)
        assert ds.dims == Dims(1, 1, 4, 4, 1)
        assert len(ds) == 3
        assert ds.samples[0].s_H.shape == (1, 4)
        assert ds.samples[0].s_F.shape == (1, 4)
        assert ds.samples[0].x0.shape == (1,)

    def test_bad_params(self):
        with pytest.raises(InvalidParams):
            ArimaParams(sigma=-1.0)
        with pytest.raises(InvalidParams):
            ArimaParams(sigma=0.1, T=10, H=4, F=4)
        with pytest.raises(InvalidParams):
            arima_generate(tiny_arima(), 0, seed=0)


class TestLaneChangeGenerate:
    def test_determinism_and_shapes(self):
        p = LaneChangeParams(H=5, F=5)
        a = lane_change_generate(p, 3, seed=2)
        b = lane_change_generate(p, 3, seed=2)
        assert np.array_equal(a.samples[1].s_H, b.samples[1].s_H)
        assert a.dims == Dims(8, 4, 5, 5, 4)

    def test_dynamics_consistency(self):
        # jitter-free ego trajectory must satisfy the discrete dynamics with
        # the sinusoidal swap profile as lateral input
        p = LaneChangeParams(H=5, F=5, accel_std=0.0)
        ds = lane_change_generate(p, 1, seed=0)
        s = ds.samples[0]
        full = np.hstack([s.s_H[:4], s.s_F])
        from advcast.data import _lane_dynamics
        A, B = _lane_dynamics(p.dt)
        T = 10
        T_sec = T * p.dt
        c = p.lane_offset * 2.0 * np.pi / (T_sec * T_sec)
        for t in range(T - 1):
            u = np.array([0.0, c * np.sin(2 * np.pi * t * p.dt / T_sec)])
            assert np.allclose(full[:, t + 1], A @ full[:, t] + B @ u)

    def test_lane_swap_displacement(self):
        p = LaneChangeParams(H=10, F=10, accel_std=0.0)
        ds = lane_change_generate(p, 1, seed=0)
        s = ds.samples[0]
        y_path = np.concatenate([s.s_H[1], s.s_F[1]])
        drift = s.s_H[3, 0] * (len(y_path) - 1) * p.dt
        # ego ends roughly one lane over, beyond its initial-velocity drift
        assert y_path[-1] - y_path[0] - drift == pytest.approx(
            p.lane_offset, rel=0.25)

    def test_x0_is_last_history_state(self):
        ds = lane_change_generate(LaneChangeParams(H=4, F=4), 2, seed=1)
        for s in ds.samples:
            assert np.array_equal(s.x0, s.s_H[:4, -1])

    def test_speed_range_respected(self):
        p = LaneChangeParams(H=4, F=4, speed_range=(40.0, 45.0))
        ds = lane_change_generate(p, 5, seed=3)
        for s in ds.samples:
            assert 40.0 <= s.s_H[2, 0] <= 45.0


class TestSplitBySpeed:
    def test_partition(self):
        slow = lane_change_generate(
            LaneChangeParams(H=4, F=4, speed_range=(10.0, 15.0),
                             accel_std=0.0), 5, seed=0)
        fast = lane_change_generate(
            LaneChangeParams(H=4, F=4, speed_range=(40.0, 45.0),
                             accel_std=0.0), 5, seed=0)
        mixed = slow.replaced(list(slow.samples) + list(fast.samples))
        in_d, ood = split_by_speed(mixed, threshold=35.0)
        assert len(in_d) == 5 and len(ood) == 5
        assert ood.kind == "ood"
        assert len(in_d) + len(ood) == len(mixed)

    def test_missing_channels(self):
        ds = arima_generate(tiny_arima(), 1, seed=0)
        with pytest.raises(MissingChannels):
            split_by_speed(ds)


class TestBuildScheme:
    def test_original_identity(self):
        base = arima_generate(tiny_arima(), 4, seed=0)
        assert build_scheme(base, "original") is base

    def test_data_added(self):
        base = arima_generate(tiny_arima(), 4, seed=0)
        built = build_scheme(
            base, "data_added",
            generator=lambda n, s: arima_generate(tiny_arima(), n, seed=s),
            seed=9)
        assert len(built) == 8
        assert built.kind == "add"
        for sa, sb in zip(base.samples, built.samples[:4]):
            assert np.array_equal(sa.s_H, sb.s_H)

    def test_data_added_requires_generator(self):
        base = arima_generate(tiny_arima(), 2, seed=0)
        with pytest.raises(GeneratorRequired):
            build_scheme(base, "data_added")

    def test_random_scheme(self):
        base = arima_generate(tiny_arima(), 100, seed=0)
        built = build_scheme(base, "random", seed=5)
        assert len(built) == 200
        noise = np.concatenate(
            [(b.s_H - a.s_H).ravel()
             for a, b in zip(base.samples, built.samples[100:])])
        assert abs(noise.mean()) < 0.15
        assert abs(noise.std() - 1.0) < 0.15
        for a, b in zip(base.samples, built.samples[100:]):
            assert np.array_equal(a.s_F, b.s_F)   # labels untouched

    def test_random_deterministic(self):
        base = arima_generate(tiny_arima(), 3, seed=0)
        x = build_scheme(base, "random", seed=4)
        y = build_scheme(base, "random", seed=4)
        assert np.array_equal(x.samples[-1].s_H, y.samples[-1].s_H)

    def test_unknown_scheme(self):
        base = arima_generate(tiny_arima(), 2, seed=0)
        with pytest.raises(InvalidParams):
            build_scheme(base, "bogus")


class TestNormalizeStats:
    def test_two_pass_oracle(self):
        ds = lane_change_generate(LaneChangeParams(H=4, F=4), 6, seed=0)
        mean, std = normalize_stats(ds)
        S_H, _, _ = ds.stacked()
        flat = S_H.transpose(1, 0, 2).reshape(8, -1)
        assert np.allclose(mean, flat.mean(axis=1))
        assert np.allclose(std, flat.std(axis=1))

    def test_constant_channel_floor(self):
        d = Dims(1, 1, 2, 2, 1)
        samples = [Sample(np.full((1, 2), 3.0), np.zeros((1, 2)), np.zeros(1))
                   for _ in range(3)]
        mean, std = normalize_stats(Dataset(samples, d))
        assert mean[0] == pytest.approx(3.0)
        assert std[0] == pytest.approx(1e-8)

    def test_empty_raises(self):
        with pytest.raises(EmptyDataset):
            normalize_stats(Dataset([], Dims(1, 1, 2, 2, 1)))


class TestDatasetValidation:
    def test_shape_mismatch(self):
        d = Dims(1, 1, 3, 3, 1)
        bad = Sample(np.zeros((1, 2)), np.zeros((1, 3)), np.zeros(1))
        with pytest.raises(DimensionMismatch):
            Dataset([bad], d)

    def test_non_finite(self):
        d = Dims(1, 1, 2, 2, 1)
        bad = Sample(np.array([[np.nan, 0.0]]), np.zeros((1, 2)), np.zeros(1))
        with pytest.raises(InvalidParams):
            Dataset([bad], d)


class TestCsvRoundTrip:
    def test_bitwise_round_trip(self, tmp_path):
        ds = lane_change_generate(LaneChangeParams(H=3, F=3), 4, seed=5)
        path = tmp_path / "ds.csv"
        save_dataset(path, ds)
        back = load_dataset(path)
        assert back.dims == ds.dims
        assert back.split == ds.split and back.kind == ds.kind
        assert back.seed == ds.seed
        for a, b in zip(ds.samples, back.samples):
            assert np.array_equal(a.s_H, b.s_H)
            assert np.array_equal(a.s_F, b.s_F)
            assert np.array_equal(a.x0, b.x0)

    def test_hand_fixture(self, tmp_path):
        text = ("#dims,1,1,2,1,1,test,orig,7\n"
                "SH,0,1.5,-2\n"
                "SF,0,0.25\n"
                "X0,0,3\n")
        path = tmp_path / "hand.csv"
        path.write_text(text)
        ds = load_dataset(path)
        assert ds.dims == Dims(1, 1, 2, 1, 1)
        assert ds.split == "test" and ds.kind == "orig" and ds.seed == 7
        assert np.array_equal(ds.samples[0].s_H, [[1.5, -2.0]])
        assert np.array_equal(ds.samples[0].s_F, [[0.25]])
        assert np.array_equal(ds.samples[0].x0, [3.0])

    def test_missing_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("SH,0,1.0\n")
        with pytest.raises(ParseError):
            load_dataset(path)

    def test_header_field_count(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("#dims,1,1,2,1,1,test,orig\n")
        with pytest.raises(DimsHeaderMismatch):
            load_dataset(path)

    def test_truncated_records(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("#dims,1,1,2,1,1,test,orig,0\nSH,0,1,2\nSF,0,3\n")
        with pytest.raises(ParseError):
            load_dataset(path)

    def test_bad_value_reports_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("#dims,1,1,2,1,1,test,orig,0\n"
                        "SH,0,1,zap\nSF,0,3\nX0,0,4\n")
        with pytest.raises(ParseError) as exc:
            load_dataset(path)
        assert "2" in str(exc.value)

    def test_wrong_value_count(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("#dims,1,1,2,1,1,test,orig,0\n"
                        "SH,0,1\nSF,0,3\nX0,0,4\n")
        with pytest.raises(ParseError):
            load_dataset(path)

    def test_dispatcher(self, tmp_path):
        ds = arima_generate(tiny_arima(), 2, seed=0)
        path = tmp_path / "d.csv"
        dataset_io(path, "save", ds)
        back = dataset_io(path, "load")
        assert np.array_equal(back.samples[0].s_H, ds.samples[0].s_H)
        with pytest.raises(InvalidParams):
            dataset_io(path, "sideways")
        with pytest.raises(InvalidParams):
            dataset_io(path, "save")

    @given(st.integers(1, 4), st.integers(0, 100))
    @settings(max_examples=20, deadline=None)
    def test_round_trip_property(self, n_samples, seed):
        import tempfile, os
        ds = arima_generate(tiny_arima(), n_samples, seed=seed)
        fd, path = tempfile.mkstemp(suffix=".csv")
        os.close(fd)
        try:
            save_dataset(path, ds)
            back = load_dataset(path)
            for a, b in zip(ds.samples, back.samples):
                assert np.array_equal(a.s_H, b.s_H)
                assert np.array_equal(a.s_F, b.s_F)
        finally:
            os.unlink(path)
