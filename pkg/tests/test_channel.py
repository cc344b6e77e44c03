"""Channel synthesis and LS estimation against closed-form oracles."""

import numpy as np
import pytest

from csifusion.channel import (
    ChannelConfig,
    EstimationError,
    PilotBlock,
    csi_to_real,
    estimate_csi,
    make_pilot,
    real_to_csi,
    steering_vector,
    synthesize_channel,
)

DESK = ChannelConfig(
    n_antennas=8,
    n_subcarriers=16,
    n_pilot_symbols=12,
    carrier_spacing_hz=240e3,
    n_paths=4,
    noise_std=0.05,
    scatterer_seed=99,
)


class TestSynthesis:
    def test_los_only_phase_progression(self):
        """Single path: antenna n carries phase 2 pi spacing n sin(azimuth)."""
        cfg = ChannelConfig(
            n_antennas=8, n_subcarriers=4, n_pilot_symbols=12, n_paths=1, noise_std=0.0
        )
        bs = np.array([0.0, 0.0])
        veh = np.array([30.0, 40.0])
        h = synthesize_channel(bs, veh, cfg)
        sin_az = 30.0 / 50.0  # x component of the unit direction
        expect = steering_vector(sin_az, cfg.n_antennas, cfg.antenna_spacing_wl)
        ratio = h[:, 0] / h[0, 0]
        np.testing.assert_allclose(ratio, expect / expect[0], atol=1e-12)

    def test_deterministic(self):
        h1 = synthesize_channel([0, 0], [25.0, 13.0], DESK)
        h2 = synthesize_channel([0, 0], [25.0, 13.0], DESK)
        np.testing.assert_array_equal(h1, h2)

    def test_shared_environment_across_base_stations(self):
        """Scatterers belong to the vehicle's cell, not to the base station."""
        cfg = DESK
        import csifusion.channel as ch

        veh = np.array([12.0, 5.0])
        pts_a, refl_a = ch._cell_scatterers(cfg, veh)
        pts_b, refl_b = ch._cell_scatterers(cfg, veh + 0.0)
        np.testing.assert_array_equal(pts_a, pts_b)
        np.testing.assert_array_equal(refl_a, refl_b)

    def test_amplitude_falls_with_distance(self):
        cfg = ChannelConfig(
            n_antennas=8, n_subcarriers=8, n_pilot_symbols=12, n_paths=1, noise_std=0.0
        )
        near = synthesize_channel([0, 0], [0.0, 20.0], cfg)
        far = synthesize_channel([0, 0], [0.0, 80.0], cfg)
        assert np.linalg.norm(near) > 2 * np.linalg.norm(far)

    def test_vehicle_on_bs_rejected(self):
        with pytest.raises(ValueError):
            synthesize_channel([1.0, 1.0], [1.0, 1.0], DESK)

    def test_fingerprint_locality(self):
        """Average channel similarity does not grow with vehicle separation."""
        rng = np.random.default_rng(5)
        bs = np.array([0.0, -15.0])
        seps = [1.0, 5.0, 20.0, 80.0]
        means = []
        for s in seps:
            vals = []
            for _ in range(60):
                p = rng.uniform([-40, -8], [40, 8])
                ang = rng.uniform(0, 2 * np.pi)
                q = p + s * np.array([np.cos(ang), np.sin(ang)])
                h1 = synthesize_channel(bs, p, DESK).ravel()
                h2 = synthesize_channel(bs, q, DESK).ravel()
                vals.append(
                    abs(np.vdot(h1, h2)) / (np.linalg.norm(h1) * np.linalg.norm(h2))
                )
            means.append(np.mean(vals))
        assert means[0] > means[-1]
        for a, b in zip(means, means[1:]):
            assert b <= a + 0.05

    def test_decorrelation_at_100m(self):
        """Mean normalized inner product of channels 100 m apart.

        Measured once on the frozen synthesizer and recorded here; the 0.5
        ceiling is the behavioural requirement, the recorded value pins the
        implementation.
        """
        rng = np.random.default_rng(42)
        bs = np.array([0.0, -15.0])
        vals = []
        for _ in range(50):
            p = rng.uniform([-60, -8], [60, 8])
            ang = rng.uniform(0, 2 * np.pi)
            q = p + 100.0 * np.array([np.cos(ang), np.sin(ang)])
            h1 = synthesize_channel(bs, p, DESK).ravel()
            h2 = synthesize_channel(bs, q, DESK).ravel()
            vals.append(abs(np.vdot(h1, h2)) / (np.linalg.norm(h1) * np.linalg.norm(h2)))
        mean = float(np.mean(vals))
        assert mean < 0.5
        assert mean == pytest.approx(MEASURED_100M_CORR, abs=1e-9)


# frozen from a seeded run of test_decorrelation_at_100m's computation
MEASURED_100M_CORR = 0.09563659548327441


class TestEstimation:
    def test_noiseless_estimate_exact(self):
        cfg = ChannelConfig(
            n_antennas=8, n_subcarriers=16, n_pilot_symbols=12, n_paths=3, noise_std=0.0
        )
        pilot = make_pilot(cfg)
        h = synthesize_channel([0, 0], [20.0, 10.0], cfg)
        est = estimate_csi(h, pilot, np.random.default_rng(0))
        np.testing.assert_allclose(est, h, atol=1e-10)

    def test_unbiased(self):
        """Empirical mean over 10^4 noisy estimates stays within 3 SE."""
        cfg = ChannelConfig(
            n_antennas=4, n_subcarriers=3, n_pilot_symbols=6, n_paths=2, noise_std=0.3
        )
        pilot = make_pilot(cfg)
        h = synthesize_channel([0, 0], [15.0, 9.0], cfg)
        rng = np.random.default_rng(123)
        trials = 10_000
        acc = np.zeros_like(h)
        for _ in range(trials):
            acc += estimate_csi(h, pilot, rng)
        mean = acc / trials
        # per-entry variance of the LS estimate: diag(pinv(A) Sigma pinv(A)^H)
        a = pilot.effective_matrix
        pinv = np.linalg.pinv(a)
        entry_var = np.real(np.diag(pinv @ pilot.noise_cov @ pinv.conj().T))
        se = np.sqrt(entry_var / trials)[:, None]  # complex SE per entry
        z = np.abs(mean - h) / se
        assert np.mean(z) < 3.0
        assert np.max(z) < 5.0

    def test_mse_matches_trace_formula(self):
        """E||h_hat - h||^2 per subcarrier = trace(pinv(A) Sigma pinv(A)^H)."""
        cfg = ChannelConfig(
            n_antennas=4, n_subcarriers=4, n_pilot_symbols=7, n_paths=2, noise_std=0.25
        )
        pilot = make_pilot(cfg)
        a = pilot.effective_matrix
        pinv = np.linalg.pinv(a)
        predicted = np.real(np.trace(pinv @ pilot.noise_cov @ pinv.conj().T))
        h = synthesize_channel([0, 0], [12.0, 14.0], cfg)
        rng = np.random.default_rng(77)
        trials = 4000
        err = 0.0
        for _ in range(trials):
            est = estimate_csi(h, pilot, rng)
            err += np.mean(np.sum(np.abs(est - h) ** 2, axis=0))
        assert err / trials == pytest.approx(predicted, rel=0.05)

    def test_doubling_pilots_halves_mse(self):
        """With orthogonal unit-modulus pilots MSE = sigma^2 N_ant / N_pilot."""
        sigma = 0.4

        def mse_for(n_pilot: int) -> float:
            cfg = ChannelConfig(
                n_antennas=4,
                n_subcarriers=2,
                n_pilot_symbols=n_pilot,
                n_paths=2,
                noise_std=sigma,
            )
            pilot = make_pilot(cfg)
            a = pilot.effective_matrix
            pinv = np.linalg.pinv(a)
            return float(np.real(np.trace(pinv @ pilot.noise_cov @ pinv.conj().T)))

        m8, m16 = mse_for(8), mse_for(16)
        assert m8 == pytest.approx(sigma**2 * 4 / 8, rel=1e-9)
        assert m16 == pytest.approx(m8 / 2, rel=1e-9)

    def test_rank_deficient_pilot_rejected(self):
        cfg = ChannelConfig(
            n_antennas=4, n_subcarriers=2, n_pilot_symbols=6, n_paths=1, noise_std=0.1
        )
        sym = np.ones((6, 4), dtype=complex)  # rank 1
        pilot = PilotBlock(symbols=sym, beam=np.ones(4, dtype=complex), noise_cov=np.zeros((6, 6)))
        h = synthesize_channel([0, 0], [5.0, 5.0], cfg)
        with pytest.raises(EstimationError):
            estimate_csi(h, pilot, np.random.default_rng(0))

    def test_noise_reproducible(self):
        cfg = DESK
        pilot = make_pilot(cfg)
        h = synthesize_channel([0, 0], [22.0, 6.0], cfg)
        e1 = estimate_csi(h, pilot, np.random.default_rng(9))
        e2 = estimate_csi(h, pilot, np.random.default_rng(9))
        np.testing.assert_array_equal(e1, e2)


class TestRealStacking:
    def test_round_trip_exact(self):
        h = synthesize_channel([0, 0], [17.0, 8.0], DESK)
        np.testing.assert_array_equal(real_to_csi(csi_to_real(h)), h)

    def test_shape(self):
        h = synthesize_channel([0, 0], [17.0, 8.0], DESK)
        assert csi_to_real(h).shape == (2, DESK.n_antennas, DESK.n_subcarriers)


class TestConfigValidation:
    def test_pilot_count_must_exceed_antennas(self):
        with pytest.raises(ValueError):
            ChannelConfig(n_antennas=8, n_pilot_symbols=8)

    def test_needs_line_of_sight(self):
        with pytest.raises(ValueError):
            ChannelConfig(n_paths=0)

    def test_pilot_block_shape_checks(self):
        with pytest.raises(ValueError):
            PilotBlock(
                symbols=np.ones((6, 4), dtype=complex),
                beam=np.ones(3, dtype=complex),
                noise_cov=np.zeros((6, 6)),
            )
