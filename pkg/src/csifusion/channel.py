"""OFDM multi-antenna channel synthesis and least-squares CSI estimation.

A base station carries a uniform linear array of ``n_antennas`` elements
along the world x axis with ``antenna_spacing`` wavelength spacing, and
sounds ``n_subcarriers`` OFDM subcarriers spaced ``carrier_spacing`` Hz
apart. The channel between a BS and a vehicle is a sum of geometric rays:
the line-of-sight path plus ``n_paths - 1`` single-bounce scatterer paths.

Scatterers belong to the environment, not to the draw: their positions and
reflectivities are derived deterministically from ``scatterer_seed`` and the
spatial grid cell containing the vehicle, so the same vehicle position always
produces the same channel and nearby positions share scatterers. Both base
stations see the same scatterer field.

A pilot burst of ``n_pilot_symbols`` time slots with transmit beamforming
gives, per subcarrier, ``y = A h + n`` with the effective pilot matrix
``A = symbols @ diag(beam)``. The least-squares estimate is recovered with
the pseudo-inverse; with orthogonal unit-modulus pilots and noise covariance
``sigma^2 I`` its mean squared error is ``sigma^2 * n_antennas /
n_pilot_symbols`` per subcarrier.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SPEED_OF_LIGHT",
    "ChannelConfig",
    "PilotBlock",
    "EstimationError",
    "make_pilot",
    "steering_vector",
    "synthesize_channel",
    "estimate_csi",
    "csi_to_real",
    "real_to_csi",
]

SPEED_OF_LIGHT = 299_792_458.0

# reference distance for path amplitudes; 1/d fading normalized so that a
# path of length _REF_DIST_M has unit amplitude
_REF_DIST_M = 10.0
# relative scale of scatterer reflectivities
_SCATTER_GAIN = 0.6
# shortest admissible path length, guards 1/d blowup
_MIN_PATH_M = 1.0


class EstimationError(RuntimeError):
    """Raised when the pilot system cannot identify the channel."""


@dataclass(frozen=True)
class ChannelConfig:
    """Array, waveform, and propagation parameters for one deployment.

    ``n_pilot_symbols`` must exceed ``n_antennas`` so the per-subcarrier
    least-squares system is overdetermined.
    """

    n_antennas: int = 16
    n_subcarriers: int = 52
    n_pilot_symbols: int = 24
    carrier_spacing_hz: float = 240e3
    antenna_spacing_wl: float = 0.5
    n_paths: int = 4
    noise_std: float = 0.05
    scatterer_seed: int = 20260821
    scatterer_cell_m: float = 30.0

    def __post_init__(self) -> None:
        if self.n_antennas < 1 or self.n_subcarriers < 1:
            raise ValueError("channel.n_antennas and channel.n_subcarriers must be >= 1")
        if self.n_pilot_symbols <= self.n_antennas:
            raise ValueError(
                f"channel.n_pilot_symbols ({self.n_pilot_symbols}) must exceed "
                f"n_antennas ({self.n_antennas})"
            )
        if self.n_paths < 1:
            raise ValueError("channel.n_paths must be >= 1 (line of sight)")
        if self.carrier_spacing_hz <= 0 or self.antenna_spacing_wl <= 0:
            raise ValueError("channel spacings must be positive")
        if self.noise_std < 0:
            raise ValueError("channel.noise_std must be >= 0")
        if self.scatterer_cell_m <= 0:
            raise ValueError("channel.scatterer_cell_m must be positive")


@dataclass(frozen=True)
class PilotBlock:
    """Pilot burst: per-slot symbols, beamforming weights, noise covariance.

    Attributes:
        symbols: (n_pilot_symbols, n_antennas) complex transmit symbols.
        beam: (n_antennas,) complex beamforming weights.
        noise_cov: (n_pilot_symbols, n_pilot_symbols) real PSD covariance of
            the complex noise (E[n n^H]); zero means noiseless pilots.
    """

    symbols: np.ndarray
    beam: np.ndarray
    noise_cov: np.ndarray

    def __post_init__(self) -> None:
        s = np.asarray(self.symbols)
        b = np.asarray(self.beam)
        c = np.asarray(self.noise_cov)
        if s.ndim != 2:
            raise ValueError("pilot.symbols must be 2D (slots x antennas)")
        if b.shape != (s.shape[1],):
            raise ValueError("pilot.beam length must equal the antenna count")
        if c.shape != (s.shape[0], s.shape[0]):
            raise ValueError("pilot.noise_cov must be square over pilot slots")
        if not np.allclose(c, c.T):
            raise ValueError("pilot.noise_cov must be symmetric")
        evals = np.linalg.eigvalsh(np.asarray(c, dtype=float))
        if evals.min() < -1e-10 * max(1.0, evals.max()):
            raise ValueError("pilot.noise_cov must be positive semidefinite")

    @property
    def effective_matrix(self) -> np.ndarray:
        """A = symbols @ diag(beam), the per-subcarrier system matrix."""
        return np.asarray(self.symbols) * np.asarray(self.beam)[None, :]


def make_pilot(cfg: ChannelConfig) -> PilotBlock:
    """Standard deterministic pilot: DFT columns, unit beam, white noise."""
    n_p, n_b = cfg.n_pilot_symbols, cfg.n_antennas
    t = np.arange(n_p)[:, None]
    n = np.arange(n_b)[None, :]
    symbols = np.exp(-2j * np.pi * t * n / n_p)
    beam = np.ones(n_b, dtype=complex)
    noise_cov = (cfg.noise_std ** 2) * np.eye(n_p)
    return PilotBlock(symbols=symbols, beam=beam, noise_cov=noise_cov)


def steering_vector(sin_azimuth: float, n_antennas: int, spacing_wl: float) -> np.ndarray:
    """ULA response for a ray whose direction has x-component ``sin_azimuth``.

    Element n picks up phase 2*pi*spacing_wl*n*sin_azimuth (array along x).
    """
    n = np.arange(n_antennas)
    return np.exp(2j * np.pi * spacing_wl * n * sin_azimuth)


def _cell_rng(cfg: ChannelConfig, pos_xy: np.ndarray) -> np.random.Generator:
    cs = cfg.scatterer_cell_m
    ix = int(np.floor(pos_xy[0] / cs))
    iy = int(np.floor(pos_xy[1] / cs))
    # two's-complement fold keeps SeedSequence entropy non-negative
    key = [cfg.scatterer_seed & 0xFFFFFFFF, ix & 0xFFFFFFFF, iy & 0xFFFFFFFF]
    return np.random.default_rng(np.random.SeedSequence(key))


def _cell_scatterers(cfg: ChannelConfig, pos_xy: np.ndarray):
    """Scatterer positions and reflectivities for the cell containing pos_xy."""
    n_sc = cfg.n_paths - 1
    if n_sc == 0:
        return np.zeros((0, 2)), np.zeros(0, dtype=complex)
    rng = _cell_rng(cfg, pos_xy)
    cs = cfg.scatterer_cell_m
    base = np.floor(np.asarray(pos_xy, dtype=float) / cs) * cs
    pts = base[None, :] + rng.uniform(0.0, cs, size=(n_sc, 2))
    refl = _SCATTER_GAIN * (
        rng.standard_normal(n_sc) + 1j * rng.standard_normal(n_sc)
    ) / np.sqrt(2.0)
    return pts, refl


def synthesize_channel(bs_xy, vehicle_xy, cfg: ChannelConfig) -> np.ndarray:
    """True channel matrix (n_antennas, n_subcarriers) for one BS-vehicle pair.

    Deterministic: no RNG argument. All randomness in the scatterer layout is
    derived from ``cfg.scatterer_seed`` and the vehicle's grid cell.
    """
    bs = np.asarray(bs_xy, dtype=float)
    veh = np.asarray(vehicle_xy, dtype=float)
    rel = veh - bs
    d_los = float(np.hypot(rel[0], rel[1]))
    if d_los <= 0.0:
        raise ValueError("vehicle coincides with the base station")

    sc_pos, sc_refl = _cell_scatterers(cfg, veh)

    # per-path (sin azimuth at the array, total length, complex amplitude)
    sines = [rel[0] / d_los]
    lengths = [max(d_los, _MIN_PATH_M)]
    amps = [_REF_DIST_M / max(d_los, _MIN_PATH_M) + 0j]
    for p, rho in zip(sc_pos, sc_refl):
        to_sc = p - bs
        d1 = float(np.hypot(to_sc[0], to_sc[1]))
        d2 = float(np.hypot(*(veh - p)))
        total = max(d1 + d2, _MIN_PATH_M)
        sines.append(to_sc[0] / max(d1, 1e-9))
        lengths.append(total)
        amps.append(rho * _REF_DIST_M / total)

    sines = np.asarray(sines)
    delays = np.asarray(lengths) / SPEED_OF_LIGHT
    amps = np.asarray(amps)

    steer = np.exp(
        2j * np.pi * cfg.antenna_spacing_wl * np.arange(cfg.n_antennas)[None, :] * sines[:, None]
    )  # (paths, n_antennas)
    freqs = np.arange(cfg.n_subcarriers) * cfg.carrier_spacing_hz
    tone = np.exp(-2j * np.pi * delays[:, None] * freqs[None, :])  # (paths, n_subcarriers)
    return np.einsum("p,pb,pc->bc", amps, steer, tone)


def _cov_factor(cov: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root, tolerant of zero and rank-deficient covs."""
    vals, vecs = np.linalg.eigh(cov)
    vals = np.clip(vals, 0.0, None)
    return vecs * np.sqrt(vals)[None, :]


def estimate_csi(
    truth: np.ndarray,
    pilot: PilotBlock,
    rng: np.random.Generator,
) -> np.ndarray:
    """Least-squares channel estimate from one noisy pilot burst.

    Args:
        truth: (n_antennas, n_subcarriers) true channel.
        pilot: pilot burst; its effective matrix must have full column rank.
        rng: source for the pilot noise draw.

    Returns:
        (n_antennas, n_subcarriers) complex estimate. Equals ``truth``
        exactly when the noise covariance is zero.
    """
    h = np.asarray(truth)
    a = pilot.effective_matrix
    if a.shape[1] != h.shape[0]:
        raise ValueError("pilot antenna count does not match the channel")
    if np.linalg.matrix_rank(a) < a.shape[1]:
        raise EstimationError(
            "effective pilot matrix is rank deficient; the channel is not identifiable"
        )
    y = a @ h  # (n_pilot, n_subcarriers)
    cov = np.asarray(pilot.noise_cov, dtype=float)
    if np.any(cov):
        fac = _cov_factor(cov)
        z = rng.standard_normal((2, cov.shape[0], h.shape[1]))
        y = y + fac @ ((z[0] + 1j * z[1]) / np.sqrt(2.0))
    return np.linalg.pinv(a) @ y


def csi_to_real(h: np.ndarray) -> np.ndarray:
    """Stack complex channel matrices as (..., 2, n_antennas, n_subcarriers).

    Works on a single matrix or a batch; the re/im axis is inserted before
    the antenna axis. The float width follows the complex width, so the
    round trip through :func:`real_to_csi` is bit exact.
    """
    h = np.asarray(h)
    return np.stack([h.real, h.imag], axis=-3)


def real_to_csi(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`csi_to_real`."""
    x = np.asarray(x)
    if x.shape[-3] != 2:
        raise ValueError("expected axis -3 of size 2 (real, imag)")
    re = np.take(x, 0, axis=-3)
    im = np.take(x, 1, axis=-3)
    return re + 1j * im
