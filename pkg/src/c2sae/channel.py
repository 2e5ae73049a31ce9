"""Synthetic multipath channels and PN-correlation channel sounding.

Channels are described by a :class:`PathSet` (delay, complex gain and LoS flag
per path).  :func:`synth_cir` places each path on the delay grid with a
windowed-sinc kernel and adds receiver noise; :func:`sound_cir` emulates the
actual measurement: a maximal-length PN sequence is sent through the channel
and the receiver correlates against it, period by period.

Gains are expressed relative to a unit-power direct path at the reference
distance (10 m by default), and ``snr_db`` is the ratio of that reference
power to the per-sample noise power.  Distant positions therefore see a lower
effective SNR, as they would on a real sounder.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path as FsPath

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0

# x^n + ... + 1, written as the exponents of the non-constant terms
PRIMITIVE_TAPS = {
    2: (2, 1),
    3: (3, 1),
    4: (4, 1),
    5: (5, 2),
    6: (6, 1),
    7: (7, 1),
    8: (8, 6, 5, 4),
    9: (9, 4),
    10: (10, 3),
    11: (11, 2),
    12: (12, 6, 4, 1),
    13: (13, 4, 3, 1),
    14: (14, 5, 3, 1),
    15: (15, 1),
    16: (16, 15, 13, 4),
}


class ChannelError(ValueError):
    """Invalid channel geometry or sounding configuration."""


class DegeneratePolynomialError(ChannelError):
    """Feedback polynomial does not generate a maximal-length sequence."""


# ---------------------------------------------------------------------------
# configuration and types


@dataclass(frozen=True)
class SoundingConfig:
    """Channel-sounder parameters: 200 MHz sampling, PN10 sequence, 3.5 GHz carrier."""

    sampling_rate: float = 200e6
    bandwidth: float = 160e6
    pn_degree: int = 10
    periods: int = 128
    n_bins: int = 1023
    carrier: float = 3.5e9
    kernel_half_width: int = 8

    def __post_init__(self):
        if self.n_bins != 2**self.pn_degree - 1:
            raise ChannelError(f"n_bins={self.n_bins} must equal 2**pn_degree - 1 = {2**self.pn_degree - 1}")
        if self.sampling_rate < self.bandwidth:
            raise ChannelError("sampling rate must be at least the bandwidth")
        if self.periods < 1:
            raise ChannelError("periods must be >= 1")
        if self.kernel_half_width < 1:
            raise ChannelError("kernel_half_width must be >= 1")

    @property
    def delay_step(self) -> float:
        return 1.0 / self.sampling_rate

    @property
    def max_delay(self) -> float:
        return self.n_bins * self.delay_step


@dataclass(frozen=True)
class PathStats:
    """Statistics of the random multipath generator.

    These are simulator choices, not measured values.  Scattered-path mean
    power decays as ``exp(-excess_delay / power_decay)`` starting
    ``scatter_level_db`` below the direct path; excess delays are exponential
    with mean ``mean_excess_delay``.
    """

    min_paths: int = 2
    max_paths: int = 8
    mean_excess_delay: float = 60e-9
    power_decay: float = 80e-9
    scatter_level_db: float = -4.0
    nlos_loss_db: float = 6.0
    path_loss_exponent: float = 2.0
    reference_distance: float = 10.0
    delay_drift: float = 1.0e-9
    gain_drift_db: float = 0.5

    def __post_init__(self):
        if not 1 <= self.min_paths <= self.max_paths:
            raise ChannelError("need 1 <= min_paths <= max_paths")
        if self.mean_excess_delay <= 0 or self.power_decay <= 0:
            raise ChannelError("delay statistics must be positive")


@dataclass(frozen=True)
class Path:
    delay: float
    gain: complex
    is_los: bool = False


@dataclass(frozen=True)
class PathSet:
    """Multipath description of one channel, sorted by delay."""

    paths: tuple[Path, ...]
    carrier: float = 3.5e9
    max_delay_spread: float = math.inf

    def __post_init__(self):
        delays = [p.delay for p in self.paths]
        if any(d < 0 or d >= self.max_delay_spread for d in delays):
            raise ChannelError("path delays must lie in [0, max_delay_spread)")
        if delays != sorted(delays):
            raise ChannelError("paths must be sorted by delay")
        if sum(p.is_los for p in self.paths) > 1:
            raise ChannelError("at most one path may be flagged LoS")

    def __len__(self) -> int:
        return len(self.paths)

    @property
    def delays(self) -> np.ndarray:
        return np.array([p.delay for p in self.paths], dtype=float)

    @property
    def gains(self) -> np.ndarray:
        return np.array([p.gain for p in self.paths], dtype=complex)

    @property
    def has_los(self) -> bool:
        return any(p.is_los for p in self.paths)

    @classmethod
    def from_arrays(cls, delays, gains, los_index=None, carrier=3.5e9, max_delay_spread=math.inf) -> "PathSet":
        order = np.argsort(delays, kind="stable")
        paths = tuple(
            Path(float(delays[i]), complex(gains[i]), bool(los_index is not None and i == los_index)) for i in order
        )
        return cls(paths, carrier, max_delay_spread)


@dataclass
class Cir:
    """Complex impulse response of one antenna pair, ``taps[period, bin]``."""

    taps: np.ndarray
    delay_step: float
    position: int = 0

    def __post_init__(self):
        self.taps = np.asarray(self.taps)
        if self.taps.ndim != 2:
            raise ChannelError(f"taps must be [periods, n_bins], got shape {self.taps.shape}")
        if self.delay_step <= 0:
            raise ChannelError("delay_step must be positive")
        if not np.all(np.isfinite(self.taps)):
            raise ChannelError("taps must be finite")

    @property
    def periods(self) -> int:
        return self.taps.shape[0]

    @property
    def n_bins(self) -> int:
        return self.taps.shape[1]


@dataclass(frozen=True)
class TrajectoryPoint:
    position: int
    distance: float
    paths: PathSet


@dataclass
class Trajectory:
    scenario: str
    points: list[TrajectoryPoint]
    step: float = 5.0
    start: float = 10.0

    def __len__(self) -> int:
        return len(self.points)

    @property
    def distances(self) -> np.ndarray:
        return np.array([p.distance for p in self.points])

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.position for p in self.points])

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Delays and gains as ``[n_positions, n_paths]`` arrays."""
        delays = np.array([p.paths.delays for p in self.points])
        gains = np.array([p.paths.gains for p in self.points])
        return delays, gains


# ---------------------------------------------------------------------------
# random channels


def _path_power(distance: float, stats: PathStats) -> float:
    return (stats.reference_distance / distance) ** stats.path_loss_exponent


def _check_distance(distance: float, cfg: SoundingConfig) -> float:
    if distance <= 0:
        raise ChannelError("distance must be positive")
    direct = distance / SPEED_OF_LIGHT
    if direct >= cfg.max_delay:
        raise ChannelError(
            f"direct path at {direct * 1e9:.1f} ns lies outside the {cfg.max_delay * 1e9:.1f} ns delay grid"
        )
    return direct


def _scatter_delays(n: int, direct: float, cfg: SoundingConfig, stats: PathStats, rng) -> np.ndarray:
    room = cfg.max_delay - direct
    out = rng.exponential(stats.mean_excess_delay, size=n)
    bad = out >= room
    while np.any(bad):
        out[bad] = rng.exponential(stats.mean_excess_delay, size=int(bad.sum()))
        bad = out >= room
    return out


def _scatter_mean_power(excess: np.ndarray, stats: PathStats, los: bool) -> np.ndarray:
    level = stats.scatter_level_db - (0.0 if los else stats.nlos_loss_db)
    return 10 ** (level / 10) * np.exp(-excess / stats.power_decay)


def sample_channel(
    scenario: str,
    distance: float,
    rng: np.random.Generator,
    cfg: SoundingConfig = SoundingConfig(),
    stats: PathStats = PathStats(),
) -> PathSet:
    """Draw a random multipath channel at ``distance`` meters.

    LoS channels contain a direct path at ``distance / c`` that carries the
    largest mean power; NLoS channels have only scattered paths.  Scattered
    paths have exponential excess delays and Rayleigh gains.
    """
    los = _scenario_is_los(scenario)
    direct = _check_distance(distance, cfg)
    k = int(rng.integers(stats.min_paths, stats.max_paths + 1))
    n_scatter = k - 1 if los else k
    pg = _path_power(distance, stats)
    excess = _scatter_delays(n_scatter, direct, cfg, stats, rng)
    mean_pow = pg * _scatter_mean_power(excess, stats, los)
    gains = np.sqrt(mean_pow / 2) * (rng.standard_normal(n_scatter) + 1j * rng.standard_normal(n_scatter))
    delays = direct + excess
    los_index = None
    if los:
        phase = rng.uniform(-np.pi, np.pi)
        delays = np.concatenate([[direct], delays])
        gains = np.concatenate([[math.sqrt(pg) * np.exp(1j * phase)], gains])
        los_index = 0
    return PathSet.from_arrays(delays, gains, los_index, cfg.carrier, cfg.max_delay)


def _scenario_is_los(scenario: str) -> bool:
    s = scenario.lower()
    if s not in ("los", "nlos"):
        raise ChannelError(f"scenario must be 'los' or 'nlos', got {scenario!r}")
    return s == "los"


def make_trajectory(
    scenario: str,
    n_positions: int,
    cfg: SoundingConfig,
    rng: np.random.Generator,
    stats: PathStats = PathStats(),
    start: float = 10.0,
    step: float = 5.0,
    first_position: int = 0,
) -> Trajectory:
    """Move the receiver away from the transmitter in ``step``-meter increments.

    The direct path tracks the distance exactly; scatterer excess delays and
    amplitudes drift by bounded random increments, so neighbouring positions
    stay correlated.  Path phases follow the carrier rotation of the total
    delay.
    """
    if n_positions < 1:
        raise ChannelError("n_positions must be >= 1")
    los = _scenario_is_los(scenario)
    _check_distance(start + step * (n_positions - 1), cfg)
    k = int(rng.integers(stats.min_paths, stats.max_paths + 1))
    n_scatter = k - 1 if los else k
    excess = _scatter_delays(n_scatter, start / SPEED_OF_LIGHT, cfg, stats, rng)
    amp = np.sqrt(_scatter_mean_power(excess, stats, los) * rng.exponential(size=n_scatter))
    phase0 = rng.uniform(-np.pi, np.pi, size=k)
    points = []
    for i in range(n_positions):
        d = start + step * i
        direct = d / SPEED_OF_LIGHT
        if i > 0:
            excess = np.abs(excess + rng.uniform(-stats.delay_drift, stats.delay_drift, size=n_scatter))
            amp = amp * 10 ** (rng.uniform(-stats.gain_drift_db, stats.gain_drift_db, size=n_scatter) / 20)
        excess = np.minimum(excess, cfg.max_delay - direct - cfg.delay_step)
        scale = math.sqrt(_path_power(d, stats))
        delays = direct + excess
        gains = scale * amp * np.exp(1j * (phase0[len(phase0) - n_scatter :] - 2 * np.pi * cfg.carrier * delays))
        los_index = None
        if los:
            delays = np.concatenate([[direct], delays])
            gains = np.concatenate([[scale * np.exp(1j * (phase0[0] - 2 * np.pi * cfg.carrier * direct))], gains])
            los_index = 0
        ps = PathSet.from_arrays(delays, gains, los_index, cfg.carrier, cfg.max_delay)
        points.append(TrajectoryPoint(first_position + i, d, ps))
    return Trajectory(scenario.lower(), points, step, start)


def sample_separated_paths(
    rng: np.random.Generator,
    cfg: SoundingConfig = SoundingConfig(),
    n_paths: int = 3,
    min_separation_bins: float = 3.0,
    power_db: tuple[float, float] = (-10.0, 0.0),
    margin_bins: int = 16,
) -> PathSet:
    """Off-grid paths with pairwise delay gaps of at least ``min_separation_bins``.

    Powers are uniform in dB over ``power_db`` and phases uniform.  Useful as
    ground truth for peak extraction.
    """
    lo, hi = margin_bins, cfg.n_bins - margin_bins
    if hi - lo < n_paths * min_separation_bins:
        raise ChannelError("delay grid too short for the requested paths")
    while True:
        bins = np.sort(rng.uniform(lo, hi, size=n_paths))
        if n_paths < 2 or np.min(np.diff(bins)) >= min_separation_bins:
            break
    amp = 10 ** (rng.uniform(*power_db, size=n_paths) / 20)
    gains = amp * np.exp(1j * rng.uniform(-np.pi, np.pi, size=n_paths))
    return PathSet.from_arrays(bins * cfg.delay_step, gains, None, cfg.carrier, cfg.max_delay)


def apply_phase_offsets(p: PathSet, offsets: np.ndarray) -> PathSet:
    """Rotate each path gain by the matching phase in ``offsets`` (one antenna pair)."""
    offsets = np.asarray(offsets, dtype=float)
    if offsets.shape != (len(p),):
        raise ChannelError(f"need {len(p)} phase offsets, got shape {offsets.shape}")
    paths = tuple(replace(path, gain=path.gain * complex(np.exp(1j * o))) for path, o in zip(p.paths, offsets))
    return PathSet(paths, p.carrier, p.max_delay_spread)


# ---------------------------------------------------------------------------
# impulse responses


def delay_kernel(delay_bins, n_bins: int, half_width: int = 8) -> np.ndarray:
    """Unit-energy windowed-sinc taps for fractional delays, wrapped circularly.

    ``delay_bins`` may have any shape; the result appends an ``n_bins`` axis.
    On-grid delays yield an exact unit impulse.
    """
    u = np.asarray(delay_bins, dtype=float)[..., None]
    k = np.arange(n_bins)
    x = (k - u + n_bins / 2) % n_bins - n_bins / 2
    support = np.abs(x) < half_width + 1
    win = 0.5 * (1 + np.cos(np.pi * x / (half_width + 1)))
    kern = np.where(support, np.sinc(x) * win, 0.0)
    return kern / np.sqrt((kern * kern).sum(axis=-1, keepdims=True))


def ideal_taps(p: PathSet, cfg: SoundingConfig) -> np.ndarray:
    """Noiseless band-limited taps of ``p`` on the delay grid, shape ``[n_bins]``."""
    if len(p) == 0:
        return np.zeros(cfg.n_bins, dtype=complex)
    kern = delay_kernel(p.delays / cfg.delay_step, cfg.n_bins, cfg.kernel_half_width)
    return p.gains @ kern


def noise_power(snr_db: float) -> float:
    """Per-sample noise power for a unit reference signal power."""
    return 0.0 if math.isinf(snr_db) and snr_db > 0 else 10 ** (-snr_db / 10)


def complex_noise(shape, power: float, rng: np.random.Generator) -> np.ndarray:
    if power == 0.0:
        return np.zeros(shape, dtype=complex)
    s = math.sqrt(power / 2)
    return s * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def synth_cir(p: PathSet, cfg: SoundingConfig, snr_db: float, rng: np.random.Generator, position: int = 0) -> Cir:
    """Ideal CIR record: band-limited taps repeated over periods, plus noise."""
    h = ideal_taps(p, cfg)
    taps = h[None, :] + complex_noise((cfg.periods, cfg.n_bins), noise_power(snr_db), rng)
    return Cir(taps, cfg.delay_step, position)


# ---------------------------------------------------------------------------
# PN sounding


def generate_pn_sequence(degree: int, taps=None) -> np.ndarray:
    """Maximal-length +/-1 sequence of length ``2**degree - 1``.

    ``taps`` lists the exponents of the feedback polynomial's non-constant
    terms, e.g. ``(3, 1)`` for x^3 + x + 1.  The constant term is implied.
    """
    if taps is None:
        if degree not in PRIMITIVE_TAPS:
            raise ChannelError(f"no default polynomial for degree {degree}")
        taps = PRIMITIVE_TAPS[degree]
    exps = sorted({int(t) for t in taps if int(t) != 0}, reverse=True)
    if not exps or exps[0] != degree or any(e < 0 for e in exps):
        raise DegeneratePolynomialError(f"taps {tuple(taps)} do not describe a degree-{degree} polynomial")
    length = 2**degree - 1
    # a[t + n] = a[t] + sum_{e in exps, e < n} a[t + e]  (mod 2)
    lower = [e for e in exps if e != degree]
    bits = np.ones(length + degree, dtype=np.uint8)
    for t in range(length):
        b = bits[t]
        for e in lower:
            b ^= bits[t + e]
        bits[t + degree] = b
    state0 = bits[:degree].tobytes()
    for t in range(1, length):
        if bits[t : t + degree].tobytes() == state0:
            raise DegeneratePolynomialError(f"taps {tuple(taps)} repeat after {t} < {length} steps")
    return 1.0 - 2.0 * bits[:length]


def circular_correlate(received: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """``out[..., k] = sum_n received[..., n] * reference[(n - k) mod N]`` via FFT."""
    return np.fft.ifft(np.fft.fft(received, axis=-1) * np.conj(np.fft.fft(reference)), axis=-1)


def sound_taps(h: np.ndarray, pn: np.ndarray, periods: int, noise_pow: float, rng: np.random.Generator) -> np.ndarray:
    """Transmit ``pn`` through channels ``h[..., N]`` and correlate each period.

    Returns CIR estimates of shape ``h.shape[:-1] + (periods, N)`` normalized
    by the sequence length.
    """
    n = pn.shape[0]
    if h.shape[-1] != n:
        raise ChannelError(f"PN length {n} does not match {h.shape[-1]} delay bins")
    clean = np.fft.ifft(np.fft.fft(h, axis=-1) * np.fft.fft(pn), axis=-1)
    rx = clean[..., None, :] + complex_noise(h.shape[:-1] + (periods, n), noise_pow, rng)
    return circular_correlate(rx, pn) / n


def sound_cir(
    p: PathSet,
    cfg: SoundingConfig,
    snr_db: float,
    rng: np.random.Generator,
    pn: np.ndarray | None = None,
    position: int = 0,
) -> Cir:
    """Estimate the CIR the way a PN correlation sounder would."""
    if pn is None:
        pn = generate_pn_sequence(cfg.pn_degree)
    if pn.shape[0] != cfg.n_bins:
        raise ChannelError(f"PN length {pn.shape[0]} does not match {cfg.n_bins} delay bins")
    taps = sound_taps(ideal_taps(p, cfg), pn, cfg.periods, noise_power(snr_db), rng)
    return Cir(taps, cfg.delay_step, position)


# ---------------------------------------------------------------------------
# scenario files


@dataclass
class ScenarioConfig:
    """Everything needed to regenerate a synthetic dataset.

    ``scenario`` is ``los``, ``nlos`` or ``mixed`` (one trajectory of each,
    NLoS positions numbered after the LoS ones).
    """

    scenario: str = "mixed"
    n_positions: int = 79
    n_pairs: int = 16
    n_points: int = 1
    snr_db: float = 25.0
    seed: int = 0
    start: float = 10.0
    step: float = 5.0
    sounding: SoundingConfig = field(default_factory=SoundingConfig)
    paths: PathStats = field(default_factory=PathStats)

    def __post_init__(self):
        if self.scenario not in ("los", "nlos", "mixed"):
            raise ChannelError(f"unknown scenario {self.scenario!r}")
        if self.n_positions < 1 or self.n_pairs < 1 or self.n_points < 1:
            raise ChannelError("n_positions, n_pairs and n_points must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ChannelError(f"unknown scenario keys: {sorted(unknown)}")
        try:
            if "sounding" in d:
                d["sounding"] = SoundingConfig(**d["sounding"])
            if "paths" in d:
                d["paths"] = PathStats(**d["paths"])
            return cls(**d)
        except TypeError as exc:
            raise ChannelError(str(exc)) from None


def load_scenario(path) -> ScenarioConfig:
    with open(path) as fh:
        try:
            return ScenarioConfig.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ChannelError(f"{path}: {exc}") from None


def save_scenario(cfg: ScenarioConfig, path) -> None:
    FsPath(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
