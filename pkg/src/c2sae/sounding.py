"""Measurement post-processing: CIR to DPS/CSI, normalization, datasets.

A :class:`Dataset` keeps per-antenna-pair *tracks* (one row per position)
and describes windows of ``n_points`` consecutive rows into them, so
overlapping windows cost no extra memory.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ._container import TruncatedPayloadError, read_container, take_f32, write_container
from .channel import (
    ChannelError,
    Cir,
    ScenarioConfig,
    SoundingConfig,
    Trajectory,
    complex_noise,
    delay_kernel,
    generate_pn_sequence,
    make_trajectory,
    noise_power,
    sound_taps,
)

DATASET_MAGIC = b"C2SDSET1"
DATASET_VERSION = 1


class DatasetError(ValueError):
    pass


class TrajectoryTooShortError(DatasetError):
    pass


@dataclass(frozen=True)
class DelayPowerSpectrum:
    power: np.ndarray
    delay_step: float

    def __post_init__(self):
        if np.any(self.power < 0) or not np.all(np.isfinite(self.power)):
            raise DatasetError("DPS entries must be finite and nonnegative")

    @property
    def delays(self) -> np.ndarray:
        return np.arange(self.power.shape[-1]) * self.delay_step


@dataclass(frozen=True)
class CsiSample:
    magnitude: float
    phase: float

    def as_array(self) -> np.ndarray:
        return np.array([self.magnitude, self.phase])


@dataclass(frozen=True)
class SampleWindow:
    dps: np.ndarray
    csi: np.ndarray
    pair: int
    start: int
    is_los: bool


@dataclass(frozen=True)
class NormStats:
    """Normalization used by the models.

    DPS bins become ``(10*log10(max(p, floor)) - dps_mean) / dps_std``; CSI
    magnitudes are treated the same way in dB (``20*log10``) with their own
    mean and std, and the phase is passed through unchanged.
    """

    floor_db: float = -120.0
    dps_mean: float = 0.0
    dps_std: float = 1.0
    csi_mag_mean: float = 0.0
    csi_mag_std: float = 1.0
    version: int = 1

    def __post_init__(self):
        if not (self.dps_std > 0 and self.csi_mag_std > 0):
            raise DatasetError("normalization std must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(**d)


# ---------------------------------------------------------------------------
# CIR -> observables


def cir_to_dps(c: Cir) -> DelayPowerSpectrum:
    """Average ``|taps|^2`` over periods."""
    if c.taps.size == 0:
        raise DatasetError("empty CIR")
    return DelayPowerSpectrum(np.mean(np.abs(c.taps) ** 2, axis=0), c.delay_step)


def _dft_bin(h: np.ndarray, k: int) -> np.ndarray:
    n = h.shape[-1]
    return h @ np.exp(-2j * np.pi * k * np.arange(n) / n)


def wrap_phase(phi):
    """Map angles into (-pi, pi]."""
    phi = np.asarray(phi, dtype=float)
    out = np.angle(np.exp(1j * phi))
    return np.where(out <= -np.pi, out + 2 * np.pi, out)


def csi_bin_index(n_bins: int, center: str = "dc") -> int:
    if center == "dc":
        return 0
    if center == "mid":
        return n_bins // 2
    raise DatasetError(f"unknown CSI center {center!r}; use 'dc' or 'mid'")


def cir_to_csi(c: Cir, center: str = "dc") -> CsiSample:
    """DFT of the period-averaged CIR at the carrier's baseband bin."""
    if c.taps.size == 0:
        raise DatasetError("empty CIR")
    h = c.taps.mean(axis=0)
    val = _dft_bin(h, csi_bin_index(c.n_bins, center))
    return CsiSample(float(abs(val)), float(wrap_phase(np.angle(val))))


# ---------------------------------------------------------------------------
# normalization


def _floor(stats: NormStats) -> float:
    return 10 ** (stats.floor_db / 10)


def dps_normalize(power, stats: NormStats) -> np.ndarray:
    p = np.maximum(np.asarray(power, dtype=float), _floor(stats))
    return (10 * np.log10(p) - stats.dps_mean) / stats.dps_std


def dps_denormalize(x, stats: NormStats) -> np.ndarray:
    return 10 ** ((np.asarray(x, dtype=float) * stats.dps_std + stats.dps_mean) / 10)


def csi_normalize(csi, stats: NormStats) -> np.ndarray:
    csi = np.asarray(csi, dtype=float)
    mag = np.maximum(csi[..., 0], 10 ** (stats.floor_db / 20))
    out = np.empty_like(csi)
    out[..., 0] = (20 * np.log10(mag) - stats.csi_mag_mean) / stats.csi_mag_std
    out[..., 1] = csi[..., 1]
    return out


def csi_denormalize(z, stats: NormStats) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    out[..., 0] = 10 ** ((z[..., 0] * stats.csi_mag_std + stats.csi_mag_mean) / 20)
    out[..., 1] = z[..., 1]
    return out


def compute_norm_stats(dps, csi, floor_db: float = -120.0) -> NormStats:
    """Mean/std of the dB-scaled DPS bins and CSI magnitudes."""
    dps_db = 10 * np.log10(np.maximum(np.asarray(dps, dtype=float), 10 ** (floor_db / 10)))
    mag_db = 20 * np.log10(np.maximum(np.asarray(csi, dtype=float)[..., 0], 10 ** (floor_db / 20)))
    return NormStats(
        floor_db=float(floor_db),
        dps_mean=float(dps_db.mean()),
        dps_std=float(dps_db.std()) or 1.0,
        csi_mag_mean=float(mag_db.mean()),
        csi_mag_std=float(mag_db.std()) or 1.0,
    )


# ---------------------------------------------------------------------------
# dataset container


@dataclass
class Dataset:
    """Windows of ``n_points`` consecutive positions of one antenna pair.

    ``track_*`` arrays hold the raw observables: linear DPS power
    ``[n_tracks, track_len, n_bins]`` and raw CSI (magnitude, phase)
    ``[n_tracks, track_len, 2]``.  Window ``i`` covers rows
    ``win_offset[i] : win_offset[i] + n_points`` of track ``win_track[i]``.
    """

    track_dps: np.ndarray
    track_csi: np.ndarray
    track_pair: np.ndarray
    track_first: np.ndarray
    track_los: np.ndarray
    track_len: np.ndarray
    win_track: np.ndarray
    win_offset: np.ndarray
    n_points: int
    stats: NormStats
    delay_step: float
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_points < 1:
            raise DatasetError("n_points must be >= 1")
        if np.any(self.win_offset < 0) or np.any(self.win_offset + self.n_points > self.track_len[self.win_track]):
            raise DatasetError("window extends past the end of its track")

    def __len__(self) -> int:
        return int(self.win_track.shape[0])

    @property
    def n_windows(self) -> int:
        return len(self)

    @property
    def n_bins(self) -> int:
        return int(self.track_dps.shape[-1])

    @property
    def pair(self) -> np.ndarray:
        return self.track_pair[self.win_track]

    @property
    def start(self) -> np.ndarray:
        return self.track_first[self.win_track] + self.win_offset

    @property
    def is_los(self) -> np.ndarray:
        return self.track_los[self.win_track]

    @property
    def n_los(self) -> int:
        return int(self.is_los.sum())

    @property
    def n_nlos(self) -> int:
        return len(self) - self.n_los

    def _rows(self, idx) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(idx)
        rows = self.win_offset[idx][..., None] + np.arange(self.n_points)
        return self.win_track[idx][..., None], rows

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        """Raw ``(dps, csi)`` of the selected windows, ``[b, n_points, ...]``."""
        t, r = self._rows(idx)
        return self.track_dps[t, r], self.track_csi[t, r]

    def normalized_batch(self, idx, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
        dps, csi = self.batch(idx)
        return dps_normalize(dps, self.stats).astype(dtype), csi_normalize(csi, self.stats).astype(dtype)

    @property
    def dps(self) -> np.ndarray:
        return self.batch(np.arange(len(self)))[0]

    @property
    def csi(self) -> np.ndarray:
        return self.batch(np.arange(len(self)))[1]

    def window(self, i: int) -> SampleWindow:
        dps, csi = self.batch(i)
        return SampleWindow(dps, csi, int(self.pair[i]), int(self.start[i]), bool(self.is_los[i]))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, win_track=self.win_track[idx], win_offset=self.win_offset[idx])

    def with_stats(self, stats: NormStats) -> "Dataset":
        return replace(self, stats=stats)

    def covered_rows(self) -> np.ndarray:
        """Boolean mask ``[n_tracks, max_len]`` of rows touched by any window."""
        mask = np.zeros(self.track_dps.shape[:2], dtype=bool)
        t, r = self._rows(np.arange(len(self)))
        mask[t, r] = True
        return mask

    def rewindow(self, n_points: int) -> "Dataset":
        """All windows of ``n_points`` rows that stay inside rows covered now."""
        mask = self.covered_rows()
        tracks, offsets = [], []
        for t in range(mask.shape[0]):
            ok = np.convolve(mask[t].astype(int), np.ones(n_points, dtype=int), mode="valid") == n_points
            starts = np.flatnonzero(ok)
            tracks.append(np.full(starts.shape, t))
            offsets.append(starts)
        if not tracks or sum(len(o) for o in offsets) == 0:
            raise TrajectoryTooShortError(f"trajectory shorter than N_p={n_points}")
        return replace(
            self,
            win_track=np.concatenate(tracks).astype(np.int64),
            win_offset=np.concatenate(offsets).astype(np.int64),
            n_points=n_points,
        )

    def check_structure(self) -> None:
        """Assert the window/track invariants (consecutive rows of one pair)."""
        assert self.n_los + self.n_nlos == len(self)
        assert np.all(self.win_offset >= 0)
        assert np.all(self.win_offset + self.n_points <= self.track_len[self.win_track])
        assert np.all(self.track_dps >= 0)


def count_windows(track_lengths, n_points: int) -> int:
    """Number of sliding windows of ``n_points`` over tracks of the given lengths."""
    lengths = np.asarray(track_lengths)
    if np.any(lengths < n_points):
        raise TrajectoryTooShortError(f"trajectory shorter than N_p={n_points}")
    return int(np.sum(lengths - n_points + 1))


def _observe(h: np.ndarray, cfg: SoundingConfig, noise_pow, rng, method: str, pn, csi_bin: int, chunk_rows: int):
    """DPS and CSI for every ideal tap row in ``h[rows, n_bins]``."""
    rows = h.shape[0]
    dps = np.empty((rows, cfg.n_bins), dtype=np.float64)
    csi = np.empty((rows, 2), dtype=np.float64)
    steer = np.exp(-2j * np.pi * csi_bin * np.arange(cfg.n_bins) / cfg.n_bins)
    for lo in range(0, rows, chunk_rows):
        hi = min(rows, lo + chunk_rows)
        if method == "sound":
            taps = sound_taps(h[lo:hi], pn, cfg.periods, noise_pow, rng)
        else:
            taps = h[lo:hi, None, :] + complex_noise((hi - lo, cfg.periods, cfg.n_bins), noise_pow, rng)
        dps[lo:hi] = np.mean(taps.real**2 + taps.imag**2, axis=1)
        val = taps.mean(axis=1) @ steer
        csi[lo:hi, 0] = np.abs(val)
        csi[lo:hi, 1] = wrap_phase(np.angle(val))
    return dps, csi


def build_dataset(
    trajectories: list[Trajectory],
    cfg: SoundingConfig,
    n_points: int,
    n_pairs: int,
    snr_db: float,
    rng: np.random.Generator,
    *,
    method: str = "sound",
    center: str = "dc",
    floor_db: float = -120.0,
    train_fraction: float = 0.7,
    provenance: dict | None = None,
) -> Dataset:
    """Observe every trajectory through ``n_pairs`` antenna pairs and window the result.

    Each pair sees the trajectory's geometry with its own random phase per
    path.  ``method`` is ``"sound"`` (PN correlation) or ``"ideal"``
    (:func:`~c2sae.channel.synth_cir`-style noise on the ideal taps).
    Normalization statistics come from the first ``train_fraction`` of each
    trajectory's positions.
    """
    if method not in ("sound", "ideal"):
        raise DatasetError(f"unknown method {method!r}")
    lengths = [len(t) for t in trajectories]
    count_windows(lengths, n_points)
    max_len = max(lengths)
    n_tracks = len(trajectories) * n_pairs
    track_dps = np.zeros((n_tracks, max_len, cfg.n_bins), dtype=np.float32)
    track_csi = np.zeros((n_tracks, max_len, 2), dtype=np.float32)
    track_pair = np.zeros(n_tracks, dtype=np.int64)
    track_first = np.zeros(n_tracks, dtype=np.int64)
    track_los = np.zeros(n_tracks, dtype=bool)
    track_len = np.zeros(n_tracks, dtype=np.int64)
    pn = generate_pn_sequence(cfg.pn_degree) if method == "sound" else None
    csi_bin = csi_bin_index(cfg.n_bins, center)
    noise_pow = noise_power(snr_db)
    chunk_rows = max(1, 4_000_000 // (cfg.periods * cfg.n_bins))
    for ti, traj in enumerate(trajectories):
        delays, gains = traj.arrays()
        kern = delay_kernel(delays / cfg.delay_step, cfg.n_bins, cfg.kernel_half_width)
        offsets = rng.uniform(-np.pi, np.pi, size=(n_pairs, delays.shape[1]))
        for p in range(n_pairs):
            g = gains * np.exp(1j * offsets[p])[None, :]
            h = np.einsum("tk,tkn->tn", g, kern)
            dps, csi = _observe(h, cfg, noise_pow, rng, method, pn, csi_bin, chunk_rows)
            k = ti * n_pairs + p
            track_dps[k, : len(traj)] = dps
            track_csi[k, : len(traj)] = csi
            track_pair[k] = p
            track_first[k] = traj.points[0].position
            track_los[k] = traj.scenario == "los"
            track_len[k] = len(traj)
    win_track, win_offset = [], []
    for k in range(n_tracks):
        starts = np.arange(track_len[k] - n_points + 1)
        win_track.append(np.full(starts.shape, k))
        win_offset.append(starts)
    train_rows = [track_dps[k, : max(1, int(round(train_fraction * track_len[k])))] for k in range(n_tracks)]
    train_csi = [track_csi[k, : max(1, int(round(train_fraction * track_len[k])))] for k in range(n_tracks)]
    stats = compute_norm_stats(np.concatenate(train_rows), np.concatenate(train_csi), floor_db)
    return Dataset(
        track_dps,
        track_csi,
        track_pair,
        track_first,
        track_los,
        track_len,
        np.concatenate(win_track).astype(np.int64),
        np.concatenate(win_offset).astype(np.int64),
        n_points,
        stats,
        cfg.delay_step,
        dict(provenance or {}),
    )


def simulate_dataset(sc: ScenarioConfig, *, method: str = "sound") -> Dataset:
    """Generate trajectories and the dataset described by a scenario config."""
    rng = np.random.default_rng(sc.seed)
    kinds = ["los", "nlos"] if sc.scenario == "mixed" else [sc.scenario]
    trajs = []
    first = 0
    for kind in kinds:
        trajs.append(make_trajectory(kind, sc.n_positions, sc.sounding, rng, sc.paths, sc.start, sc.step, first))
        first += sc.n_positions
    prov = {"generator": sc.to_dict(), "seed": sc.seed, "method": method}
    return build_dataset(trajs, sc.sounding, sc.n_points, sc.n_pairs, sc.snr_db, rng, method=method, provenance=prov)


# ---------------------------------------------------------------------------
# file format


LABEL_COLUMNS = ["pair", "start", "is_los", "track"]


def write_dataset(d: Dataset, path) -> None:
    """Write ``d`` as magic, JSON header, then float32 DPS, CSI and label blocks.

    Labels per window are ``pair, start, is_los, track``; the track id lets a
    reader rebuild which windows come from the same antenna pair and run.
    """
    dps, csi = d.batch(np.arange(len(d)))
    track = np.unique(d.win_track, return_inverse=True)[1]
    labels = np.stack([d.pair, d.start, d.is_los, track], axis=-1).astype(np.float32)
    header = {
        "version": DATASET_VERSION,
        "n_windows": len(d),
        "n_points": d.n_points,
        "n_bins": d.n_bins,
        "n_los": d.n_los,
        "n_nlos": d.n_nlos,
        "delay_step": d.delay_step,
        "stats": d.stats.to_dict(),
        "provenance": d.provenance,
        "blocks": ["dps", "csi", "labels"],
        "label_columns": LABEL_COLUMNS,
    }
    write_container(path, DATASET_MAGIC, header, [dps, csi, labels])


def read_dataset(path) -> Dataset:
    """Read a dataset file, regrouping windows into their original tracks."""
    header, payload = read_container(path, DATASET_MAGIC, DATASET_VERSION)
    n, p, b = header["n_windows"], header["n_points"], header["n_bins"]
    nl = len(header.get("label_columns", LABEL_COLUMNS))
    expected = 4 * n * p * (b + 2) + 4 * n * nl
    if expected != len(payload):
        raise TruncatedPayloadError(
            f"{path}: truncated payload, header declares {n} windows ({expected} bytes), payload has {len(payload)}"
        )
    dps, off = take_f32(payload, 0, (n, p, b))
    csi, off = take_f32(payload, off, (n, p, 2))
    labels, _ = take_f32(payload, off, (n, nl))
    pair, start = labels[:, 0].astype(np.int64), labels[:, 1].astype(np.int64)
    is_los, track = labels[:, 2].astype(bool), labels[:, 3].astype(np.int64)
    ids, win_track = np.unique(track, return_inverse=True)
    n_tracks = len(ids)
    first = np.full(n_tracks, np.iinfo(np.int64).max)
    last = np.zeros(n_tracks, dtype=np.int64)
    np.minimum.at(first, win_track, start)
    np.maximum.at(last, win_track, start + p)
    if n == 0:
        first = np.zeros(0, dtype=np.int64)
    length = last - first
    max_len = int(length.max()) if n_tracks else p
    track_dps = np.zeros((n_tracks, max_len, b), dtype=np.float32)
    track_csi = np.zeros((n_tracks, max_len, 2), dtype=np.float32)
    offset = start - first[win_track]
    rows = offset[:, None] + np.arange(p)
    track_dps[win_track[:, None], rows] = dps
    track_csi[win_track[:, None], rows] = csi
    t_pair = np.zeros(n_tracks, dtype=np.int64)
    t_los = np.zeros(n_tracks, dtype=bool)
    t_pair[win_track] = pair
    t_los[win_track] = is_los
    return Dataset(
        track_dps=track_dps,
        track_csi=track_csi,
        track_pair=t_pair,
        track_first=first,
        track_los=t_los,
        track_len=length,
        win_track=win_track.astype(np.int64),
        win_offset=offset,
        n_points=p,
        stats=NormStats.from_dict(header["stats"]),
        delay_step=header["delay_step"],
        provenance=header["provenance"],
    )


def read_header(path, magic: bytes = DATASET_MAGIC, version: int = DATASET_VERSION) -> dict:
    return read_container(path, magic, version)[0]


# ---------------------------------------------------------------------------
# delimited-text export


def export_dps_csv(power: np.ndarray, delay_step: float, path, db: bool = False) -> None:
    """One row per delay bin: ``delay_s`` then one column per spectrum."""
    power = np.atleast_2d(np.asarray(power, dtype=float))
    values = 10 * np.log10(np.maximum(power, 1e-300)) if db else power
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["delay_s"] + [f"{'dps_db' if db else 'dps'}_{i}" for i in range(power.shape[0])])
        for k in range(power.shape[1] if power.size else 0):
            w.writerow([repr(k * delay_step)] + [repr(float(v)) for v in values[:, k]])


def read_delimited(path) -> tuple[list[str], np.ndarray]:
    """Header and float matrix of a CSV written by the exporters."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return [], np.zeros((0, 0))
    header = rows[0]
    data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, len(header))
    return header, data


__all__ = [
    "DelayPowerSpectrum",
    "CsiSample",
    "SampleWindow",
    "NormStats",
    "Dataset",
    "DatasetError",
    "TrajectoryTooShortError",
    "ChannelError",
    "cir_to_dps",
    "cir_to_csi",
    "csi_bin_index",
    "wrap_phase",
    "dps_normalize",
    "dps_denormalize",
    "csi_normalize",
    "csi_denormalize",
    "compute_norm_stats",
    "count_windows",
    "build_dataset",
    "simulate_dataset",
    "write_dataset",
    "read_dataset",
    "read_header",
    "export_dps_csv",
    "read_delimited",
]
