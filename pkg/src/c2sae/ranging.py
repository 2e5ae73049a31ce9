"""Per-path delay/strength extraction from a DPS and ranging error against truth."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import SPEED_OF_LIGHT, PathSet


@dataclass(frozen=True)
class PathEstimate:
    delay: float
    power: float

    def __post_init__(self):
        if self.delay < 0 or not self.power > 0:
            raise ValueError("need delay >= 0 and power > 0")

    @property
    def range(self) -> float:
        return SPEED_OF_LIGHT * self.delay


def subtract_noise_floor(power, floor: float | None = None) -> np.ndarray:
    """Remove an additive noise floor from a measured DPS, clipping at zero.

    Noise adds its power to every delay bin.  When ``floor`` is not given it
    is estimated as the median bin, which suits sparse multipath spectra
    where most bins hold noise only.
    """
    p = np.asarray(getattr(power, "power", power), dtype=float)
    if floor is None:
        floor = float(np.median(p))
    return np.clip(p - floor, 0.0, None)


def extract_paths(
    power,
    delay_step: float,
    threshold_db: float = -25.0,
    min_separation_bins: int = 2,
    interpolate: bool = False,
) -> list[PathEstimate]:
    """Local maxima above ``max * 10**(threshold_db/10)``, strongest first.

    A candidate is dropped if it sits closer than ``min_separation_bins`` to
    an already accepted peak.  With ``interpolate`` the delay is refined by a
    parabola through the peak and its neighbours (in dB).
    """
    if threshold_db >= 0:
        raise ValueError("threshold_db must be negative (relative to the maximum)")
    p = np.asarray(getattr(power, "power", power), dtype=float)
    if p.ndim != 1:
        raise ValueError(f"expected a 1-D spectrum, got shape {p.shape}")
    peak = p.max(initial=0.0)
    if peak <= 0:
        return []
    left = np.concatenate([[-np.inf], p[:-1]])
    right = np.concatenate([p[1:], [-np.inf]])
    cand = np.flatnonzero((p > left) & (p >= right) & (p >= peak * 10 ** (threshold_db / 10)))
    cand = cand[np.argsort(-p[cand], kind="stable")]
    kept: list[int] = []
    for k in cand:
        if all(abs(int(k) - j) >= min_separation_bins for j in kept):
            kept.append(int(k))
    out = []
    for k in sorted(kept):
        pos = float(k)
        if interpolate and 0 < k < len(p) - 1 and p[k - 1] > 0 and p[k + 1] > 0:
            a, b, c = 10 * np.log10(p[k - 1 : k + 2])
            den = a - 2 * b + c
            if den < 0:
                pos += 0.5 * (a - c) / den
        out.append(PathEstimate(max(pos, 0.0) * delay_step, float(p[k])))
    return out


@dataclass
class RangingResult:
    """Errors for each true path; ``nan`` where a path was missed."""

    delay_error: np.ndarray
    range_error: np.ndarray
    matched: list[int | None]
    misses: list[int] = field(default_factory=list)

    @property
    def n_missed(self) -> int:
        return len(self.misses)


def ranging_error(truth: PathSet, estimates: list[PathEstimate], max_error: float | None = None) -> RangingResult:
    """Greedy nearest-delay matching of estimates to true paths.

    Pairs are taken in order of increasing delay gap; every estimate is used
    at most once.  Paths left without a partner (or whose gap exceeds
    ``max_error`` seconds) are misses.
    """
    if len(truth) == 0:
        raise ValueError("truth must contain at least one path")
    td = truth.delays
    ed = np.array([e.delay for e in estimates], dtype=float)
    gaps = sorted(
        (abs(td[i] - ed[j]), i, j) for i in range(len(td)) for j in range(len(ed))
    )
    matched: list[int | None] = [None] * len(td)
    used = set()
    for gap, i, j in gaps:
        if matched[i] is not None or j in used:
            continue
        if max_error is not None and gap > max_error:
            break
        matched[i] = j
        used.add(j)
    derr = np.array([abs(td[i] - ed[j]) if j is not None else np.nan for i, j in enumerate(matched)])
    return RangingResult(derr, derr * SPEED_OF_LIGHT, matched, [i for i, j in enumerate(matched) if j is None])
