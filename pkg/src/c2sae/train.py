"""Training loop, dataset splits, per-N_p model comparison and latency benchmark."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ndiff as nd
from .model import (
    MODEL_KINDS,
    C2sCheckpoint,
    ModelConfig,
    ModelError,
    baseline_loss,
    decode,
    encode,
    init_params,
    joint_loss,
    predict_dps,
)
from .sounding import Dataset, DatasetError, compute_norm_stats, csi_normalize, dps_normalize

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


class NormStatsMismatchError(ModelError):
    pass


class SplitError(DatasetError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    seeds: tuple[int, ...] = (0, 1, 2)
    patience: int | None = None
    val_fraction: float = 0.1
    eval_every: int = 100
    max_val_windows: int = 512
    split_policy: str = "spatial"
    test_fraction: float = 0.3

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")
        if self.split_policy not in ("spatial", "random"):
            raise ValueError(f"unknown split policy {self.split_policy!r}")
        if self.steps < 0 or self.eval_every < 1:
            raise ValueError("steps must be >= 0 and eval_every >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        d = dict(d)
        if "seeds" in d:
            d["seeds"] = tuple(d["seeds"])
        return cls(**d)


# ---------------------------------------------------------------------------
# splits


def _train_stats(d: Dataset):
    mask = d.covered_rows()
    return compute_norm_stats(d.track_dps[mask], d.track_csi[mask], d.stats.floor_db)


def split_dataset(
    d: Dataset,
    policy: str = "spatial",
    test_fraction: float = 0.3,
    val_fraction: float = 0.1,
    seed: int = 0,
) -> tuple[Dataset, Dataset, Dataset]:
    """Split into (train, val, test) windows; all three carry train-only NormStats.

    ``spatial`` holds out the last ``test_fraction`` of every track's positions
    and keeps only training windows that end before them.  ``val`` is a
    seeded random subset of the training-region windows.  ``random`` assigns
    whole windows at random.
    """
    rng = np.random.default_rng(seed)
    if policy == "spatial":
        n_test = np.rint(test_fraction * d.track_len).astype(np.int64)
        cutoff = (d.track_len - n_test)[d.win_track]
        end = d.win_offset + d.n_points
        train_region = np.flatnonzero(end <= cutoff)
        test_idx = np.flatnonzero(d.win_offset >= cutoff)
        if len(train_region) == 0 or len(test_idx) == 0:
            raise SplitError(f"too few positions for a spatial split with N_p={d.n_points}")
        perm = rng.permutation(train_region)
        n_val = max(1, int(round(val_fraction * len(perm))))
        val_idx, train_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    elif policy == "random":
        perm = rng.permutation(len(d))
        n_test = int(round(test_fraction * len(d)))
        n_val = int(round(val_fraction * (len(d) - n_test)))
        test_idx = np.sort(perm[:n_test])
        val_idx = np.sort(perm[n_test : n_test + n_val])
        train_idx = np.sort(perm[n_test + n_val :])
    else:
        raise SplitError(f"unknown split policy {policy!r}")
    if len(train_idx) == 0 or len(val_idx) == 0 or len(test_idx) == 0:
        raise SplitError("split leaves an empty train, validation or test set")
    train = d.subset(train_idx)
    stats = _train_stats(train)
    return train.with_stats(stats), d.subset(val_idx).with_stats(stats), d.subset(test_idx).with_stats(stats)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    checkpoint: C2sCheckpoint
    steps: list[int]
    loss: list[float]
    recon: list[float]
    latent: list[float]
    val_steps: list[int] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)


def _batches(n: int, batch_size: int, steps: int, rng: np.random.Generator):
    order = np.empty(0, dtype=np.int64)
    for _ in range(steps):
        if len(order) < batch_size:
            order = np.concatenate([order, rng.permutation(n)])
        yield order[:batch_size]
        order = order[batch_size:]


def _decode_mse(params, cfg: ModelConfig, ds: Dataset, stats, idx=None, chunk: int = 256) -> float:
    idx = np.arange(len(ds)) if idx is None else idx
    total, count = 0.0, 0
    for lo in range(0, len(idx), chunk):
        dps, csi = ds.batch(idx[lo : lo + chunk])
        p = dps_normalize(dps, stats)
        z = csi_normalize(csi, stats).astype(cfg.dtype)
        pred = decode(params, z, cfg).data.astype(np.float64)
        total += float(np.sum((pred - p) ** 2))
        count += p.size
    return total / count


def train(
    kind: str,
    train_set: Dataset,
    val_set: Dataset | None,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    seed: int | None = None,
) -> TrainResult:
    """Train a C2S-AE (``joint_loss``) or the decoder-only baseline.

    The batch order depends only on ``seed`` and the training-set size, so
    both kinds see identical data under the same seed.  Returns the
    parameters with the best validation decode-MSE (decoder fed true CSI).
    """
    if kind not in MODEL_KINDS:
        raise ModelError(f"unknown model kind {kind!r}; use one of {MODEL_KINDS}")
    seed = model_cfg.seed if seed is None else seed
    if seed != model_cfg.seed:
        model_cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "seed": seed})
    if train_set.n_bins != model_cfg.n_bins:
        raise ModelError(f"dataset has {train_set.n_bins} bins, model expects {model_cfg.n_bins}")
    stats = train_set.stats
    params = init_params(model_cfg, kind)
    opt = nd.Adam(params.values(), lr=train_cfg.lr)
    rng = np.random.default_rng([seed, 7])
    val_idx = None
    if val_set is not None and len(val_set):
        vrng = np.random.default_rng([seed, 11])
        val_idx = np.sort(vrng.permutation(len(val_set))[: train_cfg.max_val_windows])

    fingerprint = hashlib.sha256()
    res = TrainResult(None, [], [], [], [])  # type: ignore[arg-type]
    best = (math.inf, {k: v.data.copy() for k, v in params.items()}, 0)
    stale = 0

    def validate(step):
        nonlocal best, stale
        if val_idx is None:
            return False
        v = _decode_mse(params, model_cfg, val_set, stats, val_idx)
        res.val_steps.append(step)
        res.val_mse.append(v)
        if v < best[0]:
            best = (v, {k: t.data.copy() for k, t in params.items()}, step)
            stale = 0
        else:
            stale += 1
        return train_cfg.patience is not None and stale > train_cfg.patience

    validate(0)
    for step, idx in enumerate(_batches(len(train_set), train_cfg.batch_size, train_cfg.steps, rng), start=1):
        fingerprint.update(idx.tobytes())
        p, c = train_set.normalized_batch(idx, model_cfg.dtype)
        opt.zero_grad()
        if kind == "c2s-ae":
            loss, recon, latent = joint_loss(params, p, c, model_cfg)
            lat = latent.item()
        else:
            loss = recon = baseline_loss(params, p, c, model_cfg)
            lat = float("nan")
        val = loss.item()
        if not math.isfinite(val):
            raise TrainingDivergedError(f"non-finite loss {val} at step {step} ({kind}, seed {seed})")
        nd.backward(loss)
        opt.step()
        res.steps.append(step)
        res.loss.append(val)
        res.recon.append(recon.item())
        res.latent.append(lat)
        if step % train_cfg.eval_every == 0 or step == train_cfg.steps:
            if validate(step):
                log.info("early stop at step %d", step)
                break

    final = best[1] if val_idx is not None else {k: v.data.copy() for k, v in params.items()}
    meta = {
        "kind": kind,
        "seed": seed,
        "steps": res.steps[-1] if res.steps else 0,
        "best_step": best[2],
        "best_val_mse": best[0] if math.isfinite(best[0]) else None,
        "final_loss": res.loss[-1] if res.loss else None,
        "data_fingerprint": fingerprint.hexdigest(),
        "train_config": train_cfg.to_dict(),
        "n_train_windows": len(train_set),
        "n_points": train_set.n_points,
        "delay_step": train_set.delay_step,
    }
    res.checkpoint = C2sCheckpoint(model_cfg, final, stats, kind, meta)
    return res


def write_loss_curve(res: TrainResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "recon", "latent"])
        for row in zip(res.steps, res.loss, res.recon, res.latent):
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


# ---------------------------------------------------------------------------
# evaluation


def heldout_mse(ckpt: C2sCheckpoint, ds: Dataset, keep_predictions: bool = False):
    """Normalized MSE of ``decode(true CSI)`` against the normalized DPS."""
    params = ckpt.tensors()
    if not keep_predictions:
        return _decode_mse(params, ckpt.config, ds, ckpt.stats)
    dps, csi = ds.batch(np.arange(len(ds)))
    target = dps_normalize(dps, ckpt.stats)
    pred = decode(params, csi_normalize(csi, ckpt.stats).astype(ckpt.config.dtype), ckpt.config).data
    return float(np.mean((pred.astype(np.float64) - target) ** 2)), pred, target


def roundtrip_mse(ckpt: C2sCheckpoint, ds: Dataset, chunk: int = 256) -> float:
    """AE reconstruction ``decode(encode(P))`` error, for logging."""
    if ckpt.kind != "c2s-ae":
        raise ModelError("round-trip MSE needs an autoencoder checkpoint")
    params = ckpt.tensors()
    total, count = 0.0, 0
    for lo in range(0, len(ds), chunk):
        dps, _ = ds.batch(np.arange(lo, min(len(ds), lo + chunk)))
        p = dps_normalize(dps, ckpt.stats)
        pred = decode(params, encode(params, p.astype(ckpt.config.dtype), ckpt.config), ckpt.config).data
        total += float(np.sum((pred - p) ** 2))
        count += p.size
    return total / count


@dataclass
class EvalReport:
    """MSE of both models per N_p; the improvement column is always derived."""

    n_points: list[int]
    mse_baseline: list[float]
    mse_ae: list[float]
    mse_baseline_std: list[float] = field(default_factory=list)
    mse_ae_std: list[float] = field(default_factory=list)
    latency_ms_mean: list[float] = field(default_factory=list)
    latency_ms_std: list[float] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    predictions: dict = field(default_factory=dict, repr=False)

    @property
    def improvement_pct(self) -> list[float]:
        return [(b - a) / b * 100.0 if b != 0 else 0.0 for a, b in zip(self.mse_ae, self.mse_baseline)]

    def rows(self) -> list[list]:
        lat_m = self.latency_ms_mean or [float("nan")] * len(self.n_points)
        lat_s = self.latency_ms_std or [float("nan")] * len(self.n_points)
        return [
            [n, b, a, imp, lm, ls]
            for n, b, a, imp, lm, ls in zip(
                self.n_points, self.mse_baseline, self.mse_ae, self.improvement_pct, lat_m, lat_s
            )
        ]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for r in self.rows():
                w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])

    @classmethod
    def from_csv(cls, path) -> "EvalReport":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        return cls(
            n_points=[int(r[0]) for r in rows],
            mse_baseline=[float(r[1]) for r in rows],
            mse_ae=[float(r[2]) for r in rows],
            latency_ms_mean=[float(r[4]) for r in rows],
            latency_ms_std=[float(r[5]) for r in rows],
        )

    def summary(self) -> str:
        lines = ["N_p  MSE(C2S)  MSE(C2S-AE)  improvement"]
        for n, b, a, imp, *_ in self.rows():
            lines.append(f"{n:>3}  {b:8.4f}  {a:11.4f}  {imp:+9.2f}%")
        if self.seeds:
            lines.append(f"seeds: {self.seeds}")
        return "\n".join(lines)


REPORT_COLUMNS = ["n_points", "mse_baseline", "mse_ae", "improvement_pct", "latency_ms_mean", "latency_ms_std"]


def evaluate_mse(
    ckpt_ae: C2sCheckpoint,
    ckpt_base: C2sCheckpoint,
    test_set: Dataset,
    n_points_list=(1, 2, 4, 8, 16, 32),
    keep_predictions: bool = False,
) -> EvalReport:
    """Decode true CSI with both checkpoints and compare normalized MSE per N_p.

    ``test_set`` is re-windowed to each N_p inside the positions it covers.
    """
    if ckpt_ae.stats != ckpt_base.stats:
        raise NormStatsMismatchError("checkpoints were trained under different normalization statistics")
    rep = EvalReport([], [], [], provenance=dict(test_set.provenance))
    for n in n_points_list:
        ds = test_set if n == test_set.n_points else test_set.rewindow(n)
        rep.n_points.append(int(n))
        if keep_predictions:
            mb, pb, target = heldout_mse(ckpt_base, ds, True)
            ma, pa, _ = heldout_mse(ckpt_ae, ds, True)
            rep.predictions[int(n)] = {"baseline": pb, "ae": pa, "target": target}
        else:
            mb, ma = heldout_mse(ckpt_base, ds), heldout_mse(ckpt_ae, ds)
        rep.mse_baseline.append(mb)
        rep.mse_ae.append(ma)
    return rep


def aggregate_reports(reports: list[EvalReport], seeds=()) -> EvalReport:
    """Mean and std over seeds of reports sharing the same N_p list."""
    n_points = reports[0].n_points
    if any(r.n_points != n_points for r in reports):
        raise ValueError("reports cover different N_p values")
    b = np.array([r.mse_baseline for r in reports])
    a = np.array([r.mse_ae for r in reports])
    return EvalReport(
        n_points=list(n_points),
        mse_baseline=b.mean(axis=0).tolist(),
        mse_ae=a.mean(axis=0).tolist(),
        mse_baseline_std=b.std(axis=0).tolist(),
        mse_ae_std=a.std(axis=0).tolist(),
        seeds=list(seeds),
        provenance=dict(reports[0].provenance),
    )


# ---------------------------------------------------------------------------
# latency


@dataclass(frozen=True)
class LatencyRow:
    n_points: int
    mean_ms: float
    std_ms: float
    repeats: int


def benchmark_inference(
    ckpt: C2sCheckpoint, n_points_list=(1, 2, 4, 8, 16, 32), repeats: int = 1000, warmup: int = 10, seed: int = 0
) -> list[LatencyRow]:
    """Mean/std wall-clock of :func:`predict_dps` at batch size 1."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    params = ckpt.tensors()
    rng = np.random.default_rng(seed)
    rows = []
    for n in n_points_list:
        csi = np.stack([rng.uniform(1e-4, 1e-2, size=n), rng.uniform(-np.pi, np.pi, size=n)], axis=-1)[None]
        for _ in range(warmup):
            predict_dps(ckpt, csi, params)
        times = np.empty(repeats)
        for i in range(repeats):
            t0 = time.perf_counter()
            predict_dps(ckpt, csi, params)
            times[i] = time.perf_counter() - t0
        rows.append(LatencyRow(int(n), float(times.mean() * 1e3), float(times.std() * 1e3), repeats))
    return rows


def write_latency_table(rows: list[LatencyRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n_points", "latency_ms_mean", "latency_ms_std", "repeats", "batch_size"])
        for r in rows:
            w.writerow([r.n_points, repr(r.mean_ms), repr(r.std_ms), r.repeats, 1])
