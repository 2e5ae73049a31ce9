"""Acceptance criteria, one test per criterion.

Every test records a PASS/FAIL line (see the ``verdict`` fixture) that is
repeated in the terminal summary.  The model comparison trains 24 models at
desk scale and dominates the runtime (about half an hour on one CPU core).
"""

import time

import numpy as np
import pytest

from c2sae import channel as ch
from c2sae import cli
from c2sae import ndiff as nd
from c2sae._container import BadMagicError, TruncatedPayloadError
from c2sae.model import (
    C2sCheckpoint,
    ModelConfig,
    decode,
    encode,
    init_params,
    joint_loss,
    load_checkpoint,
    save_checkpoint,
)
from c2sae.ranging import extract_paths, ranging_error, subtract_noise_floor
from c2sae.sounding import (
    Cir,
    cir_to_csi,
    cir_to_dps,
    csi_bin_index,
    read_dataset,
    read_delimited,
    simulate_dataset,
    write_dataset,
)
from c2sae.train import TrainConfig, _train_stats, evaluate_mse, split_dataset, train

DESK = ModelConfig()
DT = ch.SoundingConfig().delay_step


# --- 1. gradients -----------------------------------------------------------


def test_c01_gradient_correctness(verdict):
    cfg = ModelConfig(n_layers=1, d_model=8, n_heads=2, n_bins=16, precision="float64", seed=0)
    params = init_params(cfg)
    rng = np.random.default_rng(0)
    dps, csi = rng.normal(size=(2, 16)), rng.normal(size=(2, 2))
    t0 = time.perf_counter()
    err = nd.grad_check(lambda: joint_loss(params, dps, csi, cfg)[0], list(params.values()), h=1e-5)
    elapsed = time.perf_counter() - t0
    n = sum(p.data.size for p in params.values())
    ok = verdict(1, err < 1e-4 and elapsed < 60, f"max rel. grad error {err:.2e} (< 1e-4) over {n} coords in {elapsed:.1f}s (< 60s)")
    assert ok


# --- 2. permutation equivariance -------------------------------------------


def test_c02_permutation_equivariance(verdict):
    cfg = ModelConfig(precision="float64", seed=1)
    params = init_params(cfg)
    rng = np.random.default_rng(2)
    dps, csi = rng.normal(size=(12, cfg.n_bins)), rng.normal(size=(12, 2))
    z, p = encode(params, dps, cfg).data, decode(params, csi, cfg).data
    worst = 0.0
    for _ in range(20):
        perm = rng.permutation(12)
        worst = max(worst, np.abs(encode(params, dps[perm], cfg).data - z[perm]).max())
        worst = max(worst, np.abs(decode(params, csi[perm], cfg).data - p[perm]).max())
    ok = verdict(2, worst < 1e-10, f"max abs deviation {worst:.2e} over 20 permutations (< 1e-10)")
    assert ok


# --- 3. signal-processing oracles --------------------------------------------


def test_c03_signal_processing_oracles(verdict):
    rng = np.random.default_rng(3)
    n = 1023
    k = np.arange(n)
    dft = np.exp(-2j * np.pi * np.outer(k, k) / n)
    csi_err = dps_err = parseval_err = 0.0
    for _ in range(100):
        taps = rng.normal(size=(4, n)) + 1j * rng.normal(size=(4, n))
        c = Cir(taps, DT)
        h = taps.mean(axis=0)
        spectrum = dft @ h
        for center in ("dc", "mid"):
            s = cir_to_csi(c, center)
            ref = spectrum[csi_bin_index(n, center)]
            csi_err = max(csi_err, abs(s.magnitude * np.exp(1j * s.phase) - ref) / abs(ref))
        loop = [sum(abs(taps[r, b]) ** 2 for r in range(4)) / 4 for b in range(n)]
        dps_err = max(dps_err, np.abs(cir_to_dps(c).power - loop).max())
        energy = np.sum(np.abs(h) ** 2)
        parseval_err = max(parseval_err, abs(energy - np.sum(np.abs(np.fft.fft(h)) ** 2) / n) / energy)
    ok = csi_err < 1e-10 and dps_err < 1e-12 and parseval_err < 1e-9
    verdict(3, ok, f"CSI vs direct DFT {csi_err:.1e} (< 1e-10), DPS vs loop {dps_err:.1e} (< 1e-12), Parseval {parseval_err:.1e} (< 1e-9)")
    assert ok


# --- 4. PN sounding ----------------------------------------------------------


def _recovered(paths: ch.PathSet, power: np.ndarray) -> bool:
    est = extract_paths(subtract_noise_floor(power), DT, threshold_db=-20)
    res = ranging_error(paths, est)
    return res.n_missed == 0 and bool(np.all(res.delay_error <= DT))


def _unit_strongest(p: ch.PathSet) -> ch.PathSet:
    return ch.PathSet.from_arrays(p.delays, p.gains / np.abs(p.gains).max())


def test_c04_pn_sounding(verdict):
    pn = ch.generate_pn_sequence(10).astype(np.int64)
    period_ok = len(pn) == 1023 and all(not np.array_equal(pn, np.roll(pn, d)) for d in (3, 11, 31, 33, 93, 341))
    acf = np.array([int(pn @ np.roll(pn, s)) for s in range(1023)])
    acf_ok = acf[0] == 1023 and np.all(acf[1:] == -1)
    cfg = ch.SoundingConfig()
    rng = np.random.default_rng(4)
    hits = sum(
        _recovered(p, cir_to_dps(ch.sound_cir(p, cfg, 20.0, rng, pn=pn)).power)
        for p in (_unit_strongest(ch.sample_separated_paths(rng, cfg, n_paths=2)) for _ in range(200))
    )
    ok = period_ok and acf_ok and hits >= 190
    verdict(4, ok, f"period 1023 {period_ok}, autocorrelation (1023, -1, ...) {acf_ok}, two-path recovery {hits}/200 at 20 dB (>= 95%)")
    assert ok


# --- 5. overfit sanity -------------------------------------------------------


def test_c05_overfit_sanity(verdict):
    sc = ch.ScenarioConfig(n_positions=12, n_pairs=2, n_points=4, sounding=ch.SoundingConfig(periods=8))
    d = simulate_dataset(sc)
    d = d.subset(np.linspace(0, len(d) - 1, 32).astype(int))
    d = d.with_stats(_train_stats(d))
    t0 = time.perf_counter()
    res = train("c2s-ae", d, None, DESK, TrainConfig(steps=2000, batch_size=32, eval_every=2000))
    elapsed = time.perf_counter() - t0
    recon = res.recon[-1]
    ok = verdict(5, recon < 1e-2 and elapsed < 300, f"recon MSE {recon:.2e} after 2000 steps on 32 windows (< 1e-2) in {elapsed:.0f}s (< 300s)")
    assert ok


# --- 6/7. directional comparison against the decoder-only baseline ------------

COMPARE_NP = (1, 4, 16)
TREND_NP = (1, 4, 16, 32)
SEEDS = (0, 1, 2)
STEPS = 3000
TOKENS_PER_STEP = 256
SCENARIO = ch.ScenarioConfig(
    scenario="mixed", n_positions=110, n_pairs=96, snr_db=25.0, seed=2024, sounding=ch.SoundingConfig(periods=16)
)


@pytest.fixture(scope="module")
def comparison():
    """Per-N_p test MSE of both models for every seed, at equal training budget."""
    base = simulate_dataset(SCENARIO)
    out = {"mse_ae": {}, "mse_base": {}, "sizes": {}, "seconds": {}}
    for n_p in TREND_NP:
        ds = base.rewindow(n_p) if n_p != 1 else base
        t0 = time.perf_counter()
        ae_runs, base_runs = [], []
        for seed in SEEDS:
            tr, va, te = split_dataset(ds, "spatial", seed=seed)
            tc = TrainConfig(steps=STEPS, batch_size=TOKENS_PER_STEP // n_p, eval_every=250, seeds=(seed,))
            ae = train("c2s-ae", tr, va, DESK, tc, seed=seed).checkpoint
            bl = train("baseline", tr, va, DESK, tc, seed=seed).checkpoint
            rep = evaluate_mse(ae, bl, te, [n_p])
            ae_runs.append(rep.mse_ae[0])
            base_runs.append(rep.mse_baseline[0])
            print(f"N_p={n_p:>2} seed={seed}  AE {rep.mse_ae[0]:.4f}  baseline {rep.mse_baseline[0]:.4f}")
        out["mse_ae"][n_p] = np.array(ae_runs)
        out["mse_base"][n_p] = np.array(base_runs)
        out["sizes"][n_p] = (len(tr), len(te))
        out["seconds"][n_p] = time.perf_counter() - t0
    return out


def test_c06_directional_comparison(verdict, comparison):
    parts, improvements, no_worse = [], [], []
    for n_p in COMPARE_NP:
        a, b = comparison["mse_ae"][n_p].mean(), comparison["mse_base"][n_p].mean()
        imp = (b - a) / b * 100
        improvements.append(imp)
        no_worse.append(a <= b)
        n_train, n_test = comparison["sizes"][n_p]
        parts.append(f"N_p={n_p}: AE {a:.4f} vs base {b:.4f} ({imp:+.1f}%, {n_train} train/{n_test} test)")
    sizes_ok = all(min(comparison["sizes"][n]) >= 2000 and comparison["sizes"][n][0] >= 8000 for n in COMPARE_NP)
    minutes = sum(comparison["seconds"][n] for n in COMPARE_NP) / 60
    ok = all(no_worse) and sum(i > 0 for i in improvements) >= 2 and sizes_ok and minutes < 45
    verdict(6, ok, "; ".join(parts) + f"; AE <= base for all, > 0% for >= 2 of 3; {minutes:.0f} min (< 45)")
    assert ok


def test_c07_trend_soft(verdict, comparison):
    means = [comparison["mse_ae"][n].mean() for n in TREND_NP]
    stds = [comparison["mse_ae"][n].std() for n in TREND_NP]
    violations = [
        f"{TREND_NP[i]}->{TREND_NP[i + 1]}"
        for i in range(len(TREND_NP) - 1)
        if means[i + 1] > means[i] + max(stds[i], stds[i + 1])
    ]
    row = ", ".join(f"{n}: {m:.4f}+/-{s:.4f}" for n, m, s in zip(TREND_NP, means, stds))
    verdict(7, not violations, f"(soft, reported only) AE MSE by N_p {row}; violations {violations or 'none'}")


# --- 8. ranging --------------------------------------------------------------


def test_c08_ranging(verdict):
    cfg = ch.SoundingConfig()
    rng = np.random.default_rng(8)
    hits = 0
    for _ in range(500):
        p = _unit_strongest(ch.sample_separated_paths(rng, cfg, n_paths=3, min_separation_bins=3))
        hits += _recovered(p, cir_to_dps(ch.synth_cir(p, cfg, 20.0, rng)).power)
    ok = verdict(8, hits >= 475, f"{hits}/500 three-path instances with every delay within 1 bin ({DT * ch.SPEED_OF_LIGHT:.2f} m) at 20 dB (>= 95%)")
    assert ok


# --- 9. persistence ----------------------------------------------------------


def _corruptions(path, tmp_path, reader):
    raw = path.read_bytes()
    bad = tmp_path / "bad_magic"
    bad.write_bytes(b"XXXXXXXX" + raw[8:])
    short = tmp_path / "short"
    short.write_bytes(raw[:-7])
    results = []
    for target, err in ((bad, BadMagicError), (short, TruncatedPayloadError)):
        try:
            reader(target)
            results.append(False)
        except err:
            results.append(True)
    return all(results)


def test_c09_persistence(verdict, tmp_path):
    d = simulate_dataset(ch.ScenarioConfig(scenario="los", n_positions=6, n_pairs=2, n_points=2, sounding=ch.SoundingConfig(periods=2)))
    dpath = tmp_path / "data.c2s"
    write_dataset(d, dpath)
    back = read_dataset(dpath)
    data_ok = (
        np.array_equal(d.dps, back.dps)
        and np.array_equal(d.csi, back.csi)
        and back.stats == d.stats
        and np.array_equal(d.start, back.start)
    )
    ck = C2sCheckpoint.from_tensors(DESK, init_params(DESK), d.stats, "c2s-ae", {"note": "acceptance"})
    cpath = tmp_path / "model.ckpt"
    save_checkpoint(ck, cpath)
    ck2 = load_checkpoint(cpath)
    ckpt_ok = (
        ck2.config == ck.config
        and ck2.stats == ck.stats
        and list(ck2.params) == list(ck.params)
        and all(ck.params[k].tobytes() == ck2.params[k].tobytes() for k in ck.params)
    )
    errors_ok = _corruptions(dpath, tmp_path, read_dataset) and _corruptions(cpath, tmp_path, load_checkpoint)
    ok = data_ok and ckpt_ok and errors_ok
    verdict(9, ok, f"dataset bit-exact {data_ok}, checkpoint bit-exact {ckpt_ok}, bad magic/truncation errors {errors_ok}")
    assert ok


# --- 10. benchmark harness ---------------------------------------------------


def test_c10_benchmark_harness(verdict, tmp_path):
    d = simulate_dataset(ch.ScenarioConfig(scenario="los", n_positions=4, n_pairs=1, sounding=ch.SoundingConfig(periods=2)))
    path = tmp_path / "model.ckpt"
    save_checkpoint(C2sCheckpoint.from_tensors(DESK, init_params(DESK), d.stats), path)
    out = tmp_path / "latency.csv"
    code = cli.main(["bench", "--checkpoint", str(path), "--out", str(out), "--quiet"])
    header, rows = read_delimited(out)
    ok = (
        code == 0
        and header == ["n_points", "latency_ms_mean", "latency_ms_std", "repeats", "batch_size"]
        and rows[:, 0].tolist() == [1, 2, 4, 8, 16, 32]
        and np.all(rows[:, 3] == 1000)
        and np.all(rows[:, 4] == 1)
        and np.all(rows[:, 1] > 0)
    )
    lat = ", ".join(f"{int(n)}: {m:.2f} ms" for n, m in rows[:, :2])
    verdict(10, ok, f"bench rows for N_p 1..32 at batch 1 x 1000 repeats ({lat})")
    assert ok
