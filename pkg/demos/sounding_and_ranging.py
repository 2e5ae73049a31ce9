"""Sound a three-path channel with the PN10 sequence and read off path ranges.

Run with ``python demos/sounding_and_ranging.py``.
"""

import numpy as np

from c2sae import channel as ch
from c2sae.ranging import extract_paths, ranging_error, subtract_noise_floor
from c2sae.sounding import cir_to_csi, cir_to_dps


def main(seed: int = 0) -> None:
    rng = np.random.default_rng(seed)
    cfg = ch.SoundingConfig()
    paths = ch.sample_separated_paths(rng, cfg, n_paths=3, min_separation_bins=6)
    paths = ch.PathSet.from_arrays(paths.delays, paths.gains / np.abs(paths.gains).max())
    cir = ch.sound_cir(paths, cfg, snr_db=20.0, rng=rng)
    dps = cir_to_dps(cir)
    csi = cir_to_csi(cir)
    print(f"CSI at the DC bin: |H| = {csi.magnitude:.3f}, angle = {csi.phase:+.3f} rad")

    est = extract_paths(subtract_noise_floor(dps.power), cfg.delay_step, threshold_db=-20)
    res = ranging_error(paths, est)
    print(f"{'true range':>12} {'estimate':>10} {'error':>8}")
    for i, j in enumerate(res.matched):
        true_range = paths.delays[i] * ch.SPEED_OF_LIGHT
        got = f"{est[j].range:10.2f}" if j is not None else f"{'missed':>10}"
        print(f"{true_range:10.2f} m {got} {res.range_error[i]:7.2f} m")


if __name__ == "__main__":
    main()
