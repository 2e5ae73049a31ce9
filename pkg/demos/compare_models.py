"""Train a C2S-AE and the decoder-only baseline on a small synthetic set.

Both models see the same batches; the comparison decodes true CSI on the
held-out end of every trajectory.  This is a small illustration, not the
acceptance-scale experiment in ``tests/test_acceptance.py``.
"""

import numpy as np

from c2sae.channel import ScenarioConfig, SoundingConfig
from c2sae.model import ModelConfig, predict_dps
from c2sae.ranging import extract_paths
from c2sae.sounding import simulate_dataset
from c2sae.train import TrainConfig, evaluate_mse, roundtrip_mse, split_dataset, train


def main(n_points: int = 4, steps: int = 1000) -> None:
    sc = ScenarioConfig(scenario="mixed", n_positions=40, n_pairs=8, n_points=n_points, sounding=SoundingConfig(periods=8))
    data = simulate_dataset(sc)
    tr, va, te = split_dataset(data, "spatial")
    print(f"{len(tr)} train / {len(va)} validation / {len(te)} test windows of {n_points} points")

    model_cfg = ModelConfig(n_layers=1, d_model=32, n_heads=4)
    train_cfg = TrainConfig(steps=steps, batch_size=max(1, 128 // n_points), eval_every=50)
    ae = train("c2s-ae", tr, va, model_cfg, train_cfg).checkpoint
    base = train("baseline", tr, va, model_cfg, train_cfg).checkpoint

    report = evaluate_mse(ae, base, te, [1, 2, 4, 8])
    print(report.summary())
    print(f"AE round trip (decode(encode(P))) MSE: {roundtrip_mse(ae, te):.4f}")

    dps, csi = te.batch(0)
    pred = predict_dps(ae, csi[None])[0, 0]
    for name, power in (("measured", dps[0]), ("predicted", pred)):
        strongest = sorted(extract_paths(power, te.delay_step), key=lambda e: -e.power)[:3]
        ranges = ", ".join(f"{e.range:6.1f} m" for e in sorted(strongest, key=lambda e: e.delay))
        print(f"{name:>9} strongest paths: {ranges}")

if __name__ == "__main__":
    main()
