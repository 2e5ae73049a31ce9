import numpy as np
import pytest

from c2sae import ndiff as nd
from c2sae.model import C2sCheckpoint, ModelConfig, baseline_loss, init_params
from c2sae.sounding import NormStats, csi_normalize, dps_normalize

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion and return ``ok``."""

    def record(number: int, ok: bool, text: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {text}"
        print(line)
        _ACCEPTANCE_LINES.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy_model():
    """Decoder trained on a two-path toy channel.

    The dominant path sits at bin ``k`` with a weaker echo at ``k + 3``; the
    CSI magnitude encodes ``k``.  Returns ``(checkpoint, raw csi [n, 2], bins)``.
    """
    cfg = ModelConfig(n_layers=1, d_model=16, n_heads=2, n_bins=16, precision="float64", seed=0)
    bins = np.arange(2, 12)
    csi = np.column_stack([10 ** (-bins / 10), np.zeros(len(bins))])
    stats = NormStats(dps_mean=-60.0, dps_std=30.0, csi_mag_mean=-10.0, csi_mag_std=6.0)
    dps = np.full((len(bins), 16), 1e-9)
    dps[np.arange(len(bins)), bins] = 1.0
    dps[np.arange(len(bins)), bins + 3] = 0.1
    x = dps_normalize(dps, stats)[:, None, :]
    c = csi_normalize(csi, stats)[:, None, :]
    params = init_params(cfg, "baseline")
    opt = nd.Adam(params.values(), lr=3e-3)
    for _ in range(300):
        opt.zero_grad()
        nd.backward(baseline_loss(params, x, c, cfg))
        opt.step()
    ckpt = C2sCheckpoint.from_tensors(cfg, params, stats, "baseline", {"delay_step": 5e-9})
    return ckpt, csi, bins
