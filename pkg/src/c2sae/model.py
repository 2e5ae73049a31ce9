"""The C2S autoencoder: DPS -> CSI encoder, CSI -> DPS decoder.

Both stacks are pre-norm Transformer encoders without positional encoding or
masks, so every N_p is served by the same parameters and the output rows
permute with the input rows.  The decoder-only baseline uses the decoder
half alone, trained directly on true CSI.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import ndiff as nd
from ._container import read_container, take_f32, write_container
from .sounding import NormStats, csi_normalize, dps_denormalize

CHECKPOINT_MAGIC = b"C2SCKPT1"
CHECKPOINT_VERSION = 1

MODEL_KINDS = ("c2s-ae", "baseline")


class ModelError(ValueError):
    pass


class CheckpointMismatchError(ModelError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int | None = None
    n_bins: int = 1023
    csi_dim: int = 2
    precision: str = "float32"
    seed: int = 0
    latent_weight: float = 1.0
    reduction: str = "mean"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.n_layers < 1:
            raise nd.ConfigError("n_layers must be >= 1")
        if self.d_model % self.n_heads:
            raise nd.ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.precision not in ("float32", "float64"):
            raise nd.ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.reduction not in ("mean", "sum"):
            raise nd.ConfigError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")

    @property
    def ffn_width(self) -> int:
        return self.d_ff or 4 * self.d_model

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        return cls(**d)


def deep_config(**overrides) -> ModelConfig:
    """Six layers per stack instead of the two-layer desk default."""
    return ModelConfig(**{"n_layers": 6, **overrides})


# ---------------------------------------------------------------------------
# parameters


def _glorot(rng, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def _stack_shapes(prefix: str, d_in: int, d_out: int, cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f = cfg.d_model, cfg.ffn_width
    shapes = [(f"{prefix}.in.w", (d_in, d)), (f"{prefix}.in.b", (d,))]
    for i in range(cfg.n_layers):
        b = f"{prefix}.{i}"
        shapes += [(f"{b}.ln1.g", (d,)), (f"{b}.ln1.b", (d,))]
        for m in ("q", "k", "v", "o"):
            shapes += [(f"{b}.attn.w{m}", (d, d)), (f"{b}.attn.b{m}", (d,))]
        shapes += [(f"{b}.ln2.g", (d,)), (f"{b}.ln2.b", (d,))]
        shapes += [(f"{b}.ff1.w", (d, f)), (f"{b}.ff1.b", (f,)), (f"{b}.ff2.w", (f, d)), (f"{b}.ff2.b", (d,))]
    shapes += [(f"{prefix}.ln.g", (d,)), (f"{prefix}.ln.b", (d,))]
    shapes += [(f"{prefix}.out.w", (d, d_out)), (f"{prefix}.out.b", (d_out,))]
    return shapes


def parameter_shapes(cfg: ModelConfig, kind: str = "c2s-ae") -> list[tuple[str, tuple[int, ...]]]:
    """Declared order of every parameter (also the checkpoint blob order)."""
    if kind not in MODEL_KINDS:
        raise ModelError(f"unknown model kind {kind!r}; use one of {MODEL_KINDS}")
    dec = _stack_shapes("dec", cfg.csi_dim, cfg.n_bins, cfg)
    if kind == "baseline":
        return dec
    return _stack_shapes("enc", cfg.n_bins, cfg.csi_dim, cfg) + dec


def init_params(cfg: ModelConfig, kind: str = "c2s-ae") -> dict[str, nd.Tensor]:
    """Glorot-uniform weights, unit LayerNorm gains, zero biases.

    Encoder and decoder draw from separate seeded streams, so a baseline and
    an autoencoder built from the same config start with identical decoders.
    """
    params = {}
    streams = {"enc": np.random.default_rng([cfg.seed, 1]), "dec": np.random.default_rng([cfg.seed, 2])}
    for name, shape in parameter_shapes(cfg, kind):
        rng = streams[name.split(".", 1)[0]]
        leaf = name.rsplit(".", 1)[1]
        if len(shape) == 2:
            val = _glorot(rng, shape[0], shape[1], cfg.dtype)
        elif leaf == "g":
            val = np.ones(shape, dtype=cfg.dtype)
        else:
            val = np.zeros(shape, dtype=cfg.dtype)
        params[name] = nd.Tensor(val, requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# forward passes


def _block(h: nd.Tensor, params, prefix: str, cfg: ModelConfig) -> nd.Tensor:
    a = nd.layer_norm(h, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"], cfg.ln_eps)
    attn = {k: params[f"{prefix}.attn.{k}"] for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}
    h = h + nd.multi_head_self_attention(a, attn, cfg.n_heads)
    a = nd.layer_norm(h, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"], cfg.ln_eps)
    a = nd.gelu(nd.linear(a, params[f"{prefix}.ff1.w"], params[f"{prefix}.ff1.b"]))
    return h + nd.linear(a, params[f"{prefix}.ff2.w"], params[f"{prefix}.ff2.b"])


def _stack(x: nd.Tensor, params, prefix: str, cfg: ModelConfig) -> nd.Tensor:
    h = nd.linear(x, params[f"{prefix}.in.w"], params[f"{prefix}.in.b"])
    for i in range(cfg.n_layers):
        h = _block(h, params, f"{prefix}.{i}", cfg)
    h = nd.layer_norm(h, params[f"{prefix}.ln.g"], params[f"{prefix}.ln.b"], cfg.ln_eps)
    return nd.linear(h, params[f"{prefix}.out.w"], params[f"{prefix}.out.b"])


def _input(x, width: int, cfg: ModelConfig) -> nd.Tensor:
    t = x if isinstance(x, nd.Tensor) else nd.Tensor(np.asarray(x, dtype=cfg.dtype))
    if t.ndim < 2 or t.shape[-1] != width or t.shape[-2] < 1:
        raise nd.ShapeError(f"expected input [..., N_p >= 1, {width}], got {t.shape}")
    if not np.all(np.isfinite(t.data)):
        raise ModelError("input contains non-finite values")
    return t


def encode(params, dps, cfg: ModelConfig) -> nd.Tensor:
    """Normalized DPS ``[..., N_p, n_bins]`` -> latent CSI ``[..., N_p, 2]``."""
    return _stack(_input(dps, cfg.n_bins, cfg), params, "enc", cfg)


def decode(params, z, cfg: ModelConfig) -> nd.Tensor:
    """Normalized CSI ``[..., N_p, 2]`` -> normalized DPS ``[..., N_p, n_bins]``."""
    return _stack(_input(z, cfg.csi_dim, cfg), params, "dec", cfg)


def joint_loss(params, dps, csi, cfg: ModelConfig) -> tuple[nd.Tensor, nd.Tensor, nd.Tensor]:
    """``mse(P, f_D(f_E(P))) + latent_weight * mse(C, f_E(P))``.

    Returns ``(loss, recon, latent)``.
    """
    p = _input(dps, cfg.n_bins, cfg)
    c = _input(csi, cfg.csi_dim, cfg)
    if p.shape[:-1] != c.shape[:-1]:
        raise nd.ShapeError(f"DPS {p.shape} and CSI {c.shape} disagree on batch/N_p")
    z = encode(params, p, cfg)
    recon = nd.mse(decode(params, z, cfg), p, cfg.reduction)
    latent = nd.mse(z, c, cfg.reduction)
    return recon + latent * cfg.latent_weight, recon, latent


def baseline_loss(params, dps, csi, cfg: ModelConfig) -> nd.Tensor:
    """``mse(P, f_D(C))`` for the decoder trained alone on true CSI."""
    p = _input(dps, cfg.n_bins, cfg)
    c = _input(csi, cfg.csi_dim, cfg)
    if p.shape[:-1] != c.shape[:-1]:
        raise nd.ShapeError(f"DPS {p.shape} and CSI {c.shape} disagree on batch/N_p")
    return nd.mse(decode(params, c, cfg), p, cfg.reduction)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class C2sCheckpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    stats: NormStats
    kind: str = "c2s-ae"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stats is None:
            raise ModelError("a checkpoint needs its normalization statistics")
        expected = parameter_shapes(self.config, self.kind)
        names = [n for n, _ in expected]
        if sorted(names) != sorted(self.params):
            raise CheckpointMismatchError("checkpoint parameters do not match the model config")
        for name, shape in expected:
            if tuple(self.params[name].shape) != shape:
                raise CheckpointMismatchError(f"{name}: shape {self.params[name].shape}, config expects {shape}")

    def tensors(self, dtype=None) -> dict[str, nd.Tensor]:
        dtype = dtype or self.config.dtype
        return {k: nd.Tensor(np.asarray(v, dtype=dtype)) for k, v in self.params.items()}

    @classmethod
    def from_tensors(cls, config, params, stats, kind="c2s-ae", metadata=None) -> "C2sCheckpoint":
        return cls(config, {k: v.data.copy() for k, v in params.items()}, stats, kind, dict(metadata or {}))


def save_checkpoint(ckpt: C2sCheckpoint, path) -> None:
    order = parameter_shapes(ckpt.config, ckpt.kind)
    header = {
        "version": CHECKPOINT_VERSION,
        "kind": ckpt.kind,
        "config": ckpt.config.to_dict(),
        "stats": ckpt.stats.to_dict(),
        "metadata": ckpt.metadata,
        "params": [[name, list(shape)] for name, shape in order],
    }
    write_container(path, CHECKPOINT_MAGIC, header, [ckpt.params[name] for name, _ in order])


def load_checkpoint(path) -> C2sCheckpoint:
    header, payload = read_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    cfg = ModelConfig.from_dict(header["config"])
    declared = [(n, tuple(s)) for n, s in header["params"]]
    if declared != parameter_shapes(cfg, header["kind"]):
        raise CheckpointMismatchError(f"{path}: parameter manifest does not match its model config")
    params, off = {}, 0
    for name, shape in declared:
        params[name], off = take_f32(payload, off, shape)
    return C2sCheckpoint(cfg, params, NormStats.from_dict(header["stats"]), header["kind"], header["metadata"])


# ---------------------------------------------------------------------------
# inference


def decode_numpy(ckpt: C2sCheckpoint, z_norm: np.ndarray, params=None) -> np.ndarray:
    params = params if params is not None else ckpt.tensors()
    return decode(params, z_norm, ckpt.config).data


def predict_dps(ckpt: C2sCheckpoint, csi_raw, params=None) -> np.ndarray:
    """Raw CSI ``[..., N_p, 2]`` (magnitude, phase) -> linear-power DPS ``[..., N_p, n_bins]``.

    Both model kinds predict with the decoder alone.
    """
    csi_raw = np.asarray(csi_raw, dtype=float)
    if csi_raw.ndim < 2 or csi_raw.shape[-1] != ckpt.config.csi_dim:
        raise nd.ShapeError(f"expected CSI [..., N_p, {ckpt.config.csi_dim}], got {csi_raw.shape}")
    if not np.all(np.isfinite(csi_raw)):
        raise ModelError("CSI input contains non-finite values")
    z = csi_normalize(csi_raw, ckpt.stats).astype(ckpt.config.dtype)
    return dps_denormalize(decode_numpy(ckpt, z, params), ckpt.stats)
