"""Vector-field network: token conditioning + masked-attention DiT stack.

The network maps (noisy features x_t, timestep t, condition) to a velocity
with the same shape as x_t. Conditioning is channel-wise: upsampled token
embeddings and a broadcast speaker embedding are concatenated with x_t before
the input projection. Each transformer layer is an adaLN-zero block whose
attention obeys the schedule's mask for that layer, so the stack's receptive
field is exactly the schedule's (p past, q future) blocks.

Forward passes are written once over autodiff Tensors; the public functions
wrap plain arrays (no tape). Positions are keyed by absolute frame index
(`frame_offset`), which is what lets a sliding window reproduce full-sequence
outputs bitwise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import tensorio
from .errors import ConfigurationError, FormatError, InputError, NumericalError
from .masks import MaskSchedule, build_mask, schedule_preset
from .numerics import DTYPE, RngStream, SeededRng, seeded_gaussian


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int
    heads: int
    feature_dim: int
    token_vocab: int
    token_embed_dim: int
    speaker_dim: int
    upsample_factor: int
    dropout: float
    schedule: MaskSchedule
    positional: bool = True
    mlp_ratio: int = 4
    time_freq_dim: int = 64

    def __post_init__(self):
        if self.hidden_dim % self.heads != 0:
            raise ConfigurationError(
                f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}"
            )
        if self.upsample_factor < 1:
            raise ConfigurationError("upsample_factor must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.time_freq_dim % 2 != 0:
            raise ConfigurationError("time_freq_dim must be even")

    @property
    def layers(self) -> int:
        return self.schedule.layers

    @property
    def cond_dim(self) -> int:
        return self.token_embed_dim + self.speaker_dim


def tiny_config(**overrides) -> ModelConfig:
    """Desk-scale default: 4 layers, hidden 64, 4 heads, 8 feature channels, b=8."""
    base = dict(
        hidden_dim=64,
        heads=4,
        feature_dim=8,
        token_vocab=32,
        token_embed_dim=16,
        speaker_dim=8,
        upsample_factor=4,
        dropout=0.0,
        schedule=schedule_preset("tiny"),
    )
    base.update(overrides)
    return ModelConfig(**base)


def desk_config(preset: str, **overrides) -> ModelConfig:
    """Desk-scale widths under a named schedule preset (sr|lr|full|causal|tiny)."""
    schedule = schedule_preset(preset)
    return tiny_config(schedule=schedule, **overrides)


def paper_config() -> ModelConfig:
    """Full-scale structural hyperparameters (~400M params; init is heavy)."""
    return ModelConfig(
        hidden_dim=1024,
        heads=16,
        feature_dim=80,
        token_vocab=512,
        token_embed_dim=512,
        speaker_dim=192,
        upsample_factor=4,
        dropout=0.1,
        schedule=schedule_preset("sr"),
    )


# ------------------------------- parameters ------------------------------------


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def param_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


def _param_specs(config: ModelConfig) -> list[tuple[str, tuple[int, ...], float]]:
    """(name, shape, init std) in canonical order. std 0.0 marks zero init."""
    h = config.hidden_dim
    specs: list[tuple[str, tuple[int, ...], float]] = [
        ("token_embed.table", (config.token_vocab, config.token_embed_dim), 1.0),
        ("in_proj.w", (config.feature_dim + config.cond_dim, h), _fan(config.feature_dim + config.cond_dim)),
        ("in_proj.b", (h,), 0.0),
        ("time_mlp.w1", (config.time_freq_dim, h), _fan(config.time_freq_dim)),
        ("time_mlp.b1", (h,), 0.0),
        ("time_mlp.w2", (h, h), _fan(h)),
        ("time_mlp.b2", (h,), 0.0),
    ]
    for i in range(config.layers):
        for w in ("wq", "wk", "wv", "wo"):
            specs.append((f"layer{i}.attn.{w}", (h, h), _fan(h)))
        for b in ("bq", "bk", "bv", "bo"):
            specs.append((f"layer{i}.attn.{b}", (h,), 0.0))
        m = config.mlp_ratio * h
        specs.append((f"layer{i}.mlp.w1", (h, m), _fan(h)))
        specs.append((f"layer{i}.mlp.b1", (m,), 0.0))
        specs.append((f"layer{i}.mlp.w2", (m, h), _fan(m)))
        specs.append((f"layer{i}.mlp.b2", (h,), 0.0))
        # adaLN-zero: the whole modulation projector starts at zero.
        specs.append((f"layer{i}.adaln.w", (h, 6 * h), 0.0))
        specs.append((f"layer{i}.adaln.b", (6 * h,), 0.0))
    # Output head starts at zero too, so a fresh model is the constant-zero field.
    specs.append(("out_proj.w", (h, config.feature_dim), 0.0))
    specs.append(("out_proj.b", (config.feature_dim,), 0.0))
    return specs


def _fan(fan_in: int) -> float:
    return 1.0 / math.sqrt(fan_in)


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Reproducible init: gates (adaLN, out head) exactly zero, rest ~ N(0, 1/fan_in)."""
    return _draw_params(config, seed, randomize_gates=False)


def random_params(config: ModelConfig, seed: int) -> ModelParams:
    """Like init_params but with adaLN and output head drawn random.

    Needed by perturbation probes: a spec-faithful fresh init is the constant
    zero field, so nothing propagates to measure.
    """
    return _draw_params(config, seed, randomize_gates=True)


def _draw_params(config: ModelConfig, seed: int, randomize_gates: bool) -> ModelParams:
    tensors: dict[str, np.ndarray] = {}
    for stream, (name, shape, std) in enumerate(_param_specs(config)):
        if std == 0.0 and randomize_gates and name.endswith((".adaln.w", "out_proj.w")):
            std = _fan(shape[0])
        if std == 0.0:
            tensors[name] = np.zeros(shape, dtype=DTYPE)
        else:
            draws = seeded_gaussian(SeededRng(seed, stream), int(np.prod(shape)))
            tensors[name] = (draws * np.float32(std)).reshape(shape)
    return ModelParams(config, tensors)


def params_to_tensors(params: ModelParams, requires_grad: bool = False) -> dict[str, ad.Tensor]:
    return {k: ad.Tensor(v, requires_grad=requires_grad) for k, v in params.tensors.items()}


# ------------------------------ conditioning -----------------------------------


@dataclass(frozen=True)
class ConditionBundle:
    """Frame-aligned condition matrix: token embedding columns then speaker columns.

    frame_ids/speaker keep the raw inputs so training can rebuild the lookup
    inside the autodiff graph (embedding table receives gradients). A zeroed
    bundle (CFG unconditional branch) has no provenance.
    """

    frames: int
    cond: np.ndarray  # frames x (token_embed_dim + speaker_dim), float32
    frame_ids: np.ndarray | None = None
    speaker: np.ndarray | None = None

    def slice(self, lo: int, hi: int) -> "ConditionBundle":
        return ConditionBundle(
            frames=hi - lo,
            cond=self.cond[lo:hi],
            frame_ids=None if self.frame_ids is None else self.frame_ids[lo:hi],
            speaker=self.speaker,
        )


def upsample_tokens(tokens: list[int], factor: int) -> np.ndarray:
    """Repeat each token id `factor` times (token rate -> frame rate)."""
    if factor < 1:
        raise ConfigurationError(f"upsample factor must be >= 1, got {factor}")
    return np.repeat(np.asarray(tokens, dtype=np.int64), factor)


def assemble_condition(
    frame_ids: np.ndarray, speaker_embedding: np.ndarray, params: ModelParams
) -> ConditionBundle:
    """Look up per-frame token embeddings, broadcast + concat the speaker vector."""
    config = params.config
    frame_ids = np.asarray(frame_ids, dtype=np.int64)
    speaker = np.asarray(speaker_embedding, dtype=DTYPE)
    if speaker.shape != (config.speaker_dim,):
        raise InputError(f"speaker embedding must have shape ({config.speaker_dim},), got {speaker.shape}")
    if frame_ids.size and (frame_ids.min() < 0 or frame_ids.max() >= config.token_vocab):
        raise InputError(f"token id outside [0, {config.token_vocab})")
    tok = params.tensors["token_embed.table"][frame_ids]
    spk = np.broadcast_to(speaker, (frame_ids.size, config.speaker_dim))
    return ConditionBundle(
        frames=int(frame_ids.size),
        cond=np.concatenate([tok, spk], axis=1).astype(DTYPE),
        frame_ids=frame_ids,
        speaker=speaker,
    )


def zero_condition(frames: int, config: ModelConfig) -> ConditionBundle:
    """All-zeros bundle of the conditional shape (CFG unconditional branch)."""
    return ConditionBundle(frames=frames, cond=np.zeros((frames, config.cond_dim), dtype=DTYPE))


def _condition_tensor(cond: ConditionBundle, params_t: dict[str, ad.Tensor], config: ModelConfig) -> ad.Tensor:
    if cond.frame_ids is None:
        return ad.Tensor(cond.cond)
    tok = ad.gather_rows(params_t["token_embed.table"], cond.frame_ids)
    spk = np.broadcast_to(np.asarray(cond.speaker, dtype=tok.data.dtype), (cond.frames, config.speaker_dim))
    return ad.concat_cols([tok, ad.Tensor(spk.copy())])


# ------------------------------ embeddings -------------------------------------


def _time_features(t: float, dim: int, dtype=DTYPE) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = t * freqs
    return np.concatenate([np.cos(args), np.sin(args)])[None, :].astype(dtype)


def positional_encoding(offset: int, frames: int, dim: int, dtype=DTYPE) -> np.ndarray:
    """Absolute-position sin/cos features; row r encodes frame offset + r."""
    pos = np.arange(offset, offset + frames, dtype=np.float64)[:, None]
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)[None, :]
    args = pos * freqs
    out = np.empty((frames, dim), dtype=np.float64)
    out[:, 0::2] = np.sin(args)
    out[:, 1::2] = np.cos(args)
    return out.astype(dtype)


def _timestep_embedding_t(t: float, params_t: dict[str, ad.Tensor], config: ModelConfig) -> ad.Tensor:
    if not 0.0 <= t <= 1.0:
        raise InputError(f"timestep must be in [0, 1], got {t}")
    dtype = params_t["time_mlp.w1"].data.dtype
    feats = ad.Tensor(_time_features(t, config.time_freq_dim, dtype))
    h = ad.add(ad.matmul(feats, params_t["time_mlp.w1"]), params_t["time_mlp.b1"])
    h = ad.gelu(h)
    return ad.add(ad.matmul(h, params_t["time_mlp.w2"]), params_t["time_mlp.b2"])


def timestep_embedding(t: float, params: ModelParams) -> np.ndarray:
    """Modulation vector for timestep t (sinusoidal features through a 2-layer MLP)."""
    return _timestep_embedding_t(t, params_to_tensors(params), params.config).data[0]


# ------------------------------- DiT block -------------------------------------


def _modulate(h: ad.Tensor, shift: ad.Tensor, scale_: ad.Tensor) -> ad.Tensor:
    return ad.add(ad.mul(h, ad.add_scalar(scale_, 1.0)), shift)


def _dropout_mask(shape: tuple[int, ...], rate: float, stream: RngStream, dtype) -> np.ndarray:
    keep = (stream.uniforms(int(np.prod(shape))) >= rate).reshape(shape)
    return (keep / (1.0 - rate)).astype(dtype)


def _dit_block_t(
    x: ad.Tensor,
    mod: ad.Tensor,
    mask: np.ndarray,
    params_t: dict[str, ad.Tensor],
    layer: int,
    config: ModelConfig,
    drop_stream: RngStream | None = None,
) -> ad.Tensor:
    p = f"layer{layer}"
    h = config.hidden_dim
    dh = h // config.heads
    rate = config.dropout if drop_stream is not None else 0.0

    m6 = ad.add(ad.matmul(ad.gelu(mod), params_t[f"{p}.adaln.w"]), params_t[f"{p}.adaln.b"])
    shift_a, scale_a, gate_a = (ad.slice_cols(m6, k * h, (k + 1) * h) for k in range(3))
    shift_m, scale_m, gate_m = (ad.slice_cols(m6, k * h, (k + 1) * h) for k in range(3, 6))

    # attention branch
    xn = _modulate(ad.layer_norm(x), shift_a, scale_a)
    q = ad.add(ad.matmul(xn, params_t[f"{p}.attn.wq"]), params_t[f"{p}.attn.bq"])
    k = ad.add(ad.matmul(xn, params_t[f"{p}.attn.wk"]), params_t[f"{p}.attn.bk"])
    v = ad.add(ad.matmul(xn, params_t[f"{p}.attn.wv"]), params_t[f"{p}.attn.bv"])
    heads_out = []
    for hd in range(config.heads):
        lo, hi = hd * dh, (hd + 1) * dh
        scores = ad.scale(ad.matmul(ad.slice_cols(q, lo, hi), ad.transpose(ad.slice_cols(k, lo, hi))), 1.0 / math.sqrt(dh))
        probs = ad.masked_softmax(scores, mask)
        if rate > 0.0:
            probs = ad.mul(probs, ad.Tensor(_dropout_mask(probs.shape, rate, drop_stream, probs.data.dtype)))
        heads_out.append(ad.matmul(probs, ad.slice_cols(v, lo, hi)))
    attn = ad.add(ad.matmul(ad.concat_cols(heads_out), params_t[f"{p}.attn.wo"]), params_t[f"{p}.attn.bo"])
    x = ad.add(x, ad.mul(gate_a, attn))

    # MLP branch
    xn = _modulate(ad.layer_norm(x), shift_m, scale_m)
    hmid = ad.gelu(ad.add(ad.matmul(xn, params_t[f"{p}.mlp.w1"]), params_t[f"{p}.mlp.b1"]))
    if rate > 0.0:
        hmid = ad.mul(hmid, ad.Tensor(_dropout_mask(hmid.shape, rate, drop_stream, hmid.data.dtype)))
    mlp = ad.add(ad.matmul(hmid, params_t[f"{p}.mlp.w2"]), params_t[f"{p}.mlp.b2"])
    return ad.add(x, ad.mul(gate_m, mlp))


def dit_block_forward(
    x: np.ndarray, mod: np.ndarray, mask: np.ndarray, params: ModelParams, layer: int
) -> np.ndarray:
    """One adaLN-zero transformer block on plain arrays (inference path)."""
    if x.ndim != 2 or x.shape[1] != params.config.hidden_dim:
        raise ConfigurationError(f"x must be frames x hidden_dim, got {x.shape}")
    if mask.shape != (x.shape[0], x.shape[0]):
        raise ConfigurationError(f"mask shape {mask.shape} does not match {x.shape[0]} frames")
    mod_t = ad.Tensor(np.asarray(mod, dtype=x.dtype).reshape(1, -1))
    return _dit_block_t(ad.Tensor(x), mod_t, mask, params_to_tensors(params), layer, params.config).data


# ------------------------------ vector field -----------------------------------


def _vector_field_t(
    x_t: ad.Tensor,
    t: float,
    cond: ConditionBundle,
    params_t: dict[str, ad.Tensor],
    config: ModelConfig,
    frame_offset: int = 0,
    drop_stream: RngStream | None = None,
) -> ad.Tensor:
    frames = x_t.shape[0]
    if cond.frames != frames:
        raise InputError(f"condition has {cond.frames} frames, features have {frames}")
    if x_t.shape[1] != config.feature_dim:
        raise InputError(f"features must have {config.feature_dim} channels, got {x_t.shape[1]}")

    cond_t = _condition_tensor(cond, params_t, config)
    h = ad.add(ad.matmul(ad.concat_cols([x_t, cond_t]), params_t["in_proj.w"]), params_t["in_proj.b"])
    if config.positional:
        h = ad.add(h, ad.Tensor(positional_encoding(frame_offset, frames, config.hidden_dim, h.data.dtype)))
    mod = _timestep_embedding_t(t, params_t, config)

    b = config.schedule.block_size_frames
    for layer, kind in enumerate(config.schedule.layer_masks):
        mask = build_mask(kind, frames, b)
        h = _dit_block_t(h, mod, mask, params_t, layer, config, drop_stream)
        if np.isnan(h.data).any():
            raise NumericalError(f"NaN in hidden state after layer {layer} (t={t})")
    out = ad.add(ad.matmul(h, params_t["out_proj.w"]), params_t["out_proj.b"])
    if np.isnan(out.data).any():
        raise NumericalError(f"NaN in output projection (t={t})")
    return out


def vector_field(
    x_t: np.ndarray,
    t: float,
    cond: ConditionBundle,
    params: ModelParams,
    *,
    frame_offset: int = 0,
) -> np.ndarray:
    """Velocity prediction for x_t at time t under the given condition."""
    x = np.asarray(x_t, dtype=DTYPE)
    return _vector_field_t(ad.Tensor(x), t, cond, params_to_tensors(params), params.config, frame_offset).data


# ------------------------------ checkpoints ------------------------------------


def config_to_dict(config: ModelConfig) -> dict:
    d = {
        "hidden_dim": config.hidden_dim,
        "heads": config.heads,
        "feature_dim": config.feature_dim,
        "token_vocab": config.token_vocab,
        "token_embed_dim": config.token_embed_dim,
        "speaker_dim": config.speaker_dim,
        "upsample_factor": config.upsample_factor,
        "dropout": config.dropout,
        "positional": config.positional,
        "mlp_ratio": config.mlp_ratio,
        "time_freq_dim": config.time_freq_dim,
        "schedule": {
            "layer_masks": [k.value for k in config.schedule.layer_masks],
            "block_size_frames": config.schedule.block_size_frames,
        },
    }
    return d


def config_from_dict(d: dict) -> ModelConfig:
    from .masks import MaskKind

    try:
        sched = MaskSchedule(
            tuple(MaskKind(s) for s in d["schedule"]["layer_masks"]),
            int(d["schedule"]["block_size_frames"]),
        )
        return ModelConfig(
            hidden_dim=int(d["hidden_dim"]),
            heads=int(d["heads"]),
            feature_dim=int(d["feature_dim"]),
            token_vocab=int(d["token_vocab"]),
            token_embed_dim=int(d["token_embed_dim"]),
            speaker_dim=int(d["speaker_dim"]),
            upsample_factor=int(d["upsample_factor"]),
            dropout=float(d["dropout"]),
            schedule=sched,
            positional=bool(d.get("positional", True)),
            mlp_ratio=int(d.get("mlp_ratio", 4)),
            time_freq_dim=int(d.get("time_freq_dim", 64)),
        )
    except (KeyError, ValueError, TypeError) as e:
        raise FormatError(f"bad model config: {e}") from e


def save_checkpoint(path: str | Path, params: ModelParams) -> None:
    """Manifest JSON + one .sftn tensor file per named parameter."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "model_config": config_to_dict(params.config),
        "tensors": {name: f"{name}.sftn" for name in params.names()},
    }
    for name, fname in manifest["tensors"].items():
        tensorio.write_tensor(path / fname, params.tensors[name])
    (path / "checkpoint.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_checkpoint(path: str | Path) -> ModelParams:
    path = Path(path)
    manifest_path = path / "checkpoint.json"
    if not manifest_path.exists():
        raise FormatError(f"{manifest_path}: checkpoint manifest missing")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{manifest_path}: not valid JSON ({e})") from e
    config = config_from_dict(manifest.get("model_config", {}))
    tensors = {}
    for name, fname in manifest.get("tensors", {}).items():
        tensors[name] = tensorio.read_tensor(path / fname)
    params = ModelParams(config, tensors)
    expected = {name for name, _, _ in _param_specs(config)}
    if set(tensors) != expected:
        missing = sorted(expected - set(tensors))[:3]
        extra = sorted(set(tensors) - expected)[:3]
        raise FormatError(f"{path}: tensor set mismatch (missing {missing}, extra {extra})")
    return params


def perturb_params(params: ModelParams, scale_: float, seed: int) -> ModelParams:
    """Copy of params with N(0, scale^2) noise added to every tensor (test/probe aid)."""
    out = params.copy()
    for stream, name in enumerate(out.names()):
        t = out.tensors[name]
        noise = seeded_gaussian(SeededRng(seed, stream), t.size).reshape(t.shape)
        out.tensors[name] = t + noise * np.float32(scale_)
    return out
