"""Synthetic paired (token sequence, feature sequence) corpus.

Desk-scale stand-in for real paired speech data. Each vocabulary entry owns a
fixed random prototype feature vector; an utterance's feature frame for token
k is prototype[k] + a smooth sinusoidal trend + a per-utterance speaker
offset (rank one: one projected vector added to every frame) + Gaussian
noise. Class prototypes are well separated relative to the noise, so
"did generation land near the right prototype" works as the conditional
correctness metric where audio metrics are out of scope.

Everything is a pure function of CorpusConfig (and the utterance index).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensorio
from .errors import ConfigurationError, FormatError
from .numerics import DTYPE, RngStream, SeededRng, seeded_gaussian

_S_PROTO, _S_PHASE, _S_SPK_PROJ = 1, 2, 3
_S_UTT_BASE = 100  # streams 100+3i, 101+3i, 102+3i belong to utterance i


@dataclass(frozen=True)
class CorpusConfig:
    num_utterances: int = 64
    tokens_min: int = 8
    tokens_max: int = 16
    token_vocab: int = 32
    feature_dim: int = 8
    speaker_dim: int = 8
    upsample_factor: int = 4
    noise_std: float = 0.1
    trend_amplitude: float = 0.1
    trend_period_frames: int = 32
    speaker_scale: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.noise_std < 0:
            raise ConfigurationError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.token_vocab < 2:
            raise ConfigurationError(f"token_vocab must be >= 2, got {self.token_vocab}")
        if not 1 <= self.tokens_min <= self.tokens_max:
            raise ConfigurationError("need 1 <= tokens_min <= tokens_max")


@dataclass(frozen=True)
class Utterance:
    tokens: list[int]
    speaker: np.ndarray  # (speaker_dim,), float32
    features: np.ndarray  # (len(tokens) * upsample_factor, feature_dim), float32


def class_prototypes(config: CorpusConfig) -> np.ndarray:
    """(vocab, feature_dim) fixed random prototype vectors."""
    draws = seeded_gaussian(SeededRng(config.seed, _S_PROTO), config.token_vocab * config.feature_dim)
    return draws.reshape(config.token_vocab, config.feature_dim)


def channel_phases(config: CorpusConfig) -> np.ndarray:
    u = RngStream(SeededRng(config.seed, _S_PHASE)).uniforms(config.feature_dim)
    return (2.0 * math.pi * u).astype(np.float64)


def speaker_projection(config: CorpusConfig) -> np.ndarray:
    """(speaker_dim, feature_dim) projection mapping a speaker vector to a feature offset."""
    draws = seeded_gaussian(SeededRng(config.seed, _S_SPK_PROJ), config.speaker_dim * config.feature_dim)
    return draws.reshape(config.speaker_dim, config.feature_dim) / np.float32(math.sqrt(config.speaker_dim))


def trend(config: CorpusConfig, frames: int) -> np.ndarray:
    """(frames, feature_dim) smooth per-frame sinusoidal drift."""
    j = np.arange(frames, dtype=np.float64)[:, None]
    phases = channel_phases(config)[None, :]
    return (config.trend_amplitude * np.sin(2.0 * math.pi * j / config.trend_period_frames + phases)).astype(DTYPE)


def expected_frame_mean(config: CorpusConfig, token: int, frames: int, speaker: np.ndarray) -> np.ndarray:
    """Analytic mean feature frame for a constant-token utterance (noise-free)."""
    proto = class_prototypes(config)[token]
    tr = trend(config, frames).mean(axis=0)
    offset = speaker.astype(DTYPE) @ speaker_projection(config)
    return proto + tr + offset


def min_prototype_gap(config: CorpusConfig) -> float:
    """Smallest pairwise distance between class prototypes."""
    p = class_prototypes(config)
    d = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)
    d[np.diag_indices_from(d)] = np.inf
    return float(d.min())


def check_separability(config: CorpusConfig) -> float:
    """Assert classes are distinguishable: mean prototype gap > 5x noise_std."""
    p = class_prototypes(config)
    d = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)
    mean_gap = float(d[~np.eye(config.token_vocab, dtype=bool)].mean())
    if mean_gap <= 5.0 * config.noise_std:
        raise ConfigurationError(
            f"classes not separable: mean prototype gap {mean_gap:.3f} <= 5 * noise_std {config.noise_std}"
        )
    return mean_gap


def synth_utterance(config: CorpusConfig, index: int) -> Utterance:
    """Deterministically generate utterance `index` of the corpus."""
    if not 0 <= index < config.num_utterances:
        raise ConfigurationError(f"index {index} outside [0, {config.num_utterances})")
    tok_stream = RngStream(SeededRng(config.seed, _S_UTT_BASE + 3 * index))
    spk_stream = RngStream(SeededRng(config.seed, _S_UTT_BASE + 3 * index + 1))
    noise_stream = RngStream(SeededRng(config.seed, _S_UTT_BASE + 3 * index + 2))

    span = config.tokens_max - config.tokens_min + 1
    n_tokens = config.tokens_min + int(tok_stream.integers(1, span)[0])
    tokens = tok_stream.integers(n_tokens, config.token_vocab).tolist()
    speaker = spk_stream.gaussians(config.speaker_dim) * np.float32(config.speaker_scale)

    frames = n_tokens * config.upsample_factor
    proto = class_prototypes(config)[np.repeat(tokens, config.upsample_factor)]
    offset = (speaker @ speaker_projection(config))[None, :]
    noise = noise_stream.gaussians(frames * config.feature_dim).reshape(frames, config.feature_dim)
    features = proto + trend(config, frames) + offset + noise * np.float32(config.noise_std)
    return Utterance(tokens=[int(t) for t in tokens], speaker=speaker, features=features.astype(DTYPE))


def synth_corpus(config: CorpusConfig) -> list[Utterance]:
    check_separability(config)
    return [synth_utterance(config, i) for i in range(config.num_utterances)]


# --------------------------------- file I/O -------------------------------------


def write_corpus(path: str | Path, config: CorpusConfig) -> list[Utterance]:
    """Generate the corpus and write manifest + per-utterance tensor/token files."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    utterances = synth_corpus(config)
    entries = []
    for i, utt in enumerate(utterances):
        tok_name, feat_name, spk_name = f"utt{i}.tokens.json", f"utt{i}.features.sftn", f"utt{i}.speaker.sftn"
        (path / tok_name).write_text(json.dumps(utt.tokens) + "\n")
        tensorio.write_tensor(path / feat_name, utt.features)
        tensorio.write_tensor(path / spk_name, utt.speaker)
        entries.append({"tokens": tok_name, "features": feat_name, "speaker": spk_name})
    manifest = {"config": asdict(config), "entries": entries}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return utterances


def read_corpus(path: str | Path) -> tuple[CorpusConfig, list[Utterance]]:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"{manifest_path}: corpus manifest missing")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{manifest_path}: not valid JSON ({e})") from e
    for key in ("config", "entries"):
        if key not in manifest:
            raise FormatError(f"{manifest_path}: missing field {key!r}")
    try:
        config = CorpusConfig(**manifest["config"])
    except TypeError as e:
        raise FormatError(f"{manifest_path}: bad config ({e})") from e
    utterances = []
    for entry in manifest["entries"]:
        for key in ("tokens", "features", "speaker"):
            if key not in entry:
                raise FormatError(f"{manifest_path}: entry missing field {key!r}")
        tokens = json.loads((path / entry["tokens"]).read_text())
        features = tensorio.read_tensor(path / entry["features"])
        speaker = tensorio.read_tensor(path / entry["speaker"])
        utterances.append(Utterance(tokens=tokens, speaker=speaker, features=features))
    return config, utterances
