"""Block-wise attention masks, per-layer schedules, receptive-field algebra.

Frames are grouped into blocks of `b` consecutive frames (the final block may
be shorter). Three fundamental mask kinds control cross-block information
flow per layer:

* BLOCK     - attend only within the own block
* BACKWARD  - own block plus the previous block (extends the field one block
              into the past per application)
* FORWARD   - own block plus the next block (one block into the future)

Stacking layers composes the fields: p backward layers and q forward layers
(in any order) yield a receptive field of p past + q future + the current
block, i.e. (p+q+1)*b frames.

Two extra kinds exist only to express the comparison presets: FULL (no
masking, whole-sequence field) and CAUSAL (own block plus all previous
blocks). They are not part of the fundamental algebra and make the receptive
field unbounded on one or both sides, reported as None.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import BoundaryProbeError, ConfigurationError, FormatError, InvariantViolation


class MaskKind(Enum):
    BLOCK = "block"
    BACKWARD = "backward"
    FORWARD = "forward"
    FULL = "full"
    CAUSAL = "causal"


FUNDAMENTAL_KINDS = (MaskKind.BLOCK, MaskKind.BACKWARD, MaskKind.FORWARD)


def block_index(i: int, b: int) -> int:
    """Block containing frame i: floor(i / b)."""
    if i < 0:
        raise ConfigurationError(f"frame index must be >= 0, got {i}")
    if b < 1:
        raise ConfigurationError(f"block size must be >= 1, got {b}")
    return i // b


def num_blocks(n: int, b: int) -> int:
    """Blocks covering n frames; the last may be partial."""
    return -(-n // b)


def build_mask(kind: MaskKind, n: int, b: int) -> np.ndarray:
    """n x n boolean mask; entry (i, j) True means frame i may attend frame j."""
    if n < 1:
        raise ConfigurationError(f"sequence length must be >= 1, got {n}")
    if b < 1:
        raise ConfigurationError(f"block size must be >= 1, got {b}")
    blocks = np.arange(n) // b
    d = blocks[None, :] - blocks[:, None]  # block(j) - block(i)
    if kind is MaskKind.BLOCK:
        return d == 0
    if kind is MaskKind.BACKWARD:
        return (d == 0) | (d == -1)
    if kind is MaskKind.FORWARD:
        return (d == 0) | (d == 1)
    if kind is MaskKind.FULL:
        return np.ones((n, n), dtype=bool)
    if kind is MaskKind.CAUSAL:
        return d <= 0
    raise ConfigurationError(f"unknown mask kind {kind!r}")


@dataclass(frozen=True)
class MaskSchedule:
    """Per-layer mask assignment plus the block size it operates on."""

    layer_masks: tuple[MaskKind, ...]
    block_size_frames: int

    def __post_init__(self):
        if len(self.layer_masks) < 1:
            raise ConfigurationError("schedule needs at least one layer")
        if self.block_size_frames < 1:
            raise ConfigurationError(f"block size must be >= 1, got {self.block_size_frames}")

    @property
    def layers(self) -> int:
        return len(self.layer_masks)


@dataclass(frozen=True)
class ReceptiveField:
    """Blocks visible to one network application; None marks an unbounded side."""

    past_blocks: int | None
    future_blocks: int | None

    @property
    def bounded(self) -> bool:
        return self.past_blocks is not None and self.future_blocks is not None

    def span_frames(self, b: int) -> int | None:
        if not self.bounded:
            return None
        return (self.past_blocks + self.future_blocks + 1) * b


def receptive_field(schedule: MaskSchedule) -> ReceptiveField:
    """Analytic field of a schedule: p = #BACKWARD layers, q = #FORWARD layers."""
    kinds = schedule.layer_masks
    p: int | None = sum(k is MaskKind.BACKWARD for k in kinds)
    q: int | None = sum(k is MaskKind.FORWARD for k in kinds)
    if any(k is MaskKind.FULL for k in kinds):
        return ReceptiveField(None, None)
    if any(k is MaskKind.CAUSAL for k in kinds):
        p = None
    return ReceptiveField(p, q)


def empirical_receptive_field(params, n: int, probe_block: int, *, seed: int = 0) -> ReceptiveField:
    """Measure the field by perturbation: bump one input block, diff the output.

    Adds +1.0 to every channel of the probe block's frames, runs one
    vector-field evaluation on random inputs, and reports the min/max block
    offsets whose outputs changed bitwise. Exact-zero masked attention makes
    the support exact, so for an interior probe this equals the analytic
    field -- provided params actually propagate (use random_params; a freshly
    initialized adaLN-zero model has constant output and measures nothing).
    """
    from . import backbone  # local import; backbone depends on this module
    from .numerics import SeededRng, seeded_gaussian

    config = params.config
    schedule = config.schedule
    b = schedule.block_size_frames
    nb = num_blocks(n, b)
    if not 0 <= probe_block < nb:
        raise ConfigurationError(f"probe block {probe_block} outside [0, {nb})")
    rf = receptive_field(schedule)
    if rf.bounded:
        if probe_block - rf.future_blocks < 0 or probe_block + rf.past_blocks > nb - 1:
            raise BoundaryProbeError(
                f"probe block {probe_block} too close to a boundary for field "
                f"(p={rf.past_blocks}, q={rf.future_blocks}) over {nb} blocks"
            )
    if n % config.upsample_factor != 0:
        raise ConfigurationError(
            f"probe length {n} must be a multiple of upsample factor {config.upsample_factor}"
        )

    ids = np.arange(n // config.upsample_factor) % config.token_vocab
    speaker = seeded_gaussian(SeededRng(seed, 1), config.speaker_dim)
    cond = backbone.assemble_condition(
        backbone.upsample_tokens(ids.tolist(), config.upsample_factor), speaker, params
    )
    x = seeded_gaussian(SeededRng(seed, 2), n * config.feature_dim).reshape(n, config.feature_dim)
    x_pert = x.copy()
    lo, hi = probe_block * b, min((probe_block + 1) * b, n)
    x_pert[lo:hi] += np.float32(1.0)

    t = 0.5
    v0 = backbone.vector_field(x, t, cond, params)
    v1 = backbone.vector_field(x_pert, t, cond, params)
    changed_rows = np.flatnonzero(np.any(v0 != v1, axis=1))
    if changed_rows.size == 0:
        raise InvariantViolation(
            "perturbation produced no output change; params look degenerate "
            "(freshly initialized adaLN-zero model?)"
        )
    changed_blocks = np.unique(changed_rows // b)
    if probe_block not in changed_blocks:
        raise InvariantViolation("probe block's own output did not change")
    return ReceptiveField(
        past_blocks=int(changed_blocks.max()) - probe_block,
        future_blocks=probe_block - int(changed_blocks.min()),
    )


# ------------------------------ serialization ---------------------------------


def save_schedule(path: str | Path, schedule: MaskSchedule) -> None:
    payload = {
        "layer_masks": [k.value for k in schedule.layer_masks],
        "block_size_frames": schedule.block_size_frames,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_schedule(path: str | Path) -> MaskSchedule:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(payload, dict) or "layer_masks" not in payload:
        raise FormatError(f"{path}: missing 'layer_masks'")
    if "block_size_frames" not in payload:
        raise FormatError(f"{path}: missing 'block_size_frames'")
    try:
        kinds = tuple(MaskKind(s) for s in payload["layer_masks"])
    except ValueError as e:
        raise FormatError(f"{path}: bad mask kind ({e})") from e
    b = payload["block_size_frames"]
    if not isinstance(b, int):
        raise FormatError(f"{path}: block_size_frames must be an integer")
    return MaskSchedule(layer_masks=kinds, block_size_frames=b)


# --------------------------------- presets -------------------------------------


def _schedule_from_one_based(layers: int, b: int, backward_at=(), forward_at=()) -> MaskSchedule:
    # Preset layer indices are 1-based (matching how layer placements are
    # usually written out); stored 0-based.
    kinds = [MaskKind.BLOCK] * layers
    for i in backward_at:
        kinds[i - 1] = MaskKind.BACKWARD
    for i in forward_at:
        kinds[i - 1] = MaskKind.FORWARD
    return MaskSchedule(tuple(kinds), b)


def schedule_preset(name: str) -> MaskSchedule:
    """Named schedules.

    sr:     22 layers, b=24 -- backward at layers 7 and 14, forward at layer 1
            (2 past / 1 future blocks).
    lr:     sr plus forward at layer 22 (2 past / 2 future).
    full:   22 unmasked layers (non-streaming full-attention baseline).
    causal: 22 block-causal layers (history-only streaming baseline).
    tiny:   4 layers, b=8 -- forward at 1, backward at 2 and 3; the desk-scale
            default with the same (p=2, q=1) shape as sr.
    """
    if name == "sr":
        return _schedule_from_one_based(22, 24, backward_at=(7, 14), forward_at=(1,))
    if name == "lr":
        return _schedule_from_one_based(22, 24, backward_at=(7, 14), forward_at=(1, 22))
    if name == "full":
        return MaskSchedule((MaskKind.FULL,) * 22, 24)
    if name == "causal":
        return MaskSchedule((MaskKind.CAUSAL,) * 22, 24)
    if name == "tiny":
        return _schedule_from_one_based(4, 8, backward_at=(2, 3), forward_at=(1,))
    raise ConfigurationError(f"unknown schedule preset {name!r} (want sr|lr|full|causal|tiny)")
