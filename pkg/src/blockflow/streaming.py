"""Sliding-window streaming generation.

The frame axis is partitioned into blocks, blocks are grouped into emit
chunks, and each chunk is generated inside a window that adds enough context
blocks on both sides to cover the model's receptive field (scaled by
`context_multiplier` to account for multi-step ODE integration, whose
information cone is one receptive field per step). Context frames are
re-generated from noise inside every window and discarded; nothing generated
is ever fed back, so chunks are independent given the noise.

Noise is position-keyed: frame f always draws its noise from stream f of the
noise seed, so overlapping window frames see bitwise-identical noise in every
window. Together with exact-zero masked attention and absolute positional
encodings, this makes windowed generation agree with full-sequence
generation on emitted frames whenever the window covers the information
cone, and makes the streaming driver agree with the offline chunk loop
bitwise.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .backbone import ConditionBundle, ModelParams, assemble_condition, upsample_tokens
from .errors import ConfigurationError, InputError
from .flow import SamplerConfig, euler_sample
from .masks import ReceptiveField, num_blocks
from .numerics import DTYPE, SeededRng, seeded_gaussian, warmup_kernels


@dataclass(frozen=True)
class ChunkPlan:
    """One sliding-window step. Frame ranges are half-open; emit is inside window."""

    chunk_index: int
    window_start_frame: int
    window_end_frame: int
    emit_start_frame: int
    emit_end_frame: int
    left_context_blocks: int
    right_context_blocks: int

    @property
    def window_frames(self) -> int:
        return self.window_end_frame - self.window_start_frame

    @property
    def emit_frames(self) -> int:
        return self.emit_end_frame - self.emit_start_frame


@dataclass(frozen=True)
class StreamConfig:
    chunk_blocks: int = 2
    context_multiplier: int = 1
    sampler: SamplerConfig = SamplerConfig()
    noise_seed: int = 0

    def __post_init__(self):
        if self.chunk_blocks < 1:
            raise ConfigurationError(f"chunk_blocks must be >= 1, got {self.chunk_blocks}")
        if self.context_multiplier < 1:
            raise ConfigurationError(f"context_multiplier must be >= 1, got {self.context_multiplier}")


def plan_chunks(
    total_frames: int,
    b: int,
    chunk_blocks: int,
    rf: ReceptiveField,
    context_multiplier: int = 1,
) -> list[ChunkPlan]:
    """Partition [0, total_frames) into emit chunks with receptive-field context.

    Emit ranges tile the sequence exactly; each window extends the emit range
    by context_multiplier * p past and * q future blocks, clipped to the
    sequence. The final partial block is a genuine shorter block.
    """
    if total_frames < 1:
        raise ConfigurationError(f"total_frames must be >= 1, got {total_frames}")
    if chunk_blocks < 1 or context_multiplier < 1:
        raise ConfigurationError("chunk_blocks and context_multiplier must be >= 1")
    if not rf.bounded:
        raise ConfigurationError("streaming needs a bounded receptive field (no full/causal layers)")
    nb = num_blocks(total_frames, b)
    left = context_multiplier * rf.past_blocks
    right = context_multiplier * rf.future_blocks
    plans: list[ChunkPlan] = []
    for k, emit_lo in enumerate(range(0, nb, chunk_blocks)):
        emit_hi = min(emit_lo + chunk_blocks, nb)
        win_lo = max(0, emit_lo - left)
        win_hi = min(nb, emit_hi + right)
        plans.append(
            ChunkPlan(
                chunk_index=k,
                window_start_frame=win_lo * b,
                window_end_frame=min(win_hi * b, total_frames),
                emit_start_frame=emit_lo * b,
                emit_end_frame=min(emit_hi * b, total_frames),
                left_context_blocks=emit_lo - win_lo,
                right_context_blocks=win_hi - emit_hi,
            )
        )
    return plans


def first_packet_frames(chunk_blocks: int, rf: ReceptiveField, context_multiplier: int, b: int) -> int:
    """Condition frames needed before the first chunk can be emitted."""
    if not rf.bounded:
        raise ConfigurationError("unbounded receptive field has no finite first-packet requirement")
    return (chunk_blocks + context_multiplier * rf.future_blocks) * b


def position_noise(start_frame: int, end_frame: int, feature_dim: int, noise_seed: int) -> np.ndarray:
    """Noise rows for frames [start, end); row f is stream f of the noise seed."""
    out = np.empty((end_frame - start_frame, feature_dim), dtype=DTYPE)
    for r, f in enumerate(range(start_frame, end_frame)):
        out[r] = seeded_gaussian(SeededRng(noise_seed, f), feature_dim)
    return out


def window_noise(plan: ChunkPlan, feature_dim: int, noise_seed: int) -> np.ndarray:
    """Noise for a plan's window; overlapping frames repeat bitwise across plans."""
    return position_noise(plan.window_start_frame, plan.window_end_frame, feature_dim, noise_seed)


def generate_chunk(
    plan: ChunkPlan, cond: ConditionBundle, params: ModelParams, config: StreamConfig
) -> np.ndarray:
    """Sample one window from position-keyed noise and slice out the emit range."""
    if cond.frames != plan.window_frames:
        raise InputError(
            f"condition covers {cond.frames} frames, window needs {plan.window_frames}"
        )
    x0 = window_noise(plan, params.config.feature_dim, config.noise_seed)
    y = euler_sample(x0, cond, config.sampler, params, frame_offset=plan.window_start_frame)
    lo = plan.emit_start_frame - plan.window_start_frame
    return y[lo : lo + plan.emit_frames]


def full_generate(cond: ConditionBundle, params: ModelParams, config: StreamConfig) -> np.ndarray:
    """Non-streaming reference: one full-sequence sample from position-keyed noise."""
    x0 = position_noise(0, cond.frames, params.config.feature_dim, config.noise_seed)
    return euler_sample(x0, cond, config.sampler, params)


def generate_chunked(
    cond: ConditionBundle, params: ModelParams, config: StreamConfig
) -> tuple[np.ndarray, list[ChunkPlan]]:
    """Offline chunk loop: plan everything, generate every chunk, concatenate."""
    from .masks import receptive_field

    rf = receptive_field(params.config.schedule)
    plans = plan_chunks(
        cond.frames,
        params.config.schedule.block_size_frames,
        config.chunk_blocks,
        rf,
        config.context_multiplier,
    )
    pieces = [
        generate_chunk(p, cond.slice(p.window_start_frame, p.window_end_frame), params, config)
        for p in plans
    ]
    return np.concatenate(pieces, axis=0), plans


# ------------------------------ stream driver ----------------------------------


@dataclass(frozen=True)
class StreamEmission:
    plan: ChunkPlan
    features: np.ndarray
    elapsed_ms: float


def stream_generate(
    token_blocks: Iterable[list[int]],
    speaker: np.ndarray,
    params: ModelParams,
    config: StreamConfig,
) -> Iterator[StreamEmission]:
    """Drive chunk generation from an incremental token-block source.

    `token_blocks` yields the token ids of one frame block at a time (the
    last block may be short); end of iteration is end of stream. A chunk is
    generated as soon as its window's future-context blocks have arrived, so
    the first emission happens after exactly
    (chunk_blocks + context_multiplier * q) blocks. Emissions concatenate to
    the offline generate_chunked output bitwise. Exceptions raised by the
    source (e.g. a stall timeout) propagate to the caller.
    """
    from .masks import receptive_field

    mc = params.config
    b = mc.schedule.block_size_frames
    if b % mc.upsample_factor != 0:
        raise ConfigurationError(
            f"streaming needs block size ({b}) divisible by upsample factor ({mc.upsample_factor})"
        )
    rf = receptive_field(mc.schedule)
    if not rf.bounded:
        raise ConfigurationError("streaming needs a bounded receptive field")
    tokens_per_block = b // mc.upsample_factor
    right = config.context_multiplier * rf.future_blocks
    left = config.context_multiplier * rf.past_blocks

    tokens: list[int] = []
    blocks_seen = 0
    next_chunk = 0
    source = iter(token_blocks)
    ended = False
    saw_short = False

    def emit_ready(total_blocks_known: int | None) -> Iterator[StreamEmission]:
        nonlocal next_chunk
        while True:
            emit_lo = next_chunk * config.chunk_blocks
            if total_blocks_known is not None:
                if emit_lo >= total_blocks_known:
                    return
                nb = total_blocks_known
            else:
                # Mid-stream: only generate when the full future context exists.
                need = emit_lo + config.chunk_blocks + right
                if blocks_seen < need:
                    return
                nb = blocks_seen
            emit_hi = min(emit_lo + config.chunk_blocks, nb)
            win_lo = max(0, emit_lo - left)
            win_hi = min(nb, emit_hi + right)
            total_frames = len(tokens) * mc.upsample_factor
            plan = ChunkPlan(
                chunk_index=next_chunk,
                window_start_frame=win_lo * b,
                window_end_frame=min(win_hi * b, total_frames),
                emit_start_frame=emit_lo * b,
                emit_end_frame=min(emit_hi * b, total_frames),
                left_context_blocks=emit_lo - win_lo,
                right_context_blocks=win_hi - emit_hi,
            )
            window_tokens = tokens[plan.window_start_frame // mc.upsample_factor : plan.window_end_frame // mc.upsample_factor]
            frame_ids = upsample_tokens(window_tokens, mc.upsample_factor)
            cond = assemble_condition(frame_ids, speaker, params)
            t0 = time.perf_counter()
            feats = generate_chunk(plan, cond, params, config)
            elapsed = (time.perf_counter() - t0) * 1000.0
            next_chunk += 1
            yield StreamEmission(plan=plan, features=feats, elapsed_ms=elapsed)

    while not ended:
        try:
            block = next(source)
        except StopIteration:
            ended = True
        else:
            if len(block) < 1 or len(block) > tokens_per_block:
                raise InputError(
                    f"token block must have 1..{tokens_per_block} ids, got {len(block)}"
                )
            if saw_short:
                raise InputError("only the final token block may be shorter than a full block")
            saw_short = len(block) < tokens_per_block
            tokens.extend(int(t) for t in block)
            blocks_seen += 1
            yield from emit_ready(None)
    if tokens:
        yield from emit_ready(num_blocks(len(tokens) * mc.upsample_factor, b))


# ----------------------------- latency measurement ------------------------------


@dataclass(frozen=True)
class LatencyRow:
    chunk_index: int
    frames: int
    millis: float


def measure_chunk_latency(
    params: ModelParams,
    config: StreamConfig,
    total_chunks: int,
    mode: str,
) -> list[LatencyRow]:
    """Per-chunk sampler wall time over a long synthetic sequence.

    sliding_window: constant-size windows from plan_chunks. causal_cumulative:
    each chunk's window is all accumulated history (emulates history-only
    block-causal streaming), so cost grows with the chunk index. The clock
    wraps only the ODE sampling; noise and condition preparation are outside.
    """
    from .masks import receptive_field

    if total_chunks < 1:
        raise ConfigurationError(f"total_chunks must be >= 1, got {total_chunks}")
    if mode not in ("sliding_window", "causal_cumulative"):
        raise ConfigurationError(f"mode must be sliding_window|causal_cumulative, got {mode!r}")
    mc = params.config
    b = mc.schedule.block_size_frames
    total_frames = total_chunks * config.chunk_blocks * b
    n_tokens = -(-total_frames // mc.upsample_factor)
    ids = (np.arange(n_tokens) % mc.token_vocab).tolist()
    speaker = seeded_gaussian(SeededRng(config.noise_seed, 0), mc.speaker_dim)
    cond_full = assemble_condition(upsample_tokens(ids, mc.upsample_factor), speaker, params)

    if mode == "sliding_window":
        rf = receptive_field(mc.schedule)
        plans = plan_chunks(total_frames, b, config.chunk_blocks, rf, config.context_multiplier)
    else:
        plans = []
        for k in range(total_chunks):
            emit_lo, emit_hi = k * config.chunk_blocks * b, (k + 1) * config.chunk_blocks * b
            plans.append(
                ChunkPlan(
                    chunk_index=k,
                    window_start_frame=0,
                    window_end_frame=min(emit_hi, total_frames),
                    emit_start_frame=emit_lo,
                    emit_end_frame=min(emit_hi, total_frames),
                    left_context_blocks=emit_lo // b,
                    right_context_blocks=0,
                )
            )
    plans = plans[:total_chunks]

    warmup_kernels()
    warm = plans[0]
    _timed_chunk(warm, cond_full, params, config)  # untimed warmup (JIT, caches)

    rows: list[LatencyRow] = []
    for plan in plans:
        _, ms = _timed_chunk(plan, cond_full, params, config)
        rows.append(LatencyRow(chunk_index=plan.chunk_index, frames=plan.window_frames, millis=ms))
    return rows


def _timed_chunk(
    plan: ChunkPlan, cond_full: ConditionBundle, params: ModelParams, config: StreamConfig
) -> tuple[np.ndarray, float]:
    cond = cond_full.slice(plan.window_start_frame, plan.window_end_frame)
    x0 = window_noise(plan, params.config.feature_dim, config.noise_seed)
    t0 = time.perf_counter()
    y = euler_sample(x0, cond, config.sampler, params, frame_offset=plan.window_start_frame)
    ms = (time.perf_counter() - t0) * 1000.0
    lo = plan.emit_start_frame - plan.window_start_frame
    return y[lo : lo + plan.emit_frames], ms


def latency_trend_stats(rows: list[LatencyRow]) -> dict:
    """Median, linear slope (ms/chunk and fraction of median), Spearman trend."""
    from scipy import stats

    ms = np.array([r.millis for r in rows], dtype=np.float64)
    idx = np.array([r.chunk_index for r in rows], dtype=np.float64)
    median = float(np.median(ms))
    if len(rows) >= 3:
        slope = float(np.polyfit(idx, ms, 1)[0])
        rho = float(stats.spearmanr(idx, ms).statistic)
    else:
        slope = 0.0
        rho = 0.0
    return {
        "chunks": len(rows),
        "median_ms": median,
        "slope_ms_per_chunk": slope,
        "slope_over_median": slope / median if median else 0.0,
        "spearman_rho": rho,
    }
