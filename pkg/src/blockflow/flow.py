"""Flow-matching training and sampling.

Training regresses the network onto the straight-line transport target: a
data point x1 is paired with noise x0, the point on the path at time t is
(1-t)*x0 + t*x1, and the regression target is x1 - x0. Conditions are dropped
at a configurable rate during training (the whole bundle, tokens and speaker)
so inference can extrapolate between the conditional and unconditional
fields: (1+a)*v_cond - a*v_uncond.

Gradients are computed by the package's own reverse-mode tape; the optimizer
is Adam. Sampling integrates the guided field with a left-endpoint Euler
scheme on a uniform grid over [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from . import autodiff as ad
from .backbone import (
    ConditionBundle,
    ModelConfig,
    ModelParams,
    _vector_field_t,
    assemble_condition,
    init_params,
    upsample_tokens,
    vector_field,
    zero_condition,
)
from .errors import ConfigurationError, InputError, NumericalError, TrainingDivergedError
from .numerics import DTYPE, RngStream, SeededRng


@dataclass(frozen=True)
class FlowSample:
    """One training example: noise, data, time, condition, drop flag."""

    x0: np.ndarray
    x1: np.ndarray
    t: float
    cond: ConditionBundle
    cond_dropped: bool = False


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 10
    cfg_alpha: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigurationError(f"sampler steps must be >= 1, got {self.steps}")
        if self.cfg_alpha < 0:
            raise ConfigurationError(f"cfg_alpha must be >= 0, got {self.cfg_alpha}")


@dataclass(frozen=True)
class TrainConfig:
    cond_drop_rate: float = 0.3
    t_sampler: str = "logit_normal"  # or "uniform"
    t_mu: float = 0.0
    t_sigma: float = 1.0
    learning_rate: float = 1e-3
    steps: int = 2000
    batch_frames: int = 256
    log_every: int = 50
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.cond_drop_rate <= 1.0:
            raise ConfigurationError(f"cond_drop_rate must be in [0, 1], got {self.cond_drop_rate}")
        if self.t_sampler not in ("logit_normal", "uniform"):
            raise ConfigurationError(f"t_sampler must be logit_normal|uniform, got {self.t_sampler!r}")


# ------------------------------ path geometry ----------------------------------


def ot_flow_point(x0: np.ndarray, x1: np.ndarray, t: float) -> np.ndarray:
    """Point on the straight-line path: (1-t)*x0 + t*x1."""
    if x0.shape != x1.shape:
        raise InputError(f"x0 {x0.shape} and x1 {x1.shape} shapes differ")
    if not 0.0 <= t <= 1.0:
        raise InputError(f"t must be in [0, 1], got {t}")
    dt = x0.dtype.type
    return dt(1.0 - t) * x0 + dt(t) * x1


def ot_target(x0: np.ndarray, x1: np.ndarray) -> np.ndarray:
    """Regression target along the straight-line path: x1 - x0."""
    if x0.shape != x1.shape:
        raise InputError(f"x0 {x0.shape} and x1 {x1.shape} shapes differ")
    return x1 - x0


def sample_t(config: TrainConfig, stream: RngStream) -> float:
    """Draw a training timestep: sigmoid of a normal, or uniform."""
    u = float(stream.uniforms(1)[0])
    if config.t_sampler == "uniform":
        return u
    z = config.t_mu + config.t_sigma * float(ndtri(u))
    return 1.0 / (1.0 + math.exp(-z))


# --------------------------------- loss ----------------------------------------


def cfm_loss(
    batch: list[FlowSample],
    params: ModelParams,
    config: TrainConfig | None = None,
    *,
    drop_stream: RngStream | None = None,
    dtype=DTYPE,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared gap between the predicted field at the path point and x1-x0.

    Returns (loss, grads) with one gradient array per named parameter. The
    mean is flat over every (batch, frame, channel) element, accumulated in
    batch order. Dropped samples run with the all-zeros condition bundle.
    `drop_stream` enables training dropout inside the network; `dtype` lets
    the gradient checker run the identical graph in float64.
    """
    if not batch:
        raise InputError("cfm_loss needs a nonempty batch")
    params_t = {k: ad.Tensor(v.astype(dtype, copy=False), requires_grad=True) for k, v in params.tensors.items()}
    mc = params.config

    total: ad.Tensor | None = None
    total_elems = 0
    for sample in batch:
        cond = zero_condition(sample.cond.frames, mc) if sample.cond_dropped else sample.cond
        xt = ot_flow_point(sample.x0, sample.x1, sample.t).astype(dtype, copy=False)
        target = ot_target(sample.x0, sample.x1).astype(dtype, copy=False)
        v = _vector_field_t(ad.Tensor(xt), sample.t, cond, params_t, mc, drop_stream=drop_stream)
        diff = ad.sub(ad.Tensor(target), v)
        sse = ad.sum_all(ad.mul(diff, diff))
        total = sse if total is None else ad.add(total, sse)
        total_elems += target.size

    loss_t = ad.scale(total, 1.0 / total_elems)
    loss = float(loss_t.data)
    if math.isnan(loss):
        raise NumericalError("NaN loss")
    loss_t.backward()
    grads = {
        k: (t.grad if t.grad is not None else np.zeros_like(t.data)).astype(dtype, copy=False)
        for k, t in params_t.items()
    }
    return loss, grads


# ------------------------------ guided field -----------------------------------


def cfg_vector_field(
    x: np.ndarray,
    t: float,
    cond: ConditionBundle,
    alpha: float,
    params: ModelParams,
    *,
    frame_offset: int = 0,
) -> np.ndarray:
    """Guidance by linear extrapolation: (1+a)*v(x,t,c) - a*v(x,t,0)."""
    if alpha < 0:
        raise InputError(f"guidance strength must be >= 0, got {alpha}")
    v_c = vector_field(x, t, cond, params, frame_offset=frame_offset)
    if alpha == 0.0:
        return v_c
    v_u = vector_field(x, t, zero_condition(cond.frames, params.config), params, frame_offset=frame_offset)
    return np.float32(1.0 + alpha) * v_c - np.float32(alpha) * v_u


def euler_sample(
    x0: np.ndarray,
    cond: ConditionBundle,
    sampler: SamplerConfig,
    params: ModelParams,
    *,
    frame_offset: int = 0,
) -> np.ndarray:
    """Integrate the guided field from noise with left-endpoint Euler steps.

    x <- x + (1/steps) * v(x, k/steps) for k = 0 .. steps-1.
    """
    x = np.asarray(x0, dtype=DTYPE).copy()
    dt = np.float32(1.0 / sampler.steps)
    for k in range(sampler.steps):
        t = k / sampler.steps
        v = cfg_vector_field(x, t, cond, sampler.cfg_alpha, params, frame_offset=frame_offset)
        x = x + dt * v
        if np.isnan(x).any():
            raise NumericalError(f"NaN during integration at step {k}")
    return x


# -------------------------------- optimizer ------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: ModelParams, grads: dict[str, np.ndarray], state: AdamState, config: TrainConfig
) -> None:
    """One in-place Adam update over all named parameters (sorted order)."""
    state.step += 1
    b1 = np.float32(config.adam_beta1)
    b2 = np.float32(config.adam_beta2)
    lr = np.float32(config.learning_rate)
    eps = np.float32(config.adam_eps)
    c1 = np.float32(1.0 - config.adam_beta1 ** state.step)
    c2 = np.float32(1.0 - config.adam_beta2 ** state.step)
    for name in params.names():
        g = grads[name].astype(DTYPE, copy=False)
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.m[name] = b1 * state.m[name] + (np.float32(1.0) - b1) * g
        v = state.v[name] = b2 * state.v[name] + (np.float32(1.0) - b2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        params.tensors[name] = params.tensors[name] - update


# ------------------------------- train loop ------------------------------------

_S_BATCH, _S_NOISE, _S_TIME, _S_DROP, _S_DROPOUT = 1001, 1002, 1003, 1004, 1005


class DivergenceWatchdog:
    """Raises once the loss sits above 10x the initial loss for 100 straight steps."""

    factor = 10.0
    patience = 100

    def __init__(self):
        self.initial: float | None = None
        self.streak = 0

    def observe(self, loss: float) -> None:
        if self.initial is None:
            self.initial = loss
        if loss > self.factor * self.initial:
            self.streak += 1
            if self.streak >= self.patience:
                raise TrainingDivergedError(
                    f"loss {loss:.4g} > {self.factor}x initial {self.initial:.4g} "
                    f"for {self.patience} consecutive steps"
                )
        else:
            self.streak = 0


def train_loop(
    dataset: list,
    model_config: ModelConfig,
    train_config: TrainConfig,
    seed: int,
) -> tuple[ModelParams, list[tuple[int, float]]]:
    """Adam on cfm_loss over a corpus of utterances; deterministic given seed.

    Returns trained params and a loss trace sampled every `log_every` steps
    (plus the first and last). Raises TrainingDivergedError if the loss stays
    above 10x the initial loss for 100 consecutive steps.
    """
    if not dataset:
        raise InputError("train_loop needs a nonempty dataset")
    params = init_params(model_config, seed)
    state = AdamState()
    batch_stream = RngStream(SeededRng(seed, _S_BATCH))
    noise_stream = RngStream(SeededRng(seed, _S_NOISE))
    t_stream = RngStream(SeededRng(seed, _S_TIME))
    drop_stream = RngStream(SeededRng(seed, _S_DROP))
    dropout_stream = RngStream(SeededRng(seed, _S_DROPOUT)) if model_config.dropout > 0 else None

    trace: list[tuple[int, float]] = []
    watchdog = DivergenceWatchdog()
    for step in range(train_config.steps):
        batch: list[FlowSample] = []
        frames = 0
        while frames < train_config.batch_frames:
            idx = int(batch_stream.integers(1, len(dataset))[0])
            utt = dataset[idx]
            frame_ids = upsample_tokens(list(utt.tokens), model_config.upsample_factor)
            cond = assemble_condition(frame_ids, utt.speaker, params)
            x1 = utt.features
            x0 = noise_stream.gaussians(x1.size).reshape(x1.shape)
            t = sample_t(train_config, t_stream)
            dropped = bool(drop_stream.uniforms(1)[0] < train_config.cond_drop_rate)
            batch.append(FlowSample(x0=x0, x1=x1, t=t, cond=cond, cond_dropped=dropped))
            frames += x1.shape[0]

        loss, grads = cfm_loss(batch, params, train_config, drop_stream=dropout_stream)
        watchdog.observe(loss)
        adam_step(params, grads, state, train_config)
        if step % train_config.log_every == 0 or step == train_config.steps - 1:
            trace.append((step, loss))
    return params, trace
