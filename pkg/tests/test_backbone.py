import numpy as np
import pytest

import blockflow as bf
from blockflow import backbone
from blockflow.errors import ConfigurationError, InputError
from blockflow.masks import MaskKind
from blockflow.numerics import matmul
from conftest import gaussian


def make_cond(params, tokens, speaker=None, factor=None):
    cfg = params.config
    factor = factor or cfg.upsample_factor
    speaker = np.zeros(cfg.speaker_dim, np.float32) if speaker is None else speaker
    return bf.assemble_condition(bf.upsample_tokens(tokens, factor), speaker, params)


# ------------------------------- token handling ---------------------------------


def test_upsample_examples():
    assert bf.upsample_tokens([7], 4).tolist() == [7, 7, 7, 7]
    assert bf.upsample_tokens([], 3).tolist() == []
    assert bf.upsample_tokens([1, 2], 2).tolist() == [1, 1, 2, 2]


def test_upsample_rejects_zero_factor():
    with pytest.raises(ConfigurationError):
        bf.upsample_tokens([1], 0)


def test_assemble_zero_speaker_zero_columns(tiny_params):
    cond = make_cond(tiny_params, [1, 2, 3])
    ted = tiny_params.config.token_embed_dim
    assert np.all(cond.cond[:, ted:] == 0.0)


def test_assemble_equal_ids_equal_rows(tiny_params):
    cond = make_cond(tiny_params, [5, 9, 5])
    ted = tiny_params.config.token_embed_dim
    assert np.array_equal(cond.cond[0, :ted], cond.cond[8, :ted])  # frames 0 and 8 are both id 5


def test_assemble_rejects_out_of_vocab(tiny_params):
    with pytest.raises(InputError):
        make_cond(tiny_params, [tiny_params.config.token_vocab])


def test_zero_condition_shape(tiny_cfg):
    z = backbone.zero_condition(12, tiny_cfg)
    assert z.cond.shape == (12, tiny_cfg.cond_dim)
    assert np.all(z.cond == 0.0)


# ------------------------------ timestep embedding -------------------------------


def test_timestep_endpoints_differ(tiny_params):
    assert not np.array_equal(bf.timestep_embedding(0.0, tiny_params), bf.timestep_embedding(1.0, tiny_params))


def test_timestep_deterministic(tiny_params):
    a = bf.timestep_embedding(0.4, tiny_params)
    b = bf.timestep_embedding(0.4, tiny_params)
    assert np.array_equal(a, b)


def test_timestep_sweep_finite(tiny_params):
    for t in np.linspace(0.0, 1.0, 1000):
        assert np.isfinite(bf.timestep_embedding(float(t), tiny_params)).all()


def test_timestep_rejects_out_of_range(tiny_params):
    with pytest.raises(InputError):
        bf.timestep_embedding(1.5, tiny_params)


# --------------------------------- parameters -----------------------------------


def analytic_param_count(cfg):
    """Closed-form oracle for the named-parameter total."""
    h, m = cfg.hidden_dim, cfg.mlp_ratio * cfg.hidden_dim
    per_layer = 4 * (h * h + h) + (h * m + m) + (m * h + h) + (h * 6 * h + 6 * h)
    return (
        cfg.token_vocab * cfg.token_embed_dim
        + (cfg.feature_dim + cfg.cond_dim) * h + h
        + (cfg.time_freq_dim * h + h) + (h * h + h)
        + cfg.layers * per_layer
        + h * cfg.feature_dim + cfg.feature_dim
    )


def test_param_count_matches_closed_form(tiny_cfg, tiny_params):
    assert tiny_params.param_count() == analytic_param_count(tiny_cfg)


def test_init_deterministic(tiny_cfg):
    a = bf.init_params(tiny_cfg, seed=11)
    b = bf.init_params(tiny_cfg, seed=11)
    assert a.names() == b.names()
    assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.names())


def test_gates_zero_at_init(tiny_params):
    for name, t in tiny_params.tensors.items():
        if ".adaln." in name or name.startswith("out_proj."):
            assert np.all(t == 0.0), name


def test_parameter_naming_convention(tiny_params):
    names = tiny_params.names()
    for i in range(tiny_params.config.layers):
        for group in ("attn", "mlp", "adaln"):
            assert any(n.startswith(f"layer{i}.{group}.") for n in names)


def test_config_rejects_bad_shapes():
    with pytest.raises(ConfigurationError):
        bf.tiny_config(hidden_dim=65)  # not divisible by heads
    with pytest.raises(ConfigurationError):
        bf.tiny_config(dropout=1.0)


# ---------------------------------- DiT block ------------------------------------


def test_block_is_identity_at_init(tiny_params):
    mod = bf.timestep_embedding(0.3, tiny_params)
    mask = bf.build_mask(MaskKind.BLOCK, 24, 8)
    for trial in range(20):
        x = gaussian(100 + trial, 24, 64)
        for layer in range(tiny_params.config.layers):
            assert np.array_equal(backbone.dit_block_forward(x, mod, mask, tiny_params, layer), x)


def test_block_mask_confines_information(tiny_random_params):
    mod = bf.timestep_embedding(0.3, tiny_random_params)
    mask = bf.build_mask(MaskKind.BLOCK, 24, 8)
    x = gaussian(7, 24, 64)
    x2 = x.copy()
    x2[0:8] += np.float32(1.0)
    y = backbone.dit_block_forward(x, mod, mask, tiny_random_params, 0)
    y2 = backbone.dit_block_forward(x2, mod, mask, tiny_random_params, 0)
    assert np.any(y[0:8] != y2[0:8])
    assert np.array_equal(y[8:], y2[8:])


def test_single_block_all_true_equals_block_mask(tiny_random_params):
    # one-block input: BLOCK mask allows everything, so it must equal FULL
    mod = bf.timestep_embedding(0.6, tiny_random_params)
    x = gaussian(8, 8, 64)
    y_block = backbone.dit_block_forward(x, mod, bf.build_mask(MaskKind.BLOCK, 8, 8), tiny_random_params, 1)
    y_full = backbone.dit_block_forward(x, mod, np.ones((8, 8), bool), tiny_random_params, 1)
    assert np.array_equal(y_block, y_full)


# --------------------------------- vector field ----------------------------------


def test_zero_init_output_constant_zero(tiny_params):
    cond = make_cond(tiny_params, [1, 2, 3, 4])
    for t in (0.0, 0.5, 1.0):
        v = bf.vector_field(gaussian(int(t * 10) + 21, 16, 8), t, cond, tiny_params)
        assert np.all(v == 0.0)


def test_zero_init_reduces_to_projections(tiny_params):
    # plant a nonzero output head; layers stay identity, so the whole network
    # is in-proj (+ positions) followed by out-proj
    params = tiny_params.copy()
    params.tensors["out_proj.w"] = gaussian(31, 64, 8) * np.float32(0.1)
    params.tensors["out_proj.b"] = gaussian(32, 8) * np.float32(0.1)
    cond = make_cond(params, [3, 1, 4, 1])
    x = gaussian(33, 16, 8)
    v = bf.vector_field(x, 0.7, cond, params)
    h = matmul(np.concatenate([x, cond.cond], axis=1), params.tensors["in_proj.w"]) + params.tensors["in_proj.b"]
    h = h + backbone.positional_encoding(0, 16, 64)
    expect = matmul(h, params.tensors["out_proj.w"]) + params.tensors["out_proj.b"]
    assert np.array_equal(v, expect)


def test_zero_init_output_independent_of_x(tiny_params):
    params = tiny_params.copy()
    params.tensors["out_proj.b"] = gaussian(34, 8)
    cond = make_cond(params, [1, 1])
    v1 = bf.vector_field(gaussian(35, 8, 8), 0.2, cond, params)
    v2 = bf.vector_field(gaussian(36, 8, 8), 0.2, cond, params)
    # out_proj.w is zero, so only the bias reaches the output
    assert np.array_equal(v1, v2)
    assert np.array_equal(v1[0], params.tensors["out_proj.b"])


def test_perturbation_support_equals_analytic_field(tiny_random_params):
    cfg = tiny_random_params.config
    rf = bf.receptive_field(cfg.schedule)
    b = cfg.schedule.block_size_frames
    n = 8 * b
    cond = make_cond(tiny_random_params, list(range(n // cfg.upsample_factor)))
    x = gaussian(40, n, cfg.feature_dim)
    x2 = x.copy()
    probe = 4
    x2[probe * b : (probe + 1) * b] += np.float32(1.0)
    v1 = bf.vector_field(x, 0.5, cond, tiny_random_params)
    v2 = bf.vector_field(x2, 0.5, cond, tiny_random_params)
    changed = np.unique(np.flatnonzero(np.any(v1 != v2, axis=1)) // b)
    expect = np.arange(probe - rf.future_blocks, probe + rf.past_blocks + 1)
    assert np.array_equal(changed, expect)


def test_head_count_invariance_of_support():
    sched = bf.MaskSchedule((MaskKind.FORWARD, MaskKind.BLOCK, MaskKind.BACKWARD), 8)
    supports = []
    for heads in (1, 4):
        params = bf.random_params(bf.tiny_config(schedule=sched, heads=heads), seed=8)
        emp = bf.empirical_receptive_field(params, n=6 * 8, probe_block=2)
        supports.append((emp.past_blocks, emp.future_blocks))
    assert supports[0] == supports[1] == (1, 1)


def test_vector_field_deterministic(tiny_random_params):
    cond = make_cond(tiny_random_params, [1, 2, 3, 4])
    x = gaussian(41, 16, 8)
    assert np.array_equal(
        bf.vector_field(x, 0.3, cond, tiny_random_params),
        bf.vector_field(x, 0.3, cond, tiny_random_params),
    )


def test_paper_feature_width_flows_through():
    cfg = bf.desk_config("sr", feature_dim=80)
    params = bf.random_params(cfg, seed=9)
    cond = make_cond(params, list(range(12)))  # 48 frames = 2 blocks of 24
    v = bf.vector_field(gaussian(42, 48, 80), 0.5, cond, params)
    assert v.shape == (48, 80)


def test_frame_mismatch_rejected(tiny_random_params):
    cond = make_cond(tiny_random_params, [1, 2])
    with pytest.raises(InputError):
        bf.vector_field(gaussian(43, 12, 8), 0.5, cond, tiny_random_params)


def test_dropout_training_path_differs_but_is_seeded(tiny_cfg, small_corpus):
    from blockflow.flow import FlowSample, cfm_loss
    from blockflow.numerics import RngStream, SeededRng

    cfg = bf.tiny_config(dropout=0.2)
    params = bf.random_params(cfg, seed=4)
    utt = small_corpus[0]
    cond = bf.assemble_condition(bf.upsample_tokens(utt.tokens, 4), utt.speaker, params)
    x0 = gaussian(44, *utt.features.shape)
    batch = [FlowSample(x0=x0, x1=utt.features, t=0.4, cond=cond)]
    loss_a, _ = cfm_loss(batch, params, drop_stream=RngStream(SeededRng(1, 1)))
    loss_b, _ = cfm_loss(batch, params, drop_stream=RngStream(SeededRng(1, 1)))
    loss_c, _ = cfm_loss(batch, params, drop_stream=RngStream(SeededRng(2, 1)))
    loss_inf, _ = cfm_loss(batch, params)
    assert loss_a == loss_b  # same dropout stream
    assert loss_a != loss_c  # different dropout stream
    assert loss_inf != loss_a  # inference path has no dropout


# --------------------------------- checkpoints -----------------------------------


def test_checkpoint_round_trip(tmp_path, tiny_random_params):
    bf.save_checkpoint(tmp_path / "ckpt", tiny_random_params)
    loaded = bf.load_checkpoint(tmp_path / "ckpt")
    assert loaded.config == tiny_random_params.config
    assert loaded.names() == tiny_random_params.names()
    for name in loaded.names():
        assert np.array_equal(loaded.tensors[name], tiny_random_params.tensors[name])


def test_checkpoint_missing_manifest(tmp_path):
    from blockflow.errors import FormatError

    with pytest.raises(FormatError):
        bf.load_checkpoint(tmp_path / "nope")


def test_positional_flag_off_changes_output():
    sched = bf.schedule_preset("tiny")
    on = bf.random_params(bf.tiny_config(schedule=sched, positional=True), seed=3)
    off_cfg = bf.tiny_config(schedule=sched, positional=False)
    off = bf.ModelParams(off_cfg, {k: v.copy() for k, v in on.tensors.items()})
    cond_on = make_cond(on, [1, 2])
    x = gaussian(45, 8, 8)
    assert not np.array_equal(bf.vector_field(x, 0.5, cond_on, on), bf.vector_field(x, 0.5, cond_on, off))
