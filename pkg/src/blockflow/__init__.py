"""Block-masked streaming flow matching at desk scale.

A numpy/numba library plus CLI for: block-wise attention masks composed
across transformer layers to bound the receptive field, optimal-transport
conditional flow matching training with classifier-free guidance, and
sliding-window chunk-by-chunk streaming generation with constant per-chunk
cost.
"""

__version__ = "0.1.0"

from .backbone import (
    ConditionBundle,
    ModelConfig,
    ModelParams,
    assemble_condition,
    desk_config,
    dit_block_forward,
    init_params,
    load_checkpoint,
    paper_config,
    random_params,
    save_checkpoint,
    timestep_embedding,
    tiny_config,
    upsample_tokens,
    vector_field,
)
from .corpus import CorpusConfig, Utterance, read_corpus, synth_corpus, synth_utterance, write_corpus
from .flow import (
    FlowSample,
    SamplerConfig,
    TrainConfig,
    cfg_vector_field,
    cfm_loss,
    euler_sample,
    ot_flow_point,
    ot_target,
    sample_t,
    train_loop,
)
from .masks import (
    MaskKind,
    MaskSchedule,
    ReceptiveField,
    block_index,
    build_mask,
    empirical_receptive_field,
    load_schedule,
    receptive_field,
    save_schedule,
    schedule_preset,
)
from .numerics import SeededRng, gelu, layer_norm, masked_softmax_rows, matmul, seeded_gaussian
from .streaming import (
    ChunkPlan,
    StreamConfig,
    first_packet_frames,
    full_generate,
    generate_chunk,
    generate_chunked,
    latency_trend_stats,
    measure_chunk_latency,
    plan_chunks,
    position_noise,
    stream_generate,
    window_noise,
)
from .tensorio import read_tensor, write_tensor
