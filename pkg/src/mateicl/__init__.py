"""MateICL inference engine: parallel context windows with attention
recalibration, plus dispersion diagnostics and an ICL evaluation harness."""

from .attention import (
    MATEICL,
    PCW,
    STRUCTURED,
    AttentionTrace,
    BiasKind,
    BiasMode,
    KVCache,
    apply_atbias,
    attend,
    bias_value,
    compute_nu,
    concat_caches,
    decompose_linear_attention,
    decompose_softmax_attention,
    task_mass,
)
from .errors import (
    CapacityError,
    DomainError,
    FormatError,
    MateICLError,
    PackingError,
    ShapeError,
    TemplateError,
    WeightValidationError,
)
from .evaluation import (
    EvalReport,
    TaskSpec,
    bias_sweep,
    dispersion_report,
    metric_accuracy,
    metric_em,
    metric_f1,
    render_template,
    run_eval,
    sample_demo_sets,
)
from .inference import (
    BeamParams,
    ScoredLabel,
    encode_windows,
    full_context_pass,
    generate,
    run_query,
    score_choice,
    score_labels,
    windowed_task_logits,
)
from .model import (
    Model,
    ModelConfig,
    WeightStore,
    build_matching_model,
    forward,
    load_weights,
    random_model,
    save_weights,
)
from .numerics import Rng, gelu, layer_norm, matmul, stable_softmax
from .tokenizer import BpeVocab, SimpleVocab, TokenSequence
from .windowing import (
    AttentionMask,
    Demonstration,
    PackedContext,
    assign_positions,
    build_mask,
    pack_windows,
    window_capacity,
)

__version__ = "0.1.0"
