"""Video-dialog transformer with recurrent object/language state trackers."""

from .attention import AttentionConfig, AttentionMask, attention_to, causal_mask
from .combiner import combine_a, combine_b, combine_c
from .data import CANDIDATES, VOCAB, DialogEpisode, Scene, generate_dataset
from .evaluation import EvalReport, accuracy_by_category, bleu4
from .model import (
    ModelConfig,
    ModelOutput,
    build_embedder,
    forward_discriminative,
    forward_generative_teacher_forced,
    generate,
    init_params,
    predict_answer,
    run_dialog,
)
from .optim import OptimState, ScheduleConfig, TrainConfig, adamw_step, lr_at
from .tensor import NumericError, ShapeError, Tape, Tensor, backward
from .trackers import (
    DialogState,
    TrackerConfig,
    advance_state,
    lst_update,
    ost_update,
    select_top_k_discriminative,
    select_top_k_generative,
)

__version__ = "0.1.0"
