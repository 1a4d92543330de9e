"""blankfill: a sequence model that writes by filling blanks in a canvas.

Start from a canvas (any mix of tokens and blanks), repeatedly predict
(which blank, which word, what stays missing around it), and stop when no
blanks remain.  Training maximizes a uniform-order lower bound on the
marginal likelihood over all generation orders; decoding supports greedy,
beam, and temperature sampling for free-form infilling, plus exact-length
restoration; evaluation includes Monte-Carlo perplexity over sampled
orders, BLEU, character error rate, and fill validity.
"""

from .canvas import (
    Action,
    Blank,
    Canvas,
    InvalidActionError,
    TemplateError,
    Token,
    apply_action,
    blank_count,
    blank_locations,
    initial_canvas,
    is_complete,
    normalize,
    parse_template,
    render,
    tokens,
)
from .corpus import (
    CorpusError,
    MaskSpec,
    Vocabulary,
    build_vocab,
    compile_infilling,
    compile_restoration,
)
from .decoding import (
    DecodeConfig,
    Hypothesis,
    beam_fill,
    greedy_fill,
    rerank,
    restore_fill,
    sample_fill,
)
from .evaluation import (
    PplEstimate,
    bleu,
    cer,
    corpus_ppl,
    exact_log_marginal,
    mc_log_marginal,
    validity_rate,
)
from .model import (
    BlankModel,
    CheckpointError,
    ModelConfig,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from .trajectory import (
    TrainingInstance,
    TrajectoryStep,
    canvas_from_partial,
    enumerate_orders,
    trajectory_from_order,
)
from .training import (
    DivergenceError,
    LossReport,
    TrainConfig,
    efficient_loss,
    lower_bound_exact,
    naive_loss,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Action",
    "Blank",
    "BlankModel",
    "Canvas",
    "CheckpointError",
    "CorpusError",
    "DecodeConfig",
    "DivergenceError",
    "Hypothesis",
    "InvalidActionError",
    "LossReport",
    "MaskSpec",
    "ModelConfig",
    "PplEstimate",
    "TemplateError",
    "Token",
    "TrainConfig",
    "TrainingInstance",
    "TrajectoryStep",
    "Vocabulary",
    "apply_action",
    "beam_fill",
    "blank_count",
    "blank_locations",
    "bleu",
    "build_model",
    "build_vocab",
    "canvas_from_partial",
    "cer",
    "compile_infilling",
    "compile_restoration",
    "corpus_ppl",
    "efficient_loss",
    "enumerate_orders",
    "exact_log_marginal",
    "greedy_fill",
    "initial_canvas",
    "is_complete",
    "load_checkpoint",
    "lower_bound_exact",
    "mc_log_marginal",
    "naive_loss",
    "normalize",
    "parse_template",
    "render",
    "rerank",
    "restore_fill",
    "sample_fill",
    "save_checkpoint",
    "tokens",
    "train",
    "trajectory_from_order",
    "validity_rate",
]
