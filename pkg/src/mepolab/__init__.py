"""Desk-scale laboratory for rehearsal-free general continual learning."""

from .datastream import (
    LabeledDataset,
    PseudoSequence,
    SiBlurryConfig,
    TaskStream,
    gen_gaussian_dataset,
    make_siblurry_stream,
    sample_pseudo_sequence,
)
from .evaluation import (
    EvalLog,
    EvalRecord,
    GapExperiment,
    compute_auc,
    compute_forgetting,
    compute_last,
    surrogate_objective_grad,
    theorem_gap,
)
from .mepo import (
    AlignConfig,
    CovRef,
    GclConfig,
    MepoConfig,
    align_batch,
    build_cov_ref,
    combine_features,
    gcl_train_step,
    inner_loop,
    meta_refine,
    outer_loop,
    run_gcl,
)
from .net import (
    MlpModel,
    forward,
    backward,
    init_model,
    masked_ce_loss,
    optimizer_step,
    reptile_blend,
)

__version__ = "0.1.0"
