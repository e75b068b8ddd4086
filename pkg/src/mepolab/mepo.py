"""Meta post-refinement pipeline.

Three stages over a pretrained backbone:

1. Meta-refinement: every meta-epoch samples a fresh pseudo task sequence
   and a fresh random head, trains sequentially through the pseudo tasks
   (inner loop), takes one pass over the held-out joint set (outer loop),
   and folds the resulting backbone back into the running parameters with a
   first-order interpolation step.
2. Reference statistics: class prototypes under the refined, frozen
   backbone, their mean, their covariance, and its Cholesky factor.
3. Streaming phase: each incoming batch's centered features are whitened by
   the Cholesky factor of their own covariance and recolored by the
   reference factor, convexly combined with the raw features, and fed to a
   masked cross-entropy loss that updates only the adapter and the head.

The whitening-recoloring map is applied to centered deviations (the batch
mean is re-added under the default policy), for which the post-alignment
covariance equals the reference covariance exactly up to the epsilon
regularizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datastream import (
    LabeledDataset,
    PseudoSequence,
    TaskStream,
    sample_pseudo_sequence,
)
from .errors import (
    BatchTooSmallError,
    ConfigError,
    DimensionMismatchError,
    EmptyDatasetError,
    InvalidCountError,
    LabelOutOfRangeError,
    NotPositiveDefiniteError,
    TooFewClassesError,
)
from .evaluation import EvalLog, EvalRecord, masked_accuracy
from .linalg import (
    DEFAULT_EPSILON,
    cholesky,
    read_matrix,
    sample_covariance,
    solve_lower_triangular,
    solve_upper_triangular,
    write_matrix,
)
from .net import (
    MlpModel,
    OptimizerState,
    backbone_backward,
    backward,
    flatten_backbone,
    forward,
    fresh_head,
    make_optimizer,
    masked_ce_batch,
    optimizer_step,
    reptile_blend,
    unflatten_backbone,
)
from .seeding import derive_seed


@dataclass
class MepoConfig:
    meta_epochs: int = 20
    tasks_per_epoch: int = 5
    eta_theta: float = 1e-3
    eta_psi: float = 1e-2
    eta_meta: float = 1.0
    gamma: float = 0.3
    class_count_meta: int = 20
    samples_per_class_meta: int = 80
    inner_batch_size: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        if self.meta_epochs < 0 or self.tasks_per_epoch < 1:
            raise InvalidCountError("meta_epochs >= 0 and tasks_per_epoch >= 1 required")
        if self.eta_theta <= 0 or self.eta_psi <= 0:
            raise InvalidCountError("learning rates must be > 0")
        if not 0.0 <= self.eta_meta <= 1.0:
            raise InvalidCountError(f"eta_meta must be in [0, 1], got {self.eta_meta}")
        if not 0.0 < self.gamma < 1.0:
            raise InvalidCountError(f"gamma must be in (0, 1), got {self.gamma}")


@dataclass
class AlignConfig:
    alpha: float = 0.5
    epsilon: float = DEFAULT_EPSILON
    mean_policy: str = "preserve-batch-mean"  # or "raw"

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.mean_policy not in ("preserve-batch-mean", "raw"):
            raise ConfigError(f"unknown mean_policy {self.mean_policy!r}")


@dataclass
class CovRef:
    """Reference geometry: prototypes, their mean, covariance, and factor."""

    class_ids: np.ndarray  # (c,) original class ids; may be empty
    prototypes: np.ndarray  # (c, d)
    global_mean: np.ndarray  # (d,)
    sigma_pre: np.ndarray  # (d, d)
    l_pre: np.ndarray  # (d, d) lower triangular
    epsilon: float
    feature_dim: int

    @property
    def prototype_map(self) -> dict[int, np.ndarray]:
        return {int(c): self.prototypes[i] for i, c in enumerate(self.class_ids)}


def _batches(xs: np.ndarray, ys: np.ndarray, batch_size: int | None):
    n = len(ys)
    if batch_size is None or batch_size >= n:
        yield xs, ys
        return
    for i in range(0, n, batch_size):
        yield xs[i : i + batch_size], ys[i : i + batch_size]


def _check_labels(model: MlpModel, ys: np.ndarray) -> None:
    if len(ys) and (ys.min() < 0 or ys.max() >= model.class_count):
        raise LabelOutOfRangeError(
            f"labels in [{ys.min()}, {ys.max()}] but head has {model.class_count} classes"
        )


def _sgd_pass(
    model: MlpModel, xs: np.ndarray, ys: np.ndarray, mask: np.ndarray,
    eta_theta: float, eta_psi: float, batch_size: int | None,
) -> None:
    theta_opt = make_optimizer("sgd", eta_theta)
    psi_opt = make_optimizer("sgd", eta_psi)
    for bx, by in _batches(xs, ys, batch_size):
        _, logits, cache = forward(model, bx)
        _, grad_logits = masked_ce_batch(logits, by, mask)
        grads = backward(model, cache, grad_logits)
        theta_params = [p for layer in model.layers for p in (layer.weight, layer.bias)]
        theta_grads = [g for gl in grads.backbone for g in (gl.weight, gl.bias)]
        new_theta = optimizer_step(theta_opt, theta_params, theta_grads)
        for layer, w, b in zip(model.layers, new_theta[0::2], new_theta[1::2]):
            layer.weight, layer.bias = w, b
        new_psi = optimizer_step(
            psi_opt,
            [model.head.weight, model.head.bias],
            [grads.head.weight, grads.head.bias],
        )
        model.head.weight, model.head.bias = new_psi


def inner_loop(
    model: MlpModel,
    tasks: list[tuple[np.ndarray, np.ndarray]],
    eta_theta: float,
    eta_psi: float,
    batch_size: int | None = None,
) -> MlpModel:
    """Sequential single-epoch training through the pseudo tasks, in order.

    Backbone steps at ``eta_theta``, head at ``eta_psi`` (plain SGD). The
    loss of each task masks the logits to that task's own label set.
    """
    if not tasks:
        raise EmptyDatasetError("inner loop needs at least one task")
    for xs, ys in tasks:
        _check_labels(model, ys)
        _sgd_pass(model, xs, ys, np.unique(ys), eta_theta, eta_psi, batch_size)
    return model


def outer_loop(
    model: MlpModel,
    joint_xs: np.ndarray,
    joint_ys: np.ndarray,
    eta_theta: float,
    eta_psi: float,
    batch_size: int | None = None,
) -> MlpModel:
    """One SGD pass over the held-out joint set (all classes mixed)."""
    if len(joint_ys) == 0:
        raise EmptyDatasetError("outer loop needs a nonempty joint set")
    _check_labels(model, joint_ys)
    _sgd_pass(model, joint_xs, joint_ys, np.unique(joint_ys),
              eta_theta, eta_psi, batch_size)
    return model


def meta_epoch_sequence(pre: LabeledDataset, cfg: MepoConfig, epoch: int) -> PseudoSequence:
    """The pseudo task sequence drawn at a given meta-epoch (1-based)."""
    return sample_pseudo_sequence(
        pre,
        class_count_meta=cfg.class_count_meta,
        samples_per_class=cfg.samples_per_class_meta,
        gamma=cfg.gamma,
        t_prime=cfg.tasks_per_epoch,
        seed=derive_seed(cfg.seed, "pseudo-seq", epoch),
    )


def meta_epoch_head(feature_dim: int, cfg: MepoConfig, epoch: int):
    """The fresh random head used at a given meta-epoch (1-based)."""
    return fresh_head(feature_dim, cfg.class_count_meta,
                      seed=derive_seed(cfg.seed, "meta-head", epoch))


@dataclass
class RefineResult:
    model: MlpModel
    joint_losses: list[float]


def _joint_loss(model: MlpModel, seq: PseudoSequence) -> float:
    _, logits, _ = forward(model, seq.joint_xs)
    loss, _ = masked_ce_batch(logits, seq.joint_ys, np.unique(seq.joint_ys))
    return loss


def meta_refine(model: MlpModel, pre: LabeledDataset, cfg: MepoConfig) -> RefineResult:
    """Run the full meta-refinement loop and return the refined backbone.

    Each epoch works on a throwaway copy: fresh pseudo sequence, fresh head,
    inner loop, outer loop; then the running backbone moves toward the
    epoch's endpoint by ``eta_meta``. The head of the input model is carried
    through untouched (meta-epoch heads are discarded). ``meta_epochs=0`` or
    ``eta_meta=0`` return the input parameters bitwise.
    """
    theta = flatten_backbone(model)
    losses: list[float] = []
    for epoch in range(1, cfg.meta_epochs + 1):
        seq = meta_epoch_sequence(pre, cfg, epoch)
        work = unflatten_backbone(model, theta)
        work.head = meta_epoch_head(work.feature_dim, cfg, epoch)
        inner_loop(work, seq.tasks, cfg.eta_theta, cfg.eta_psi, cfg.inner_batch_size)
        outer_loop(work, seq.joint_xs, seq.joint_ys, cfg.eta_theta, cfg.eta_psi,
                   cfg.inner_batch_size)
        losses.append(_joint_loss(work, seq))
        theta = reptile_blend(theta, flatten_backbone(work), cfg.eta_meta)
    return RefineResult(model=unflatten_backbone(model, theta), joint_losses=losses)


def build_cov_ref(
    model: MlpModel,
    ref_data: LabeledDataset,
    epsilon: float = DEFAULT_EPSILON,
    use_adapter: bool = False,
) -> CovRef:
    """Class prototypes and reference covariance under the frozen backbone.

    The covariance is over the prototypes themselves (denominator
    ``class_count - 1``); its Cholesky factor is precomputed with the given
    diagonal regularizer.
    """
    if ref_data.class_count < 2:
        raise TooFewClassesError("need at least 2 reference classes")
    feats, _, _ = forward(model, ref_data.xs, use_adapter=use_adapter)
    d = model.feature_dim
    protos = np.empty((ref_data.class_count, d))
    for c in range(ref_data.class_count):
        protos[c] = feats[ref_data.class_indices(c)].mean(axis=0)
    mean, sigma = sample_covariance(protos)
    l_pre = cholesky(sigma, epsilon)
    return CovRef(
        class_ids=np.arange(ref_data.class_count, dtype=np.int64),
        prototypes=protos,
        global_mean=mean,
        sigma_pre=sigma,
        l_pre=l_pre,
        epsilon=epsilon,
        feature_dim=d,
    )


def cov_ref_from_sigma(sigma: np.ndarray, epsilon: float = 0.0) -> CovRef:
    """Reference built directly from a covariance matrix (no prototypes)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    d = sigma.shape[0]
    return CovRef(
        class_ids=np.empty(0, dtype=np.int64),
        prototypes=np.empty((0, d)),
        global_mean=np.zeros(d),
        sigma_pre=sigma,
        l_pre=cholesky(sigma, epsilon),
        epsilon=epsilon,
        feature_dim=d,
    )


def _batch_alignment(
    features: np.ndarray, ref: CovRef, cfg: AlignConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Whiten-recolor a batch; returns (aligned, l_cur, batch_mean)."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        f = np.atleast_2d(f)
    n, d = f.shape
    if n < 2:
        raise BatchTooSmallError(f"alignment needs >= 2 samples, got {n}")
    if d != ref.feature_dim:
        raise DimensionMismatchError(f"feature dim {d} != reference dim {ref.feature_dim}")
    mean, sigma_cur = sample_covariance(f)
    l_cur = cholesky(sigma_cur, cfg.epsilon)
    dev = f - mean if cfg.mean_policy == "preserve-batch-mean" else f
    # d_hat = L_pre @ L_cur^{-1} @ d, applied via triangular solve.
    z = solve_lower_triangular(l_cur, dev.T)
    aligned = (ref.l_pre @ z).T
    if cfg.mean_policy == "preserve-batch-mean":
        aligned = aligned + mean
    return aligned, l_cur, mean


def align_batch(features, ref: CovRef, cfg: AlignConfig) -> np.ndarray:
    """Map batch features so their sample covariance matches the reference.

    Raises ``NotPositiveDefiniteError`` when the batch covariance stays
    non-PD after regularization; callers fall back to raw features.
    """
    aligned, _, _ = _batch_alignment(features, ref, cfg)
    return aligned


def combine_features(f, f_hat, alpha: float) -> np.ndarray:
    """Convex combination ``alpha * f_hat + (1 - alpha) * f``."""
    fa = np.asarray(f, dtype=np.float64)
    fb = np.asarray(f_hat, dtype=np.float64)
    if fa.shape != fb.shape:
        raise DimensionMismatchError(f"shapes {fa.shape} vs {fb.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    if alpha == 0.0:
        return fa.copy()
    if alpha == 1.0:
        return fb.copy()
    return alpha * fb + (1.0 - alpha) * fa


def gcl_train_step(
    model: MlpModel,
    xs: np.ndarray,
    ys: np.ndarray,
    ref: CovRef | None,
    align_cfg: AlignConfig,
    mask: np.ndarray,
    opt_state: OptimizerState,
) -> tuple[float, bool]:
    """One streaming step: align, combine, masked CE, update adapter + head.

    Batch statistics (mean and Cholesky factors) are treated as constants in
    the backward pass; the per-batch alignment map itself is differentiated
    as a fixed linear transform. Returns (loss, whether alignment was used).
    Only adapter and head parameters change; the backbone is never touched.
    """
    if len(ys) == 0:
        raise EmptyDatasetError("empty batch")
    if model.adapter is None:
        raise ValueError("streaming phase requires a model with an adapter")
    _check_labels(model, np.asarray(ys))
    feats, _, cache = forward(model, xs, use_adapter=True)
    f = np.atleast_2d(feats)
    used = False
    l_cur = None
    f_tr = f
    if ref is not None:
        try:
            aligned, l_cur, _ = _batch_alignment(f, ref, align_cfg)
            f_tr = combine_features(f, aligned, align_cfg.alpha)
            used = True
        except (BatchTooSmallError, NotPositiveDefiniteError):
            pass
    logits = f_tr @ model.head.weight + model.head.bias
    loss, grad_logits = masked_ce_batch(logits, ys, mask)

    head_dw = f_tr.T @ grad_logits
    head_db = grad_logits.sum(axis=0)
    g_tr = grad_logits @ model.head.weight.T
    if used and align_cfg.alpha > 0.0:
        # combined = alpha * (dev @ M.T [+ mean]) + (1-alpha) * f with
        # M = L_pre @ L_cur^{-1}; under constant batch statistics,
        # dL/df = (1-alpha) * g + alpha * g @ M.
        g_m = solve_upper_triangular(l_cur.T, (g_tr @ ref.l_pre).T).T
        g_feat = (1.0 - align_cfg.alpha) * g_tr + align_cfg.alpha * g_m
    else:
        g_feat = g_tr
    _, adapter_grad = backbone_backward(model, cache, g_feat, use_adapter=True)

    params = [model.adapter.weight, model.adapter.bias,
              model.head.weight, model.head.bias]
    grads = [adapter_grad.weight, adapter_grad.bias, head_dw, head_db]
    new = optimizer_step(opt_state, params, grads)
    model.adapter.weight, model.adapter.bias = new[0], new[1]
    model.head.weight, model.head.bias = new[2], new[3]
    return loss, used


@dataclass
class GclConfig:
    lr: float = 5e-3
    optimizer: str = "adam"
    mask_policy: str = "seen"  # or "batch"
    eval_interval_batches: int = 2
    align: AlignConfig = field(default_factory=AlignConfig)

    def __post_init__(self) -> None:
        if self.mask_policy not in ("seen", "batch"):
            raise ConfigError(f"unknown mask_policy {self.mask_policy!r}")
        if self.eval_interval_batches < 1:
            raise ConfigError("eval_interval_batches must be >= 1")


def run_gcl(
    stream: TaskStream,
    model: MlpModel,
    ref: CovRef | None,
    cfg: GclConfig,
    test_xs: np.ndarray,
    test_ys: np.ndarray,
) -> tuple[EvalLog, MlpModel]:
    """Single pass over the stream with periodic anytime evaluation.

    Every ``eval_interval_batches`` batches (and at the stream end) the
    model is scored on the test rows whose labels have been seen so far,
    predicting over seen classes only. At each task boundary the per-task
    accuracy table used for forgetting gains one column. Alignment-fallback
    events (batches trained on raw features because the batch covariance
    could not be factorized) are counted on the log.
    """
    test_xs = np.asarray(test_xs, dtype=np.float64)
    test_ys = np.asarray(test_ys, dtype=np.int64)
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    seen: set[int] = set()
    records: list[EvalRecord] = []
    task_table: dict[int, list[float]] = {}
    fallbacks = 0
    samples = 0
    batch_no = 0

    def evaluate() -> None:
        seen_arr = np.array(sorted(seen), dtype=np.int64)
        rows = np.isin(test_ys, seen_arr)
        acc = masked_accuracy(model, test_xs[rows], test_ys[rows], seen_arr)
        records.append(EvalRecord(samples, len(seen), acc))

    for t_i, task in enumerate(stream.tasks):
        for batch in task.batches:
            seen.update(int(y) for y in batch.ys)
            if cfg.mask_policy == "seen":
                mask = np.array(sorted(seen), dtype=np.int64)
            else:
                mask = np.unique(batch.ys)
            _, used = gcl_train_step(model, batch.xs, batch.ys, ref, cfg.align, mask, opt)
            if ref is not None and not used:
                fallbacks += 1
            samples += len(batch.ys)
            batch_no += 1
            if batch_no % cfg.eval_interval_batches == 0:
                evaluate()
        seen_arr = np.array(sorted(seen), dtype=np.int64)
        for tt in range(t_i + 1):
            rows = np.isin(test_ys, stream.task_labels[tt])
            acc = masked_accuracy(model, test_xs[rows], test_ys[rows], seen_arr)
            task_table.setdefault(tt, []).append(acc)
    if batch_no % cfg.eval_interval_batches != 0:
        evaluate()
    return EvalLog(records=records, task_accuracies=task_table,
                   align_fallbacks=fallbacks), model


COVREF_MAGIC = "covref 1"


def save_cov_ref(ref: CovRef, path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(COVREF_MAGIC + "\n")
        fh.write(f"feature_dim {ref.feature_dim}\n")
        fh.write(f"epsilon {ref.epsilon:.17g}\n")
        fh.write("class_ids " + " ".join(str(int(c)) for c in ref.class_ids) + "\n")
        write_matrix(fh, ref.prototypes.reshape(len(ref.class_ids), ref.feature_dim))
        write_matrix(fh, ref.global_mean)
        write_matrix(fh, ref.sigma_pre)
        write_matrix(fh, ref.l_pre)


def load_cov_ref(path) -> CovRef:
    from .errors import ArtifactIoError

    with open(path, "r", encoding="ascii") as fh:
        magic = fh.readline().strip()
        if magic != COVREF_MAGIC:
            raise ArtifactIoError(f"bad covref magic: {magic!r}")
        try:
            feature_dim = int(fh.readline().split()[1])
            epsilon = float(fh.readline().split()[1])
            id_parts = fh.readline().split()[1:]
            class_ids = np.array([int(v) for v in id_parts], dtype=np.int64)
            prototypes = read_matrix(fh)
            global_mean = read_matrix(fh)[0]
            sigma_pre = read_matrix(fh)
            l_pre = read_matrix(fh)
        except (ValueError, IndexError) as exc:
            raise ArtifactIoError(f"malformed covref: {exc}") from exc
    return CovRef(
        class_ids=class_ids,
        prototypes=prototypes,
        global_mean=global_mean,
        sigma_pre=sigma_pre,
        l_pre=l_pre,
        epsilon=epsilon,
        feature_dim=feature_dim,
    )
