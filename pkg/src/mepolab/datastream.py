"""Synthetic datasets and stream construction.

Two stream builders live here. The Si-Blurry generator splits the label set
into a disjoint pool (each class confined to a single task) and a blurry
pool (each class keeps most samples in a home task and leaks the rest into
the other tasks), then chunks every task into batches for one-pass online
training. The pseudo-task sampler draws a class subset from a source
dataset, reserves a per-class fraction as a held-out joint set, and splits
the remaining samples into disjoint pseudo tasks for meta-refinement.

All generators are pure functions of (data, config, seed): identical inputs
produce bitwise-identical streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyDatasetError,
    InsufficientClassesError,
    InsufficientSamplesError,
    InvalidCountError,
    TooFewClassesError,
)


@dataclass
class LabeledDataset:
    xs: np.ndarray  # (n, input_dim)
    ys: np.ndarray  # (n,) int64 labels in [0, class_count)
    class_count: int
    input_dim: int

    def __post_init__(self) -> None:
        self.xs = np.asarray(self.xs, dtype=np.float64)
        self.ys = np.asarray(self.ys, dtype=np.int64)
        if self.xs.ndim != 2 or self.xs.shape[1] != self.input_dim:
            raise InvalidCountError(f"xs shape {self.xs.shape} vs input_dim {self.input_dim}")
        if self.xs.shape[0] != self.ys.shape[0]:
            raise InvalidCountError("xs and ys length mismatch")
        if self.xs.shape[0] == 0:
            raise EmptyDatasetError("dataset has no samples")
        counts = np.bincount(self.ys, minlength=self.class_count)
        if self.ys.min() < 0 or self.ys.max() >= self.class_count:
            raise InvalidCountError("labels out of range")
        if (counts == 0).any():
            raise InvalidCountError("every declared class needs at least one sample")

    @property
    def sample_count(self) -> int:
        return self.xs.shape[0]

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.ys == c)


def gen_gaussian_dataset(
    class_count: int,
    samples_per_class: int,
    input_dim: int,
    cluster_spread: float,
    seed: int,
    center_scale: float = 1.0,
    subspace_dim: int | None = None,
    subspace_seed: int | None = None,
) -> LabeledDataset:
    """Isotropic Gaussian clusters around seeded random centers.

    By default centers are standard-normal in the full input space. With
    ``subspace_dim`` set, centers are drawn inside a random
    ``subspace_dim``-dimensional linear subspace (orthonormal basis seeded by
    ``subspace_seed``, so several datasets can share it) while the per-sample
    noise stays isotropic in the full space; the remaining directions then
    carry noise but no class signal.
    """
    if class_count < 1 or samples_per_class < 1 or input_dim < 1:
        raise InvalidCountError("counts must be >= 1")
    if cluster_spread <= 0:
        raise InvalidCountError("cluster_spread must be > 0")
    if subspace_dim is not None and not 1 <= subspace_dim <= input_dim:
        raise InvalidCountError(f"subspace_dim must be in [1, {input_dim}]")
    rng = np.random.default_rng(seed)
    if subspace_dim is None:
        centers = rng.normal(0.0, center_scale, size=(class_count, input_dim))
    else:
        basis_rng = np.random.default_rng(seed if subspace_seed is None else subspace_seed)
        raw = basis_rng.standard_normal((input_dim, subspace_dim))
        basis, _ = np.linalg.qr(raw)
        coords = rng.normal(0.0, center_scale, size=(class_count, subspace_dim))
        centers = coords @ basis.T
    xs = np.empty((class_count * samples_per_class, input_dim))
    ys = np.empty(class_count * samples_per_class, dtype=np.int64)
    for c in range(class_count):
        sl = slice(c * samples_per_class, (c + 1) * samples_per_class)
        xs[sl] = centers[c] + cluster_spread * rng.standard_normal((samples_per_class, input_dim))
        ys[sl] = c
    return LabeledDataset(xs=xs, ys=ys, class_count=class_count, input_dim=input_dim)


def partition_per_class(data: LabeledDataset, first_per_class: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Split per class: the first ``first_per_class`` samples vs the rest."""
    first_idx, second_idx = [], []
    for c in range(data.class_count):
        idx = data.class_indices(c)
        if len(idx) <= first_per_class:
            raise InsufficientSamplesError(
                f"class {c} has {len(idx)} samples, cannot keep {first_per_class} + rest"
            )
        first_idx.append(idx[:first_per_class])
        second_idx.append(idx[first_per_class:])
    fi = np.concatenate(first_idx)
    si = np.concatenate(second_idx)
    return (
        LabeledDataset(data.xs[fi], data.ys[fi], data.class_count, data.input_dim),
        LabeledDataset(data.xs[si], data.ys[si], data.class_count, data.input_dim),
    )


@dataclass
class SiBlurryConfig:
    m: float = 0.5  # disjoint class ratio
    n: float = 0.1  # blurry sample ratio
    task_count: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.m <= 1.0:
            raise InvalidCountError(f"m must be in [0, 1], got {self.m}")
        if not 0.0 <= self.n <= 1.0:
            raise InvalidCountError(f"n must be in [0, 1], got {self.n}")
        if self.task_count < 1:
            raise InvalidCountError(f"task_count must be >= 1, got {self.task_count}")


@dataclass
class StreamBatch:
    xs: np.ndarray
    ys: np.ndarray
    indices: np.ndarray  # positions in the source dataset


@dataclass
class StreamTask:
    task_id: int
    batches: list[StreamBatch]


@dataclass
class TaskStream:
    tasks: list[StreamTask]
    disjoint_classes: np.ndarray
    blurry_classes: np.ndarray
    task_labels: list[np.ndarray]  # realized label set per task
    source_size: int

    @property
    def sample_count(self) -> int:
        return sum(len(b.ys) for t in self.tasks for b in t.batches)

    @property
    def all_labels(self) -> np.ndarray:
        if not self.task_labels:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.concatenate(self.task_labels))

    def manifest(self) -> str:
        """One line per sample: ``task_id batch_id class_id sample_index``."""
        lines = []
        for task in self.tasks:
            for b_id, batch in enumerate(task.batches):
                for y, idx in zip(batch.ys, batch.indices):
                    lines.append(f"{task.task_id} {b_id} {y} {idx}")
        return "\n".join(lines) + "\n"


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _apportion(total: int, weights: np.ndarray, min_one: bool) -> np.ndarray:
    """Largest-remainder apportionment of ``total`` slots by weight."""
    t = len(weights)
    base = np.ones(t, dtype=np.int64) if min_one else np.zeros(t, dtype=np.int64)
    rest = total - base.sum()
    quota = rest * weights
    counts = np.floor(quota).astype(np.int64)
    leftover = rest - counts.sum()
    order = np.argsort(-(quota - counts), kind="stable")
    counts[order[:leftover]] += 1
    return base + counts


def make_siblurry_stream(
    data: LabeledDataset, cfg: SiBlurryConfig, batch_size: int
) -> TaskStream:
    """Construct the blurry-boundary online stream.

    ``round(m * |Y|)`` classes form the disjoint pool, partitioned
    non-uniformly over tasks (seeded random weights, every task gets at
    least one disjoint class whenever there are enough); each remaining
    blurry class keeps ``round((1-n) * count)`` samples in a random home
    task and spreads the rest uniformly over the other tasks. Task samples
    are shuffled and chunked into batches; the final partial batch is kept.
    """
    if batch_size < 1:
        raise InvalidCountError("batch_size must be >= 1")
    if data.sample_count == 0:
        raise EmptyDatasetError("empty source dataset")
    n_classes = data.class_count
    t_count = cfg.task_count
    if cfg.m > 0 and n_classes < t_count:
        raise TooFewClassesError(
            f"{n_classes} classes cannot cover {t_count} tasks with m > 0"
        )
    rng = np.random.default_rng(cfg.seed)

    perm = rng.permutation(n_classes)
    n_disjoint = _round_half_up(cfg.m * n_classes)
    disjoint = np.sort(perm[:n_disjoint])
    blurry = np.sort(perm[n_disjoint:])

    weights = rng.random(t_count)
    weights = weights / weights.sum()

    task_samples: list[list[np.ndarray]] = [[] for _ in range(t_count)]

    if n_disjoint > 0:
        order = rng.permutation(disjoint)
        if n_disjoint >= t_count:
            counts = _apportion(n_disjoint, weights, min_one=True)
        else:
            counts = np.zeros(t_count, dtype=np.int64)
            chosen = rng.choice(t_count, size=n_disjoint, replace=False)
            counts[chosen] = 1
        pos = 0
        for t in range(t_count):
            for c in order[pos : pos + counts[t]]:
                task_samples[t].append(data.class_indices(c))
            pos += counts[t]

    for c in blurry:
        idx = rng.permutation(data.class_indices(c))
        home = int(rng.integers(t_count))
        keep = _round_half_up((1.0 - cfg.n) * len(idx))
        task_samples[home].append(idx[:keep])
        rest = idx[keep:]
        if len(rest) > 0:
            if t_count == 1:
                task_samples[home].append(rest)
            else:
                others = np.array([t for t in range(t_count) if t != home])
                targets = others[rng.integers(len(others), size=len(rest))]
                for t in range(t_count):
                    picked = rest[targets == t]
                    if len(picked) > 0:
                        task_samples[t].append(picked)

    tasks = []
    task_labels = []
    for t in range(t_count):
        if task_samples[t]:
            idx = np.concatenate(task_samples[t])
        else:
            idx = np.empty(0, dtype=np.int64)
        rng.shuffle(idx)
        batches = [
            StreamBatch(
                xs=data.xs[idx[i : i + batch_size]],
                ys=data.ys[idx[i : i + batch_size]],
                indices=idx[i : i + batch_size],
            )
            for i in range(0, len(idx), batch_size)
        ]
        tasks.append(StreamTask(task_id=t, batches=batches))
        task_labels.append(np.unique(data.ys[idx]))

    return TaskStream(
        tasks=tasks,
        disjoint_classes=disjoint,
        blurry_classes=blurry,
        task_labels=task_labels,
        source_size=data.sample_count,
    )


@dataclass
class PseudoSequence:
    """A sampled episode: disjoint pseudo tasks plus a held-out joint set.

    Labels are remapped to local ids ``0..len(meta_classes)-1`` (position in
    ``meta_classes``) so a fresh head sized to the episode can be trained.
    """

    tasks: list[tuple[np.ndarray, np.ndarray]]  # (xs, local ys) per pseudo task
    joint_xs: np.ndarray
    joint_ys: np.ndarray
    meta_classes: np.ndarray  # original class ids, index = local id
    split_ratio: float
    task_classes: list[np.ndarray] = field(default_factory=list)  # local ids per task


def sample_pseudo_sequence(
    pre: LabeledDataset,
    class_count_meta: int,
    samples_per_class: int,
    gamma: float,
    t_prime: int,
    seed: int,
) -> PseudoSequence:
    """Sample an episode from the source dataset.

    Picks ``class_count_meta`` classes without replacement; per class,
    ``round(gamma * samples_per_class)`` samples go to the joint set and the
    rest to the sequential side, which is split over ``t_prime`` near-equal,
    label-disjoint pseudo tasks. The joint set mixes all classes and is
    pre-shuffled.
    """
    if not 0.0 < gamma < 1.0:
        raise InvalidCountError(f"gamma must be in (0, 1), got {gamma}")
    if t_prime < 1:
        raise InvalidCountError("t_prime must be >= 1")
    if t_prime > class_count_meta:
        raise InsufficientClassesError(
            f"t_prime {t_prime} exceeds class_count_meta {class_count_meta}"
        )
    if pre.class_count < class_count_meta:
        raise InsufficientClassesError(
            f"source has {pre.class_count} classes, need {class_count_meta}"
        )
    n_joint = _round_half_up(gamma * samples_per_class)
    n_seq = samples_per_class - n_joint
    if n_joint < 1 or n_seq < 1:
        raise InsufficientSamplesError(
            f"samples_per_class {samples_per_class} with gamma {gamma} leaves an empty split"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(pre.class_count, size=class_count_meta, replace=False)

    joint_parts_x, joint_parts_y = [], []
    seq_x: dict[int, np.ndarray] = {}
    for local, c in enumerate(chosen):
        idx = pre.class_indices(int(c))
        if len(idx) < samples_per_class:
            raise InsufficientSamplesError(
                f"class {c} has {len(idx)} samples, need {samples_per_class}"
            )
        picked = rng.choice(idx, size=samples_per_class, replace=False)
        joint_parts_x.append(pre.xs[picked[:n_joint]])
        joint_parts_y.append(np.full(n_joint, local, dtype=np.int64))
        seq_x[local] = pre.xs[picked[n_joint:]]

    class_order = rng.permutation(class_count_meta)
    base = class_count_meta // t_prime
    extra = class_count_meta % t_prime
    tasks = []
    task_classes = []
    pos = 0
    for t in range(t_prime):
        size = base + (1 if t < extra else 0)
        locals_t = class_order[pos : pos + size]
        pos += size
        xs = np.concatenate([seq_x[int(l)] for l in locals_t])
        ys = np.concatenate(
            [np.full(n_seq, int(l), dtype=np.int64) for l in locals_t]
        )
        order = rng.permutation(len(ys))
        tasks.append((xs[order], ys[order]))
        task_classes.append(np.sort(locals_t))

    joint_xs = np.concatenate(joint_parts_x)
    joint_ys = np.concatenate(joint_parts_y)
    order = rng.permutation(len(joint_ys))
    return PseudoSequence(
        tasks=tasks,
        joint_xs=joint_xs[order],
        joint_ys=joint_ys[order],
        meta_classes=np.asarray(chosen, dtype=np.int64),
        split_ratio=gamma,
        task_classes=task_classes,
    )
