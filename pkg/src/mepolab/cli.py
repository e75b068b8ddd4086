"""Experiment orchestration.

Subcommands: ``pretrain``, ``refine``, ``covref``, ``gcl``, ``theory``,
``sweep``, ``defaults``. Stages chain through text artifacts inside the
output directory:

    backbone_pretrained.txt      joint training on the source clusters
    backbone_refined.txt         after meta-refinement
    covref_pretrained.txt        reference statistics under either backbone
    covref_refined.txt
    metrics.json, evallog.csv    streaming-phase results
    stream_manifest.txt          one line per stream sample
    gap.csv, gap_summary.json    sequential-vs-joint gap probe

A single master seed fans out to per-stage streams by hashing the stage
name with the seed, so every stage is independently reproducible. Each
metrics JSON embeds the resolved config plus content hashes of the artifacts
it consumed. Exit code is 0 on success; failures print one JSON error line
on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .config import (
    ExperimentConfig,
    config_from_dict,
    config_hash,
    config_to_dict,
    load_config,
)
from .datastream import (
    LabeledDataset,
    SiBlurryConfig,
    gen_gaussian_dataset,
    make_siblurry_stream,
    partition_per_class,
)
from .errors import ConfigError, MissingArtifactError
from .evaluation import (
    GapExperiment,
    MlpBatchLoss,
    compute_auc,
    compute_forgetting,
    compute_last,
    theorem_gap,
)
from .mepo import (
    GclConfig,
    build_cov_ref,
    load_cov_ref,
    meta_refine,
    run_gcl,
    save_cov_ref,
)
from .net import (
    add_adapter,
    flatten_backbone,
    forward,
    fresh_head,
    init_model,
    load_model,
    make_optimizer,
    masked_ce_batch,
    optimizer_step,
    backward,
    save_model,
)
from .seeding import derive_seed

PRETRAINED = "backbone_pretrained.txt"
REFINED = "backbone_refined.txt"
COVREF_PRETRAINED = "covref_pretrained.txt"
COVREF_REFINED = "covref_refined.txt"


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"missing artifact: {path}")
    return path


def pretrain_dataset(cfg: ExperimentConfig) -> LabeledDataset:
    return gen_gaussian_dataset(
        class_count=cfg.data.pretrain_classes,
        samples_per_class=cfg.data.pretrain_samples_per_class,
        input_dim=cfg.data.input_dim,
        cluster_spread=cfg.data.pretrain_spread,
        seed=derive_seed(cfg.seed, "pretrain-data"),
        center_scale=cfg.data.center_scale,
    )


def downstream_datasets(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    total = cfg.data.downstream_train_per_class + cfg.data.downstream_test_per_class
    full = gen_gaussian_dataset(
        class_count=cfg.data.downstream_classes,
        samples_per_class=total,
        input_dim=cfg.data.input_dim,
        cluster_spread=cfg.data.downstream_spread,
        seed=derive_seed(cfg.seed, "downstream-data"),
        center_scale=cfg.data.center_scale,
    )
    return partition_per_class(full, cfg.data.downstream_train_per_class)


def _model_dims(cfg: ExperimentConfig) -> list[int]:
    return [cfg.data.input_dim] + list(cfg.model.hidden_dims) + [cfg.model.feature_dim]


def stage_pretrain(cfg: ExperimentConfig, out: Path) -> Path:
    """Joint training on the source clusters until the backbone is fit."""
    out.mkdir(parents=True, exist_ok=True)
    data = pretrain_dataset(cfg)
    model = init_model(
        _model_dims(cfg),
        class_count=cfg.data.pretrain_classes,
        seed=derive_seed(cfg.seed, "init"),
        activation=cfg.model.activation,
    )
    rng = np.random.default_rng(derive_seed(cfg.seed, "pretrain-train"))
    opt = make_optimizer(cfg.pretrain.optimizer, cfg.pretrain.lr)
    mask = np.arange(cfg.data.pretrain_classes)
    for _ in range(cfg.pretrain.epochs):
        order = rng.permutation(data.sample_count)
        for i in range(0, len(order), cfg.pretrain.batch_size):
            idx = order[i : i + cfg.pretrain.batch_size]
            _, logits, cache = forward(model, data.xs[idx])
            _, grad_logits = masked_ce_batch(logits, data.ys[idx], mask)
            grads = backward(model, cache, grad_logits)
            params = [p for layer in model.layers for p in (layer.weight, layer.bias)]
            params += [model.head.weight, model.head.bias]
            glist = [g for gl in grads.backbone for g in (gl.weight, gl.bias)]
            glist += [grads.head.weight, grads.head.bias]
            new = optimizer_step(opt, params, glist)
            for layer, w, b in zip(model.layers, new[0:-2:2], new[1:-2:2]):
                layer.weight, layer.bias = w, b
            model.head.weight, model.head.bias = new[-2], new[-1]
    path = out / PRETRAINED
    save_model(model, path)
    return path


def stage_refine(cfg: ExperimentConfig, out: Path) -> Path:
    """Meta-refinement of the pretrained backbone over pseudo sequences."""
    model = load_model(_require(out / PRETRAINED))
    data = pretrain_dataset(cfg)
    mcfg = dataclasses.replace(cfg.mepo, seed=derive_seed(cfg.seed, "refine"))
    result = meta_refine(model, data, mcfg)
    path = out / REFINED
    save_model(result.model, path)
    log_path = out / "refine_log.json"
    log_path.write_text(
        json.dumps({"joint_losses": result.joint_losses}, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    return path


def stage_covref(cfg: ExperimentConfig, out: Path) -> Path:
    """Reference statistics under the backbone selected by the flags."""
    name = REFINED if cfg.ablation.meta_rep else PRETRAINED
    model = load_model(_require(out / name))
    data = pretrain_dataset(cfg)
    ref = build_cov_ref(model, data, epsilon=cfg.covref.epsilon)
    path = out / (COVREF_REFINED if cfg.ablation.meta_rep else COVREF_PRETRAINED)
    save_cov_ref(ref, path)
    return path


def stage_gcl(cfg: ExperimentConfig, out: Path) -> Path:
    """One-pass streaming run; honors the two ablation flags."""
    backbone_name = REFINED if cfg.ablation.meta_rep else PRETRAINED
    backbone_path = _require(out / backbone_name)
    backbone = load_model(backbone_path)
    inputs = {backbone_name: _sha256_file(backbone_path)}

    ref = None
    if cfg.ablation.meta_cov:
        ref_name = COVREF_REFINED if cfg.ablation.meta_rep else COVREF_PRETRAINED
        ref_path = _require(out / ref_name)
        ref = load_cov_ref(ref_path)
        inputs[ref_name] = _sha256_file(ref_path)

    train, test = downstream_datasets(cfg)
    stream = make_siblurry_stream(
        train,
        SiBlurryConfig(
            m=cfg.stream.m,
            n=cfg.stream.n,
            task_count=cfg.stream.task_count,
            seed=derive_seed(cfg.seed, "stream"),
        ),
        batch_size=cfg.stream.batch_size,
    )
    (out / "stream_manifest.txt").write_text(stream.manifest(), encoding="ascii")

    model = add_adapter(backbone)
    model.head = fresh_head(
        model.feature_dim,
        cfg.data.downstream_classes,
        seed=derive_seed(cfg.seed, "gcl-head"),
    )
    run_cfg = GclConfig(
        lr=cfg.gcl.lr,
        optimizer=cfg.gcl.optimizer,
        mask_policy=cfg.gcl.mask_policy,
        eval_interval_batches=cfg.gcl.eval_interval_batches,
        align=cfg.align,
    )
    log, final = run_gcl(stream, model, ref, run_cfg, test.xs, test.ys)

    metrics = {
        "a_auc": compute_auc(log),
        "a_last": compute_last(final, test.xs, test.ys),
        "forgetting": compute_forgetting(log),
        "align_fallbacks": log.align_fallbacks,
        "seed": cfg.seed,
        "flags": {"meta_rep": cfg.ablation.meta_rep, "meta_cov": cfg.ablation.meta_cov},
        "alpha": cfg.align.alpha,
        "config_hash": config_hash(cfg),
        "config": config_to_dict(cfg),
        "inputs": inputs,
    }
    (out / "evallog.csv").write_text(log.to_csv(), encoding="ascii")
    path = out / "metrics.json"
    path.write_text(json.dumps(metrics, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def stage_theory(cfg: ExperimentConfig, out: Path) -> Path:
    """Gap probe on a seeded tiny-MLP loss pair across step-size decades."""
    out.mkdir(parents=True, exist_ok=True)
    seed = derive_seed(cfg.seed, "theory")
    model = init_model([3, 5, 4], class_count=6, seed=seed)
    data = gen_gaussian_dataset(
        class_count=6, samples_per_class=8, input_dim=3,
        cluster_spread=0.5, seed=derive_seed(seed, "data"),
    )
    half = data.sample_count // 2
    loss_a = MlpBatchLoss(model, data.xs[:half], data.ys[:half],
                          np.unique(data.ys[:half]))
    loss_b = MlpBatchLoss(model, data.xs[half:], data.ys[half:],
                          np.unique(data.ys[half:]))
    etas = [float(e) for e in np.logspace(-4, -1, 7)]
    result = theorem_gap(GapExperiment(flatten_backbone(model), loss_a, loss_b, etas))
    (out / "gap.csv").write_text(result.to_csv(), encoding="ascii")
    summary = {
        "slope": result.slope,
        "intercept": result.intercept,
        "seed": cfg.seed,
        "config_hash": config_hash(cfg),
    }
    path = out / "gap_summary.json"
    path.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def run_pipeline(cfg: ExperimentConfig, out: Path) -> Path:
    """pretrain -> refine -> covref -> gcl with the config's flags."""
    out.mkdir(parents=True, exist_ok=True)
    stage_pretrain(cfg, out)
    if cfg.ablation.meta_rep:
        stage_refine(cfg, out)
    stage_covref(cfg, out)
    return stage_gcl(cfg, out)


def run_sweep(cfg: ExperimentConfig, out: Path) -> Path:
    """Ablation grid (2x2) plus the alpha sweep, per seed.

    Per seed, all cells share the pretrained/refined backbones, both
    reference files, the downstream data, the stream, and the head init;
    cells differ only in flags and alpha.
    """
    out.mkdir(parents=True, exist_ok=True)
    cells: dict[str, list[float]] = {}
    for seed in cfg.sweep.seeds:
        seed_cfg = dataclasses.replace(cfg, seed=seed)
        seed_dir = out / f"seed_{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        stage_pretrain(seed_cfg, seed_dir)
        stage_refine(seed_cfg, seed_dir)
        for rep in (False, True):
            cov_cfg = dataclasses.replace(
                seed_cfg,
                ablation=dataclasses.replace(seed_cfg.ablation, meta_rep=rep, meta_cov=True),
            )
            stage_covref(cov_cfg, seed_dir)
        runs: list[tuple[bool, bool, float]] = [
            (False, False, cfg.align.alpha),
            (True, False, cfg.align.alpha),
            (False, True, cfg.align.alpha),
            (True, True, cfg.align.alpha),
        ]
        for alpha in cfg.sweep.alphas:
            if alpha != cfg.align.alpha:
                runs.append((True, True, alpha))
        for rep, cov, alpha in runs:
            cell_cfg = dataclasses.replace(
                seed_cfg,
                ablation=dataclasses.replace(seed_cfg.ablation, meta_rep=rep, meta_cov=cov),
                align=dataclasses.replace(seed_cfg.align, alpha=alpha),
            )
            cell_name = f"rep{int(rep)}_cov{int(cov)}_alpha{alpha:g}"
            cell_dir = seed_dir / cell_name
            cell_dir.mkdir(parents=True, exist_ok=True)
            # Cells reuse the seed-level artifacts.
            for name in (PRETRAINED, REFINED, COVREF_PRETRAINED, COVREF_REFINED):
                src = seed_dir / name
                if src.exists():
                    (cell_dir / name).write_bytes(src.read_bytes())
            metrics_path = stage_gcl(cell_cfg, cell_dir)
            metrics = json.loads(metrics_path.read_text(encoding="utf-8"))
            cells.setdefault(cell_name, []).append(metrics["a_auc"])
    summary = {
        name: {
            "mean_a_auc": float(np.mean(vals)),
            "std_a_auc": float(np.std(vals)),
            "per_seed": vals,
        }
        for name, vals in sorted(cells.items())
    }
    path = out / "summary.json"
    path.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def _parse_flag(value: str) -> bool:
    if value not in ("on", "off"):
        raise ConfigError(f"flag must be 'on' or 'off', got {value!r}")
    return value == "on"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mepolab",
        description="continual-learning pipeline: pretrain, refine, covref, gcl, theory",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("pretrain", "refine", "covref", "gcl", "theory", "sweep", "defaults"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None, help="JSON config path")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--out", type=str, default="runs/exp", help="output directory")
        p.add_argument("--meta-rep", type=str, default=None, choices=("on", "off"))
        p.add_argument("--meta-cov", type=str, default=None, choices=("on", "off"))
        p.add_argument("--alpha", type=float, default=None)
    return parser


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.meta_rep is not None:
        cfg = dataclasses.replace(
            cfg, ablation=dataclasses.replace(cfg.ablation, meta_rep=_parse_flag(args.meta_rep))
        )
    if args.meta_cov is not None:
        cfg = dataclasses.replace(
            cfg, ablation=dataclasses.replace(cfg.ablation, meta_cov=_parse_flag(args.meta_cov))
        )
    if args.alpha is not None:
        cfg = dataclasses.replace(cfg, align=dataclasses.replace(cfg.align, alpha=args.alpha))
    return cfg


STAGES = {
    "pretrain": stage_pretrain,
    "refine": stage_refine,
    "covref": stage_covref,
    "gcl": stage_gcl,
    "theory": stage_theory,
    "sweep": run_sweep,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if args.command == "defaults":
            print(json.dumps(config_to_dict(cfg), sort_keys=True, indent=2))
            return 0
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        path = STAGES[args.command](cfg, out)
        print(path)
        return 0
    except (ValueError, RuntimeError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
