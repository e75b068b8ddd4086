"""Scratch tuning harness (not part of the package)."""
import dataclasses, json, sys, tempfile, time
from pathlib import Path
import numpy as np

from mepolab import cli
from mepolab.cli import ExperimentConfig
from mepolab.net import load_model, flatten_backbone, fresh_head
from mepolab.mepo import MepoConfig, meta_epoch_sequence
from mepolab.evaluation import GapExperiment, MlpBatchLoss, measure_gaps
from mepolab.seeding import derive_seed


def probe_gap(backbone, pre, cfg, seed, n_probes=8, eta=0.05):
    """Mean sequential-vs-joint gap over sampled two-task probes."""
    gaps = []
    mcfg = dataclasses.replace(cfg.mepo, seed=derive_seed(seed, "probe"))
    for p in range(n_probes):
        seq = meta_epoch_sequence(pre, dataclasses.replace(mcfg, tasks_per_epoch=2), 1000 + p)
        m = backbone.copy()
        m.head = fresh_head(m.feature_dim, cfg.mepo.class_count_meta, derive_seed(seed, "probe-head", p))
        theta = flatten_backbone(m)
        xa, ya = seq.tasks[0]
        xb, yb = seq.tasks[1]
        la = MlpBatchLoss(m, xa, ya, np.unique(ya))
        lb = MlpBatchLoss(m, xb, yb, np.unique(yb))
        gaps.append(measure_gaps(GapExperiment(theta, la, lb, [eta]))[0])
    return float(np.mean(gaps))


def eval_config(cfg0, seeds=(1001, 1002, 1003, 1004, 1005), alphas=(0.3, 0.5, 0.7, 1.0), do_gap=True):
    rows = {}
    gaps = []
    for seed in seeds:
        cfg = dataclasses.replace(cfg0, seed=seed)
        out = Path(tempfile.mkdtemp())
        cli.stage_pretrain(cfg, out)
        cli.stage_refine(cfg, out)
        for rep in (False, True):
            c = dataclasses.replace(cfg, ablation=dataclasses.replace(cfg.ablation, meta_rep=rep))
            cli.stage_covref(c, out)
        cells = [(False, False, cfg.align.alpha), (True, False, cfg.align.alpha),
                 (False, True, cfg.align.alpha), (True, True, cfg.align.alpha)]
        for a in alphas:
            if a != cfg.align.alpha:
                cells.append((True, True, a))
        for rep, cov, alpha in cells:
            c = dataclasses.replace(
                cfg,
                ablation=dataclasses.replace(cfg.ablation, meta_rep=rep, meta_cov=cov),
                align=dataclasses.replace(cfg.align, alpha=alpha),
            )
            mp = cli.stage_gcl(c, out)
            m = json.loads(mp.read_text())
            rows.setdefault((rep, cov, alpha), []).append(m["a_auc"])
        if do_gap:
            pre = cli.pretrain_dataset(cfg)
            m0 = load_model(out / "backbone_pretrained.txt")
            m1 = load_model(out / "backbone_refined.txt")
            g0 = probe_gap(m0, pre, cfg, seed)
            g1 = probe_gap(m1, pre, cfg, seed)
            gaps.append((g0, g1))
    print(f"{'cell':>28}  mean_auc  per-seed")
    base = rows[(False, False, cfg0.align.alpha)]
    full = rows[(True, True, cfg0.align.alpha)]
    for key in sorted(rows):
        vals = rows[key]
        print(f"  rep={key[0]!s:5} cov={key[1]!s:5} a={key[2]:<4}  {np.mean(vals):.4f}  {[round(v,3) for v in vals]}")
    wins = sum(f > b for f, b in zip(full, base))
    print(f"criterion7: full>base in {wins}/5 seeds; "
          f"rep-only mean {np.mean(rows[(True, False, cfg0.align.alpha)]) - np.mean(base):+.4f} vs base, "
          f"cov-only mean {np.mean(rows[(False, True, cfg0.align.alpha)]) - np.mean(base):+.4f} vs base")
    a1 = np.mean(rows[(True, True, 1.0)])
    for a in (0.3, 0.5, 0.7):
        print(f"criterion9: alpha={a} mean {np.mean(rows[(True,True,a)]):.4f} vs alpha=1 {a1:.4f} -> {'OK' if np.mean(rows[(True,True,a)]) >= a1 else 'FAIL'}")
    if do_gap:
        w = sum(g1 <= g0 for g0, g1 in gaps)
        print(f"criterion8: refined gap <= unrefined in {w}/5 seeds; pairs={[(round(a,4), round(b,4)) for a,b in gaps]}")


if __name__ == "__main__":
    t0 = time.time()
    name = sys.argv[1] if len(sys.argv) > 1 else "base"
    cfg = ExperimentConfig()
    if name == "base":
        pass
    elif name == "fast":
        cfg = dataclasses.replace(
            cfg,
            gcl=dataclasses.replace(cfg.gcl, lr=2e-2),
            mepo=dataclasses.replace(cfg.mepo, eta_theta=1e-2),
        )
    print(f"== {name}")
    eval_config(cfg)
    print(f"({time.time()-t0:.0f}s)")
