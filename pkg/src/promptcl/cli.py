"""Experiment entry point: config-driven runs, diagnostics, gradient checks,
and the ablation sweep.

Config files are flat ``key = value`` lines (``#`` comments allowed); a file
whose first non-blank character is ``{`` is parsed as JSON instead. Keys:

  scenario   num_tasks, classes_per_task, train_per_class, test_per_class,
             kind, separation, noise, scenario_seed, feature_path
  encoder    d, d_prime, L, heads, seq_len, tau, patch_dim
  training   preset (name) and/or E1, E2, lambda1, lambda2, lr1, lr2,
             M, n_replay, batch_size
  run        seeds (comma-separated), variant, out
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import losses as ls
from . import metrics as mt
from . import optim
from . import scenario as sc
from . import trainer as tr
from .encoders import EncoderConfig, build_stack, vit_forward
from .rng import Rng

DEFAULT_SEEDS = (1993, 1996, 1997)

ENCODER_KEYS = ("d", "d_prime", "L", "heads", "seq_len", "tau", "patch_dim")
SCENARIO_KEYS = ("num_tasks", "classes_per_task", "train_per_class",
                 "test_per_class", "kind", "separation", "noise",
                 "scenario_seed", "feature_path")
HP_KEYS = ("E1", "E2", "lambda1", "lambda2", "lr1", "lr2", "M",
           "n_replay", "batch_size")


class ConfigError(ValueError):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except (json.JSONDecodeError, ValueError):
        return text


def parse_config(path) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as f:
        raw = f.read()
    stripped = raw.lstrip()
    if stripped.startswith("{"):
        return json.loads(raw)
    out = {}
    for ln, line in enumerate(raw.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected key = value")
        key, val = (part.strip() for part in line.split("=", 1))
        out[key] = _parse_value(val)
    return out


@dataclass
class ExperimentConfig:
    scenario: sc.ScenarioSpec
    encoder: EncoderConfig
    hp: tr.Hyperparams
    seeds: tuple = DEFAULT_SEEDS
    variant: str | None = None
    out: str = "out"


def build_experiment(cfg: dict) -> ExperimentConfig:
    known = set(ENCODER_KEYS) | set(SCENARIO_KEYS) | set(HP_KEYS) | {
        "preset", "seeds", "variant", "out"}
    unknown = set(cfg) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    encoder = EncoderConfig(**{k: cfg[k] for k in ENCODER_KEYS if k in cfg})
    scen_kwargs = {k: cfg[k] for k in SCENARIO_KEYS if k in cfg}
    scen_kwargs["seed"] = scen_kwargs.pop("scenario_seed", 0)
    # raw inputs are sized for the encoder so samples run the full vision path
    if scen_kwargs.get("kind") != "feature-file":
        scen_kwargs["patches"] = encoder.patches
        scen_kwargs["patch_dim"] = encoder.patch_dim
    scenario = sc.ScenarioSpec(**scen_kwargs)
    hp = tr.preset(cfg.get("preset", "synthetic"))
    overrides = {k: cfg[k] for k in HP_KEYS if k in cfg}
    if overrides:
        hp = replace(hp, **overrides)
    seeds = cfg.get("seeds", list(DEFAULT_SEEDS))
    if isinstance(seeds, str):
        seeds = [int(s) for s in seeds.split(",") if s.strip()]
    if isinstance(seeds, int):
        seeds = [seeds]
    if not seeds:
        raise ConfigError("seeds must be nonempty")
    variant = tr.check_variant(cfg.get("variant"))
    return ExperimentConfig(scenario=scenario, encoder=encoder, hp=hp,
                            seeds=tuple(int(s) for s in seeds),
                            variant=variant, out=cfg.get("out", "out"))


@dataclass
class RunReport:
    variant: str | None
    per_seed: dict = field(default_factory=dict)      # seed -> AccuracyMatrix
    confusions: dict = field(default_factory=dict)    # seed -> confusion array
    precision_curves: dict = field(default_factory=dict)  # seed -> [per-task]
    faa_mean: float = 0.0
    faa_std: float = 0.0
    ff_mean: float | None = None
    ff_std: float | None = None
    paths: list = field(default_factory=list)


def _first_task_precision(state, stream, first_task):
    chosen = tr.selected_classes(state, first_task.test_x)
    return float(np.mean([state.books.task_of[c] == first_task.task_id
                          for c in chosen]))


def _confusion(state, stream):
    owner = dict(state.books.task_of)
    sels = [tr.selected_classes(state, task.test_x)
            for task in stream.tasks[:state.current_task + 1]]
    return mt.retrieval_confusion(owner, sels)


def run_experiment(config: ExperimentConfig, write=True,
                   checkpoint_last=False) -> RunReport:
    """Train every seed's permuted stream and aggregate metrics."""
    base = sc.generate_scenario(config.scenario)
    report = RunReport(variant=config.variant)
    for seed in config.seeds:
        stream = sc.permute_classes(base, seed) if len(base.tasks) > 1 else base
        state = tr.new_state(config.encoder, seed=seed, variant=config.variant,
                             feature_space=stream.feature_space)
        matrix = mt.AccuracyMatrix(len(stream.tasks))
        curve = []
        for task in stream.tasks:
            tr.train_task(state, task, config.hp, stream.class_names)
            for j in range(task.task_id + 1):
                matrix.record(task.task_id, j, tr.evaluate(state, stream.tasks[j]))
            curve.append(_first_task_precision(state, stream, stream.tasks[0]))
        report.per_seed[seed] = matrix
        report.confusions[seed] = _confusion(state, stream)
        report.precision_curves[seed] = curve
        if checkpoint_last:
            tr.save_checkpoint(state, os.path.join(config.out, f"ckpt_seed{seed}"))
    faas = [mt.faa(report.per_seed[s]) for s in sorted(report.per_seed)]
    report.faa_mean = float(np.mean(faas))
    report.faa_std = float(np.std(faas))
    if len(base.tasks) > 1:
        ffs = [mt.final_forgetting(report.per_seed[s]) for s in sorted(report.per_seed)]
        report.ff_mean = float(np.mean(ffs))
        report.ff_std = float(np.std(ffs))
    if write:
        extras = {"variant": config.variant or "full",
                  "task1_precision": {str(s): report.precision_curves[s]
                                      for s in sorted(report.precision_curves)}}
        report.paths = mt.report(config.out, report.per_seed,
                                 confusions=report.confusions, extras=extras)
    return report


# ---------------------------------------------------------------------------
# gradient verification suite


def _random_graph_check(seed: int) -> float:
    """One randomized composite graph; returns the max relative error."""
    rng = Rng(seed)
    n = int(rng.integers(2, 5))
    m = int(rng.integers(2, 5))
    params = {
        "a": rng.normal((n, m), dtype=np.float64),
        "b": rng.normal((m, n), dtype=np.float64),
        "c": rng.normal((n,), dtype=np.float64),
    }
    ops = int(rng.integers(0, 4))

    def fn(p):
        h = ad.matmul(p["a"], p["b"])
        h = ad.gelu(h)
        if ops == 0:
            h = ad.layer_norm(h)
        elif ops == 1:
            h = ad.softmax(h)
        elif ops == 2:
            h = ad.add(h, ad.reshape(p["c"], (n, 1)))
        else:
            h = ad.mul(h, h)
        v = ad.matmul(h, ad.reshape(ad.l2_normalize(p["c"]), (n, 1)))
        return ad.mean(ad.log(ad.add(ad.exp(v), ad.constant(np.float64(1.0)))))

    rep = optim.grad_check(fn, params, tol=1e-4, h=1e-5)
    return rep.max_rel_err


def _stage2_loss_check() -> float:
    """FD-check the full second-stage loss through a 2-block mini ViT."""
    cfg = EncoderConfig(d=8, d_prime=16, L=2, heads=2, seq_len=4, patch_dim=4)
    stack = build_stack(cfg, 11)
    rng = Rng(12)
    x = rng.normal((3, cfg.patches, cfg.patch_dim), dtype=np.float64)
    labels = [0, 1, 0]
    params = {
        "Q": rng.normal((cfg.L, cfg.d_prime), std=0.1, dtype=np.float64),
        "w": rng.normal((cfg.d_prime, 2), std=0.1, dtype=np.float64),
        "b": np.zeros(2, np.float64),
    }
    past_q = rng.normal((cfg.L, cfg.d_prime), dtype=np.float64)

    def fn(p):
        res = ad.scale(p["Q"], 0.7)  # fixed confidence weight
        feats = [vit_forward(stack, x[i], residuals=res) for i in range(3)]
        feats = ad.stack(feats, axis=0)
        loss = ls.ce_stage2(p["w"], p["b"], feats, labels)
        return ad.add(loss, ad.scale(ls.ortho_second([p["Q"]], [past_q]), 0.5))

    rep = optim.grad_check(fn, params, tol=1e-3, h=1e-5)
    return rep.max_rel_err


def gradcheck_suite(n_graphs: int = 100, verbose: bool = False):
    """Reverse-mode vs central differences; returns (worst graph err, stage-2 err)."""
    worst = 0.0
    for i in range(n_graphs):
        err = _random_graph_check(1000 + i)
        worst = max(worst, err)
        if verbose and (i + 1) % 25 == 0:
            print(f"  {i + 1}/{n_graphs} graphs, max rel err {worst:.3g}")
    stage2 = _stage2_loss_check()
    return worst, stage2


# ---------------------------------------------------------------------------
# subcommands


def _cmd_run(args) -> int:
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg["seeds"] = [args.seed]
    if args.out:
        cfg["out"] = args.out
    if args.variant:
        cfg["variant"] = args.variant
    if args.preset:
        cfg["preset"] = args.preset
    config = build_experiment(cfg)
    report = run_experiment(config, checkpoint_last=args.checkpoint)
    ff = "" if report.ff_mean is None else f"  FF {report.ff_mean:.4f} ± {report.ff_std:.4f}"
    print(f"[{report.variant or 'full'}] FAA {report.faa_mean:.4f} ± {report.faa_std:.4f}{ff}")
    for path in report.paths:
        print("wrote", path)
    return 0


def _cmd_ablate(args) -> int:
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg["seeds"] = [args.seed]
    if args.out:
        cfg["out"] = args.out
    if args.preset:
        cfg["preset"] = args.preset
    base = build_experiment(cfg)
    rows = []
    for variant in (None,) + tr.VARIANTS:
        name = variant or "full"
        config = replace(base, variant=variant,
                         out=os.path.join(base.out, name))
        report = run_experiment(config)
        rows.append((name, report.faa_mean, report.faa_std,
                     report.ff_mean, report.ff_std))
        print(f"[{name}] FAA {report.faa_mean:.4f} ± {report.faa_std:.4f}")
    os.makedirs(base.out, exist_ok=True)
    path = os.path.join(base.out, "ablation.csv")
    with open(path, "w") as f:
        f.write("variant,faa_mean,faa_std,ff_mean,ff_std\n")
        for name, fm, fs, gm, gs in rows:
            gm = "" if gm is None else f"{gm:.6f}"
            gs = "" if gs is None else f"{gs:.6f}"
            f.write(f"{name},{fm:.6f},{fs:.6f},{gm},{gs}\n")
    print("wrote", path)
    return 0


def _regroup_for_state(state, stream):
    """Rebuild the stream with the checkpoint's class-to-task grouping."""
    by_class = {}
    for task in stream.tasks:
        for cid in set(task.test_y.tolist()):
            by_class[cid] = task.test_x[task.test_y == cid]
    tasks = []
    for t in sorted(state.task_classes):
        cids = state.task_classes[t]
        missing = [c for c in cids if c not in by_class]
        if missing:
            raise ConfigError(f"stream lacks test samples for classes {missing}")
        te_x = np.concatenate([by_class[c] for c in cids])
        te_y = np.concatenate([np.full(len(by_class[c]), c, np.int64) for c in cids])
        tasks.append(sc.Task(task_id=t, class_ids=list(cids),
                             train_x=te_x[:0], train_y=te_y[:0],
                             test_x=te_x, test_y=te_y))
    return sc.TaskStream(tasks=tasks, class_names=dict(stream.class_names),
                         feature_space=stream.feature_space)


def _cmd_diag(args) -> int:
    state = tr.load_checkpoint(args.checkpoint)
    cfg = parse_config(args.stream)
    config = build_experiment(cfg)
    stream = _regroup_for_state(state, sc.generate_scenario(config.scenario))
    if len(stream.tasks) < state.current_task + 1:
        raise ConfigError("stream has fewer tasks than the checkpoint trained")
    C = _confusion(state, stream)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "confusion.csv")
    header = "query_task," + ",".join(f"task_{j}" for j in range(C.shape[1]))
    with open(path, "w") as f:
        f.write(header + "\n")
        for i in range(C.shape[0]):
            f.write(",".join([str(i)] + [f"{v:.6f}" for v in C[i]]) + "\n")
    print("wrote", path)
    print("diagonal mass:", " ".join(f"{C[i, i]:.3f}" for i in range(C.shape[0])))
    return 0


def _cmd_gradcheck(args) -> int:
    worst, stage2 = gradcheck_suite(n_graphs=args.graphs, verbose=True)
    ok = worst < 1e-4 and stage2 < 1e-3
    print(f"composite graphs: max rel err {worst:.3g} (tol 1e-4)")
    print(f"stage-2 loss:     max rel err {stage2:.3g} (tol 1e-3)")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="promptcl",
        description="Continual prompt-learning experiments on frozen mini-transformers.")
    sub = parser.add_subparsers(dest="command")

    p_run = sub.add_parser("run", help="run a full multi-seed experiment")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--variant", default=None)
    p_run.add_argument("--preset", default=None)
    p_run.add_argument("--checkpoint", action="store_true",
                       help="save a checkpoint per seed after the last task")

    p_diag = sub.add_parser("diag", help="retrieval confusion for a checkpoint")
    p_diag.add_argument("checkpoint")
    p_diag.add_argument("stream", help="scenario config file")
    p_diag.add_argument("--out", default=None)

    p_grad = sub.add_parser("gradcheck", help="verify gradients against finite differences")
    p_grad.add_argument("--graphs", type=int, default=100)

    p_abl = sub.add_parser("ablate", help="run the full method plus every variant")
    p_abl.add_argument("config")
    p_abl.add_argument("--seed", type=int, default=None)
    p_abl.add_argument("--out", default=None)
    p_abl.add_argument("--preset", default=None)

    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    handlers = {"run": _cmd_run, "diag": _cmd_diag,
                "gradcheck": _cmd_gradcheck, "ablate": _cmd_ablate}
    try:
        return handlers[args.command](args)
    except (ConfigError, sc.ScenarioError, tr.TrainerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
