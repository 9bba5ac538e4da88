"""Two-stage continual training over a frozen transformer stack.

Per task: (1) fit first-level prompts against class-prototype keys, fit
per-class feature mixtures, rehearse the keys on synthetic features;
(2) fit second-level residual prompts, query weights, and a fresh linear
head, fit mixtures on the conditioned CLS features, rehearse every head.
Task identity is never used at prediction time.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import gmm
from . import losses as ls
from . import optim
from . import prompts as pr
from .encoders import (EncoderConfig, FrozenStack, build_stack, class_name_embed,
                       embed_tokens, lift_features, vision_encode, vit_forward)
from .rng import Rng
from .scenario import Task, TaskStream

VARIANTS = ("first_level_only", "no_first_level", "prefix_tuning",
            "no_replay", "unimodal", "no_conf_mod")

PREFIX_TOKENS = 5


class TrainerError(ValueError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    E1: int
    E2: int
    lambda1: float
    lambda2: float
    lr1: float
    lr2: float
    M: int
    n_replay: int
    batch_size: int

    def __post_init__(self):
        for name in ("E1", "E2", "M", "n_replay", "batch_size"):
            if getattr(self, name) < 1:
                raise TrainerError(f"{name} must be positive")
        for name in ("lambda1", "lambda2", "lr1", "lr2"):
            if getattr(self, name) <= 0:
                raise TrainerError(f"{name} must be positive")


# per-dataset settings from the published supplementary tables, plus a
# desk-scale "synthetic" preset for the bundled scenarios
PRESETS = {
    "imagenet_r":   Hyperparams(50, 10, 30.0, 30.0, 0.05, 0.001, 5, 256, 16),
    "cifar100":     Hyperparams(20, 10, 10.0, 30.0, 0.05, 0.010, 5, 256, 128),
    "cars196":      Hyperparams(50, 10, 30.0, 30.0, 0.05, 0.001, 5, 256, 128),
    "cub200":       Hyperparams(50, 50, 30.0, 10.0, 0.001, 0.001, 5, 256, 128),
    "eurosat":      Hyperparams(5, 5, 30.0, 5.0, 0.05, 0.100, 5, 256, 128),
    "resisc":       Hyperparams(30, 30, 10.0, 5.0, 0.05, 0.100, 5, 256, 128),
    "cropdiseases": Hyperparams(5, 5, 30.0, 2.0, 0.01, 0.010, 5, 256, 128),
    "isic":         Hyperparams(30, 30, 5.0, 10.0, 0.01, 0.010, 5, 256, 128),
    "chestx":       Hyperparams(30, 30, 30.0, 5.0, 0.05, 0.050, 5, 256, 128),
    "synthetic":    Hyperparams(20, 25, 0.5, 0.5, 0.05, 0.002, 2, 64, 16),
}


def preset(name: str) -> Hyperparams:
    if name not in PRESETS:
        raise TrainerError(f"unknown preset '{name}' (have: {', '.join(sorted(PRESETS))})")
    return PRESETS[name]


def check_variant(variant) -> str | None:
    """Accept a single variant name, None, or a flag dict with at most one set."""
    if isinstance(variant, dict):
        on = [k for k, v in variant.items() if v]
        if len(on) > 1:
            raise TrainerError(f"conflicting variant flags: {sorted(on)}")
        variant = on[0] if on else None
    if variant is not None and variant not in VARIANTS:
        raise TrainerError(f"unknown variant '{variant}'")
    return variant


@dataclass
class TrainerState:
    stack: FrozenStack
    books: pr.Codebooks
    keys: pr.PrototypeKeys
    heads: ls.ClassifierHeads
    bank1: dict = field(default_factory=dict)   # class -> MoG over E_vis features
    bank2: dict = field(default_factory=dict)   # class -> MoG over CLS features
    class_names: dict = field(default_factory=dict)
    class_embeds: dict = field(default_factory=dict)
    task_classes: dict = field(default_factory=dict)  # task -> ordered class ids
    current_task: int = -1
    seed: int = 0
    variant: str | None = None
    feature_space: bool = False
    rng: Rng | None = None


def new_state(config: EncoderConfig, seed: int, variant=None,
              feature_space: bool = False) -> TrainerState:
    variant = check_variant(variant)
    stack = build_stack(config, seed)
    prefix = PREFIX_TOKENS if variant == "prefix_tuning" else 0
    books = pr.Codebooks(d=config.d, L=config.L, d_prime=config.d_prime,
                         prefix_tokens=prefix)
    return TrainerState(stack=stack, books=books, keys=pr.PrototypeKeys(),
                        heads=ls.ClassifierHeads(d_prime=config.d_prime),
                        seed=seed, variant=variant, feature_space=feature_space,
                        rng=Rng(seed).child("trainer"))


def _raw_inputs(state: TrainerState, x) -> np.ndarray:
    """Map stream samples to token grids (features are lifted first)."""
    if state.feature_space:
        return lift_features(state.stack, x)
    return np.asarray(x, np.float32)


def _register_names(state: TrainerState, task: Task, names: dict | None):
    for cid in task.class_ids:
        name = (names or {}).get(cid, f"class_{cid:03d}")
        state.class_names[cid] = name
        state.class_embeds[cid] = class_name_embed(name, state.stack.config)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


_HANDCRAFTED_CONTEXT = None


def _handcrafted_context(d: int) -> np.ndarray:
    # fixed surrogate for a hand-written textual context, shared by all classes
    global _HANDCRAFTED_CONTEXT
    if _HANDCRAFTED_CONTEXT is None or _HANDCRAFTED_CONTEXT.shape != (d,):
        _HANDCRAFTED_CONTEXT = Rng(0).child("handcrafted-context").normal(
            (d,), std=pr.PROMPT_INIT_STD)
    return _HANDCRAFTED_CONTEXT


def _fit_bank(bank, feats, labels, class_ids, m, seed_rng, tag):
    for cid in class_ids:
        pts = feats[labels == cid].astype(np.float64)
        cfg = gmm.EMConfig(m=min(m, len(pts)),
                           seed=int(seed_rng.child((tag, cid)).integers(0, 2**31)))
        bank[cid] = gmm.fit_em(pts, cfg)


def _stage1(state: TrainerState, task: Task, hp: Hyperparams, z_train, rng):
    """Fit first-level prompts of the current classes (keys vs. E_vis query)."""
    books, stack, cfg = state.books, state.stack, state.stack.config
    cids = list(task.class_ids)
    pos = {cid: i for i, cid in enumerate(cids)}
    labels_all = np.array([pos[int(y)] for y in task.train_y])
    past = [books.p[c] for c in books.class_ids if not books.trainable[c]]
    adam = optim.AdamState(lr=hp.lr1)
    for _ in range(hp.E1):
        for idx in _batches(len(z_train), hp.batch_size, rng.child(("s1", adam.step_count))):
            p_t = {cid: ad.Tensor(books.p[cid], requires_grad=True) for cid in cids}
            rows = [pr.key_tensor(books, stack, state.class_embeds, cid, p_t[cid])
                    for cid in cids]
            key_rows = ad.stack(rows, axis=0)
            loss = ls.ce_stage1(key_rows, z_train[idx], labels_all[idx], cfg.tau)
            if past:
                loss = ad.add(loss, ad.scale(
                    ls.ortho_first(list(p_t.values()), past), hp.lambda1))
            loss.backward()
            optim.adam_step(adam, {f"p{c}": books.p[c] for c in cids},
                            {f"p{c}": p_t[c].grad for c in cids})


def _stage1_replay(state: TrainerState, task: Task, hp: Hyperparams, rng):
    books, stack, cfg = state.books, state.stack, state.stack.config
    cids = list(task.class_ids)
    all_cids = sorted(books.class_ids)
    adam = optim.AdamState(lr=hp.lr1)
    for ep in range(hp.E2):
        p_t = {cid: ad.Tensor(books.p[cid], requires_grad=True) for cid in cids}
        rows = []
        for cid in all_cids:
            if cid in p_t:
                rows.append(pr.key_tensor(books, stack, state.class_embeds,
                                          cid, p_t[cid]))
            else:
                rows.append(ad.constant(state.keys.keys[cid]))
        key_rows = ad.stack(rows, axis=0)
        loss = ls.gr_loss_first(key_rows, state.bank1, all_cids, hp.n_replay,
                                cfg.tau, rng.child(("gr1", ep)))
        loss.backward()
        optim.adam_step(adam, {f"p{c}": books.p[c] for c in cids},
                        {f"p{c}": p_t[c].grad for c in cids})


def _conditioned_cls(state: TrainerState, tokens, selections, q_tensors=None,
                     a_tensors=None, z_batch=None):
    """CLS features with the selected class's conditioning, batched.

    ``q_tensors``/``a_tensors`` (class -> Tensor leaf) make the result
    differentiable w.r.t. the current task's prompts.
    """
    books = state.books
    per_sample = []
    for i, sel in enumerate(selections):
        cid = sel.class_id
        q = (q_tensors or {}).get(cid, None)
        if q is None:
            q = ad.constant(books.Q[cid])
        if books.prefix_tokens:
            per_sample.append(pr.prefix_tuning_condition(books, sel, q))
            continue
        if state.variant == "no_conf_mod":
            per_sample.append(pr.build_residual(q, 1.0, no_confidence_modulation=True))
            continue
        a = (a_tensors or {}).get(cid, None)
        if a is not None and z_batch is not None:
            sim = pr.weighted_similarity(z_batch[i], a, state.keys.keys[cid])
        else:
            sim = sel.sim
        per_sample.append(pr.build_residual(q, sim))
    cond = ad.stack(per_sample, axis=0)
    if books.prefix_tokens:
        return vit_forward(state.stack, tokens=tokens, prefix=cond)
    return vit_forward(state.stack, tokens=tokens, residuals=cond)


def _select_batch(state: TrainerState, z):
    return [pr.select(state.keys, z[i], state.books.A) for i in range(len(z))]


def _stage2(state: TrainerState, task: Task, hp: Hyperparams, tokens, z_train, rng):
    books = state.books
    cids = list(task.class_ids)
    pos = {cid: i for i, cid in enumerate(cids)}
    labels_all = np.array([pos[int(y)] for y in task.train_y])
    state.heads.add_task(task.task_id, cids)
    head_w, head_b = state.heads.heads[task.task_id]
    past_qs = [books.Q[c] for c in books.class_ids if not books.trainable[c]]
    adam = optim.AdamState(lr=hp.lr2)
    params = {f"Q{c}": books.Q[c] for c in cids}
    params.update({f"A{c}": books.A[c] for c in cids})
    params["head_w"] = head_w
    params["head_b"] = head_b
    for _ in range(hp.E1):
        for idx in _batches(len(tokens), hp.batch_size, rng.child(("s2", adam.step_count))):
            q_t = {c: ad.Tensor(books.Q[c], requires_grad=True) for c in cids}
            a_t = {c: ad.Tensor(books.A[c], requires_grad=True) for c in cids}
            w_t = ad.Tensor(head_w, requires_grad=True)
            b_t = ad.Tensor(head_b, requires_grad=True)
            z_b = z_train[idx]
            sels = _select_batch(state, z_b)
            feats = _conditioned_cls(state, tokens[idx], sels, q_t, a_t, z_b)
            loss = ls.ce_stage2(w_t, b_t, feats, labels_all[idx])
            if past_qs:
                loss = ad.add(loss, ad.scale(
                    ls.ortho_second(list(q_t.values()), past_qs), hp.lambda2))
            loss.backward()
            grads = {f"Q{c}": q_t[c].grad for c in cids}
            grads.update({f"A{c}": a_t[c].grad for c in cids})
            grads["head_w"] = w_t.grad
            grads["head_b"] = b_t.grad
            optim.adam_step(adam, params, grads)


def _stage2_replay(state: TrainerState, hp: Hyperparams, rng):
    adam = optim.AdamState(lr=hp.lr2)
    tasks = state.heads.task_ids()
    class_counts = [len(state.heads.classes[t]) for t in tasks]
    all_cids = state.heads.all_classes()
    for ep in range(hp.E2):
        tensors = []
        params, grads = {}, {}
        for t in tasks:
            w, b = state.heads.heads[t]
            wt = ad.Tensor(w, requires_grad=True)
            bt = ad.Tensor(b, requires_grad=True)
            tensors.append((wt, bt))
            params[f"w{t}"], params[f"b{t}"] = w, b
        loss = ls.gr_loss_second(tensors, class_counts, state.bank2, all_cids,
                                 hp.n_replay, rng.child(("gr2", ep)))
        loss.backward()
        for t, (wt, bt) in zip(tasks, tensors):
            grads[f"w{t}"], grads[f"b{t}"] = wt.grad, bt.grad
        optim.adam_step(adam, params, grads)


def train_task(state: TrainerState, task: Task, hp: Hyperparams,
               class_names: dict | None = None) -> TrainerState:
    """Run both training stages on one task and freeze its prompts."""
    if task.task_id != state.current_task + 1:
        raise TrainerError(
            f"task {task.task_id} out of order (expected {state.current_task + 1})")
    if len(task.train_y) == 0:
        raise TrainerError(f"task {task.task_id} has no training samples")
    hp = replace(hp, M=1) if state.variant == "unimodal" else hp
    rng = state.rng.child(("task", task.task_id))
    _register_names(state, task, class_names)
    pr.extend_codebooks(state.books, task.class_ids, rng.child("init"), task.task_id)
    state.task_classes[task.task_id] = list(task.class_ids)

    raw = _raw_inputs(state, task.train_x)
    z_train = vision_encode(state.stack, raw)
    tokens = embed_tokens(state.stack, raw)

    if state.variant == "no_first_level":
        # static hand-crafted key surrogate: fixed context token per class name
        ctx = _handcrafted_context(state.stack.config.d)
        for cid in task.class_ids:
            state.keys.keys[cid] = pr.key_tensor(
                state.books, state.stack, state.class_embeds, cid,
                ad.constant(ctx)).data.copy()
    else:
        _stage1(state, task, hp, z_train, rng.child("stage1"))
        if state.variant != "no_replay":
            _fit_bank(state.bank1, z_train, task.train_y, task.class_ids,
                      hp.M, rng, "mog1")
            _stage1_replay(state, task, hp, rng.child("replay1"))
        # cache keys of the (now final) current prompts
        state.keys = pr.compute_keys(state.books, state.stack, state.class_embeds)

    if state.variant != "first_level_only":
        _stage2(state, task, hp, tokens, z_train, rng.child("stage2"))
        if state.variant != "no_replay":
            sels = _select_batch(state, z_train)
            cls_feats = _conditioned_cls(state, tokens, sels).data
            _fit_bank(state.bank2, cls_feats, task.train_y, task.class_ids,
                      hp.M, rng, "mog2")
            _stage2_replay(state, hp, rng.child("replay2"))

    for cid in task.class_ids:
        state.books.trainable[cid] = False
    state.current_task = task.task_id
    return state


# ---------------------------------------------------------------------------
# inference


def predict_batch(state: TrainerState, x):
    """Task-agnostic prediction: (class ids, logits over all seen classes,
    selected key class per query)."""
    if state.current_task < 0:
        raise TrainerError("predict before any task was trained")
    raw = _raw_inputs(state, x)
    z = vision_encode(state.stack, raw)
    if z.ndim == 1:
        z = z[None]
        raw = raw[None]
    sels = _select_batch(state, z)
    chosen = [s.class_id for s in sels]
    if state.variant == "first_level_only":
        # classify straight from the key posteriors
        ids = state.keys.class_ids()
        logits = np.stack([s.sims for s in sels]) / state.stack.config.tau
        preds = [ids[int(i)] for i in np.argmax(logits, axis=1)]
        return preds, logits, chosen
    tokens = embed_tokens(state.stack, raw)
    feats = _conditioned_cls(state, tokens, sels).data
    cols = []
    for t in state.heads.task_ids():
        w, b = state.heads.heads[t]
        cols.append(feats @ w + b)
    logits = np.concatenate(cols, axis=1)
    all_cids = state.heads.all_classes()
    preds = [all_cids[int(i)] for i in np.argmax(logits, axis=1)]
    return preds, logits, chosen


def predict(state: TrainerState, x):
    preds, logits, _ = predict_batch(state, np.asarray(x, np.float32)[None])
    return preds[0], logits[0]


def evaluate(state: TrainerState, task: Task) -> float:
    preds, _, _ = predict_batch(state, task.test_x)
    return float(np.mean(np.asarray(preds) == task.test_y))


def selected_classes(state: TrainerState, x):
    _, _, chosen = predict_batch(state, x)
    return chosen


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(state: TrainerState, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    pr.save_codebooks(os.path.join(out_dir, "codebooks.bin"), state.books, state.keys)
    ls.save_heads(os.path.join(out_dir, "heads.bin"), state.heads)
    if state.bank1:
        gmm.save_bank(os.path.join(out_dir, "bank1.bin"), state.bank1)
    if state.bank2:
        gmm.save_bank(os.path.join(out_dir, "bank2.bin"), state.bank2)
    meta = {
        "seed": state.seed,
        "variant": state.variant,
        "current_task": state.current_task,
        "feature_space": state.feature_space,
        "class_names": {str(k): v for k, v in state.class_names.items()},
        "task_classes": {str(k): v for k, v in state.task_classes.items()},
        "encoder": {"d": state.stack.config.d, "d_prime": state.stack.config.d_prime,
                    "L": state.stack.config.L, "heads": state.stack.config.heads,
                    "seq_len": state.stack.config.seq_len, "tau": state.stack.config.tau,
                    "patch_dim": state.stack.config.patch_dim},
    }
    with open(os.path.join(out_dir, "trainer.json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(out_dir) -> TrainerState:
    with open(os.path.join(out_dir, "trainer.json")) as f:
        meta = json.load(f)
    config = EncoderConfig(**meta["encoder"])
    state = new_state(config, meta["seed"], meta["variant"],
                      feature_space=meta["feature_space"])
    state.books, state.keys = pr.load_codebooks(os.path.join(out_dir, "codebooks.bin"))
    state.heads = ls.load_heads(os.path.join(out_dir, "heads.bin"))
    for name, attr in (("bank1.bin", "bank1"), ("bank2.bin", "bank2")):
        path = os.path.join(out_dir, name)
        if os.path.exists(path):
            setattr(state, attr, gmm.load_bank(path))
    state.current_task = meta["current_task"]
    state.class_names = {int(k): v for k, v in meta["class_names"].items()}
    state.task_classes = {int(k): [int(c) for c in v]
                          for k, v in meta["task_classes"].items()}
    for cid, name in state.class_names.items():
        state.class_embeds[cid] = class_name_embed(name, config)
    return state
