"""Training objectives: both cross-entropies, the two orthogonality penalties,
and the two generative-replay losses.

Every function builds (part of) an autodiff graph and returns a scalar Tensor;
which parameters receive gradients is controlled entirely by which inputs are
grad-enabled tensors versus constants.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import gmm
from .featureio import read_archive, write_archive
from .rng import Rng

HEADS_MAGIC = b"STARHEAD"


class LossError(ValueError):
    pass


@dataclass
class ClassifierHeads:
    """One linear head per seen task; past heads stay frozen outside replay."""

    d_prime: int
    heads: dict = field(default_factory=dict)    # task -> (W (d', N), b (N,))
    classes: dict = field(default_factory=dict)  # task -> ordered class ids

    def add_task(self, task_id: int, class_ids) -> None:
        if task_id in self.heads:
            raise LossError(f"head for task {task_id} already exists")
        n = len(class_ids)
        # zero init: a fresh head yields uniform posteriors (loss = ln N)
        self.heads[task_id] = (np.zeros((self.d_prime, n), np.float32),
                               np.zeros(n, np.float32))
        self.classes[task_id] = list(class_ids)

    def task_ids(self):
        return sorted(self.heads)

    def all_classes(self):
        out = []
        for t in self.task_ids():
            out.extend(self.classes[t])
        return out


def _nll(log_probs: ad.Tensor, label_idx) -> ad.Tensor:
    b, c = log_probs.shape
    onehot = np.zeros((b, c), np.float32)
    for i, y in enumerate(label_idx):
        if not 0 <= y < c:
            raise LossError(f"label index {y} outside denominator set of size {c}")
        onehot[i, y] = 1.0
    picked = ad.rsum(ad.mul(log_probs, ad.constant(onehot)))
    return ad.scale(picked, -1.0 / b)


def ce_stage1(key_rows: ad.Tensor, z_batch, label_idx, tau: float) -> ad.Tensor:
    """Mean NLL of softmax(⟨z_i, w_c⟩ / tau) over the rows of ``key_rows``.

    ``label_idx`` are positions into the key rows (the denominator set).
    """
    z = z_batch if isinstance(z_batch, ad.Tensor) else ad.constant(z_batch)
    logits = ad.scale(ad.matmul(z, ad.transpose_last2(key_rows)), 1.0 / tau)
    return _nll(ad.log_softmax(logits), label_idx)


def head_logits(w: ad.Tensor, b: ad.Tensor, feats: ad.Tensor) -> ad.Tensor:
    return ad.add(ad.matmul(feats, w), b)


def ce_stage2(head_w, head_b, cls_features, label_idx) -> ad.Tensor:
    """Cross-entropy under the current task's head only."""
    feats = cls_features if isinstance(cls_features, ad.Tensor) else ad.constant(cls_features)
    return _nll(ad.log_softmax(head_logits(head_w, head_b, feats)), label_idx)


def _pair_penalty(cur, past, raw: bool) -> ad.Tensor:
    total = None
    for q in cur:
        qn = ad.l2_normalize(q)
        for pv in past:
            pn = ad.l2_normalize(ad.constant(pv))
            term = ad.dot(qn, pn)
            if not raw:
                term = ad.absolute(term)
            total = term if total is None else ad.add(total, term)
    return total


def ortho_first(current_prompts, past_prompts, raw: bool = False) -> ad.Tensor:
    """Sum over current x past pairs of |⟨p̂_{c'}, p̂_c⟩| (normalized prompts).

    ``raw=True`` switches to the unnormalized signed inner-product sum.
    """
    if not past_prompts or not current_prompts:
        return ad.constant(0.0)
    if raw:
        total = None
        for q in current_prompts:
            for pv in past_prompts:
                term = ad.dot(q, ad.constant(pv))
                total = term if total is None else ad.add(total, term)
        return total
    return _pair_penalty(current_prompts, past_prompts, raw=False)


def ortho_second(current_qs, past_qs, raw: bool = False) -> ad.Tensor:
    """Per-layer average of the pairwise penalty over second-level prompts."""
    if not past_qs or not current_qs:
        return ad.constant(0.0)
    L = current_qs[0].shape[0]
    total = None
    for q in current_qs:
        for pv in past_qs:
            if raw:
                term = ad.rsum(ad.mul(q, ad.constant(pv)))
            else:
                qn = ad.l2_normalize(ad.reshape(q, (L, -1)))
                pn = ad.l2_normalize(ad.constant(pv.reshape(L, -1)))
                term = ad.rsum(ad.absolute(ad.rsum(ad.mul(qn, pn), axis=-1)))
            total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / L)


def sample_replay_features(bank: dict, class_ids, n: int, rng: Rng):
    """n synthetic features per class from its fitted mixture; returns
    (features array, label positions into ``class_ids``)."""
    feats, labels = [], []
    for i, cid in enumerate(class_ids):
        if cid not in bank:
            raise LossError(f"no fitted mixture for seen class {cid}")
        feats.append(gmm.sample(bank[cid], n, rng.child(f"replay{cid}")))
        labels.extend([i] * n)
    return np.concatenate(feats, axis=0), labels


def gr_loss_first(key_rows: ad.Tensor, bank: dict, class_ids, n: int, tau: float,
                  rng: Rng) -> ad.Tensor:
    """First-stage replay loss: denominator spans all seen classes."""
    feats, labels = sample_replay_features(bank, class_ids, n, rng)
    return ce_stage1(key_rows, feats, labels, tau)


def gr_loss_second(head_params, class_counts, bank: dict, class_ids, n: int,
                   rng: Rng) -> ad.Tensor:
    """Second-stage replay loss over the concatenation of every task head.

    ``head_params``: ordered list of (W, b) tensors, one per seen task;
    ``class_counts`` gives each head's width so label positions line up.
    """
    if sum(class_counts) != len(class_ids):
        raise LossError("head widths do not cover the seen class set")
    feats, labels = sample_replay_features(bank, class_ids, n, rng)
    f = ad.constant(feats)
    logits = ad.concat([head_logits(w, b, f) for w, b in head_params], axis=-1)
    return _nll(ad.log_softmax(logits), labels)


def save_heads(path, heads: ClassifierHeads) -> None:
    arrays = {"d_prime": np.array([heads.d_prime], np.int64),
              "tasks": np.array(heads.task_ids(), np.int64)}
    for t in heads.task_ids():
        w, b = heads.heads[t]
        arrays[f"w{t}"] = w
        arrays[f"b{t}"] = b
        arrays[f"classes{t}"] = np.array(heads.classes[t], np.int64)
    write_archive(path, HEADS_MAGIC, arrays)


def load_heads(path) -> ClassifierHeads:
    arrays = read_archive(path, HEADS_MAGIC)
    heads = ClassifierHeads(d_prime=int(arrays["d_prime"][0]))
    for t in arrays["tasks"]:
        t = int(t)
        heads.heads[t] = (arrays[f"w{t}"], arrays[f"b{t}"])
        heads.classes[t] = [int(c) for c in arrays[f"classes{t}"]]
    return heads
