"""Synthetic task streams and precomputed-feature ingestion.

Tasks carry disjoint class id sets; inputs are raw token grids
(patches x patch_dim) so every sample runs through the full vision path.
"""

from dataclasses import dataclass, field

import numpy as np

from . import featureio
from .rng import Rng

KINDS = ("separable-clusters", "bimodal-clusters", "feature-file")


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    num_tasks: int = 5
    classes_per_task: int = 4
    train_per_class: int = 20
    test_per_class: int = 10
    kind: str = "separable-clusters"
    separation: float = 3.0
    noise: float = 0.5
    seed: int = 0
    patches: int = 16
    patch_dim: int = 16
    feature_path: str | None = None

    def __post_init__(self):
        if self.num_tasks < 1 or self.classes_per_task < 1:
            raise ScenarioError("num_tasks and classes_per_task must be >= 1")
        if self.kind not in KINDS:
            raise ScenarioError(f"unknown generator kind {self.kind!r}")
        if self.kind == "feature-file" and not self.feature_path:
            raise ScenarioError("feature-file kind needs feature_path")


@dataclass
class Task:
    task_id: int
    class_ids: list
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


@dataclass
class TaskStream:
    tasks: list = field(default_factory=list)
    class_names: dict = field(default_factory=dict)
    feature_space: bool = False  # rows are flat features needing a lift

    def num_classes(self):
        return sum(len(t.class_ids) for t in self.tasks)


def _class_centers(rng, count, dim, separation):
    # random directions scaled to a common radius, pushed apart from origin
    dirs = rng.normal((count, dim), dtype=np.float64)
    dirs /= np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-12)
    return (dirs * separation).astype(np.float32)


def _sample_class(rng, center, n, noise, bimodal, separation):
    # ``noise`` is the expected perturbation norm, so it is directly
    # comparable to the separation scale regardless of dimensionality
    dim = center.shape[0]
    noise = noise / np.sqrt(dim)
    if not bimodal:
        return center + rng.normal((n, dim), std=noise)
    offset_dir = rng.normal((dim,), dtype=np.float64)
    offset_dir /= max(np.linalg.norm(offset_dir), 1e-12)
    offset = (offset_dir * 0.5 * separation).astype(np.float32)
    modes = rng.integers(0, 2, size=n).astype(np.float32)[:, None]
    sub = center + (2.0 * modes - 1.0) * offset
    return (sub + rng.normal((n, dim), std=noise)).astype(np.float32)


def _synthetic_stream(spec: ScenarioSpec) -> TaskStream:
    rng = Rng(spec.seed)
    dim = spec.patches * spec.patch_dim
    total = spec.num_tasks * spec.classes_per_task
    centers = _class_centers(rng.child("centers"), total, dim, spec.separation)
    bimodal = spec.kind == "bimodal-clusters"
    stream = TaskStream()
    for t in range(spec.num_tasks):
        cids = list(range(t * spec.classes_per_task, (t + 1) * spec.classes_per_task))
        tr_x, tr_y, te_x, te_y = [], [], [], []
        for cid in cids:
            crng = rng.child(("class", cid))
            n = spec.train_per_class + spec.test_per_class
            pts = _sample_class(crng, centers[cid], n, spec.noise,
                                bimodal, spec.separation)
            tr_x.append(pts[:spec.train_per_class])
            te_x.append(pts[spec.train_per_class:])
            tr_y.append(np.full(spec.train_per_class, cid, np.int64))
            te_y.append(np.full(spec.test_per_class, cid, np.int64))
            stream.class_names[cid] = f"class_{cid:03d}"
        shape = (-1, spec.patches, spec.patch_dim)
        stream.tasks.append(Task(
            task_id=t, class_ids=cids,
            train_x=np.concatenate(tr_x).reshape(shape),
            train_y=np.concatenate(tr_y),
            test_x=np.concatenate(te_x).reshape(shape),
            test_y=np.concatenate(te_y)))
    return stream


def _feature_stream(spec: ScenarioSpec) -> TaskStream:
    feats, labels = featureio.load_feature_file(spec.feature_path)
    labels = np.asarray(labels, dtype=np.int64)
    present = sorted(set(int(c) for c in labels))
    need = spec.num_tasks * spec.classes_per_task
    if len(present) < need:
        raise ScenarioError(
            f"feature file holds {len(present)} classes, scenario needs {need}")
    rng = Rng(spec.seed)
    stream = TaskStream(feature_space=True)
    for t in range(spec.num_tasks):
        cids = present[t * spec.classes_per_task:(t + 1) * spec.classes_per_task]
        tr_x, tr_y, te_x, te_y = [], [], [], []
        for cid in cids:
            rows = feats[labels == cid]
            if len(rows) < 2:
                raise ScenarioError(f"class {cid} has fewer than 2 samples")
            order = rng.child(("split", cid)).permutation(len(rows))
            n_test = max(1, int(round(len(rows) * spec.test_per_class /
                                      max(spec.train_per_class + spec.test_per_class, 1))))
            n_test = min(n_test, len(rows) - 1)
            te = rows[order[:n_test]]
            tr = rows[order[n_test:]]
            tr_x.append(tr)
            te_x.append(te)
            tr_y.append(np.full(len(tr), cid, np.int64))
            te_y.append(np.full(len(te), cid, np.int64))
            stream.class_names[cid] = f"class_{cid:03d}"
        stream.tasks.append(Task(
            task_id=t, class_ids=list(cids),
            train_x=np.concatenate(tr_x), train_y=np.concatenate(tr_y),
            test_x=np.concatenate(te_x), test_y=np.concatenate(te_y)))
    return stream


def generate_scenario(spec: ScenarioSpec) -> TaskStream:
    """Build a deterministic task stream from a spec."""
    if spec.kind == "feature-file":
        return _feature_stream(spec)
    return _synthetic_stream(spec)


def permute_classes(stream: TaskStream, seed: int) -> TaskStream:
    """Reassign classes to tasks under a seeded permutation of class ids.

    Sample data stays attached to its class; only the grouping of classes
    into tasks (and hence the task order in which they appear) changes.
    """
    all_cids = sorted(stream.class_names)
    perm = [all_cids[i] for i in Rng(seed).child("class-order").permutation(len(all_cids))]
    by_class = {}
    for task in stream.tasks:
        for cid in task.class_ids:
            tr = task.train_x[task.train_y == cid]
            te = task.test_x[task.test_y == cid]
            by_class[cid] = (tr, te)
    out = TaskStream(class_names=dict(stream.class_names),
                     feature_space=stream.feature_space)
    per_task = len(stream.tasks[0].class_ids)
    for t, task in enumerate(stream.tasks):
        cids = perm[t * per_task:(t + 1) * per_task]
        tr_x = np.concatenate([by_class[c][0] for c in cids])
        te_x = np.concatenate([by_class[c][1] for c in cids])
        tr_y = np.concatenate([np.full(len(by_class[c][0]), c, np.int64) for c in cids])
        te_y = np.concatenate([np.full(len(by_class[c][1]), c, np.int64) for c in cids])
        out.tasks.append(Task(task_id=t, class_ids=list(cids),
                              train_x=tr_x, train_y=tr_y,
                              test_x=te_x, test_y=te_y))
    return out
