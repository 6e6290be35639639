"""Data-free distillation pipeline.

From a frozen teacher and a labeled dataset we keep only per-class cluster
centroids and per-cluster principal components of the average-pool
activations. From that metadata alone we sample target activations,
synthesize images whose teacher activations match the targets, and distill
a student on the synthetic images with soft teacher labels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Dataset
from .distill import KdHyper, TrainHyper, evaluate, train_kd
from .tensor import Tape, Tensor
from .zoo import Model, ModelSpec, build_model


# ---------------------------------------------------------------------------
# clustering / PCA primitives


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iters: int = 100):
    """Lloyd's algorithm with seeded init; empty clusters respawn at the
    farthest point. Returns (centroids k x D, assignments M)."""
    points = np.asarray(points, dtype=np.float64)
    M = points.shape[0]
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    if M < k:
        raise ValueError(f"need at least k={k} points, got {M}")
    rng = np.random.default_rng(seed)
    # maximin init: random first centroid, then repeatedly the point farthest
    # from its nearest chosen centroid; spreads seeds across separated groups
    chosen = [int(rng.integers(M))]
    d2min = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < k:
        nxt = int(d2min.argmax())
        chosen.append(nxt)
        d2min = np.minimum(d2min, ((points - points[nxt]) ** 2).sum(axis=1))
    centroids = points[chosen].copy()
    prev_obj = np.inf
    assign = np.zeros(M, dtype=np.int64)
    for _ in range(max_iters):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        obj = float(d2[np.arange(M), assign].sum())
        assert obj <= prev_obj + 1e-9, "k-means objective increased"
        for c in range(k):
            members = points[assign == c]
            if len(members) == 0:
                worst = int(d2[np.arange(M), assign].argmax())
                centroids[c] = points[worst]
            else:
                centroids[c] = members.mean(axis=0)
        if obj == prev_obj:
            break
        prev_obj = obj
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    assign = d2.argmin(axis=1)
    return centroids, assign


def kmeans_objective(points, centroids, assign) -> float:
    diff = np.asarray(points, dtype=np.float64) - centroids[assign]
    return float((diff * diff).sum())


def pca(points: np.ndarray, p: int):
    """Top-q principal directions of the sample covariance.

    Returns (components q x D, stds q) with q = min(p, M-1, D); components
    are unit eigenvectors in descending-variance order, stds the square
    roots of the eigenvalues.
    """
    points = np.asarray(points, dtype=np.float64)
    M, D = points.shape
    if M < 2:
        raise ValueError("pca needs at least 2 points")
    q = min(p, M - 1, D)
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / (M - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:q]
    comps = eigvecs[:, order].T
    stds = np.sqrt(np.clip(eigvals[order], 0.0, None))
    return comps, stds


# ---------------------------------------------------------------------------
# metadata


@dataclass
class ClusterMeta:
    centroid: np.ndarray        # (C_t,)
    components: np.ndarray      # (q, C_t), possibly q == 0
    stds: np.ndarray            # (q,)
    count: int


@dataclass
class DreamMetadata:
    clusters: dict[int, list[ClusterMeta]]  # class id -> k clusters
    feature_dim: int
    teacher_fingerprint: str

    def num_scalars(self) -> int:
        n = 0
        for metas in self.clusters.values():
            for m in metas:
                n += m.centroid.size + m.components.size + m.stds.size + 1
        return n

    def to_json(self) -> str:
        doc = {
            "feature_dim": self.feature_dim,
            "teacher_fingerprint": self.teacher_fingerprint,
            "classes": {
                str(c): [
                    {
                        "centroid": m.centroid.tolist(),
                        "components": m.components.tolist(),
                        "stds": m.stds.tolist(),
                        "count": m.count,
                    }
                    for m in metas
                ]
                for c, metas in self.clusters.items()
            },
        }
        return json.dumps(doc)

    @staticmethod
    def from_json(text: str) -> "DreamMetadata":
        doc = json.loads(text)
        clusters = {
            int(c): [
                ClusterMeta(
                    centroid=np.asarray(m["centroid"], dtype=np.float64),
                    components=np.asarray(m["components"], dtype=np.float64).reshape(
                        len(m["stds"]), len(m["centroid"])
                    ),
                    stds=np.asarray(m["stds"], dtype=np.float64),
                    count=int(m["count"]),
                )
                for m in metas
            ]
            for c, metas in doc["classes"].items()
        }
        return DreamMetadata(clusters, doc["feature_dim"], doc["teacher_fingerprint"])


def teacher_avg_pool(teacher: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        out.append(teacher.forward(Tensor(images[i : i + batch_size])).avg_pool.data)
    return np.concatenate(out, axis=0).astype(np.float64)


def extract_metadata(teacher: Model, ds: Dataset, fraction: float = 0.1, k: int = 10,
                     p: int = 8, seed: int = 0) -> DreamMetadata:
    """Per class: sample a fraction of images, k-means their avg-pool
    activations, PCA each cluster. Clusters with fewer than 2 members store
    zero components."""
    if not (0.0 < fraction <= 1.0):
        raise ValueError("fraction must be in (0,1]")
    rng = np.random.default_rng(seed)
    clusters: dict[int, list[ClusterMeta]] = {}
    dim = None
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        n = max(k, int(round(fraction * len(idx))))
        if len(idx) < k:
            raise ValueError(f"class {c}: {len(idx)} images < k={k}")
        sel = rng.choice(idx, size=min(n, len(idx)), replace=False)
        acts = teacher_avg_pool(teacher, ds.images[sel])
        dim = acts.shape[1]
        centroids, assign = kmeans(acts, k, seed=seed * 1000 + c)
        metas = []
        for ci in range(k):
            members = acts[assign == ci]
            if len(members) >= 2:
                comps, stds = pca(members, p)
            else:
                comps = np.zeros((0, dim))
                stds = np.zeros(0)
            metas.append(ClusterMeta(centroids[ci], comps, stds, int(len(members))))
        clusters[c] = metas
    return DreamMetadata(clusters, dim, teacher.param_hash())


# ---------------------------------------------------------------------------
# targets and synthesis


@dataclass
class TargetSet:
    targets: np.ndarray   # (n, C_t)
    labels: np.ndarray    # (n,)
    cluster_ids: np.ndarray  # (n,)


def gen_targets(meta: DreamMetadata, n_per_cluster: int, noise_scale: float = 1.0,
                seed: int = 0) -> TargetSet:
    """target = centroid + noise_scale * sum_j eps_j * std_j * component_j."""
    if noise_scale < 0:
        raise ValueError("noise_scale must be >= 0")
    rng = np.random.default_rng(seed)
    targets, labels, cids = [], [], []
    for c in sorted(meta.clusters):
        for ci, m in enumerate(meta.clusters[c]):
            for _ in range(n_per_cluster):
                t = m.centroid.copy()
                if noise_scale > 0 and len(m.stds) > 0:
                    eps = rng.standard_normal(len(m.stds))
                    t = t + noise_scale * (eps * m.stds) @ m.components
                targets.append(t)
                labels.append(c)
                cids.append(ci)
    return TargetSet(np.asarray(targets), np.asarray(labels, dtype=np.uint8),
                     np.asarray(cids, dtype=np.int32))


@dataclass
class SynthHyper:
    steps: int = 80
    step_size: float = 0.05
    init_std: float = 0.2
    tv_weight: float = 1e-3
    jitter: int = 1
    seed: int = 0
    batch_size: int = 64

    def validate(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass
class SyntheticDataset:
    dataset: Dataset
    final_losses: np.ndarray
    initial_losses: np.ndarray
    cluster_ids: np.ndarray
    failed: np.ndarray  # bool per image: NaN encountered during optimization


def _tv(img: Tensor) -> Tensor:
    dx = img[:, :, :, 1:] - img[:, :, :, :-1]
    dy = img[:, :, 1:, :] - img[:, :, :-1, :]
    return T.tsum(dx * dx) + T.tsum(dy * dy)


def synthesize_images(teacher: Model, targets: TargetSet, h: SynthHyper,
                      init_images: np.ndarray | None = None,
                      verbose: bool = False) -> SyntheticDataset:
    """Gradient descent on || avg_pool(teacher(img)) - target ||^2 + tv prior.

    Images start from Gaussian noise around mid-gray (unless given), are
    jittered by a random pixel shift each step, and are clipped to [0,1]
    after every update.
    """
    h.validate()
    teacher.freeze()
    C, H, W = teacher.spec.input_shape
    n = len(targets.targets)
    rng = np.random.default_rng(h.seed)
    if init_images is None:
        init_images = np.clip(
            0.5 + h.init_std * rng.standard_normal((n, C, H, W)), 0.0, 1.0
        ).astype(np.float32)
    images = init_images.astype(np.float32).copy()
    final_losses = np.zeros(n)
    initial_losses = np.zeros(n)
    failed = np.zeros(n, dtype=bool)

    for start in range(0, n, h.batch_size):
        sl = slice(start, min(start + h.batch_size, n))
        tgt = targets.targets[sl].astype(np.float32)
        batch = images[sl].copy()
        b = batch.shape[0]
        for step in range(h.steps):
            work = batch
            shift = (0, 0)
            if h.jitter > 0:
                shift = tuple(rng.integers(-h.jitter, h.jitter + 1, size=2))
                work = np.roll(batch, shift, axis=(2, 3))
            x = Tensor(work, requires_grad=True)
            with Tape() as tape:
                pooled = teacher.forward(x).avg_pool
                diff = pooled - Tensor(tgt)
                match = T.tsum(diff * diff, axis=1)
                loss = T.tsum(match) + _tv(x) * h.tv_weight
                T.backward(tape, loss)
            per_img = match.data
            if step == 0:
                initial_losses[sl] = per_img
            if not np.isfinite(loss.item()):
                failed[sl] = ~np.isfinite(per_img) | failed[sl]
                break
            g = np.roll(x.grad, (-shift[0], -shift[1]), axis=(2, 3))
            # normalized step keeps the descent scale-free across targets;
            # the step scale must stay float32 or the batch silently upcasts
            gnorm = np.sqrt((g * g).sum(axis=(1, 2, 3), keepdims=True)) + 1e-8
            scale = np.float32(h.step_size * np.sqrt(g[0].size))
            batch = np.clip(batch - scale * g / gnorm, 0.0, 1.0).astype(np.float32)
        pooled = teacher.forward(Tensor(batch)).avg_pool.data
        final_losses[sl] = ((pooled - tgt) ** 2).sum(axis=1)
        images[sl] = batch
        if verbose:
            print(f"synthesized {sl.stop}/{n}: "
                  f"median loss {np.median(final_losses[:sl.stop]):.4f}")
    ds = Dataset(images, targets.labels,
                 [f"class_{i}" for i in range(int(targets.labels.max()) + 1)],
                 split="dream")
    return SyntheticDataset(ds, final_losses, initial_losses, targets.cluster_ids, failed)


def save_synthetic(synth: SyntheticDataset, edai_path, sidecar_path):
    from .data import save_dataset

    save_dataset(synth.dataset, edai_path)
    with open(sidecar_path, "w") as f:
        json.dump(
            {
                "cluster_ids": synth.cluster_ids.tolist(),
                "final_losses": synth.final_losses.tolist(),
                "initial_losses": synth.initial_losses.tolist(),
                "failed": synth.failed.astype(int).tolist(),
            },
            f,
        )


# ---------------------------------------------------------------------------
# end-to-end


@dataclass
class DreamReport:
    student: Model
    synthetic: SyntheticDataset
    history: list
    test_accuracy: float | None


def dream_distill(teacher: Model, student_spec: ModelSpec, meta: DreamMetadata,
                  synth_h: SynthHyper, train_h: TrainHyper, kd_h: KdHyper,
                  n_per_cluster: int = 10, noise_scale: float = 1.0,
                  test_ds: Dataset | None = None, verbose: bool = False) -> DreamReport:
    """Targets -> synthetic images -> unlabeled KD; real data is touched only
    for the final test-set evaluation."""
    targets = gen_targets(meta, n_per_cluster, noise_scale, seed=synth_h.seed)
    synth = synthesize_images(teacher, targets, synth_h, verbose=verbose)
    student = build_model(student_spec, seed=train_h.seed)
    result = train_kd(teacher, student, synth.dataset, train_h, kd_h,
                      labeled=False, verbose=verbose)
    acc = evaluate(student, test_ds) if test_ds is not None else None
    return DreamReport(result.student, synth, result.history, acc)
