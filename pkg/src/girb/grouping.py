"""Embedding-space grouping: seeded KMeans and median-split KD-trees.

Both models are frozen after fitting and map an embedding to an integer
group id. The KD-tree additionally reports the root-to-leaf node path, which
the hierarchical calibrators use for backoff.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class GroupAssignment:
    group: int
    ancestor_path: tuple[int, ...] = ()


def _as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError("embeddings must be a 2-D array")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite embedding value")
    return x


def normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms == 0, 1.0, norms)


def _sq_dists(x: np.ndarray, centroids: np.ndarray, chunk: int = 4096) -> np.ndarray:
    # Direct differences rather than the expanded-norm trick, so exact ties stay ties.
    out = np.empty((x.shape[0], centroids.shape[0]))
    for s in range(0, x.shape[0], chunk):
        diff = x[s : s + chunk, None, :] - centroids[None, :, :]
        out[s : s + chunk] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


# ---------------------------------------------------------------------------
# KMeans


@dataclass
class KMeansModel:
    centroids: np.ndarray
    seed: int
    iterations_run: int
    final_sse: float
    sse_history: list[float] = field(default_factory=list)
    l2_normalize: bool = False

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def predict(self, embeddings) -> np.ndarray:
        x = _as_matrix(embeddings)
        if x.shape[1] != self.dim:
            raise ValueError(f"dimension mismatch: expected {self.dim}, got {x.shape[1]}")
        if self.l2_normalize:
            x = normalize_rows(x)
        return np.argmin(_sq_dists(x, self.centroids), axis=1)

    def assign(self, embedding) -> GroupAssignment:
        return assign_kmeans(self, embedding)

    def assign_many(self, embeddings) -> list[GroupAssignment]:
        return [GroupAssignment(int(g)) for g in self.predict(embeddings)]

    def to_dict(self) -> dict:
        return {
            "kind": "kmeans",
            "centroids": self.centroids.tolist(),
            "k": self.k,
            "seed": self.seed,
            "iterations_run": self.iterations_run,
            "final_sse": self.final_sse,
            "l2_normalize": self.l2_normalize,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KMeansModel":
        return cls(
            centroids=np.asarray(d["centroids"], dtype=float),
            seed=int(d["seed"]),
            iterations_run=int(d["iterations_run"]),
            final_sse=float(d["final_sse"]),
            l2_normalize=bool(d.get("l2_normalize", False)),
        )


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[centers])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # Remaining points coincide with chosen centers; take unused indices.
            unused = np.setdiff1d(np.arange(n), centers)
            centers.append(int(rng.choice(unused)))
        else:
            centers.append(int(rng.choice(n, p=d2 / total)))
        d2 = np.minimum(d2, _sq_dists(x, x[centers[-1:]])[:, 0])
    return x[centers].copy()


def _lloyd(x, centroids, max_iters, tol):
    k = centroids.shape[0]
    history = []
    labels = None
    it = 0
    for it in range(1, max_iters + 1):
        d2 = _sq_dists(x, centroids)
        labels = np.argmin(d2, axis=1)
        dist = d2[np.arange(len(x)), labels]
        counts = np.bincount(labels, minlength=k)
        # Reseed empty clusters at the farthest point of a cluster that can spare one.
        for c in np.flatnonzero(counts == 0):
            order = np.argsort(-dist, kind="stable")
            for i in order:
                if counts[labels[i]] > 1:
                    counts[labels[i]] -= 1
                    labels[i] = c
                    counts[c] = 1
                    dist[i] = 0.0
                    break
        new = np.zeros_like(centroids)
        np.add.at(new, labels, x)
        new /= counts[:, None]
        shift = np.sqrt(((new - centroids) ** 2).sum(axis=1)).max()
        centroids = new
        history.append(float(((x - centroids[labels]) ** 2).sum()))
        if shift < tol:
            break
    return centroids, labels, history, it


def fit_kmeans(embeddings, k: int, seed: int = 0, max_iters: int = 300,
               tol: float = 1e-8, n_init: int = 1, l2_normalize: bool = False) -> KMeansModel:
    """Lloyd's algorithm from k-means++ seeding.

    ``sse_history`` holds the within-cluster SSE after each centroid update;
    it is non-increasing. With ``n_init > 1`` the lowest-SSE restart wins.
    """
    x = _as_matrix(embeddings)
    n = x.shape[0]
    if k < 1 or n < k:
        raise ValueError(f"need n >= k >= 1, got n={n}, k={k}")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if l2_normalize:
        x = normalize_rows(x)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        init = _kmeans_pp(x, k, rng)
        centroids, labels, history, its = _lloyd(x, init, max_iters, tol)
        if best is None or history[-1] < best[2][-1]:
            best = (centroids, labels, history, its)
    centroids, _, history, its = best
    return KMeansModel(centroids, seed, its, history[-1], history, l2_normalize)



def assign_kmeans(model: KMeansModel, embedding) -> GroupAssignment:
    e = np.asarray(embedding, dtype=float).reshape(1, -1)
    if e.shape[1] != model.dim:
        raise ValueError(f"dimension mismatch: expected {model.dim}, got {e.shape[1]}")
    return GroupAssignment(int(model.predict(e)[0]))


# ---------------------------------------------------------------------------
# KD-tree


@dataclass(frozen=True)
class KdNode:
    node_id: int
    depth: int
    count: int
    split_dim: int = -1
    split_value: float = 0.0
    left: int = -1
    right: int = -1
    leaf_id: int = -1

    @property
    def is_leaf(self) -> bool:
        return self.left < 0


@dataclass
class KdTreeModel:
    """Nodes are stored in pre-order; node 0 is the root."""

    nodes: list[KdNode]
    max_depth: int
    min_leaf: int
    dim: int

    @property
    def n_leaves(self) -> int:
        return sum(1 for nd in self.nodes if nd.is_leaf)

    @property
    def leaf_counts(self) -> list[int]:
        leaves = sorted((nd for nd in self.nodes if nd.is_leaf), key=lambda nd: nd.leaf_id)
        return [nd.count for nd in leaves]

    def assign(self, embedding) -> GroupAssignment:
        return assign_kdtree(self, embedding)

    def assign_many(self, embeddings) -> list[GroupAssignment]:
        x = _as_matrix(embeddings)
        if x.shape[1] != self.dim:
            raise ValueError(f"dimension mismatch: expected {self.dim}, got {x.shape[1]}")
        return [self._descend(row) for row in x]

    def predict(self, embeddings) -> np.ndarray:
        return np.array([a.group for a in self.assign_many(embeddings)], dtype=int)

    def _descend(self, e) -> GroupAssignment:
        node = self.nodes[0]
        path = [node.node_id]
        while not node.is_leaf:
            node = self.nodes[node.left if e[node.split_dim] <= node.split_value else node.right]
            path.append(node.node_id)
        return GroupAssignment(node.leaf_id, tuple(path))

    def to_dict(self) -> dict:
        return {
            "kind": "kdtree",
            "max_depth": self.max_depth,
            "min_leaf": self.min_leaf,
            "dim": self.dim,
            "nodes": [nd.__dict__ for nd in self.nodes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KdTreeModel":
        return cls([KdNode(**nd) for nd in d["nodes"]], int(d["max_depth"]),
                   int(d["min_leaf"]), int(d["dim"]))


def fit_kdtree(embeddings, max_depth: int = 8, min_leaf: int = 25) -> KdTreeModel:
    """Recursive median split on the widest dimension.

    Points with coordinate <= median go left. A node stays a leaf at
    ``max_depth``, when either side would get fewer than ``min_leaf`` points,
    or when its points have zero spread.
    """
    x = _as_matrix(embeddings)
    if x.shape[0] < 1:
        raise ValueError("need at least one point")
    if max_depth < 0 or min_leaf < 1:
        raise ValueError("max_depth must be >= 0 and min_leaf >= 1")
    raw: list[dict] = []
    leaf_counter = [0]

    def build(idx: np.ndarray, depth: int) -> int:
        node_id = len(raw)
        rec = {"node_id": node_id, "depth": depth, "count": int(len(idx))}
        raw.append(rec)
        pts = x[idx]
        spread = pts.max(axis=0) - pts.min(axis=0)
        dim = int(np.argmax(spread))
        if depth < max_depth and spread[dim] > 0:
            value = float(np.median(pts[:, dim]))
            mask = pts[:, dim] <= value
            if mask.sum() >= min_leaf and (~mask).sum() >= min_leaf:
                rec.update(split_dim=dim, split_value=value)
                rec["left"] = build(idx[mask], depth + 1)
                rec["right"] = build(idx[~mask], depth + 1)
                return node_id
        rec["leaf_id"] = leaf_counter[0]
        leaf_counter[0] += 1
        return node_id

    build(np.arange(x.shape[0]), 0)
    return KdTreeModel([KdNode(**r) for r in raw], max_depth, min_leaf, x.shape[1])


def assign_kdtree(model: KdTreeModel, embedding) -> GroupAssignment:
    e = np.asarray(embedding, dtype=float).reshape(-1)
    if e.shape[0] != model.dim:
        raise ValueError(f"dimension mismatch: expected {model.dim}, got {e.shape[0]}")
    if not np.all(np.isfinite(e)):
        raise ValueError("non-finite embedding value")
    return model._descend(e)


def model_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "kmeans":
        return KMeansModel.from_dict(d)
    if kind == "kdtree":
        return KdTreeModel.from_dict(d)
    raise ValueError(f"unknown grouping model kind {kind!r}")
