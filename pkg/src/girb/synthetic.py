"""Synthetic datasets with group-dependent, monotone score distortions.

Each document belongs to one group. Every summary has a latent quality
``q ~ U[0, 1]`` per dimension; its individual target is ``q`` plus noise,
clipped to [0, 1], and the average target is the per-document mean of the
individual targets. Embeddings place each group on its own well-separated
blob and carry ``distortion_g(q)`` (and the distorted document-mean quality)
along directions shared by all groups. A linear model therefore sees a
signal that is monotone in quality within every group, but the same signal
value means different qualities in different groups: with distortions
``q**2`` and ``sqrt(q)`` the true transfer is ``t = raw**0.5`` in one group
and ``t = raw**2`` in the other, up to an affine map.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import Dataset

FAMILIES = ("identity", "power", "sqrt", "logistic")


@dataclass(frozen=True)
class Distortion:
    family: str = "identity"
    param: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown distortion family {self.family!r}; choose from {FAMILIES}")
        if self.family in ("power", "logistic") and not self.param > 0:
            raise ValueError(f"{self.family} distortion needs param > 0, got {self.param}")

    def __call__(self, q):
        q = np.asarray(q, dtype=float)
        if self.family == "identity":
            return q.copy()
        if self.family == "power":
            return q ** self.param
        if self.family == "sqrt":
            return np.sqrt(q)
        s = self.param
        lo, hi = 1 / (1 + np.exp(s / 2)), 1 / (1 + np.exp(-s / 2))
        return (1 / (1 + np.exp(-s * (q - 0.5))) - lo) / (hi - lo)


@dataclass(frozen=True)
class SyntheticSpec:
    n_docs: int = 2000
    summaries_per_doc: int = 5
    k: int = 3
    dim: int = 16
    n_groups: int = 2
    distortions: tuple[Distortion, ...] = (Distortion("power", 2.0), Distortion("sqrt"))
    noise_std: float = 0.02
    blob_std: float = 0.01
    separation: float = 6.0
    seed: int = 0

    def __post_init__(self):
        dists = tuple(d if isinstance(d, Distortion) else Distortion(**d) for d in self.distortions)
        object.__setattr__(self, "distortions", dists)
        if min(self.n_docs, self.summaries_per_doc, self.k, self.n_groups) < 1:
            raise ValueError("n_docs, summaries_per_doc, k and n_groups must be >= 1")
        if len(dists) not in (1, self.n_groups):
            raise ValueError("give one distortion, or one per group")
        if self.dim < 2 * self.k + 1:
            raise ValueError(f"dim must be >= 2k + 1 = {2 * self.k + 1}")
        if self.noise_std < 0 or self.blob_std < 0 or self.separation <= 0:
            raise ValueError("noise_std and blob_std must be >= 0 and separation > 0")

    def distortion(self, g: int) -> Distortion:
        return self.distortions[g % len(self.distortions)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distortions"] = [asdict(x) for x in self.distortions]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        if "distortions" in d:
            d["distortions"] = tuple(Distortion(**x) for x in d["distortions"])
        return cls(**d)


def _group_centers(spec: SyntheticSpec, basis: np.ndarray, rng) -> np.ndarray:
    # Centers live in the complement of the 2k signal directions.
    free = basis[:, 2 * spec.k :]
    if spec.n_groups <= free.shape[1]:
        coords = np.eye(free.shape[1])[: spec.n_groups]
    else:
        coords = rng.normal(size=(spec.n_groups, free.shape[1]))
        coords /= np.linalg.norm(coords, axis=1, keepdims=True)
    # Scale so the closest pair of centers is `separation` blob widths apart,
    # measured on top of the spread the signal directions contribute.
    diffs = coords[:, None, :] - coords[None, :, :]
    dist = np.sqrt((diffs ** 2).sum(-1))
    min_dist = dist[np.triu_indices(spec.n_groups, 1)].min() if spec.n_groups > 1 else 1.0
    signal_span = np.sqrt(2 * spec.k)
    scale = (spec.separation * max(spec.blob_std, 1e-12) + 2 * signal_span) / min_dist
    return coords @ free.T * scale


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    basis, _ = np.linalg.qr(rng.normal(size=(spec.dim, spec.dim)))
    centers = _group_centers(spec, basis, rng)
    q_dirs = basis[:, : spec.k]
    mean_dirs = basis[:, spec.k : 2 * spec.k]
    n = spec.n_docs * spec.summaries_per_doc
    n_per = spec.summaries_per_doc
    doc_group = np.arange(spec.n_docs) % spec.n_groups
    group = np.repeat(doc_group, n_per)
    q = rng.uniform(size=(n, spec.k))
    mean_q = np.repeat(q.reshape(spec.n_docs, n_per, spec.k).mean(axis=1), n_per, axis=0)
    signal = np.empty_like(q)
    mean_signal = np.empty_like(q)
    for g in range(spec.n_groups):
        rows = group == g
        signal[rows] = spec.distortion(g)(q[rows])
        mean_signal[rows] = spec.distortion(g)(mean_q[rows])
    ind = np.clip(q + spec.noise_std * rng.normal(size=q.shape), 0.0, 1.0)
    avg = np.repeat(ind.reshape(spec.n_docs, n_per, spec.k).mean(axis=1), n_per, axis=0)
    emb = (centers[group] + signal @ q_dirs.T + mean_signal @ mean_dirs.T
           + spec.blob_std * rng.normal(size=(n, spec.dim)))
    return Dataset(
        record_ids=[f"r{i:07d}" for i in range(n)],
        doc_ids=[f"d{i // n_per:06d}" for i in range(n)],
        embeddings=emb,
        targets=np.hstack([ind, avg]),
        groups=group.tolist(),
        consistent_averages=True,
    )
