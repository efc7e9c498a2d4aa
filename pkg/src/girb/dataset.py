"""Sample records, JSONL ingestion, and the four-way experiment split."""

from __future__ import annotations

import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PARTITION_NAMES = ("cluster", "regression", "calibration", "test")


class DatasetError(ValueError):
    """Raised for malformed or inconsistent dataset input."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Column-oriented, immutable collection of sample records.

    ``targets`` holds ``2K`` columns: the K individual scores followed by the
    K per-document average scores.
    """

    record_ids: tuple[str, ...]
    doc_ids: tuple[str, ...]
    embeddings: np.ndarray
    targets: np.ndarray
    raw_scores: np.ndarray | None = None
    groups: tuple[int, ...] | None = None
    consistent_averages: bool = False

    def __post_init__(self):
        object.__setattr__(self, "record_ids", tuple(self.record_ids))
        object.__setattr__(self, "doc_ids", tuple(self.doc_ids))
        object.__setattr__(self, "embeddings", _readonly(self.embeddings))
        object.__setattr__(self, "targets", _readonly(self.targets))
        if self.raw_scores is not None:
            object.__setattr__(self, "raw_scores", _readonly(self.raw_scores))
        if self.groups is not None:
            object.__setattr__(self, "groups", tuple(int(g) for g in self.groups))
        n = len(self.record_ids)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != n:
            raise DatasetError("embeddings must be an n x m array")
        if self.targets.ndim != 2 or self.targets.shape[0] != n:
            raise DatasetError("targets must be an n x 2K array")
        if self.targets.shape[1] % 2 or (n and self.targets.shape[1] == 0):
            raise DatasetError("targets length must be 2K with K >= 1")
        if len(self.doc_ids) != n:
            raise DatasetError("doc_ids length mismatch")
        if self.raw_scores is not None and self.raw_scores.shape != self.targets.shape:
            raise DatasetError("raw_scores must have the same shape as targets")
        if self.groups is not None and len(self.groups) != n:
            raise DatasetError("groups length mismatch")

    def __len__(self) -> int:
        return len(self.record_ids)

    @property
    def n(self) -> int:
        return len(self.record_ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def k(self) -> int:
        return self.targets.shape[1] // 2

    @property
    def individual(self) -> np.ndarray:
        return self.targets[:, : self.k]

    @property
    def average(self) -> np.ndarray:
        return self.targets[:, self.k :]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        """Rows ``indices``; the averages flag survives only if no document is cut."""
        idx = np.asarray(indices, dtype=int)
        consistent = self.consistent_averages
        if consistent:
            kept = Counter(self.doc_ids[i] for i in idx)
            total = Counter(self.doc_ids)
            consistent = all(total[d] == c for d, c in kept.items())
        return Dataset(
            record_ids=[self.record_ids[i] for i in idx],
            doc_ids=[self.doc_ids[i] for i in idx],
            embeddings=self.embeddings[idx].reshape(len(idx), self.dim),
            targets=self.targets[idx].reshape(len(idx), 2 * self.k),
            raw_scores=None if self.raw_scores is None else self.raw_scores[idx],
            groups=None if self.groups is None else [self.groups[i] for i in idx],
            consistent_averages=consistent,
        )

    def with_raw_scores(self, raw_scores: np.ndarray) -> "Dataset":
        return Dataset(self.record_ids, self.doc_ids, self.embeddings, self.targets,
                       raw_scores, self.groups, self.consistent_averages)

    def with_groups(self, groups: Iterable[int]) -> "Dataset":
        return Dataset(self.record_ids, self.doc_ids, self.embeddings, self.targets,
                       self.raw_scores, list(groups), self.consistent_averages)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)
        return (
            self.record_ids == other.record_ids
            and self.doc_ids == other.doc_ids
            and same(self.embeddings, other.embeddings)
            and same(self.targets, other.targets)
            and same(self.raw_scores, other.raw_scores)
            and self.groups == other.groups
            and self.consistent_averages == other.consistent_averages
        )

    __hash__ = None


def validate(ds: Dataset, atol: float = 1e-9) -> None:
    """Check the record-level invariants that the constructor does not."""
    if ds.n == 0:
        raise DatasetError("empty dataset")
    if not np.all(np.isfinite(ds.embeddings)):
        raise DatasetError("non-finite embedding value")
    t = ds.targets
    if not np.all(np.isfinite(t)) or np.any(t < 0) or np.any(t > 1):
        row = int(np.argmax(~((t >= 0) & (t <= 1)).all(axis=1)))
        raise DatasetError(f"target out of range in record {ds.record_ids[row]!r}")
    if len(set(ds.record_ids)) != ds.n:
        raise DatasetError("duplicate record_id")
    if ds.groups is not None and min(ds.groups) < 0:
        raise DatasetError("group ids must be non-negative")
    if ds.consistent_averages:
        _check_averages(ds, atol)


def _check_averages(ds: Dataset, atol: float) -> None:
    by_doc: dict[str, list[int]] = {}
    for i, d in enumerate(ds.doc_ids):
        by_doc.setdefault(d, []).append(i)
    for doc, rows in by_doc.items():
        avg = ds.average[rows]
        expected = ds.individual[rows].mean(axis=0)
        if not np.allclose(avg, expected[None, :], atol=atol, rtol=0):
            raise DatasetError(f"average targets of doc {doc!r} do not match the mean of its individual targets")


def _float_list(value, name: str, lineno: int) -> list[float]:
    if not isinstance(value, list) or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
    ):
        raise DatasetError(f"field {name!r} must be a list of numbers", lineno)
    out = [float(v) for v in value]
    if not all(math.isfinite(v) for v in out):
        raise DatasetError(f"field {name!r} contains a non-finite value", lineno)
    return out


def load_jsonl(path: str | Path, expected_k: int | None = None) -> Dataset:
    """Read and validate a dataset written one JSON object per line.

    An optional first line ``{"_meta": {"k": K, "dim": m, "consistent_averages": bool}}``
    pins the dimensions; otherwise they are inferred from the first record.
    Errors carry the 1-based line number of the offending record.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"no such file: {path}")
    meta: dict = {}
    ids, docs, embs, targs, raws, groups = [], [], [], [], [], []
    k = expected_k
    m = None
    seen: set[str] = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"malformed JSON ({exc.msg})", lineno) from None
            if not isinstance(obj, dict):
                raise DatasetError("each line must be a JSON object", lineno)
            if "_meta" in obj:
                if ids or meta:
                    raise DatasetError("_meta header must be the first line", lineno)
                meta = dict(obj["_meta"])
                if "k" in meta:
                    if k is not None and int(meta["k"]) != k:
                        raise DatasetError(f"dimension mismatch: header k={meta['k']}, expected {k}", lineno)
                    k = int(meta["k"])
                if "dim" in meta:
                    m = int(meta["dim"])
                continue
            for name in ("record_id", "doc_id", "embedding", "targets"):
                if name not in obj:
                    raise DatasetError(f"missing field {name!r}", lineno)
            rid, did = str(obj["record_id"]), str(obj["doc_id"])
            if rid in seen:
                raise DatasetError(f"duplicate record_id {rid!r}", lineno)
            seen.add(rid)
            emb = _float_list(obj["embedding"], "embedding", lineno)
            tgt = _float_list(obj["targets"], "targets", lineno)
            if m is None:
                m = len(emb)
            if len(emb) != m:
                raise DatasetError(f"dimension mismatch: embedding length {len(emb)} != {m}", lineno)
            if k is None:
                if len(tgt) == 0 or len(tgt) % 2:
                    raise DatasetError(f"dimension mismatch: targets length {len(tgt)} is not 2K", lineno)
                k = len(tgt) // 2
            if len(tgt) != 2 * k:
                raise DatasetError(f"dimension mismatch: targets length {len(tgt)} != 2K = {2 * k}", lineno)
            if any(t < 0 or t > 1 for t in tgt):
                raise DatasetError("target out of range", lineno)
            raw = obj.get("raw_scores")
            if raw is not None:
                raw = _float_list(raw, "raw_scores", lineno)
                if len(raw) != 2 * k:
                    raise DatasetError(f"dimension mismatch: raw_scores length {len(raw)} != {2 * k}", lineno)
            grp = obj.get("group")
            if grp is not None and (not isinstance(grp, int) or isinstance(grp, bool) or grp < 0):
                raise DatasetError("field 'group' must be a non-negative integer", lineno)
            ids.append(rid)
            docs.append(did)
            embs.append(emb)
            targs.append(tgt)
            raws.append(raw)
            groups.append(grp)
    if not ids:
        raise DatasetError("empty dataset")
    if any(r is None for r in raws) and not all(r is None for r in raws):
        raise DatasetError("raw_scores must be present on all records or none")
    if any(g is None for g in groups) and not all(g is None for g in groups):
        raise DatasetError("group must be present on all records or none")
    ds = Dataset(
        record_ids=ids,
        doc_ids=docs,
        embeddings=np.asarray(embs, dtype=float).reshape(len(ids), m),
        targets=np.asarray(targs, dtype=float),
        raw_scores=None if raws[0] is None else np.asarray(raws, dtype=float),
        groups=None if groups[0] is None else groups,
        consistent_averages=bool(meta.get("consistent_averages", False)),
    )
    validate(ds)
    return ds


def to_jsonl_lines(ds: Dataset, header: bool = True) -> list[str]:
    lines = []
    if header:
        meta = {"k": ds.k, "dim": ds.dim, "consistent_averages": ds.consistent_averages}
        lines.append(json.dumps({"_meta": meta}))
    for i in range(ds.n):
        obj = {
            "record_id": ds.record_ids[i],
            "doc_id": ds.doc_ids[i],
            "embedding": ds.embeddings[i].tolist(),
            "targets": ds.targets[i].tolist(),
        }
        if ds.raw_scores is not None:
            obj["raw_scores"] = ds.raw_scores[i].tolist()
        if ds.groups is not None:
            obj["group"] = ds.groups[i]
        lines.append(json.dumps(obj))
    return lines


def dump_jsonl(ds: Dataset, path: str | Path, header: bool = True) -> None:
    from .io import atomic_write_text

    atomic_write_text(path, "\n".join(to_jsonl_lines(ds, header)) + "\n")


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float, float] = (0.3, 0.3, 0.3, 0.1)
    seed: int = 0
    unit: str = "record"

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if len(self.ratios) != 4:
            raise ValueError("exactly four split ratios are required")
        if any(r < 0 for r in self.ratios) or abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must be non-negative and sum to 1, got {self.ratios}")
        if self.unit not in ("record", "document"):
            raise ValueError(f"split unit must be 'record' or 'document', got {self.unit!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


def allocate(n: int, ratios: Sequence[float]) -> list[int]:
    """Floor-allocate ``n`` units over ``ratios``; leftovers go one each to
    the partitions with non-zero ratio, earliest first."""
    sizes = [math.floor(r * n + 1e-9) for r in ratios]
    live = [i for i, r in enumerate(ratios) if r > 0]
    rem = n - sum(sizes)
    j = 0
    while rem > 0:
        sizes[live[j % len(live)]] += 1
        rem -= 1
        j += 1
    return sizes


def split(ds: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset, Dataset, Dataset]:
    """Shuffle with a seeded PCG64 permutation and cut into
    (cluster, regression, calibration, test) partitions.

    With ``unit="document"`` the permutation and allocation act on distinct
    doc_ids, so a document never straddles two partitions.
    """
    if ds.n == 0:
        raise DatasetError("empty dataset")
    rng = np.random.Generator(np.random.PCG64(int(spec.seed)))
    if spec.unit == "record":
        order = rng.permutation(ds.n)
        sizes = allocate(ds.n, spec.ratios)
        bounds = np.cumsum([0] + sizes)
        parts = [order[bounds[i] : bounds[i + 1]] for i in range(4)]
    else:
        docs = sorted(set(ds.doc_ids))
        order = rng.permutation(len(docs))
        sizes = allocate(len(docs), spec.ratios)
        bounds = np.cumsum([0] + sizes)
        where = {}
        for p in range(4):
            for j in order[bounds[p] : bounds[p + 1]]:
                where[docs[j]] = p
        parts = [[i for i, d in enumerate(ds.doc_ids) if where[d] == p] for p in range(4)]
    for name, ratio, part in zip(PARTITION_NAMES, spec.ratios, parts):
        if ratio > 0 and len(part) == 0:
            warnings.warn(f"{name} partition is empty", stacklevel=2)
    return tuple(ds.subset(p) for p in parts)  # type: ignore[return-value]
