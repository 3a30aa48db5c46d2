"""Per-class spherical k-means over unit embeddings (phenological centroids)."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IngestionError, ValidationError

log = logging.getLogger(__name__)


def _normalize(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def inertia(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    """Sum of cosine distances 1 - <x, c> to the assigned centroid."""
    return float(np.sum(1.0 - np.einsum("nd,nd->n", points, centroids[labels])))


def kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = [int(rng.integers(n))]
    dist = np.maximum(2.0 - 2.0 * points @ points[centers[0]], 0.0)
    for _ in range(1, k):
        total = dist.sum()
        if total <= 0:
            # All remaining points coincide with a centre; pick any unused one.
            unused = np.setdiff1d(np.arange(n), centers)
            nxt = int(unused[rng.integers(len(unused))])
        else:
            nxt = int(rng.choice(n, p=dist / total))
        centers.append(nxt)
        dist = np.minimum(dist, np.maximum(2.0 - 2.0 * points @ points[nxt], 0.0))
    return points[centers].copy()


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    iterations: int
    history: list[float] = field(default_factory=list)


def spherical_kmeans(points: np.ndarray, k: int, rng: np.random.Generator,
                     max_iter: int = 100, tol: float = 1e-6) -> KMeansResult:
    points = _normalize(np.asarray(points, dtype=np.float64))
    centroids = kmeans_pp(points, k, rng)
    history = []
    labels = np.argmax(points @ centroids.T, axis=1)
    it = 0
    for it in range(1, max_iter + 1):
        history.append(inertia(points, centroids, labels))
        new = centroids.copy()
        for j in range(k):
            members = points[labels == j]
            if len(members):
                new[j] = _normalize(members.sum(axis=0))
        shift = float(np.max(np.linalg.norm(new - centroids, axis=1)))
        centroids = new
        labels = np.argmax(points @ centroids.T, axis=1)
        if shift < tol:
            break
    history.append(inertia(points, centroids, labels))
    return KMeansResult(centroids, labels, history[-1], it, history)


@dataclass
class ClassCentroids:
    centroids: np.ndarray  # (K, D) unit rows
    counts: np.ndarray  # (K,)
    inertia: float
    iterations: int

    @property
    def k(self) -> int:
        return len(self.centroids)


@dataclass
class PhenoCentroidBank:
    classes: dict[int, ClassCentroids]
    seed: int = 0

    def assign(self, class_id: int, embeddings: np.ndarray) -> np.ndarray:
        """Index of the most similar centroid of ``class_id`` for each row;
        classes absent from the bank map everything to centroid 0."""
        entry = self.classes.get(int(class_id))
        if entry is None:
            return np.zeros(len(embeddings), dtype=np.int64)
        return np.argmax(np.asarray(embeddings) @ entry.centroids.T, axis=1)

    def matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """All centroids stacked, with their class ids."""
        vecs, owners = [], []
        for c in sorted(self.classes):
            vecs.append(self.classes[c].centroids)
            owners.extend([c] * self.classes[c].k)
        if not vecs:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        return np.concatenate(vecs), np.asarray(owners, dtype=np.int64)

    def to_json(self) -> str:
        payload = {
            "seed": self.seed,
            "classes": {
                str(c): {
                    "K": e.k,
                    "vectors": e.centroids.tolist(),
                    "counts": [int(n) for n in e.counts],
                    "inertia": e.inertia,
                    "iterations": e.iterations,
                    "seed": self.seed,
                }
                for c, e in sorted(self.classes.items())
            },
        }
        return json.dumps(payload, indent=2) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "PhenoCentroidBank":
        try:
            data = json.loads(Path(path).read_text())
            classes = {
                int(c): ClassCentroids(
                    np.asarray(e["vectors"], dtype=np.float64),
                    np.asarray(e["counts"], dtype=np.int64),
                    float(e.get("inertia", 0.0)),
                    int(e.get("iterations", 0)),
                )
                for c, e in data["classes"].items()
            }
        except FileNotFoundError:
            raise IngestionError(f"centroid bank not found: {path}") from None
        except (ValueError, KeyError, TypeError) as exc:
            raise IngestionError(f"malformed centroid bank {path}: {exc}") from None
        return cls(classes, int(data.get("seed", 0)))


def cluster_phenology(samples: dict[int, np.ndarray], k: int, seed: int = 0,
                      n_init: int = 4, max_iter: int = 100, tol: float = 1e-6) -> PhenoCentroidBank:
    """Cluster each class's embeddings into ``k`` phenological centroids.

    Each class gets ``n_init`` k-means++ restarts from its own seeded stream;
    the restart with the lowest inertia is kept.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    out: dict[int, ClassCentroids] = {}
    for c in sorted(samples):
        pts = np.asarray(samples[c], dtype=np.float64)
        if len(pts) == 0:
            log.warning("class %d has no samples; omitted from centroid bank", c)
            continue
        kc = k
        if len(pts) < k:
            log.warning("class %d has %d samples < K=%d; reducing K", c, len(pts), k)
            kc = len(pts)
        rng = np.random.default_rng([seed, int(c)])
        best = None
        for _ in range(n_init):
            res = spherical_kmeans(pts, kc, rng, max_iter=max_iter, tol=tol)
            if best is None or res.inertia < best.inertia:
                best = res
        counts = np.bincount(best.labels, minlength=kc)
        out[int(c)] = ClassCentroids(best.centroids, counts, best.inertia, best.iterations)
    return PhenoCentroidBank(out, seed)
