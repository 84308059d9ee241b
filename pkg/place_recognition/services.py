"""Location embeddings, retrieval and the batch-hard triplet loss.

A location embedding is the channel-wise spatial maximum of a dense descriptor map
(raw, not normalised). Retrieval ranks stored embeddings by cosine similarity,
descending, ties broken by ascending id.
"""

import logging
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import KDTree

from core.exceptions import ConfigurationError, DataError
from core.grids import Grid2, l2_normalize

logger = logging.getLogger(__name__)

BACKENDS = ("linear", "kdtree")
EMBEDDINGS = ("dense", "keypoints")
# slack on the re-ranking ball so candidates tied with the n-th result are kept
BALL_SLACK = 1e-9


@dataclass(frozen=True)
class PlaceRecognitionOptions:
    margin: float = 0.5
    positives: int = 5
    negatives: int = 5
    positive_radius: float = 5.0
    negative_radius: float = 25.0
    closure_threshold: float = 0.95
    min_index_gap: int = 10
    backend: str = "kdtree"
    max_candidates: int = 1
    embedding: str = "dense"

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigurationError(f"place_recognition.backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.embedding not in EMBEDDINGS:
            raise ConfigurationError(f"place_recognition.embedding must be one of {EMBEDDINGS}, got {self.embedding!r}")
        if self.margin < 0:
            raise ConfigurationError("place_recognition.margin must be >= 0")
        if not 0 < self.positive_radius < self.negative_radius:
            raise ConfigurationError("place_recognition radii must satisfy 0 < positive_radius < negative_radius")

    @classmethod
    def from_dict(cls, values):
        return cls(
            margin=float(values["margin"]),
            positives=int(values["positives"]),
            negatives=int(values["negatives"]),
            positive_radius=float(values["positive_radius"]),
            negative_radius=float(values["negative_radius"]),
            closure_threshold=float(values["closure_threshold"]),
            min_index_gap=int(values["min_index_gap"]),
            backend=str(values["backend"]),
            max_candidates=int(values["max_candidates"]),
            embedding=str(values.get("embedding", "dense")),
        )


@dataclass(frozen=True, eq=False)
class LocationEmbedding:
    vector: np.ndarray
    scan_id: int = -1
    trajectory_id: int = 0
    position: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        vector = np.array(self.vector, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(vector)):
            raise DataError("location embedding has non-finite values")
        object.__setattr__(self, "vector", vector)
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(2))

    @property
    def channels(self):
        return self.vector.size


def _map_data(descriptor_map):
    data = descriptor_map.data if isinstance(descriptor_map, Grid2) else np.asarray(descriptor_map, dtype=np.float64)
    if data.ndim == 2:
        data = data[:, :, None]
    return data


def embed(descriptor_map, scan_id=-1, trajectory_id=0, position=(0.0, 0.0)):
    """Per-channel spatial maximum of the descriptor map."""
    data = _map_data(descriptor_map)
    return LocationEmbedding(data.max(axis=(0, 1)), scan_id, trajectory_id, position)


def embed_backward(descriptor_map, grad_vector):
    """Routes each channel's gradient to the first pixel holding its maximum."""
    data = _map_data(descriptor_map)
    height, width, channels = data.shape
    flat = data.reshape(height * width, channels)
    grad = np.zeros_like(flat)
    grad[np.argmax(flat, axis=0), np.arange(channels)] = grad_vector
    return grad.reshape(data.shape)


def embed_keypoints(keypoints, scan_id=-1, trajectory_id=0, position=(0.0, 0.0)):
    """Max-pool over the sampled keypoint descriptors instead of the dense map."""
    return LocationEmbedding(np.max(keypoints.descriptors, axis=0), scan_id, trajectory_id, position)


def cosine_similarity(a, b):
    """Cosine similarity of a (C,) vector with each row of b; zero vectors score 0."""
    a_unit = l2_normalize(np.asarray(a, dtype=np.float64)).unit
    b_unit = l2_normalize(np.atleast_2d(np.asarray(b, dtype=np.float64)), axis=1).unit
    return b_unit @ a_unit


@dataclass(frozen=True)
class Neighbour:
    scan_id: int
    similarity: float
    trajectory_id: int
    position: np.ndarray


class EmbeddingIndex:
    """Cosine-similarity index over location embeddings.

    The linear backend is the exact reference. The kdtree backend searches unit
    vectors with a scipy KDTree and re-ranks a distance ball exactly, so both return
    identical ids in identical order. Reads may run concurrently; add() is
    serialised by a lock.
    """

    def __init__(self, backend="linear"):
        if backend not in BACKENDS:
            raise ConfigurationError(f"unknown index backend {backend!r}; choose one of {BACKENDS}")
        self.backend = backend
        self._lock = threading.Lock()
        self._embeddings = []
        self._ids = np.zeros(0, dtype=np.int64)
        self._trajectories = np.zeros(0, dtype=np.int64)
        self._units = np.zeros((0, 0))
        self._degenerate = np.zeros(0, dtype=bool)
        self._tree = None

    def __len__(self):
        return len(self._embeddings)

    def add(self, embedding):
        with self._lock:
            if self._embeddings and embedding.channels != self._embeddings[0].channels:
                raise DataError(
                    f"embedding has {embedding.channels} channels, index holds {self._embeddings[0].channels}"
                )
            if np.any((self._ids == embedding.scan_id) & (self._trajectories == embedding.trajectory_id)):
                raise DataError(
                    f"scan {embedding.scan_id} of trajectory {embedding.trajectory_id} is already indexed"
                )
            unit, degenerate = l2_normalize(embedding.vector)
            self._embeddings = self._embeddings + [embedding]
            self._ids = np.append(self._ids, embedding.scan_id)
            self._trajectories = np.append(self._trajectories, embedding.trajectory_id)
            self._units = unit[None, :] if len(self._units) == 0 else np.vstack([self._units, unit])
            self._degenerate = np.append(self._degenerate, bool(degenerate))
            self._tree = None

    def extend(self, embeddings):
        for embedding in embeddings:
            self.add(embedding)

    def get(self, scan_id):
        position = int(np.flatnonzero(self._ids == scan_id)[0])
        return self._embeddings[position]

    def _snapshot(self):
        with self._lock:
            if self.backend == "kdtree" and self._tree is None and len(self._embeddings):
                healthy = np.flatnonzero(~self._degenerate)
                self._tree = (KDTree(self._units[healthy]), healthy) if len(healthy) else None
            return self._embeddings, self._ids, self._trajectories, self._units, self._degenerate, self._tree

    def query(self, embedding, n=1, exclude_id=None, exclude_trajectory=None, max_id=None):
        """Top-n neighbours by cosine similarity.

        The query itself (same scan_id and trajectory_id) is never returned, nor is
        exclude_id when given.
        exclude_trajectory drops same-trajectory entries and max_id drops entries
        with larger ids.
        """
        if n < 1:
            raise DataError(f"n must be >= 1, got {n}")
        embeddings, ids, trajectories, units, degenerate, tree = self._snapshot()
        if not embeddings:
            raise DataError("cannot query an empty embedding index")
        vector = embedding.vector if isinstance(embedding, LocationEmbedding) else np.asarray(embedding, dtype=float)
        allowed = np.ones(len(ids), dtype=bool)
        if isinstance(embedding, LocationEmbedding):
            allowed &= ~((ids == embedding.scan_id) & (trajectories == embedding.trajectory_id))
        if exclude_id is not None:
            allowed &= ids != exclude_id
        if exclude_trajectory is not None:
            allowed &= trajectories != exclude_trajectory
        if max_id is not None:
            allowed &= ids <= max_id

        q_unit, q_degenerate = l2_normalize(vector)
        if self.backend == "kdtree" and tree is not None and not q_degenerate:
            candidates = self._tree_candidates(tree, q_unit, allowed, degenerate, n)
        else:
            candidates = np.flatnonzero(allowed)
        return self._rank(candidates, q_unit, ids, trajectories, embeddings, units, n)

    @staticmethod
    def _tree_candidates(tree, q_unit, allowed, degenerate, n):
        kdtree, healthy = tree
        size = len(healthy)
        k = min(size, n + int(np.count_nonzero(~allowed)))
        while True:
            distances, rows = kdtree.query(q_unit, k=max(k, 1))
            distances = np.atleast_1d(distances)
            rows = np.atleast_1d(rows)
            valid = allowed[healthy[rows]]
            if np.count_nonzero(valid) >= n or k >= size:
                break
            k = min(size, 2 * k)
        if np.count_nonzero(valid) >= n:
            radius = distances[np.flatnonzero(valid)[n - 1]] + BALL_SLACK
            ball = healthy[np.asarray(kdtree.query_ball_point(q_unit, radius), dtype=np.int64)]
        else:
            ball = healthy
        candidates = np.union1d(ball, np.flatnonzero(degenerate))
        return candidates[allowed[candidates]]

    @staticmethod
    def _rank(candidates, q_unit, ids, trajectories, embeddings, units, n):
        if len(candidates) == 0:
            return []
        similarities = units[candidates] @ q_unit
        order = np.lexsort((ids[candidates], -similarities))[:n]
        return [
            Neighbour(
                scan_id=int(ids[candidates[i]]),
                similarity=float(similarities[i]),
                trajectory_id=int(trajectories[candidates[i]]),
                position=embeddings[candidates[i]].position,
            )
            for i in order
        ]


def recall_curve(queries, index, max_n, distance=5.0, same_trajectory=False):
    """recall@N for N = 1..max_n.

    A query counts as recalled at N when one of its top-N neighbours lies within
    `distance` metres of the query's ground-truth position. Neighbours from the
    query's own trajectory are excluded unless same_trajectory is set.
    """
    if not distance > 0:
        raise DataError(f"recall distance must be positive, got {distance}")
    queries = list(queries)
    if not queries:
        return np.zeros(max_n)
    first_hit = np.full(len(queries), np.inf)
    for row, query in enumerate(queries):
        neighbours = index.query(
            query, max_n, exclude_trajectory=None if same_trajectory else query.trajectory_id
        )
        for rank, neighbour in enumerate(neighbours, start=1):
            if np.linalg.norm(neighbour.position - query.position) <= distance:
                first_hit[row] = rank
                break
    ranks = np.arange(1, max_n + 1)
    return (first_hit[None, :] <= ranks[:, None]).mean(axis=1)


def recall_at_n(queries, index, n, distance=5.0, same_trajectory=False):
    return float(recall_curve(queries, index, n, distance, same_trajectory)[n - 1])


def _distances(anchor, others):
    return np.linalg.norm(np.atleast_2d(others) - anchor, axis=1)


def triplet_loss(anchor, positives, negatives, margin=0.5):
    """Batch-hard hinge: max(max_p d(a, p) - min_n d(a, n) + margin, 0)."""
    positives = np.atleast_2d(positives)
    negatives = np.atleast_2d(negatives)
    if positives.size == 0 or negatives.size == 0:
        raise DataError("triplet loss needs at least one positive and one negative")
    hardest_positive = _distances(anchor, positives).max()
    hardest_negative = _distances(anchor, negatives).min()
    return float(max(hardest_positive - hardest_negative + margin, 0.0))


def triplet_loss_backward(anchor, positives, negatives, margin=0.5):
    """(d/d anchor, d/d positives, d/d negatives), flowing only through the hardest pair."""
    anchor = np.asarray(anchor, dtype=np.float64)
    positives = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    g_anchor = np.zeros_like(anchor)
    g_positives = np.zeros_like(positives)
    g_negatives = np.zeros_like(negatives)
    d_pos = _distances(anchor, positives)
    d_neg = _distances(anchor, negatives)
    p, k = int(np.argmax(d_pos)), int(np.argmin(d_neg))
    if d_pos[p] - d_neg[k] + margin <= 0.0:
        return g_anchor, g_positives, g_negatives
    if d_pos[p] > 0:
        direction = (anchor - positives[p]) / d_pos[p]
        g_anchor += direction
        g_positives[p] -= direction
    if d_neg[k] > 0:
        direction = (anchor - negatives[k]) / d_neg[k]
        g_anchor -= direction
        g_negatives[k] += direction
    return g_anchor, g_positives, g_negatives


def sample_triplets(positions, anchor, rng, positives=5, negatives=5, positive_radius=5.0, negative_radius=25.0):
    """Indices of positives (closer than positive_radius) and negatives (further than negative_radius).

    Returns None when the anchor does not have enough of either.
    """
    positions = np.asarray(positions, dtype=np.float64)
    distances = np.linalg.norm(positions - positions[anchor], axis=1)
    near = np.flatnonzero((distances < positive_radius) & (np.arange(len(positions)) != anchor))
    far = np.flatnonzero(distances > negative_radius)
    if len(near) < positives or len(far) < negatives:
        return None
    return rng.choice(near, positives, replace=False), rng.choice(far, negatives, replace=False)


@dataclass(frozen=True)
class ThresholdCalibration:
    threshold: float
    true_positives: int
    false_positives: int
    recall: float


def calibrate_threshold(similarities, is_true_closure, fallback=0.95):
    """Lowest similarity threshold whose accepted proposals are all true closures.

    Returns the fallback threshold when there are no proposals at all.
    """
    similarities = np.asarray(similarities, dtype=np.float64)
    truth = np.asarray(is_true_closure, dtype=bool)
    if similarities.size == 0:
        logger.warning(f"no validation proposals; keeping closure threshold {fallback}")
        return ThresholdCalibration(fallback, 0, 0, 0.0)
    false_sims = similarities[~truth]
    floor = false_sims.max() if false_sims.size else -np.inf
    accepted = truth & (similarities > floor)
    if accepted.any():
        threshold = float(similarities[accepted].min())
    else:
        threshold = float(np.nextafter(floor, np.inf))
    tp = int(np.count_nonzero(truth & (similarities >= threshold)))
    recall = tp / max(int(truth.sum()), 1)
    logger.info(f"calibrated closure threshold {threshold:.6f}: {tp} true closures accepted, recall {recall:.3f}")
    return ThresholdCalibration(threshold, tp, 0, recall)
