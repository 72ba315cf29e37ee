"""Hierarchical binary-descriptor vocabulary, BoW conversion and L1 scoring.

Descriptors are 256-bit strings stored as ``uint8`` arrays of length 32.
A vocabulary with branching ``k`` and depth ``L`` is a complete k-ary tree;
level ``l`` (1-based) holds ``k**l`` centroids and the children of node ``i``
on level ``l`` are nodes ``k*i .. k*i + k - 1`` on level ``l + 1``.  Leaves
(level ``L``) are the words.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput, InsufficientData, SchemaError, ZeroVector

DESCRIPTOR_BYTES = 32
DESCRIPTOR_BITS = 8 * DESCRIPTOR_BYTES
VOCAB_SCHEMA = "objslam.vocabulary/1"

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint16)

BowVector = dict  # word id -> positive weight


def as_descriptors(d):
    d = np.asarray(d, dtype=np.uint8)
    if d.ndim == 1:
        d = d[None, :]
    if d.shape[-1] != DESCRIPTOR_BYTES:
        raise ValueError(f"descriptors must have {DESCRIPTOR_BYTES} bytes")
    return d


def hamming(a, b) -> int:
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    if a.shape != b.shape:
        raise ValueError("descriptor widths differ")
    return int(_POPCOUNT[np.bitwise_xor(a, b)].sum())


def hamming_matrix(a, b):
    """Pairwise Hamming distances between rows of ``a`` (n, 32) and ``b`` (m, 32)."""
    x = np.bitwise_xor(a[:, None, :], b[None, :, :])
    return _POPCOUNT[x].sum(axis=-1, dtype=np.int32)


def bitwise_median(d):
    """Per-bit majority vote; ties go to 0."""
    bits = np.unpackbits(d, axis=1)
    votes = bits.sum(axis=0, dtype=np.int64)
    return np.packbits((2 * votes > len(d)).astype(np.uint8))


def to_hex(d) -> str:
    return bytes(np.asarray(d, dtype=np.uint8)).hex()


def from_hex(s: str):
    return np.frombuffer(bytes.fromhex(s), dtype=np.uint8).copy()


@dataclass
class VocabularyTree:
    k: int
    levels: int
    centroids: list  # per level, (k**l, 32) uint8
    weights: np.ndarray  # (k**L,) idf per leaf
    class_label: int = 0
    seed: int = 0
    n_documents: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_words(self):
        return self.k ** self.levels

    def leaf_paths(self, descriptors):
        """Greedy root-to-leaf descent; returns leaf ids, ties to lowest child."""
        d = as_descriptors(descriptors)
        node = np.zeros(len(d), dtype=np.int64)
        for level in range(self.levels):
            children = node[:, None] * self.k + np.arange(self.k)
            cand = self.centroids[level][children]  # (n, k, 32)
            dist = _POPCOUNT[np.bitwise_xor(cand, d[:, None, :])].sum(axis=-1)
            node = children[np.arange(len(d)), np.argmin(dist, axis=1)]
        return node

    def to_dict(self):
        return {
            "schema": VOCAB_SCHEMA,
            "k": self.k,
            "levels": self.levels,
            "class_label": self.class_label,
            "seed": self.seed,
            "n_documents": self.n_documents,
            "centroids": [[to_hex(c) for c in lvl] for lvl in self.centroids],
            "weights": [float(w) for w in self.weights],
        }

    @classmethod
    def from_dict(cls, data):
        if data.get("schema") != VOCAB_SCHEMA:
            raise SchemaError(f"unsupported vocabulary schema {data.get('schema')!r}")
        k, L = int(data["k"]), int(data["levels"])
        cents = [np.array([from_hex(h) for h in lvl], dtype=np.uint8) for lvl in data["centroids"]]
        if len(cents) != L or any(len(c) != k ** (i + 1) for i, c in enumerate(cents)):
            raise SchemaError("centroid table does not match k and levels")
        return cls(k, L, cents, np.array(data["weights"], dtype=float),
                   int(data["class_label"]), int(data["seed"]), int(data.get("n_documents", 0)))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _kmedians(d, k, rng, n_iter=10):
    """Cluster binary descriptors; returns (centroids (k, 32), labels)."""
    n = len(d)
    # k-means++ style seeding in Hamming space
    first = int(rng.integers(n))
    centers = [d[first]]
    mind = hamming_matrix(d, d[first][None])[:, 0].astype(float)
    for _ in range(1, k):
        total = mind.sum()
        if total <= 0:
            centers.append(d[int(rng.integers(n))])
        else:
            centers.append(d[int(rng.choice(n, p=mind / total))])
        mind = np.minimum(mind, hamming_matrix(d, centers[-1][None])[:, 0])
    centers = np.array(centers)

    labels = None
    for _ in range(n_iter):
        new = np.argmin(hamming_matrix(d, centers), axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        counts = np.bincount(labels, minlength=k)
        for c in range(k):
            if counts[c] == 0:
                # reseed from the farthest member of the largest cluster
                big = int(np.argmax(counts))
                members = np.flatnonzero(labels == big)
                if len(members) < 2:
                    continue
                far = members[np.argmax(hamming_matrix(d[members], centers[big][None])[:, 0])]
                labels[far] = c
                counts[big] -= 1
                counts[c] = 1
        for c in range(k):
            members = labels == c
            if members.any():
                centers[c] = bitwise_median(d[members])
    labels = np.argmin(hamming_matrix(d, centers), axis=1)
    return centers, labels


def build_vocabulary(training, k=5, levels=5, seed=0, documents=None, class_label=0,
                     n_iter=10) -> VocabularyTree:
    """Build a vocabulary tree by recursive k-medians.

    ``documents`` is a list of descriptor arrays (one per training object
    instance) used for the idf weights; it defaults to one document holding
    all training descriptors.
    """
    if k < 2 or levels < 1:
        raise ValueError("need k >= 2 and levels >= 1")
    d = as_descriptors(training) if len(training) else np.zeros((0, DESCRIPTOR_BYTES), np.uint8)
    if len(d) == 0:
        raise InsufficientData("no training descriptors")
    rng = np.random.default_rng(seed)

    centroids = [np.zeros((k ** (l + 1), DESCRIPTOR_BYTES), dtype=np.uint8) for l in range(levels)]
    # members of each node on the current level
    members = [np.arange(len(d))]
    parents = [bitwise_median(d)]
    for level in range(levels):
        next_members = []
        for node, idx in enumerate(members):
            base = node * k
            if len(idx) >= k:
                cents, labels = _kmedians(d[idx], k, rng, n_iter)
                groups = [idx[labels == c] for c in range(k)]
            else:
                cents = np.empty((k, DESCRIPTOR_BYTES), dtype=np.uint8)
                groups = []
                for c in range(k):
                    if c < len(idx):
                        cents[c] = d[idx[c]]
                        groups.append(idx[c:c + 1])
                    else:
                        # childless slot: copy a random member (or the parent centroid)
                        src = d[idx[int(rng.integers(len(idx)))]] if len(idx) else parents[node]
                        cents[c] = src
                        groups.append(idx[:0])
            for c in range(k):
                if len(groups[c]) == 0 and len(idx) >= k:
                    cents[c] = d[idx[int(rng.integers(len(idx)))]]
            centroids[level][base:base + k] = cents
            next_members.extend(groups)
        parents = list(centroids[level])
        members = next_members

    tree = VocabularyTree(k, levels, centroids, np.zeros(k ** levels), class_label, seed)
    docs = documents if documents is not None else [d]
    tree.weights = idf_weights(tree, docs)
    tree.n_documents = len(docs)
    return tree


def idf_weights(tree: VocabularyTree, documents):
    """``ln(N / n_i)`` for every word hit by at least one document, else 0."""
    n_docs = len(documents)
    hits = np.zeros(tree.n_words, dtype=np.int64)
    for doc in documents:
        if len(doc) == 0:
            continue
        hits[np.unique(tree.leaf_paths(doc))] += 1
    w = np.zeros(tree.n_words)
    seen = hits > 0
    w[seen] = np.log(n_docs / hits[seen])
    return w


def transform(descriptors, tree: VocabularyTree) -> BowVector:
    """Occurrence count times idf for every word with positive weight."""
    if descriptors is None or len(descriptors) == 0:
        raise EmptyInput("no descriptors to transform")
    leaves = tree.leaf_paths(descriptors)
    words, counts = np.unique(leaves, return_counts=True)
    out = {}
    for w, c in zip(words, counts):
        v = float(c) * float(tree.weights[w])
        if v > 0:
            out[int(w)] = v
    return out


def l1_score(v1: BowVector, v2: BowVector) -> float:
    """``1 - 0.5 * | v1/|v1| - v2/|v2| |_1``, in [0, 1]."""
    n1 = sum(v1.values())
    n2 = sum(v2.values())
    if n1 <= 0 or n2 <= 0:
        raise ZeroVector("BoW vector has zero L1 norm")
    # for unit-L1 vectors, 1 - |a - b|/2 equals the sum of min(a_i, b_i)
    if len(v2) < len(v1):
        v1, v2, n1, n2 = v2, v1, n2, n1
    s = 0.0
    for w, a in v1.items():
        b = v2.get(w)
        if b is not None:
            s += min(a / n1, b / n2)
    return min(1.0, max(0.0, s))
