"""Visual vocabularies over binary descriptors.

Two trainers are provided: a flat approximate k-means (AKM) whose assignment
step runs through a rebuilt nearest-word index each iteration, and a
hierarchical k-means (HKM) tree with greedy root-to-leaf descent, the usual
baseline in binary-BoW retrieval systems.  Centroids are binary, updated by
per-bit majority vote.

A trained vocabulary bundles the word list, the assignment structure, the
size binning used to split the effective vocabulary into S copies, and the
per-(word, size bin) idf weights.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import ImageFeatures, hamming_cross, pack_u64

GTBV_MAGIC = b"GTBV"
GTBV_VERSION = 1

AKM = "akm"
HKM = "hkm"

# Below this many words every lookup is an exact linear scan.
EXACT_SCAN_THRESHOLD = 1024


class VocabularyFileError(ValueError):
    pass


# ---------------------------------------------------------------------------
# k-majority: binary k-means with majority-vote centroids
# ---------------------------------------------------------------------------


def _majority_update(
    descriptors: np.ndarray, assign: np.ndarray, prev_centroids: np.ndarray
) -> np.ndarray:
    """Per-bit majority vote per cluster; ties keep the previous centroid bit.

    Empty clusters keep their previous centroid unchanged.
    """
    n, nb = descriptors.shape
    k = prev_centroids.shape[0]
    bitsum = np.zeros((k, nb * 8), dtype=np.int64)
    counts = np.bincount(assign, minlength=k)
    for start in range(0, n, 8192):
        chunk = descriptors[start : start + 8192]
        bits = np.unpackbits(chunk, axis=1)
        np.add.at(bitsum, assign[start : start + 8192], bits)
    prev_bits = np.unpackbits(prev_centroids, axis=1)
    twice = 2 * bitsum
    cnt = counts[:, None]
    new_bits = np.where(twice > cnt, 1, np.where(twice < cnt, 0, prev_bits)).astype(np.uint8)
    return np.packbits(new_bits, axis=1)


def _assign_exact(descriptors_p: np.ndarray, centroids_p: np.ndarray,
                  chunk: int = 1024) -> np.ndarray:
    """Exact nearest centroid for each descriptor; ties go to the lower index."""
    n = descriptors_p.shape[0]
    out = np.empty(n, dtype=np.int32)
    for s in range(0, n, chunk):
        d = hamming_cross(descriptors_p[s : s + chunk], centroids_p)
        out[s : s + chunk] = d.argmin(axis=1)
    return out


def kmajority(
    descriptors: np.ndarray,
    k: int,
    seed: int,
    max_iters: int = 15,
    min_change_frac: float = 0.001,
    assigner=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Cluster binary descriptors into k groups; returns (centroids, assignment).

    ``assigner(centroids) -> assignment`` overrides the exact assignment step
    (AKM plugs the rebuilt ANN index in here).
    """
    descriptors = np.atleast_2d(np.asarray(descriptors, dtype=np.uint8))
    n = descriptors.shape[0]
    if n < k:
        raise ValueError(f"need at least k={k} descriptors, got {n}")
    rng = np.random.default_rng([0x4B4D414A, seed])
    centroids = descriptors[np.sort(rng.choice(n, size=k, replace=False))].copy()
    dp = pack_u64(descriptors)

    def assign_to(cents: np.ndarray) -> np.ndarray:
        if assigner is not None:
            return np.asarray(assigner(cents), dtype=np.int64)
        return _assign_exact(dp, pack_u64(cents)).astype(np.int64)

    assign = None
    for _ in range(max_iters):
        new_assign = assign_to(centroids)
        if assign is not None and np.count_nonzero(new_assign != assign) < min_change_frac * n:
            assign = new_assign
            break
        assign = new_assign
        centroids = _majority_update(descriptors, assign, centroids)
    else:
        # iteration cap hit after a centroid update; refresh the assignment
        # so the returned pair is consistent
        assign = assign_to(centroids)
    return centroids, assign


# ---------------------------------------------------------------------------
# Nearest-word index: candidate-generating coarse groups + exact rescoring
# ---------------------------------------------------------------------------


@dataclass
class AnnParams:
    exact_threshold: int = EXACT_SCAN_THRESHOLD
    copies: int = 2          # each word is filed under this many coarse groups
    nprobe: int = 0          # 0 -> max(8, groups // 4)
    seed: int = 0


class WordIndex:
    """r-nearest-word search over a fixed word list.

    Small vocabularies fall back to an exact linear scan.  Larger ones use a
    coarse quantizer: words are filed under their ``copies`` nearest group
    centroids, queries probe their ``nprobe`` nearest groups and candidates
    are rescored with exact Hamming distances.
    """

    def __init__(self, words: np.ndarray, params: AnnParams | None = None):
        self.words = np.atleast_2d(np.asarray(words, dtype=np.uint8))
        self.params = params or AnnParams()
        self._wp = pack_u64(self.words)
        v = self.words.shape[0]
        self.exact = v <= self.params.exact_threshold
        if self.exact:
            return
        n_groups = int(np.ceil(np.sqrt(v)))
        centroids, _ = kmajority(self.words, n_groups, seed=self.params.seed, max_iters=8)
        self._group_centroids_p = pack_u64(centroids)
        d = hamming_cross(self._wp, self._group_centroids_p)
        copies = min(self.params.copies, n_groups)
        near = np.argsort(d, axis=1, kind="stable")[:, :copies]
        members = [[] for _ in range(n_groups)]
        for w in range(v):
            for g in near[w]:
                members[g].append(w)
        self._members = [np.asarray(m, dtype=np.int64) for m in members]
        self._members_p = [self._wp[m] for m in self._members]
        self.n_groups = n_groups
        self.nprobe = self.params.nprobe or max(8, n_groups // 4)

    @property
    def n_words(self) -> int:
        return self.words.shape[0]

    def search(self, queries: np.ndarray, r: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """Return (word_ids, distances), each (n, r), nearest first.

        Ties break toward the lower word id.
        """
        queries = np.atleast_2d(np.asarray(queries, dtype=np.uint8))
        if r < 1:
            raise ValueError("r must be >= 1")
        if r > self.n_words:
            raise ValueError(f"r={r} exceeds vocabulary size {self.n_words}")
        qp = pack_u64(queries)
        if self.exact:
            return self._search_exact(qp, r)
        return self._search_grouped(qp, r)

    def _search_exact(self, qp: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray]:
        n = qp.shape[0]
        ids = np.empty((n, r), dtype=np.int32)
        dist = np.empty((n, r), dtype=np.int32)
        for s in range(0, n, 2048):
            d = hamming_cross(qp[s : s + 2048], self._wp)
            top = np.argsort(d, axis=1, kind="stable")[:, :r]
            ids[s : s + 2048] = top
            dist[s : s + 2048] = np.take_along_axis(d, top, axis=1)
        return ids, dist

    def _search_grouped(self, qp: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray]:
        n = qp.shape[0]
        v = self.n_words
        # merged candidate keys: distance in the high bits, word id in the low
        # bits, so one stable sort orders by (distance, id)
        sentinel = np.int64(1 << 62)
        best = np.full((n, r), sentinel, dtype=np.int64)
        gd = hamming_cross(qp, self._group_centroids_p)
        probes = np.argsort(gd, axis=1, kind="stable")[:, : self.nprobe]
        probed_by = [[] for _ in range(self.n_groups)]
        for q in range(n):
            for g in probes[q]:
                probed_by[g].append(q)
        id_bits = max(v.bit_length(), 1)
        for g, qsel in enumerate(probed_by):
            if not qsel or self._members[g].size == 0:
                continue
            qsel = np.asarray(qsel, dtype=np.int64)
            d = hamming_cross(qp[qsel], self._members_p[g]).astype(np.int64)
            keys = (d << id_bits) | self._members[g][None, :]
            take = min(r, keys.shape[1])
            part = np.argsort(keys, axis=1, kind="stable")[:, :take]
            cand = np.take_along_axis(keys, part, axis=1)
            merged = np.concatenate([best[qsel], cand], axis=1)
            merged.sort(axis=1)
            # a word filed in two probed groups appears twice with an equal
            # key; keep first occurrences only
            dup = np.zeros_like(merged, dtype=bool)
            dup[:, 1:] = merged[:, 1:] == merged[:, :-1]
            merged[dup] = sentinel
            merged.sort(axis=1)
            best[qsel] = merged[:, :r]
        found = best < sentinel
        if not found.all():
            # pathological probe miss: rescore those queries exactly
            miss = np.nonzero(~found.all(axis=1))[0]
            ids_m, dist_m = self._search_exact(qp[miss], r)
            keys_m = (dist_m.astype(np.int64) << id_bits) | ids_m
            best[miss] = keys_m
        ids = (best & ((1 << id_bits) - 1)).astype(np.int32)
        dist = (best >> id_bits).astype(np.int32)
        return ids, dist


# ---------------------------------------------------------------------------
# HKM tree
# ---------------------------------------------------------------------------


@dataclass
class HkmNode:
    centroid: np.ndarray           # (nb,) uint8
    children: list[int] = field(default_factory=list)  # node indices
    word_id: int = -1              # >= 0 iff leaf


@dataclass
class HkmTree:
    k: int
    depth: int
    nodes: list[HkmNode]

    def descend(self, queries: np.ndarray) -> np.ndarray:
        """Greedy root-to-leaf descent; returns the leaf word id per query."""
        queries = np.atleast_2d(np.asarray(queries, dtype=np.uint8))
        qp = pack_u64(queries)
        n = qp.shape[0]
        at = np.zeros(n, dtype=np.int64)
        out = np.full(n, -1, dtype=np.int32)
        active = np.arange(n)
        while active.size:
            done = []
            for node_id in np.unique(at[active]):
                node = self.nodes[node_id]
                sel = active[at[active] == node_id]
                if node.word_id >= 0:
                    out[sel] = node.word_id
                    done.append(node_id)
                    continue
                kids = np.asarray(node.children, dtype=np.int64)
                cents = pack_u64(np.stack([self.nodes[c].centroid for c in node.children]))
                d = hamming_cross(qp[sel], cents)
                at[sel] = kids[d.argmin(axis=1)]
            active = active[out[active] < 0]
        return out


def _build_hkm(
    descriptors: np.ndarray, k: int, max_depth: int, seed: int, max_iters: int
) -> tuple[HkmTree, np.ndarray]:
    descriptors = np.atleast_2d(np.asarray(descriptors, dtype=np.uint8))
    if descriptors.shape[0] == 0:
        raise ValueError("cannot train a vocabulary on an empty descriptor set")
    nodes: list[HkmNode] = []
    words: list[np.ndarray] = []

    def build(idx: np.ndarray, depth: int, branch_seed: int) -> int:
        subset = descriptors[idx]
        centroid = _majority_update(subset, np.zeros(len(idx), dtype=np.int64),
                                    subset[:1].copy())[0]
        node_id = len(nodes)
        nodes.append(HkmNode(centroid=centroid))
        # branching stops at max depth or when a node has too few descriptors
        if depth >= max_depth or len(idx) < k:
            nodes[node_id].word_id = len(words)
            words.append(centroid)
            return node_id
        cents, assign = kmajority(subset, k, seed=branch_seed, max_iters=max_iters)
        occupied = np.unique(assign)
        if occupied.size < 2:
            nodes[node_id].word_id = len(words)
            words.append(centroid)
            return node_id
        for j, c in enumerate(occupied):
            child = build(idx[assign == c], depth + 1, branch_seed * 31 + j + 1)
            nodes[node_id].children.append(child)
        return node_id

    build(np.arange(descriptors.shape[0]), 0, seed)
    tree = HkmTree(k=k, depth=max_depth, nodes=nodes)
    return tree, np.stack(words)


# ---------------------------------------------------------------------------
# Size binning
# ---------------------------------------------------------------------------

PERCENTILE = "percentile"
DISCRETE = "discrete"


@dataclass(frozen=True)
class SizeBinning:
    """Partition of keypoint sizes into S bins.

    Percentile mode stores the S-1 inner quantile boundaries; discrete mode
    stores the S canonical level sizes and bins by nearest level.
    """

    mode: str
    thresholds: np.ndarray
    n_bins: int

    def __post_init__(self):
        t = np.asarray(self.thresholds, dtype=np.float64)
        object.__setattr__(self, "thresholds", t)
        if self.mode not in (PERCENTILE, DISCRETE):
            raise ValueError(f"unknown binning mode {self.mode!r}")
        expected = self.n_bins - 1 if self.mode == PERCENTILE else self.n_bins
        if len(t) != expected:
            raise ValueError(f"{self.mode} binning with {self.n_bins} bins needs "
                             f"{expected} thresholds, got {len(t)}")
        if len(t) > 1 and not np.all(np.diff(t) > 0):
            raise ValueError("thresholds must be strictly ascending")

    def bin_of(self, sizes) -> np.ndarray:
        """Bin index per size; scalar in, scalar out."""
        s = np.asarray(sizes, dtype=np.float64)
        scalar = s.ndim == 0
        s = np.atleast_1d(s)
        if self.mode == PERCENTILE:
            # first threshold >= size; sizes above all thresholds overflow
            # into the last bin
            b = np.searchsorted(self.thresholds, s, side="left")
        else:
            d = np.abs(s[:, None] - self.thresholds[None, :])
            b = d.argmin(axis=1)
        b = b.astype(np.int32)
        return int(b[0]) if scalar else b


def single_bin() -> SizeBinning:
    return SizeBinning(mode=PERCENTILE, thresholds=np.zeros(0), n_bins=1)


def _gather_sizes(keypoints) -> np.ndarray:
    if isinstance(keypoints, np.ndarray):
        return keypoints.astype(np.float64)
    sizes = []
    for item in keypoints:
        if isinstance(item, ImageFeatures):
            sizes.append(np.asarray(item.sizes, dtype=np.float64))
        else:  # Keypoint
            sizes.append(np.asarray([item.size], dtype=np.float64))
    if not sizes:
        return np.zeros(0)
    return np.concatenate(sizes)


def fit_size_bins(keypoints, n_bins: int, mode: str = PERCENTILE) -> SizeBinning:
    """Fit S size bins from training keypoint sizes.

    ``keypoints`` may be a plain array of sizes, a list of Keypoint, or a
    list of ImageFeatures.
    """
    sizes = _gather_sizes(keypoints)
    if sizes.size == 0:
        raise ValueError("cannot fit size bins without training keypoints")
    if n_bins < 1:
        raise ValueError("need at least one size bin")
    if mode == PERCENTILE:
        if n_bins == 1:
            return single_bin()
        qs = np.arange(1, n_bins) / n_bins
        thr = np.quantile(sizes, qs)
        if not np.all(np.diff(thr) > 0):
            raise ValueError(
                f"training sizes have too few distinct values for {n_bins} percentile bins"
            )
        return SizeBinning(mode=PERCENTILE, thresholds=thr, n_bins=n_bins)
    if mode == DISCRETE:
        levels = np.unique(np.round(sizes, 6))
        if len(levels) < n_bins:
            raise ValueError(
                f"discrete binning with {n_bins} bins needs >= {n_bins} distinct "
                f"sizes, found {len(levels)}"
            )
        if len(levels) > n_bins:
            pick = np.linspace(0, len(levels) - 1, n_bins).round().astype(int)
            levels = levels[pick]
        return SizeBinning(mode=DISCRETE, thresholds=levels, n_bins=n_bins)
    raise ValueError(f"unknown binning mode {mode!r}")


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Vocabulary:
    kind: str                       # AKM or HKM
    words: np.ndarray               # (V, width_bits/8) uint8
    size_binning: SizeBinning
    idf: np.ndarray | None = None   # (V * S,) float64, row = word + V * bin
    tree: HkmTree | None = None     # HKM only
    ann_params: AnnParams = field(default_factory=AnnParams)
    train_params: dict = field(default_factory=dict)
    _index_cache: list = field(default_factory=list, repr=False, compare=False)

    @property
    def n_words(self) -> int:
        return self.words.shape[0]

    @property
    def n_bins(self) -> int:
        return self.size_binning.n_bins

    @property
    def n_rows(self) -> int:
        return self.n_words * self.n_bins

    @property
    def width_bits(self) -> int:
        return self.words.shape[1] * 8

    @property
    def word_index(self) -> WordIndex:
        if not self._index_cache:
            self._index_cache.append(WordIndex(self.words, self.ann_params))
        return self._index_cache[0]

    def with_binning(self, binning: SizeBinning) -> "Vocabulary":
        # idf is indexed per (word, bin) row, so a new binning invalidates it
        return replace(self, size_binning=binning, idf=None)

    def with_idf(self, idf: np.ndarray) -> "Vocabulary":
        idf = np.asarray(idf, dtype=np.float64)
        if idf.shape != (self.n_rows,):
            raise ValueError(f"idf must have shape ({self.n_rows},), got {idf.shape}")
        return replace(self, idf=idf)

    def content_hash(self) -> bytes:
        """Digest over everything that affects assignment and weighting."""
        h = hashlib.blake2b(digest_size=16)
        h.update(self.kind.encode())
        h.update(struct.pack("<III", self.n_words, self.n_bins, self.width_bits))
        h.update(self.size_binning.mode.encode())
        h.update(np.ascontiguousarray(self.size_binning.thresholds).tobytes())
        h.update(np.ascontiguousarray(self.words).tobytes())
        h.update(b"" if self.idf is None else np.ascontiguousarray(self.idf).tobytes())
        return h.digest()


def train_akm(descriptors: np.ndarray, v: int, max_iters: int = 15, seed: int = 0,
              ann_params: AnnParams | None = None) -> Vocabulary:
    """Flat k-means vocabulary; each iteration assigns through a fresh
    nearest-word index over the current centroids."""
    descriptors = np.atleast_2d(np.asarray(descriptors, dtype=np.uint8))
    if descriptors.shape[0] < v:
        raise ValueError(
            f"need at least V={v} training descriptors, got {descriptors.shape[0]}"
        )
    ann_params = ann_params or AnnParams(seed=seed)

    def assigner(centroids: np.ndarray) -> np.ndarray:
        index = WordIndex(centroids, ann_params)
        ids, _ = index.search(descriptors, r=1)
        return ids[:, 0].astype(np.int64)

    words, _ = kmajority(descriptors, v, seed=seed, max_iters=max_iters, assigner=assigner)
    return Vocabulary(
        kind=AKM,
        words=words,
        size_binning=single_bin(),
        ann_params=ann_params,
        train_params={"V": v, "max_iters": max_iters, "seed": seed},
    )


def train_hkm(descriptors: np.ndarray, k: int, depth: int, seed: int = 0,
              max_iters: int = 10) -> Vocabulary:
    """Hierarchical k-means vocabulary tree; leaves are the words."""
    if k < 2:
        raise ValueError("branching factor must be >= 2")
    if depth < 1:
        raise ValueError("depth must be >= 1")
    tree, words = _build_hkm(descriptors, k, depth, seed, max_iters)
    return Vocabulary(
        kind=HKM,
        words=words,
        size_binning=single_bin(),
        tree=tree,
        train_params={"k": k, "L": depth, "seed": seed},
    )


# ---------------------------------------------------------------------------
# Assignment
# ---------------------------------------------------------------------------


def assign_hard_batch(vocab: Vocabulary, descriptors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest word id and distance per descriptor row."""
    descriptors = np.atleast_2d(np.asarray(descriptors, dtype=np.uint8))
    _check_width(vocab, descriptors)
    if vocab.kind == HKM:
        ids = vocab.tree.descend(descriptors)
        d = np.bitwise_count(descriptors ^ vocab.words[ids]).sum(axis=1).astype(np.int32)
        return ids, d
    ids, dist = vocab.word_index.search(descriptors, r=1)
    return ids[:, 0], dist[:, 0]


def assign_hard(vocab: Vocabulary, descriptor: np.ndarray) -> tuple[int, int]:
    ids, dist = assign_hard_batch(vocab, descriptor)
    return int(ids[0]), int(dist[0])


def soft_weights(distances: np.ndarray, sigma: float) -> np.ndarray:
    """Distance-decayed assignment weights: exp(-d^2 / 2 sigma^2), L1-normalized
    per row.  Shifted by the row minimum before exponentiation for stability;
    the normalized result is unchanged."""
    d = np.atleast_2d(np.asarray(distances, dtype=np.float64))
    z = (d ** 2 - (d ** 2).min(axis=1, keepdims=True)) / (2.0 * sigma * sigma)
    w = np.exp(-z)
    return w / w.sum(axis=1, keepdims=True)


def assign_soft_batch(
    vocab: Vocabulary, descriptors: np.ndarray, r: int, sigma: float
) -> tuple[np.ndarray, np.ndarray]:
    """The r nearest words per descriptor with normalized weights.

    Returns (word_ids (n, r), weights (n, r)), ordered nearest first.
    """
    if r < 1:
        raise ValueError("r must be >= 1")
    if r > vocab.n_words:
        raise ValueError(f"r={r} exceeds vocabulary size {vocab.n_words}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    descriptors = np.atleast_2d(np.asarray(descriptors, dtype=np.uint8))
    _check_width(vocab, descriptors)
    if r == 1 and vocab.kind == HKM:
        ids, _ = assign_hard_batch(vocab, descriptors)
        return ids[:, None], np.ones((len(ids), 1))
    ids, dist = vocab.word_index.search(descriptors, r=r)
    return ids, soft_weights(dist, sigma)


@dataclass(frozen=True)
class Assignment:
    word_ids: np.ndarray
    weights: np.ndarray

    def pairs(self) -> list[tuple[int, float]]:
        return [(int(i), float(w)) for i, w in zip(self.word_ids, self.weights)]


def assign_soft(vocab: Vocabulary, descriptor: np.ndarray, r: int, sigma: float) -> Assignment:
    ids, w = assign_soft_batch(vocab, descriptor, r, sigma)
    keep = w[0] > 0.0
    return Assignment(word_ids=ids[0][keep], weights=w[0][keep])


def _check_width(vocab: Vocabulary, descriptors: np.ndarray) -> None:
    if descriptors.shape[1] != vocab.words.shape[1]:
        raise ValueError(
            f"descriptor width {descriptors.shape[1] * 8} does not match "
            f"vocabulary width {vocab.width_bits}"
        )


# ---------------------------------------------------------------------------
# idf
# ---------------------------------------------------------------------------


def idf_from_image_rows(rows_per_image: Iterable[np.ndarray], n_images: int,
                        n_rows: int) -> np.ndarray:
    """ln(N / n_row) from per-image populated row id arrays; empty rows get 0."""
    if n_images < 1:
        raise ValueError("idf needs a non-empty corpus")
    df = np.zeros(n_rows, dtype=np.int64)
    for rows in rows_per_image:
        if len(rows):
            df[np.unique(rows)] += 1
    idf = np.zeros(n_rows, dtype=np.float64)
    hit = df > 0
    idf[hit] = np.log(n_images / df[hit])
    return idf


def compute_idf(vocab: Vocabulary, corpus: Sequence[ImageFeatures]) -> np.ndarray:
    """ln(N / n_row) document-frequency weights over (word, size bin) rows.

    n_row counts images with at least one keypoint hard-assigned to the row;
    rows absent from the corpus get weight 0.
    """
    if not corpus:
        raise ValueError("idf needs a non-empty corpus")
    v = vocab.n_words

    def rows_of(im: ImageFeatures) -> np.ndarray:
        if len(im) == 0:
            return np.zeros(0, dtype=np.int64)
        ids, _ = assign_hard_batch(vocab, im.descriptors)
        bins = vocab.size_binning.bin_of(im.sizes)
        return ids.astype(np.int64) + v * bins.astype(np.int64)

    return idf_from_image_rows((rows_of(im) for im in corpus), len(corpus), vocab.n_rows)


# ---------------------------------------------------------------------------
# GTBV vocabulary files
# ---------------------------------------------------------------------------

_V_HEADER = struct.Struct("<4sHBHIHB")


def save_vocab(path, vocab: Vocabulary) -> None:
    kind_code = 0 if vocab.kind == AKM else 1
    mode_code = 0 if vocab.size_binning.mode == PERCENTILE else 1
    out = [
        _V_HEADER.pack(GTBV_MAGIC, GTBV_VERSION, kind_code, vocab.width_bits,
                       vocab.n_words, vocab.n_bins, mode_code)
    ]
    thr = np.ascontiguousarray(vocab.size_binning.thresholds, dtype=np.float64)
    out.append(struct.pack("<I", len(thr)))
    out.append(thr.tobytes())
    out.append(np.ascontiguousarray(vocab.words).tobytes())
    has_idf = vocab.idf is not None
    out.append(struct.pack("<B", 1 if has_idf else 0))
    if has_idf:
        out.append(np.ascontiguousarray(vocab.idf, dtype=np.float64).tobytes())
    meta = {
        "train_params": vocab.train_params,
        "ann_params": {
            "exact_threshold": vocab.ann_params.exact_threshold,
            "copies": vocab.ann_params.copies,
            "nprobe": vocab.ann_params.nprobe,
            "seed": vocab.ann_params.seed,
        },
    }
    blob = json.dumps(meta).encode()
    out.append(struct.pack("<I", len(blob)))
    out.append(blob)
    if vocab.kind == HKM:
        out.append(_serialize_tree(vocab.tree))
    Path(path).write_bytes(b"".join(out))


def _serialize_tree(tree: HkmTree) -> bytes:
    parts = [struct.pack("<IHH", len(tree.nodes), tree.k, tree.depth)]
    for node in tree.nodes:
        parts.append(struct.pack("<iH", node.word_id, len(node.children)))
        if node.children:
            parts.append(np.asarray(node.children, dtype=np.uint32).tobytes())
        parts.append(node.centroid.tobytes())
    return b"".join(parts)


def load_vocab(path) -> Vocabulary:
    data = Path(path).read_bytes()
    if data[:4] != GTBV_MAGIC:
        raise VocabularyFileError(f"bad magic {data[:4]!r}, expected {GTBV_MAGIC!r}")
    try:
        magic, version, kind_code, width, v, s, mode_code = _V_HEADER.unpack_from(data, 0)
    except struct.error as e:
        raise VocabularyFileError(f"truncated vocabulary header: {e}") from e
    if version != GTBV_VERSION:
        raise VocabularyFileError(f"unsupported GTBV version {version}")
    pos = _V_HEADER.size
    nb = width // 8

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise VocabularyFileError(f"truncated vocabulary file reading {what} at offset {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    (n_thr,) = struct.unpack("<I", take(4, "threshold count"))
    thr = np.frombuffer(take(8 * n_thr, "thresholds"), dtype=np.float64).copy()
    words = (
        np.frombuffer(take(v * nb, "words"), dtype=np.uint8).reshape(v, nb).copy()
    )
    (has_idf,) = struct.unpack("<B", take(1, "idf flag"))
    idf = None
    if has_idf:
        idf = np.frombuffer(take(8 * v * s, "idf"), dtype=np.float64).copy()
    (meta_len,) = struct.unpack("<I", take(4, "meta length"))
    meta = json.loads(take(meta_len, "meta"))
    ann = AnnParams(**meta["ann_params"])
    binning = SizeBinning(
        mode=PERCENTILE if mode_code == 0 else DISCRETE, thresholds=thr, n_bins=s
    )
    tree = None
    if kind_code == 1:
        (n_nodes, k, depth) = struct.unpack("<IHH", take(8, "tree header"))
        nodes = []
        for _ in range(n_nodes):
            word_id, n_children = struct.unpack("<iH", take(6, "tree node"))
            children = list(
                np.frombuffer(take(4 * n_children, "children"), dtype=np.uint32).astype(int)
            )
            centroid = np.frombuffer(take(nb, "node centroid"), dtype=np.uint8).copy()
            nodes.append(HkmNode(centroid=centroid, children=children, word_id=word_id))
        tree = HkmTree(k=k, depth=depth, nodes=nodes)
    if pos != len(data):
        raise VocabularyFileError(f"{len(data) - pos} trailing bytes after vocabulary data")
    return Vocabulary(
        kind=AKM if kind_code == 0 else HKM,
        words=words,
        size_binning=binning,
        idf=idf,
        tree=tree,
        ann_params=ann,
        train_params=meta["train_params"],
    )
