"""Sparse BoW vectors over (word, size bin) rows.

Each keypoint lands in one size bin and is soft-assigned to r words, so it
spreads unit mass over up to r rows.  Row weights are tf-idf over that soft
mass, L2-normalized across the whole vector.  Every populated row remembers
which keypoints fed it, with what share of the row's mass, so the inverse
index can verify orientation consistency and recover matches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ImageFeatures
from .vocab import SizeBinning, Vocabulary, assign_soft_batch


def row_id(word_id, size_bin, n_words: int):
    """Encode a (word, size bin) pair as word_id + V * size_bin."""
    return word_id + n_words * size_bin


def decode_row(row, n_words: int):
    """Inverse of row_id: returns (word_id, size_bin)."""
    return row % n_words, row // n_words


def size_bin_of(binning: SizeBinning, size) -> int | np.ndarray:
    """Size bin index for a keypoint size (scalar or array)."""
    return binning.bin_of(size)


@dataclass
class BowRow:
    """One populated (word, size bin) row: its vector weight plus the
    contributing keypoints (parallel arrays)."""

    weight: float
    kp_ids: np.ndarray        # (m,) uint32
    orientations: np.ndarray  # (m,) float32
    contribs: np.ndarray      # (m,) float64, sums to 1 within the row


@dataclass
class BowVector:
    image_id: int
    rows: dict[int, BowRow] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.rows)

    def norm(self) -> float:
        return float(np.sqrt(sum(r.weight ** 2 for r in self.rows.values())))

    def dense(self, n_rows: int) -> np.ndarray:
        out = np.zeros(n_rows)
        for rid, row in self.rows.items():
            out[rid] = row.weight
        return out

    def dot(self, other: "BowVector") -> float:
        a, b = (self, other) if len(self) <= len(other) else (other, self)
        return float(sum(r.weight * b.rows[rid].weight for rid, r in a.rows.items()
                         if rid in b.rows))


def transform(vocab: Vocabulary, features: ImageFeatures, r: int = 1,
              sigma: float = 580.0) -> BowVector:
    """Build the BoW vector for one image.

    Empty images produce an empty vector.  Rows whose idf weight is zero are
    dropped before normalization.  When the vocabulary carries no idf table
    all rows weigh 1 (uniform idf).
    """
    if len(features) == 0:
        return BowVector(image_id=features.image_id)
    word_ids, weights = assign_soft_batch(vocab, features.descriptors, r=r, sigma=sigma)
    return bow_from_assignment(vocab, features, word_ids, weights)


def bow_from_assignment(vocab: Vocabulary, features: ImageFeatures,
                        word_ids: np.ndarray, weights: np.ndarray) -> BowVector:
    """Build the BoW vector from precomputed per-keypoint word assignments.

    ``word_ids`` and ``weights`` are (n, r) as returned by
    ``assign_soft_batch``; experiment drivers cache them across runs that
    share a vocabulary.
    """
    n = len(features)
    if n == 0:
        return BowVector(image_id=features.image_id)
    r_eff = word_ids.shape[1]
    bins = vocab.size_binning.bin_of(features.sizes)
    rows = word_ids.astype(np.int64) + vocab.n_words * bins.astype(np.int64)[:, None]

    flat_rows = rows.ravel()
    flat_w = weights.ravel()
    flat_kp = np.repeat(np.arange(n), r_eff)
    nz = flat_w > 0.0  # assignments whose weight underflowed carry no signal
    flat_rows, flat_w, flat_kp = flat_rows[nz], flat_w[nz], flat_kp[nz]
    if not len(flat_rows):
        return BowVector(image_id=features.image_id)
    order = np.argsort(flat_rows, kind="stable")
    flat_rows, flat_w, flat_kp = flat_rows[order], flat_w[order], flat_kp[order]

    uniq, starts = np.unique(flat_rows, return_index=True)
    mass = np.add.reduceat(flat_w, starts)
    total = flat_w.sum()
    tf = mass / total
    idf = np.ones(len(uniq)) if vocab.idf is None else vocab.idf[uniq]
    pre = tf * idf

    keep = pre > 0.0
    norm = float(np.linalg.norm(pre[keep]))
    bv = BowVector(image_id=features.image_id)
    if norm == 0.0:
        return bv
    ends = np.append(starts[1:], len(flat_rows))
    for j in np.nonzero(keep)[0]:
        s, e = starts[j], ends[j]
        kp_idx = flat_kp[s:e]
        bv.rows[int(uniq[j])] = BowRow(
            weight=float(pre[j] / norm),
            kp_ids=features.kp_ids[kp_idx],
            orientations=features.orientations[kp_idx],
            contribs=flat_w[s:e] / mass[j],
        )
    return bv


def bow_to_json(bv: BowVector, vocab: Vocabulary) -> dict:
    """Debug rendering of a BoW vector."""
    rows = {}
    for rid, row in sorted(bv.rows.items()):
        word, size_bin = decode_row(rid, vocab.n_words)
        rows[str(rid)] = {
            "word_id": int(word),
            "size_bin": int(size_bin),
            "weight": row.weight,
            "postings": [
                {"keypoint_id": int(k), "orientation_deg": float(o), "contributing_weight": float(c)}
                for k, o, c in zip(row.kp_ids, row.orientations, row.contribs)
            ],
        }
    return {"image_id": bv.image_id, "n_rows": len(bv), "rows": rows}
