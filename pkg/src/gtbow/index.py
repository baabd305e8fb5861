"""Orientation-verifying inverse index.

Rows are (word, size bin) pairs; each row lists the database images whose
BoW vector populates it, together with the contributing keypoints'
orientations and weights.  At query time each (query posting, db posting)
pair votes its share of the row's query x database weight product into one
of R orientation-difference bins for the db image; an image is scored by
its best bin, so vote mass from geometrically inconsistent matches cannot
pile up on a single score.

Row storage is columnar (compact typed arrays, amortized O(1) append) so a
few thousand images with soft assignment stay well under a gigabyte.
"""

from __future__ import annotations

import json
import struct
from array import array
from bisect import bisect_left
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bow import BowVector

GTBI_MAGIC = b"GTBI"
GTBI_VERSION = 1


class IndexFileError(ValueError):
    pass


class _Row:
    """Postings for one (word, size bin) row.

    Entry columns (one per image, ordered by ascending image id):
      img, slot, ww (word weight), count (postings per entry).
    Posting columns (concatenated in entry order): kp, ori, contrib.
    Numpy views for querying are cached and invalidated on writes.
    """

    __slots__ = ("img", "slot", "ww", "count", "kp", "ori", "contrib", "_flat")

    def __init__(self):
        self.img = array("q")
        self.slot = array("q")
        self.ww = array("d")
        self.count = array("q")
        self.kp = array("Q")
        self.ori = array("d")
        self.contrib = array("d")
        self._flat = None

    @property
    def n_entries(self) -> int:
        return len(self.img)

    def add(self, image_id: int, slot: int, word_weight: float,
            kp_ids: np.ndarray, orientations: np.ndarray, contribs: np.ndarray) -> None:
        self._flat = None
        kp_b = np.asarray(kp_ids, dtype=np.uint64).tobytes()
        ori_b = np.asarray(orientations, dtype=np.float64).tobytes()
        con_b = np.asarray(contribs, dtype=np.float64).tobytes()
        if not self.img or image_id > self.img[-1]:
            self.img.append(image_id)
            self.slot.append(slot)
            self.ww.append(word_weight)
            self.count.append(len(kp_ids))
            self.kp.frombytes(kp_b)
            self.ori.frombytes(ori_b)
            self.contrib.frombytes(con_b)
            return
        # out-of-order insert: splice into position (rare path)
        p = bisect_left(self.img, image_id)
        off = sum(self.count[:p])
        self.img.insert(p, image_id)
        self.slot.insert(p, slot)
        self.ww.insert(p, word_weight)
        self.count.insert(p, len(kp_ids))
        self.kp[off:off] = array("Q", kp_b)
        self.ori[off:off] = array("d", ori_b)
        self.contrib[off:off] = array("d", con_b)

    def drop_image(self, image_id: int) -> bool:
        p = bisect_left(self.img, image_id)
        if p >= len(self.img) or self.img[p] != image_id:
            return False
        self._flat = None
        off = sum(self.count[:p])
        m = self.count[p]
        del self.img[p], self.slot[p], self.ww[p], self.count[p]
        del self.kp[off : off + m], self.ori[off : off + m], self.contrib[off : off + m]
        return True

    def flat(self):
        """(slots, orientations, weight-per-posting, kp ids, entry offsets)."""
        if self._flat is None:
            counts = np.frombuffer(self.count, dtype=np.int64)
            slots_e = np.frombuffer(self.slot, dtype=np.int64)
            ww_e = np.frombuffer(self.ww, dtype=np.float64)
            contrib = np.frombuffer(self.contrib, dtype=np.float64)
            self._flat = (
                np.repeat(slots_e, counts),
                np.frombuffer(self.ori, dtype=np.float64),
                np.repeat(ww_e, counts) * contrib,
                np.frombuffer(self.kp, dtype=np.uint64),
                np.concatenate([[0], np.cumsum(counts)]),
            )
        return self._flat


@dataclass
class QueryCandidate:
    image_id: int
    score: float
    best_bin: int
    matches: list[tuple[int, int, float]] = field(default_factory=list)


class InverseIndex:
    """V x S rows of postings with R orientation-difference bins at query time."""

    def __init__(self, n_rows: int, r_bins: int = 1, vocab_hash: bytes = b""):
        if r_bins < 1:
            raise ValueError("need at least one orientation bin")
        if n_rows < 1:
            raise ValueError("need at least one row")
        self.n_rows = n_rows
        self.r_bins = r_bins
        self.vocab_hash = vocab_hash.ljust(16, b"\0")[:16]
        self.rows: dict[int, _Row] = {}
        self._slot_of: dict[int, int] = {}
        self._image_ids: list[int | None] = []   # by slot; None = freed
        self._rows_of: dict[int, list[int]] = {}
        self._free_slots: list[int] = []

    @property
    def n_images(self) -> int:
        return len(self._slot_of)

    def image_ids(self) -> list[int]:
        return sorted(self._slot_of)

    def __contains__(self, image_id: int) -> bool:
        return image_id in self._slot_of

    def insert(self, bow: BowVector) -> None:
        """Add one image's BoW vector. The image id must be new."""
        image_id = bow.image_id
        if image_id in self._slot_of:
            raise ValueError(f"image {image_id} is already in the index")
        if self._free_slots:
            slot = self._free_slots.pop()
            self._image_ids[slot] = image_id
        else:
            slot = len(self._image_ids)
            self._image_ids.append(image_id)
        self._slot_of[image_id] = slot
        touched = []
        for rid, brow in bow.rows.items():
            if not 0 <= rid < self.n_rows:
                raise ValueError(f"row id {rid} out of range for a {self.n_rows}-row index")
            row = self.rows.get(rid)
            if row is None:
                row = self.rows[rid] = _Row()
            row.add(image_id, slot, brow.weight, brow.kp_ids,
                    brow.orientations, brow.contribs)
            touched.append(rid)
        self._rows_of[image_id] = touched

    def remove(self, image_id: int) -> None:
        if image_id not in self._slot_of:
            raise ValueError(f"image {image_id} is not in the index")
        slot = self._slot_of.pop(image_id)
        for rid in self._rows_of.pop(image_id):
            row = self.rows.get(rid)
            if row is not None and row.drop_image(image_id) and row.n_entries == 0:
                del self.rows[rid]
        self._image_ids[slot] = None
        self._free_slots.append(slot)

    def query(self, bow: BowVector, top_n: int, with_matches: bool = True) -> list[QueryCandidate]:
        """Ranked candidates for a query vector.

        Image score is the max over R orientation-difference bins of the
        accumulated pairwise vote mass; ties rank the lower image id first.
        Matched keypoint pairs are reported for the winning bin only.
        """
        if not self._slot_of:
            raise ValueError("cannot query an empty index")
        if top_n <= 0:
            return []
        n_slots = len(self._image_ids)
        R = self.r_bins
        bin_width = 360.0 / R
        acc = np.zeros(n_slots * R)
        for rid, q_row in bow.rows.items():
            row = self.rows.get(rid)
            if row is None:
                continue
            slots, ori, wpost, _, _ = row.flat()
            q_ori = q_row.orientations.astype(np.float64)
            q_mass = q_row.weight * q_row.contribs
            dth = (q_ori[:, None] - ori[None, :]) % 360.0
            bins = np.minimum((dth // bin_width).astype(np.int64), R - 1)
            votes = q_mass[:, None] * wpost[None, :]
            np.add.at(acc, (slots[None, :] * R + bins).ravel(), votes.ravel())

        acc = acc.reshape(n_slots, R)
        best_bin = acc.argmax(axis=1)
        scores = acc[np.arange(n_slots), best_bin]
        hit_slots = np.nonzero(scores > 0.0)[0]
        if hit_slots.size == 0:
            return []
        ids = np.array([self._image_ids[s] for s in hit_slots], dtype=np.int64)
        order = np.lexsort((ids, -scores[hit_slots]))[:top_n]
        results = []
        slot_to_res = {}
        for o in order:
            s = int(hit_slots[o])
            cand = QueryCandidate(
                image_id=int(ids[o]), score=float(scores[s]), best_bin=int(best_bin[s])
            )
            results.append(cand)
            slot_to_res[s] = cand
        if with_matches:
            self._collect_matches(bow, slot_to_res, best_bin, bin_width)
        return results

    def _collect_matches(self, bow, slot_to_res, best_bin, bin_width) -> None:
        R = self.r_bins
        for rid, q_row in bow.rows.items():
            row = self.rows.get(rid)
            if row is None:
                continue
            q_ori = q_row.orientations.astype(np.float64)
            q_mass = q_row.weight * q_row.contribs
            _, ori, wpost, kp, offs = row.flat()
            for e in range(row.n_entries):
                cand = slot_to_res.get(row.slot[e])
                if cand is None:
                    continue
                s, t = offs[e], offs[e + 1]
                dth = (q_ori[:, None] - ori[None, s:t]) % 360.0
                bins = np.minimum((dth // bin_width).astype(np.int64), R - 1)
                qi, di = np.nonzero(bins == best_bin[row.slot[e]])
                if qi.size == 0:
                    continue
                pair_w = q_mass[qi] * wpost[s:t][di]
                for a, b, w in zip(q_row.kp_ids[qi], kp[s:t][di], pair_w):
                    cand.matches.append((int(a), int(b), float(w)))

    # -- GTBI snapshots ------------------------------------------------------

    def save(self, path) -> None:
        live = sorted(self._slot_of.items(), key=lambda kv: kv[1])  # by slot
        slot_remap = {slot: i for i, (_, slot) in enumerate(live)}
        head = {
            "n_rows": self.n_rows,
            "r_bins": self.r_bins,
            "images": [image_id for image_id, _ in live],
        }
        blob = json.dumps(head).encode()
        out = [
            struct.pack("<4sH16sI", GTBI_MAGIC, GTBI_VERSION, self.vocab_hash, len(blob)),
            blob,
            struct.pack("<I", len(self.rows)),
        ]
        for rid in sorted(self.rows):
            row = self.rows[rid]
            e = row.n_entries
            p = len(row.kp)
            out.append(struct.pack("<III", rid, e, p))
            out.append(np.frombuffer(row.img, dtype=np.int64).astype("<u8").tobytes())
            out.append(
                np.array([slot_remap[s] for s in row.slot], dtype="<u4").tobytes()
            )
            out.append(np.frombuffer(row.ww, dtype=np.float64).astype("<f8").tobytes())
            out.append(np.frombuffer(row.count, dtype=np.int64).astype("<u4").tobytes())
            out.append(np.frombuffer(row.kp, dtype=np.uint64).astype("<u4").tobytes())
            out.append(np.frombuffer(row.ori, dtype=np.float64).astype("<f4").tobytes())
            out.append(np.frombuffer(row.contrib, dtype=np.float64).astype("<f8").tobytes())
        Path(path).write_bytes(b"".join(out))

    @classmethod
    def load(cls, path, expect_vocab_hash: bytes | None = None) -> "InverseIndex":
        data = Path(path).read_bytes()
        if data[:4] != GTBI_MAGIC:
            raise IndexFileError(f"bad magic {data[:4]!r}, expected {GTBI_MAGIC!r}")
        try:
            magic, version, vhash, blob_len = struct.unpack_from("<4sH16sI", data, 0)
        except struct.error as e:
            raise IndexFileError(f"truncated index header: {e}") from e
        if version != GTBI_VERSION:
            raise IndexFileError(f"unsupported GTBI version {version}")
        pos = struct.calcsize("<4sH16sI")

        def take(n, what):
            nonlocal pos
            if pos + n > len(data):
                raise IndexFileError(f"truncated index file reading {what} at offset {pos}")
            chunk = data[pos : pos + n]
            pos += n
            return chunk

        head = json.loads(take(blob_len, "header"))
        if expect_vocab_hash is not None and vhash != expect_vocab_hash.ljust(16, b"\0")[:16]:
            raise IndexFileError(
                "index was built against a different vocabulary (content hash mismatch)"
            )
        idx = cls(n_rows=head["n_rows"], r_bins=head["r_bins"], vocab_hash=vhash)
        for slot, image_id in enumerate(head["images"]):
            idx._slot_of[image_id] = slot
            idx._image_ids.append(image_id)
            idx._rows_of[image_id] = []
        (n_rows,) = struct.unpack("<I", take(4, "row count"))
        for _ in range(n_rows):
            rid, e, p = struct.unpack("<III", take(12, "row header"))
            row = idx.rows[rid] = _Row()
            img = np.frombuffer(take(8 * e, "image ids"), dtype="<u8").astype(np.int64)
            slots = np.frombuffer(take(4 * e, "slots"), dtype="<u4").astype(np.int64)
            ww = np.frombuffer(take(8 * e, "word weights"), dtype="<f8")
            counts = np.frombuffer(take(4 * e, "posting counts"), dtype="<u4").astype(np.int64)
            kp = np.frombuffer(take(4 * p, "keypoint ids"), dtype="<u4")
            ori = np.frombuffer(take(4 * p, "orientations"), dtype="<f4").astype(np.float64)
            contrib = np.frombuffer(take(8 * p, "contributing weights"), dtype="<f8")
            if counts.sum() != p:
                raise IndexFileError(f"row {rid}: posting counts do not add up")
            row.img.frombytes(img.astype(np.int64).tobytes())
            row.slot.frombytes(slots.astype(np.int64).tobytes())
            row.ww.frombytes(ww.astype(np.float64).tobytes())
            row.count.frombytes(counts.astype(np.int64).tobytes())
            row.kp.frombytes(kp.astype(np.uint64).tobytes())
            row.ori.frombytes(ori.astype(np.float64).tobytes())
            row.contrib.frombytes(contrib.astype(np.float64).tobytes())
            for image_id in img:
                idx._rows_of[int(image_id)].append(rid)
        if pos != len(data):
            raise IndexFileError(f"{len(data) - pos} trailing bytes after index data")
        return idx
