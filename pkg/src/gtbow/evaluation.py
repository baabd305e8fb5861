"""Retrieval and localization metrics plus desk-scale experiment drivers.

The drivers run entirely on the synthetic world: a gridded survey forms the
database, randomized overlapping observations form the query set, and
relevance is defined by footprint overlap between ground-truth poses.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .bow import bow_from_assignment, transform
from .core import ImageFeatures, Pose2D, circular_error_deg
from .index import InverseIndex
from .localize import LocalizeParams, localize
from .synth import (
    FeatureWorld,
    ObservationParams,
    generate_queries,
    generate_survey,
    generate_world,
    overlap_ratio,
)
from .vocab import (
    AKM,
    DISCRETE,
    HKM,
    Vocabulary,
    assign_soft_batch,
    fit_size_bins,
    idf_from_image_rows,
    single_bin,
    train_akm,
    train_hkm,
)

# -----------------------------------------------------------------------------
# Metrics
# -----------------------------------------------------------------------------


def average_precision(ranked_ids: Sequence[int], relevant: set[int],
                      cutoff: int = 1000) -> float | None:
    """AP over the top ``cutoff`` results, normalized by min(|relevant|, cutoff).

    Returns None when there are no relevant images (the query carries no
    signal about ranking quality and is excluded upstream).
    """
    if cutoff < 1:
        raise ValueError("cutoff must be >= 1")
    if not relevant:
        return None
    hits = 0
    total = 0.0
    for rank, image_id in enumerate(ranked_ids[:cutoff], start=1):
        if image_id in relevant:
            hits += 1
            total += hits / rank
    return total / min(len(relevant), cutoff)


def recall_curve(rankings: Sequence[Sequence[int]], relevants: Sequence[set[int]],
                 n_values: Sequence[int]) -> list[tuple[int, float]]:
    """Fraction of queries with >= 1 relevant result in the top N, per N."""
    out = []
    included = [(r, rel) for r, rel in zip(rankings, relevants) if rel]
    for n in n_values:
        hit = sum(1 for ranked, rel in included if any(i in rel for i in ranked[:n]))
        out.append((n, hit / len(included) if included else 0.0))
    return out


def threshold_analysis(tp_scores: np.ndarray, fp_scores: np.ndarray,
                       target_fp_rejection: float = 0.99) -> tuple[float, float]:
    """Score threshold rejecting the target fraction of false positives.

    Returns (threshold, fraction of true positives retained at or above it).
    """
    if not 0.0 < target_fp_rejection < 1.0:
        raise ValueError("target rejection must be in (0, 1)")
    tp = np.asarray(tp_scores, dtype=np.float64)
    fp = np.asarray(fp_scores, dtype=np.float64)
    if fp.size == 0 or tp.size == 0:
        raise ValueError("need both true-positive and false-positive scores")
    threshold = float(np.quantile(fp, target_fp_rejection))
    retained = float(np.mean(tp >= threshold))
    return threshold, retained


def localization_success(estimate: Pose2D, truth: Pose2D,
                         trans_tol_mm: float = 4.8, rot_tol_deg: float = 1.5) -> bool:
    """Success test: translation and circular rotation error within tolerance."""
    dt = float(np.hypot(estimate.x_mm - truth.x_mm, estimate.y_mm - truth.y_mm))
    dr = circular_error_deg(estimate.theta_deg, truth.theta_deg)
    return dt <= trans_tol_mm and dr <= rot_tol_deg


# -----------------------------------------------------------------------------
# Relevance judgments from ground-truth poses
# -----------------------------------------------------------------------------


def build_judgments(queries: Sequence[ImageFeatures], database: Sequence[ImageFeatures],
                    fov_mm: tuple[float, float], threshold: float = 0.25) -> dict[int, set[int]]:
    """Relevant database ids per query id: footprint overlap >= threshold."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError("overlap threshold must be in (0, 1]")
    out: dict[int, set[int]] = {}
    half_diag = float(np.hypot(*fov_mm))  # beyond this, footprints cannot touch
    db = [(im.image_id, im.pose) for im in database]
    if any(p is None for _, p in db) or any(q.pose is None for q in queries):
        raise ValueError("relevance judgments need ground-truth poses on all images")
    for q in queries:
        rel = set()
        for db_id, db_pose in db:
            if abs(db_pose.x_mm - q.pose.x_mm) > half_diag or abs(db_pose.y_mm - q.pose.y_mm) > half_diag:
                continue
            if overlap_ratio(q.pose, db_pose, fov_mm) >= threshold:
                rel.add(db_id)
        out[q.image_id] = rel
    return out


# -----------------------------------------------------------------------------
# Retrieval drivers
# -----------------------------------------------------------------------------


def run_queries(index: InverseIndex, vocab: Vocabulary, queries: Sequence[ImageFeatures],
                r: int = 1, sigma: float = 580.0, top_n: int = 1000,
                with_matches: bool = False):
    """Rank the database for each query; yields (query_id, candidates)."""
    for q in queries:
        bow = transform(vocab, q, r=r, sigma=sigma)
        yield q.image_id, index.query(bow, top_n=top_n, with_matches=with_matches)


@dataclass
class MapResult:
    mean_ap: float
    per_query: dict[int, float]
    n_excluded: int


def mean_average_precision(index: InverseIndex, vocab: Vocabulary,
                           queries: Sequence[ImageFeatures],
                           judgments: dict[int, set[int]],
                           r: int = 1, sigma: float = 580.0,
                           cutoff: int = 1000) -> MapResult:
    per_query: dict[int, float] = {}
    excluded = 0
    for qid, cands in run_queries(index, vocab, queries, r=r, sigma=sigma, top_n=cutoff):
        ap = average_precision([c.image_id for c in cands], judgments.get(qid, set()), cutoff)
        if ap is None:
            excluded += 1
        else:
            per_query[qid] = ap
    mean = float(np.mean(list(per_query.values()))) if per_query else 0.0
    return MapResult(mean_ap=mean, per_query=per_query, n_excluded=excluded)


def recall_at_n(index: InverseIndex, vocab: Vocabulary, queries: Sequence[ImageFeatures],
                judgments: dict[int, set[int]], n_values: Sequence[int],
                r: int = 1, sigma: float = 580.0) -> list[tuple[int, float]]:
    top = max(n_values)
    rankings, relevants = [], []
    for qid, cands in run_queries(index, vocab, queries, r=r, sigma=sigma, top_n=top):
        rankings.append([c.image_id for c in cands])
        relevants.append(judgments.get(qid, set()))
    return recall_curve(rankings, relevants, n_values)


def collect_top_scores(index: InverseIndex, vocab: Vocabulary,
                       queries: Sequence[ImageFeatures], judgments: dict[int, set[int]],
                       top_k: int = 10, r: int = 1, sigma: float = 580.0):
    """Scores of the top-k results per query, split into true/false positives.

    Returns (tp_scores, fp_scores, rows) where rows are
    (query_id, image_id, score, is_true_positive) for CSV export.
    """
    tp, fp, rows = [], [], []
    for qid, cands in run_queries(index, vocab, queries, r=r, sigma=sigma, top_n=top_k):
        rel = judgments.get(qid, set())
        if not rel:
            continue
        for c in cands:
            is_tp = c.image_id in rel
            (tp if is_tp else fp).append(c.score)
            rows.append((qid, c.image_id, c.score, is_tp))
    return np.asarray(tp), np.asarray(fp), rows


# -----------------------------------------------------------------------------
# Benchmark world and system assembly
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkSpec:
    """Desk-scale analog of the full evaluation protocol."""

    seed: int = 7
    extent_mm: tuple[float, float] = (2000.0, 2000.0)
    density_per_m2: float = 10_000.0
    size_levels: int = 8
    width_bits: int = 256
    fov_mm: tuple[float, float] = (200.0, 150.0)
    spacing_mm: float = 42.0
    n_queries: int = 400
    overlap_range: tuple[float, float] = (0.25, 1.0)
    bitflip_prob: float = 0.05
    orientation_jitter_deg: float = 2.0
    max_features: int = 250
    vocab_size: int = 1200
    akm_iters: int = 12
    hkm_branching: int = 10
    hkm_depth: int = 4
    train_descriptor_cap: int = 60_000
    sigma: float = 580.0
    cutoff: int = 1000
    overlap_threshold: float = 0.25

    def observation_params(self) -> ObservationParams:
        return ObservationParams(
            fov_mm=self.fov_mm,
            bitflip_prob=self.bitflip_prob,
            orientation_jitter_deg=self.orientation_jitter_deg,
            max_features=self.max_features,
            seed=self.seed,
        )


@dataclass
class Benchmark:
    spec: BenchmarkSpec
    world: FeatureWorld
    database: list[ImageFeatures]
    queries: list[ImageFeatures]
    judgments: dict[int, set[int]]
    train_descriptors: np.ndarray


def build_benchmark(spec: BenchmarkSpec) -> Benchmark:
    world = generate_world(
        spec.seed, spec.extent_mm, spec.density_per_m2,
        size_levels=spec.size_levels, width_bits=spec.width_bits,
    )
    params = spec.observation_params()
    database = generate_survey(world, spec.spacing_mm, params)
    queries = generate_queries(
        world, database, spec.n_queries, spec.overlap_range, params, seed=spec.seed + 1
    )
    judgments = build_judgments(queries, database, spec.fov_mm, spec.overlap_threshold)
    descs = np.concatenate([im.descriptors for im in database if len(im)])
    if len(descs) > spec.train_descriptor_cap:
        rng = np.random.default_rng([0x54524E, spec.seed])
        pick = np.sort(rng.choice(len(descs), size=spec.train_descriptor_cap, replace=False))
        descs = descs[pick]
    return Benchmark(
        spec=spec, world=world, database=database, queries=queries,
        judgments=judgments, train_descriptors=descs,
    )


@dataclass(frozen=True)
class AblationConfig:
    """One row of the modification grid.

    All flags off is the baseline: HKM vocabulary, one size bin, hard
    assignment, no orientation verification.
    """

    name: str
    size_binning: bool = False
    akm: bool = False
    soft_r: int = 1
    orientation_bins: int = 1

    @property
    def kind(self) -> str:
        return AKM if self.akm else HKM


def table_one_configs(s_bins: int = 8, r: int = 3, r_bins: int = 6) -> list[AblationConfig]:
    """The ablation grid: baseline, each single modification, and the two
    released profiles."""
    return [
        AblationConfig("baseline"),
        AblationConfig("baseline+SB", size_binning=True),
        AblationConfig("baseline+AKM", akm=True),
        AblationConfig("baseline+AKM+SA", akm=True, soft_r=r),
        AblationConfig("baseline+OV", orientation_bins=r_bins),
        AblationConfig("fast", size_binning=True, akm=True, orientation_bins=r_bins),
        AblationConfig("high-accuracy", size_binning=True, akm=True, soft_r=r,
                       orientation_bins=r_bins),
    ]


class SystemBuilder:
    """Assembles (vocabulary, index) pairs for benchmark configs, caching the
    expensive pieces (trained words, per-descriptor assignments) across
    configs that share them."""

    def __init__(self, bench: Benchmark):
        self.bench = bench
        self._base_vocab: dict[str, Vocabulary] = {}
        self._assign: dict = {}

    def base_vocabulary(self, kind: str) -> Vocabulary:
        if kind not in self._base_vocab:
            spec = self.bench.spec
            if kind == AKM:
                self._base_vocab[kind] = train_akm(
                    self.bench.train_descriptors, spec.vocab_size,
                    max_iters=spec.akm_iters, seed=spec.seed,
                )
            else:
                self._base_vocab[kind] = train_hkm(
                    self.bench.train_descriptors, spec.hkm_branching,
                    spec.hkm_depth, seed=spec.seed,
                )
        return self._base_vocab[kind]

    def assignments(self, kind: str, r: int, images: str):
        """Cached soft assignments for 'database' or 'queries' image sets."""
        key = (kind, r, images)
        if key not in self._assign:
            vocab = self.base_vocabulary(kind)
            img_list = self.bench.database if images == "database" else self.bench.queries
            self._assign[key] = [
                assign_soft_batch(vocab, im.descriptors, r=r, sigma=self.bench.spec.sigma)
                if len(im) else (np.zeros((0, r), np.int32), np.zeros((0, r)))
                for im in img_list
            ]
        return self._assign[key]

    def vocabulary(self, config: AblationConfig) -> Vocabulary:
        base = self.base_vocabulary(config.kind)
        if config.size_binning:
            binning = fit_size_bins(self.bench.database, self.bench.spec.size_levels, DISCRETE)
        else:
            binning = single_bin()
        vocab = base.with_binning(binning)
        db_assign = self.assignments(config.kind, 1, "database")
        rows_iter = (
            ids[:, 0].astype(np.int64) + vocab.n_words * binning.bin_of(im.sizes).astype(np.int64)
            for im, (ids, _) in zip(self.bench.database, db_assign)
        )
        idf = idf_from_image_rows(rows_iter, len(self.bench.database), vocab.n_rows)
        return vocab.with_idf(idf)

    def build(self, config: AblationConfig) -> tuple[Vocabulary, InverseIndex]:
        vocab = self.vocabulary(config)
        index = InverseIndex(vocab.n_rows, r_bins=config.orientation_bins,
                             vocab_hash=vocab.content_hash())
        for im, (ids, w) in zip(self.bench.database,
                                self.assignments(config.kind, config.soft_r, "database")):
            index.insert(bow_from_assignment(vocab, im, ids, w))
        return vocab, index

    def query_bows(self, config: AblationConfig, vocab: Vocabulary):
        for im, (ids, w) in zip(self.bench.queries,
                                self.assignments(config.kind, config.soft_r, "queries")):
            yield im, bow_from_assignment(vocab, im, ids, w)


def run_ablation(bench: Benchmark, configs: Sequence[AblationConfig] | None = None,
                 log=None) -> list[tuple[str, float]]:
    """mAP per config on a shared benchmark; deterministic for a fixed spec."""
    configs = list(configs) if configs is not None else table_one_configs()
    builder = SystemBuilder(bench)
    results = []
    for config in configs:
        vocab, index = builder.build(config)
        aps = []
        for im, bow in builder.query_bows(config, vocab):
            rel = bench.judgments.get(im.image_id, set())
            cands = index.query(bow, top_n=bench.spec.cutoff, with_matches=False)
            ap = average_precision([c.image_id for c in cands], rel, bench.spec.cutoff)
            if ap is not None:
                aps.append(ap)
        m = float(np.mean(aps)) if aps else 0.0
        results.append((config.name, m))
        if log:
            log(f"{config.name}: mAP={m:.4f} over {len(aps)} queries")
    return results


# -----------------------------------------------------------------------------
# Localization driver
# -----------------------------------------------------------------------------


def run_localization(builder: SystemBuilder, config: AblationConfig,
                     queries: Sequence[ImageFeatures],
                     params: LocalizeParams | None = None) -> list[bool]:
    """Localize each query and score it against its ground-truth pose."""
    bench = builder.bench
    vocab, index = builder.build(config)
    obs = bench.spec.observation_params()
    params = params or LocalizeParams()
    params = replace(
        params,
        r=config.soft_r,
        sigma=bench.spec.sigma,
        px_per_mm=obs.px_per_mm,
        image_center_px=obs.image_center_px,
    )
    db_feats = {im.image_id: im for im in bench.database}
    out = []
    for q in queries:
        res = localize(index, vocab, q, db_feats, params)
        out.append(bool(res.ok and localization_success(res.pose, q.pose)))
    return out


# -----------------------------------------------------------------------------
# Timing harness
# -----------------------------------------------------------------------------


@dataclass
class TimingRow:
    config: str
    db_size: int
    transform_ms: tuple[float, float]
    insert_ms: tuple[float, float]
    query_ms: tuple[float, float]


def _mean_std(samples: list[float]) -> tuple[float, float]:
    a = np.asarray(samples)
    return float(a.mean()), float(a.std())


def bench_scaling(bench: Benchmark, configs: Sequence[AblationConfig],
                  db_sizes: Sequence[int], n_probe_queries: int = 20,
                  warmup: int = 5, log=None) -> tuple[list[TimingRow], dict[str, list[float]]]:
    """Insertion / query timings as the database grows.

    Per config: inserts database images one by one (timing each), and at
    every milestone size times ``n_probe_queries`` queries and BoW
    transforms.  The first ``warmup`` timings of each kind are discarded
    from summaries.  Returns the milestone rows plus the raw per-insert
    series per config (for drift analysis).
    """
    db_sizes = sorted(db_sizes)
    builder = SystemBuilder(bench)
    need = max(db_sizes)
    if need > len(bench.database):
        raise ValueError(
            f"benchmark database has {len(bench.database)} images, need {need}"
        )
    probes = bench.queries[:n_probe_queries]
    rows: list[TimingRow] = []
    raw_inserts: dict[str, list[float]] = {}
    for config in configs:
        vocab = builder.vocabulary(config)
        index = InverseIndex(vocab.n_rows, r_bins=config.orientation_bins,
                             vocab_hash=vocab.content_hash())
        insert_times: list[float] = []
        raw_inserts[config.name] = insert_times
        done = 0
        for size in db_sizes:
            seg_start = len(insert_times)
            for im in bench.database[done:size]:
                bow = transform(vocab, im, r=config.soft_r, sigma=bench.spec.sigma)
                t0 = time.perf_counter()
                index.insert(bow)
                insert_times.append((time.perf_counter() - t0) * 1e3)
            done = size
            t_ms, q_ms = [], []
            for q in probes:
                t0 = time.perf_counter()
                bow = transform(vocab, q, r=config.soft_r, sigma=bench.spec.sigma)
                t1 = time.perf_counter()
                index.query(bow, top_n=100, with_matches=False)
                t2 = time.perf_counter()
                t_ms.append((t1 - t0) * 1e3)
                q_ms.append((t2 - t1) * 1e3)
            segment = insert_times[seg_start:]
            row = TimingRow(
                config=config.name,
                db_size=size,
                transform_ms=_mean_std(t_ms[warmup:] or t_ms),
                insert_ms=_mean_std(segment[warmup:] if len(segment) > warmup else segment),
                query_ms=_mean_std(q_ms[warmup:] or q_ms),
            )
            rows.append(row)
            if log:
                log(
                    f"{config.name} @ {size}: transform {row.transform_ms[0]:.2f} ms, "
                    f"insert {row.insert_ms[0]:.3f} ms, query {row.query_ms[0]:.2f} ms"
                )
    return rows, raw_inserts
