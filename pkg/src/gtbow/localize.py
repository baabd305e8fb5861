"""Pose estimation from retrieval matches.

Feature pairs come straight from the inverse index (same word, same size
bin, winning orientation bin); no descriptor ratio test is needed.  A rigid
2D transform at unit scale (fixed camera height) is estimated with RANSAC,
optionally weighting samples and consensus by the match weights, then
refined by closed-form weighted least squares on the inliers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bow import transform as bow_transform
from .core import ImageFeatures, Pose2D
from .index import InverseIndex, QueryCandidate
from .vocab import Vocabulary


@dataclass(frozen=True)
class Correspondence:
    q_xy: tuple[float, float]
    db_xy: tuple[float, float]
    q_orientation: float
    db_orientation: float
    weight: float


@dataclass(frozen=True)
class RigidTransform2D:
    """Maps query image coordinates to database image coordinates."""

    rotation_deg: float
    tx: float
    ty: float

    def __post_init__(self):
        object.__setattr__(self, "rotation_deg", float(self.rotation_deg) % 360.0)

    def matrix(self) -> np.ndarray:
        t = math.radians(self.rotation_deg)
        return np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return np.atleast_2d(pts) @ self.matrix().T + np.array([self.tx, self.ty])


def collect_correspondences(
    candidate: QueryCandidate,
    query_features: ImageFeatures,
    db_features: ImageFeatures,
) -> list[Correspondence]:
    """Resolve a candidate's matched keypoint ids to point correspondences."""
    q_pos = {int(k): i for i, k in enumerate(query_features.kp_ids)}
    d_pos = {int(k): i for i, k in enumerate(db_features.kp_ids)}
    out = []
    for q_id, d_id, w in candidate.matches:
        if q_id not in q_pos:
            raise ValueError(f"match references unknown query keypoint {q_id}")
        if d_id not in d_pos:
            raise ValueError(
                f"match references unknown keypoint {d_id} in image {db_features.image_id}"
            )
        qi, di = q_pos[q_id], d_pos[d_id]
        out.append(
            Correspondence(
                q_xy=(float(query_features.xy[qi, 0]), float(query_features.xy[qi, 1])),
                db_xy=(float(db_features.xy[di, 0]), float(db_features.xy[di, 1])),
                q_orientation=float(query_features.orientations[qi]),
                db_orientation=float(db_features.orientations[di]),
                weight=float(w),
            )
        )
    return out


@dataclass
class RansacResult:
    transform: RigidTransform2D
    inliers: np.ndarray          # indices into the correspondence list
    inlier_weight: float
    n_iterations: int


def _fit_rigid_weighted(qp: np.ndarray, dp: np.ndarray, w: np.ndarray) -> RigidTransform2D:
    """Closed-form weighted Procrustes restricted to rotation + translation."""
    w = w / w.sum()
    qc = (qp * w[:, None]).sum(axis=0)
    dc = (dp * w[:, None]).sum(axis=0)
    q0, d0 = qp - qc, dp - dc
    num = (w * (q0[:, 0] * d0[:, 1] - q0[:, 1] * d0[:, 0])).sum()
    den = (w * (q0[:, 0] * d0[:, 0] + q0[:, 1] * d0[:, 1])).sum()
    theta = math.degrees(math.atan2(num, den))
    tr = RigidTransform2D(rotation_deg=theta, tx=0.0, ty=0.0)
    t = dc - tr.apply(qc)[0]
    return RigidTransform2D(rotation_deg=theta, tx=float(t[0]), ty=float(t[1]))


def ransac_rigid(
    correspondences: list[Correspondence],
    iterations: int = 500,
    inlier_tol_px: float = 3.0,
    weighted: bool = False,
    seed: int = 0,
    min_inlier_frac: float = 0.2,
    confidence: float = 0.99,
) -> RansacResult | None:
    """Estimate a rotation+translation from noisy correspondences.

    The 2-point minimal sample fixes rotation from the segment direction and
    translation from either endpoint.  Weighted mode samples proportionally
    to match weight and scores hypotheses by total inlier weight; unweighted
    mode scores by inlier count.  Returns None when no hypothesis reaches
    ``min_inlier_frac`` of the correspondences.
    """
    n = len(correspondences)
    if n < 2:
        return None
    qp = np.array([c.q_xy for c in correspondences])
    dp = np.array([c.db_xy for c in correspondences])
    w = np.array([c.weight for c in correspondences])
    if w.min() < 0:
        raise ValueError("correspondence weights must be non-negative")
    probs = w / w.sum() if weighted else None
    rng = np.random.default_rng([0x52534143, seed])

    best_score = 0.0
    best_mask = None
    needed = iterations
    it = 0
    while it < min(iterations, needed):
        it += 1
        i, j = rng.choice(n, size=2, replace=False, p=probs)
        dq = qp[j] - qp[i]
        dd = dp[j] - dp[i]
        if dq @ dq < 1e-12 or dd @ dd < 1e-12:
            continue  # coincident sample pins no rotation
        theta = math.degrees(math.atan2(dd[1], dd[0]) - math.atan2(dq[1], dq[0]))
        tr = RigidTransform2D(rotation_deg=theta, tx=0.0, ty=0.0)
        t = dp[i] - tr.apply(qp[i])[0]
        resid = qp @ tr.matrix().T + t - dp
        mask = (resid ** 2).sum(axis=1) <= inlier_tol_px ** 2
        score = float(w[mask].sum()) if weighted else float(mask.sum())
        if score > best_score:
            best_score = score
            best_mask = mask
            frac = mask.mean()
            if 0 < frac < 1:
                needed = math.ceil(math.log(1 - confidence) / math.log(1 - frac * frac))
            elif frac >= 1:
                needed = it

    if best_mask is None or best_mask.sum() < max(2, math.ceil(min_inlier_frac * n)):
        return None
    refit_w = w if weighted else np.ones(n)
    tr = _fit_rigid_weighted(qp[best_mask], dp[best_mask], refit_w[best_mask])
    resid = qp @ tr.matrix().T + np.array([tr.tx, tr.ty]) - dp
    inl = (resid ** 2).sum(axis=1) <= inlier_tol_px ** 2
    if inl.sum() < 2:
        inl = best_mask  # refit degraded the consensus; keep the vote set
        tr = _fit_rigid_weighted(qp[best_mask], dp[best_mask], refit_w[best_mask])
    return RansacResult(
        transform=tr,
        inliers=np.nonzero(inl)[0],
        inlier_weight=float(w[inl].sum()),
        n_iterations=it,
    )


def compose_pose(
    db_pose: Pose2D,
    tr: RigidTransform2D,
    px_per_mm: float,
    image_center_px: tuple[float, float],
) -> Pose2D:
    """World pose of the query camera given the db camera pose and the
    query->db image transform.

    With image coordinates p_img = R(-theta) (p_world - c) * s + o, a
    query->db transform (phi, t) gives theta_q = theta_db + phi and
    c_q = c_db + R(theta_db) (R(phi) o + t - o) / s.
    """
    o = np.array(image_center_px)
    t = np.array([tr.tx, tr.ty])
    theta_q = (db_pose.theta_deg + tr.rotation_deg) % 360.0
    rot_db = math.radians(db_pose.theta_deg)
    r_db = np.array(
        [[math.cos(rot_db), -math.sin(rot_db)], [math.sin(rot_db), math.cos(rot_db)]]
    )
    shift = r_db @ (tr.matrix() @ o + t - o) / px_per_mm
    return Pose2D(db_pose.x_mm + shift[0], db_pose.y_mm + shift[1], theta_q)


@dataclass
class LocalizeParams:
    r: int = 3
    sigma: float = 580.0
    top_candidates: int = 5
    min_inliers: int = 8
    min_inlier_frac: float = 0.2
    ransac_iterations: int = 500
    inlier_tol_px: float = 3.0
    weighted: bool | None = None   # None -> weighted iff r > 1
    seed: int = 0
    px_per_mm: float = 1.0
    image_center_px: tuple[float, float] = (100.0, 75.0)


@dataclass
class CandidateDiagnostics:
    image_id: int
    retrieval_score: float
    n_matches: int
    n_inliers: int
    reason: str


@dataclass
class LocalizeResult:
    query_id: int
    status: str                  # "ok" or "failed"
    image_id: int | None = None
    pose: Pose2D | None = None
    n_inliers: int = 0
    score: float = 0.0
    diagnostics: list[CandidateDiagnostics] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def localize(
    index: InverseIndex,
    vocab: Vocabulary,
    query: ImageFeatures,
    db_features: dict[int, ImageFeatures],
    params: LocalizeParams,
) -> LocalizeResult:
    """Global localization: retrieve candidates, verify each with RANSAC,
    return the first acceptable consensus composed into a world pose."""
    weighted = params.weighted if params.weighted is not None else params.r > 1
    bow = bow_transform(vocab, query, r=params.r, sigma=params.sigma)
    result = LocalizeResult(query_id=query.image_id, status="failed")
    if not bow.rows:
        return result
    for cand in index.query(bow, top_n=params.top_candidates, with_matches=True):
        db = db_features.get(cand.image_id)
        if db is None:
            raise ValueError(f"no features stored for database image {cand.image_id}")
        if db.pose is None:
            raise ValueError(f"database image {cand.image_id} has no ground-truth pose")
        corrs = collect_correspondences(cand, query, db)
        diag = CandidateDiagnostics(
            image_id=cand.image_id, retrieval_score=cand.score,
            n_matches=len(corrs), n_inliers=0, reason="",
        )
        result.diagnostics.append(diag)
        if len(corrs) < max(2, params.min_inliers):
            diag.reason = "too few matches"
            continue
        fit = ransac_rigid(
            corrs,
            iterations=params.ransac_iterations,
            inlier_tol_px=params.inlier_tol_px,
            weighted=weighted,
            seed=params.seed,
            min_inlier_frac=params.min_inlier_frac,
        )
        if fit is None:
            diag.reason = "no consensus"
            continue
        diag.n_inliers = len(fit.inliers)
        if len(fit.inliers) < params.min_inliers:
            diag.reason = "consensus below min_inliers"
            continue
        pose = compose_pose(db.pose, fit.transform, params.px_per_mm, params.image_center_px)
        result.status = "ok"
        result.image_id = cand.image_id
        result.pose = pose
        result.n_inliers = len(fit.inliers)
        result.score = cand.score
        diag.reason = "accepted"
        return result
    return result
