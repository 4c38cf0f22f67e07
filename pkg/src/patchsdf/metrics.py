"""Mesh-to-mesh evaluation: volumetric IoU, Chamfer, F-score and mesh accuracy.

Seeds: an integer ``seed`` draws the surface samples of both meshes from the
same stream, so identical meshes yield identical sample sets (distance 0). A
``(gt_seed, pred_seed)`` pair sets them separately; swapping the argument
order together with the pair gives the mirrored measurement.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyMeshError
from .geometry.distance import MeshIndex
from .geometry.mesh import TriMesh
from .geometry.sampling import sample_surface

IOU_POINTS = 100_000
SURFACE_POINTS = 100_000
F_THRESHOLD = 0.01
ACCURACY_PERCENTILE = 90
SCALE = 100.0

IOU_FAILURE = 0.0
CHAMFER_FAILURE = 100.0
F_SCORE_FAILURE = 0.0

INSIDE_TEST = "winding number"


def _seed_pair(seed):
    if np.ndim(seed) == 0:
        return int(seed), int(seed)
    a, b = seed
    return int(a), int(b)


def _usable(mesh):
    return mesh is not None and not mesh.is_empty and float(mesh.face_areas().sum()) > 0.0


def iou(gt: TriMesh, pred: TriMesh, seed=0, count=IOU_POINTS):
    """100 x |inside both| / |inside either| over uniform points in the gt box."""
    if not _usable(pred):
        return IOU_FAILURE
    rng = np.random.default_rng(_seed_pair(seed)[0])
    lo = gt.vertices.min(axis=0)
    hi = gt.vertices.max(axis=0)
    pts = rng.uniform(lo, hi, size=(count, 3))
    a = MeshIndex(gt).contains(pts)
    b = MeshIndex(pred).contains(pts)
    union = np.count_nonzero(a | b)
    if union == 0:
        return IOU_FAILURE
    return SCALE * np.count_nonzero(a & b) / union


def surface_distances(gt: TriMesh, pred: TriMesh, seed=0, count=SURFACE_POINTS):
    """Nearest-neighbour distances between surface samples of both meshes.

    Returns ``(pred_to_gt, gt_to_pred)``.
    """
    s_gt, s_pred = _seed_pair(seed)
    a = sample_surface(gt, count, s_gt).points
    b = sample_surface(pred, count, s_pred).points
    d_pred, _ = cKDTree(a).query(b)
    d_gt, _ = cKDTree(b).query(a)
    return d_pred, d_gt


def chamfer(gt: TriMesh, pred: TriMesh, seed=0, count=SURFACE_POINTS, distances=None):
    """100 x (mean squared pred->gt distance + mean squared gt->pred distance)."""
    if not _usable(pred) or not _usable(gt):
        return CHAMFER_FAILURE
    d_pred, d_gt = distances or surface_distances(gt, pred, seed, count)
    return SCALE * (float(np.mean(d_pred ** 2)) + float(np.mean(d_gt ** 2)))


def f_score_from_distances(d_pred, d_gt, threshold=F_THRESHOLD):
    precision = float(np.mean(d_pred < threshold))
    recall = float(np.mean(d_gt < threshold))
    if precision == 0.0 or recall == 0.0:
        return 0.0
    return SCALE * 2.0 * precision * recall / (precision + recall)


def f_score(gt: TriMesh, pred: TriMesh, seed=0, count=SURFACE_POINTS, threshold=F_THRESHOLD,
            distances=None):
    if not _usable(pred) or not _usable(gt):
        return F_SCORE_FAILURE
    d_pred, d_gt = distances or surface_distances(gt, pred, seed, count)
    return f_score_from_distances(d_pred, d_gt, threshold)


def nearest_rank_percentile(values, q):
    v = np.sort(np.asarray(values, dtype=np.float64))
    if len(v) == 0:
        raise ValueError("percentile of an empty set")
    k = max(1, math.ceil(q / 100.0 * len(v)))
    return float(v[k - 1])


def mesh_accuracy(gt: TriMesh, pred: TriMesh, seed=0, count=SURFACE_POINTS, distances=None):
    """90th percentile (nearest rank) of distances from predicted samples to the gt."""
    if not _usable(pred):
        raise EmptyMeshError("mesh accuracy needs a non-empty prediction")
    d_pred, _ = distances or surface_distances(gt, pred, seed, count)
    return nearest_rank_percentile(d_pred, ACCURACY_PERCENTILE)


@dataclass
class EvalReport:
    iou: float
    chamfer: float
    f_score: float
    mesh_accuracy: float        # inf for an empty prediction
    iou_points: int
    surface_points: int
    seed: int
    inside_test: str = INSIDE_TEST

    def to_json(self):
        return json.dumps(asdict(self))

    def csv_header(self):
        return ",".join(asdict(self))

    def csv_row(self):
        return ",".join(str(v) for v in asdict(self).values())


def evaluate(gt: TriMesh, pred: TriMesh, seed=0, iou_points=IOU_POINTS,
             surface_points=SURFACE_POINTS) -> EvalReport:
    """All four metrics, sharing one set of surface samples."""
    if not _usable(pred):
        return EvalReport(IOU_FAILURE, CHAMFER_FAILURE, F_SCORE_FAILURE, math.inf, iou_points,
                          surface_points, int(np.ravel(seed)[0]))
    dist = surface_distances(gt, pred, seed, surface_points)
    return EvalReport(
        iou=iou(gt, pred, seed, iou_points),
        chamfer=chamfer(gt, pred, distances=dist),
        f_score=f_score(gt, pred, distances=dist),
        mesh_accuracy=mesh_accuracy(gt, pred, distances=dist),
        iou_points=iou_points,
        surface_points=surface_points,
        seed=int(np.ravel(seed)[0]),
    )
