"""Differentiable training objectives.

Structure losses (chamfer, boundary energy, error regression) drive the
deformation and pruning networks; the geometry regularizers (normal,
smoothness, edge) keep the deformed surface well shaped.  Every function
returns a scalar `Value`; nearest-neighbor indices are computed outside the
graph and treated as constants within a step, so the subgradient at a tie
follows the lowest-index nearest neighbor.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import Value, as_value, cross_rows, gather
from .mesh import Mesh, PointCloud

logger = logging.getLogger(__name__)

# below this target-cloud size a kd-tree costs more than it saves
KDTREE_MIN = 64

# neighbor pairs closer than this are treated as coincident (zero direction)
EPS_COINCIDENT = 1e-12


class LossError(ValueError):
    """Loss called with unusable inputs (empty cloud, missing fields)."""


@dataclass(frozen=True)
class LossWeights:
    """Weights of the composite objective.

    Fields follow the composite-loss order: error regression, boundary
    energy, then the normal / smoothness / edge regularizers.
    """

    error: float = 1.0
    boundary: float = 0.5
    normal: float = 1e-2
    smooth: float = 2e-7
    edge: float = 0.1

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not np.isfinite(value) or value < 0:
                raise LossError(f"loss weight {name} must be finite and >= 0, got {value}")


def nearest_indices(query: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Index of the nearest target point for every query point.

    Uses a kd-tree when the target is large enough to amortize its
    construction, otherwise an exhaustive argmin.  The argmin path breaks
    distance ties toward the lowest index; kd-tree queries only differ at
    exact ties, which random double data never produces.
    """
    query = np.asarray(query, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if len(query) == 0 or len(target) == 0:
        raise LossError("nearest_indices: empty cloud")
    if len(target) >= KDTREE_MIN:
        from scipy.spatial import cKDTree

        _, idx = cKDTree(target).query(query)
        return np.asarray(idx, dtype=np.int64)
    d2 = ((query[:, None, :] - target[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1).astype(np.int64)


def chamfer(p: Value, q: Value) -> Value:
    """Symmetric chamfer distance, summed squared, both directions.

    sum_x min_y ||x - y||^2 + sum_y min_x ||x - y||^2 over the two clouds.
    """
    p, q = as_value(p), as_value(q)
    for side in (p, q):
        if side.data.ndim != 2 or side.data.shape[1] != 3 or len(side.data) == 0:
            raise LossError(f"chamfer: cloud must be nonempty (n, 3), got {side.data.shape}")
    idx_pq = nearest_indices(p.data, q.data)
    idx_qp = nearest_indices(q.data, p.data)
    forward = (p - gather(q, idx_pq)).square().sum()
    backward = (q - gather(p, idx_qp)).square().sum()
    return forward + backward


def _guarded_unit_rows(d: Value, what: str) -> Value:
    """Rows normalized to unit length; near-zero rows become zero.

    The replacement keeps the graph finite when pruning or refinement
    produces coincident vertices; occurrences are reported through the
    module logger so they show up in training diagnostics.
    """
    norms = d.norm_rows(keepdims=True)
    good = (norms.data >= EPS_COINCIDENT).astype(np.float64)
    n_bad = int(len(good) - good.sum())
    if n_bad:
        logger.warning("%s: %d degenerate rows treated as zero direction", what, n_bad)
    safe = norms + (1.0 - good)
    return (d * good) / safe


def boundary_energy(positions: Value, loops: list) -> Value:
    """Zigzag penalty on open boundaries.

    For every boundary vertex x with loop neighbors p1, p2 the term is
    ||(x-p1)/||x-p1|| + (x-p2)/||x-p2||||; a straight boundary has opposite
    unit chords and contributes zero.  Pinched vertices contribute once per
    loop occurrence.
    """
    positions = as_value(positions)
    if not loops:
        return Value(np.zeros(()))
    centers = []
    before = []
    after = []
    for loop in loops:
        pairs = loop.neighbor_pairs()
        centers.append(loop.vertices)
        before.append(pairs[:, 0])
        after.append(pairs[:, 1])
    x = gather(positions, np.concatenate(centers))
    p1 = gather(positions, np.concatenate(before))
    p2 = gather(positions, np.concatenate(after))
    u1 = _guarded_unit_rows(x - p1, "boundary_energy")
    u2 = _guarded_unit_rows(x - p2, "boundary_energy")
    return (u1 + u2).norm_rows().sum()


def error_regression_loss(predicted: Value, target: np.ndarray) -> Value:
    """Quadratic regression of predicted per-point errors onto measured ones."""
    predicted = as_value(predicted)
    target = np.asarray(target, dtype=np.float64)
    if predicted.data.shape != target.shape or predicted.data.ndim != 1:
        raise LossError(
            f"error regression: shapes {predicted.data.shape} vs {target.shape}"
        )
    return (predicted - target).square().sum()


def face_unit_normals(positions: Value, faces: np.ndarray) -> Value:
    """Unit normals of every face as a differentiable (F, 3) Value.

    Zero-area faces get a zero normal through the degenerate-row guard.
    """
    positions = as_value(positions)
    faces = np.asarray(faces, dtype=np.int64)
    v0 = gather(positions, faces[:, 0])
    v1 = gather(positions, faces[:, 1])
    v2 = gather(positions, faces[:, 2])
    return _guarded_unit_rows(cross_rows(v1 - v0, v2 - v0), "face_unit_normals")


def normal_loss(positions: Value, faces: np.ndarray, samples: PointCloud, gt: PointCloud) -> Value:
    """Misalignment between face normals and nearby ground-truth normals.

    Mean over samples of 1 - |<n_face(sample), n_gt(nearest gt point)>|.
    The nearest-point pairing uses the samples' current coordinates and is
    constant within the step.
    """
    if gt.normals is None:
        raise LossError("normal_loss: ground-truth cloud has no normals")
    if samples.source_face is None:
        raise LossError("normal_loss: samples carry no source_face")
    unit = face_unit_normals(positions, faces)
    per_sample = gather(unit, samples.source_face)
    idx = nearest_indices(samples.points, gt.points)
    dots = (per_sample * gt.normals[idx]).sum(axis=1)
    return (1.0 - dots.abs()).mean()


def smoothness_loss(positions: Value, mesh: Mesh) -> Value:
    """Dihedral flatness across interior edges.

    Per interior edge the term is (1 - <n1, n2>)^2 for the unit normals of
    the two incident faces; with consistent winding a flat surface scores
    zero and a 90-degree fold scores one.
    """
    pairs = mesh.interior_edge_face_pairs()
    if len(pairs) == 0:
        raise LossError("smoothness_loss: mesh has no interior edges")
    unit = face_unit_normals(positions, mesh.faces)
    n1 = gather(unit, pairs[:, 0])
    n2 = gather(unit, pairs[:, 1])
    dots = (n1 * n2).sum(axis=1)
    return (1.0 - dots).square().mean()


def edge_loss(positions: Value, mesh: Mesh) -> Value:
    """Mean squared edge length; discourages flying vertices and long edges."""
    if mesh.num_edges == 0:
        raise LossError("edge_loss: mesh has no edges")
    positions = as_value(positions)
    d = gather(positions, mesh.edges[:, 0]) - gather(positions, mesh.edges[:, 1])
    return d.square().sum(axis=1).mean()


def total_loss(components: dict, weights: LossWeights) -> Value:
    """Weighted composite objective.

    cd + w.error * error + w.boundary * boundary + w.normal * normal
    + w.smooth * smooth + w.edge * edge; missing components contribute
    nothing.
    """
    total = as_value(components.get("cd", np.zeros(())))
    for key, weight in (
        ("error", weights.error),
        ("boundary", weights.boundary),
        ("normal", weights.normal),
        ("smooth", weights.smooth),
        ("edge", weights.edge),
    ):
        if key in components:
            total = total + weight * as_value(components[key])
    return total
