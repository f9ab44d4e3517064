"""The four learned components as pure functions of parameters and inputs.

Deformation moves vertices by predicted offsets, error estimation scores
faces for pruning, boundary refinement slides open-boundary vertices inside
the plane of their two boundary edges, and the point encoder condenses a
cloud into the shape feature.  Each component has an inference entry point
working on meshes/arrays and a graph-building core used by training.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    GraphError,
    MlpParams,
    Value,
    as_value,
    concat,
    gather,
    make_mlp,
    max_along_axis,
    mlp_forward,
    repeat_rows,
    scatter_rows,
)
from .losses import _guarded_unit_rows
from .mesh import Mesh, PointCloud, prune_faces, sample_per_face

logger = logging.getLogger(__name__)

# boundary edge directions this close to parallel leave only one usable
# in-plane direction; refinement still works but the event is logged
COLLINEAR_TOL = 1e-9


@dataclass
class ShapeFeature:
    """Latent shape descriptor produced by the point encoder."""

    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.ndim != 1:
            raise ValueError(f"feature must be a vector, got {self.vector.shape}")
        if not np.isfinite(self.vector).all():
            raise ValueError("feature has non-finite entries")

    def __len__(self):
        return len(self.vector)


@dataclass
class PerFaceError:
    """Estimated reconstruction error per face, clamped to >= 0."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("per-face errors must be a vector")
        if not np.isfinite(self.values).all() or (self.values < 0).any():
            raise ValueError("per-face errors must be finite and >= 0")

    def __len__(self):
        return len(self.values)


def _feature_vector(feature) -> np.ndarray:
    if isinstance(feature, ShapeFeature):
        return feature.vector
    return np.asarray(feature, dtype=np.float64)


# -- constructors ---------------------------------------------------------------

DEFORM_HIDDEN = (1024, 512, 256, 128)
ENCODER_HIDDEN = (64, 128)


def make_deform_net(feature_dim: int, rng, hidden=DEFORM_HIDDEN) -> MlpParams:
    """Offset predictor: concat(vertex, feature) -> 3-vector in (-1, 1)."""
    dims = [3 + feature_dim, *hidden, 3]
    return make_mlp(dims, ["relu"] * len(hidden) + ["tanh"], rng)


def make_error_net(feature_dim: int, rng, hidden=DEFORM_HIDDEN) -> MlpParams:
    """Error predictor: concat(point, feature) -> unclamped scalar."""
    dims = [3 + feature_dim, *hidden, 1]
    return make_mlp(dims, ["relu"] * len(hidden) + ["none"], rng)


def make_refine_net(feature_dim: int, rng, hidden=DEFORM_HIDDEN) -> MlpParams:
    """Boundary coefficients: concat(vertex, feature) -> 2 in-plane weights."""
    dims = [3 + feature_dim, *hidden, 2]
    return make_mlp(dims, ["relu"] * len(hidden) + ["tanh"], rng)


def make_encoder(feature_dim: int, rng, hidden=ENCODER_HIDDEN) -> MlpParams:
    """Shared per-point layers of the cloud encoder."""
    dims = [3, *hidden, feature_dim]
    return make_mlp(dims, ["relu"] * (len(hidden) + 1), rng)


def zero_head(params: MlpParams) -> MlpParams:
    """Copy of an MLP with the final layer zeroed; its tanh output is 0."""
    copied = params.copy()
    copied.layers[-1].weight[:] = 0.0
    copied.layers[-1].bias[:] = 0.0
    return copied


# -- graph-building cores (training and inference share these) ---------------------


def _with_feature(points: Value, feature: Value) -> Value:
    n = points.data.shape[0]
    return concat([points, repeat_rows(feature, n)], axis=1)


def deform_positions(positions: Value, feature: Value, params) -> Value:
    """Vertex positions plus predicted offsets, as a differentiable Value."""
    positions = as_value(positions)
    feature = as_value(feature)
    offsets = mlp_forward(params, _with_feature(positions, feature))
    if offsets.data.shape[1] != 3:
        raise GraphError(
            f"deform head must emit 3 offsets, got {offsets.data.shape[1]}"
        )
    return positions + offsets


def error_predictions(points: Value, feature: Value, params) -> Value:
    """Raw signed per-point error predictions, shape (n,)."""
    points = as_value(points)
    out = mlp_forward(params, _with_feature(points, as_value(feature)))
    if out.data.shape[1] != 1:
        raise GraphError(f"error head must emit 1 value, got {out.data.shape[1]}")
    return out.reshape((out.data.shape[0],))


def refine_positions(positions: Value, loops: list, feature: Value, params) -> Value:
    """Positions with boundary vertices displaced inside their edge planes.

    Each loop occurrence of a boundary vertex x with neighbors p1, p2 gets
    a displacement a*u1 + b*u2 where (a, b) comes from the network and u1,
    u2 are the unit directions of the two boundary edges.  Occurrences sum
    (a pinch vertex collects one term per loop passage); interior vertices
    are left exactly as they were.
    """
    positions = as_value(positions)
    if not loops:
        return positions
    feature = as_value(feature)
    centers = np.concatenate([loop.vertices for loop in loops])
    pairs = np.concatenate([loop.neighbor_pairs() for loop in loops])

    x = gather(positions, centers)
    u1 = _guarded_unit_rows(x - gather(positions, pairs[:, 0]), "refine_boundary")
    u2 = _guarded_unit_rows(x - gather(positions, pairs[:, 1]), "refine_boundary")

    parallel = np.abs((u1.data * u2.data).sum(axis=1)) > 1.0 - COLLINEAR_TOL
    if parallel.any():
        logger.warning(
            "refine_boundary: %d boundary vertices with collinear edges, "
            "motion restricted to a single direction",
            int(parallel.sum()),
        )

    coeff = mlp_forward(params, _with_feature(x, feature))
    if coeff.data.shape[1] != 2:
        raise GraphError(
            f"refine head must emit 2 coefficients, got {coeff.data.shape[1]}"
        )
    a = coeff @ np.array([[1.0], [0.0]])
    b = coeff @ np.array([[0.0], [1.0]])
    displacement = a * u1 + b * u2
    return positions + scatter_rows(displacement, centers, positions.data.shape[0])


def encode_points(points, params) -> Value:
    """Feature vector of a cloud: shared per-point MLP then row-wise max."""
    points = as_value(points)
    if points.data.ndim != 2 or points.data.shape[1] != 3 or len(points.data) == 0:
        raise GraphError(f"encoder input must be nonempty (n, 3), got {points.data.shape}")
    per_point = mlp_forward(params, points)
    pooled, _ = max_along_axis(per_point, axis=0)
    return pooled


# -- inference wrappers --------------------------------------------------------------


def deform(mesh: Mesh, feature, params: MlpParams) -> Mesh:
    """Move every vertex by its predicted offset; topology untouched."""
    fvec = _feature_vector(feature)
    if params.in_dim != 3 + len(fvec):
        raise GraphError(
            f"deform params expect input {params.in_dim}, got 3 + {len(fvec)}"
        )
    moved = deform_positions(Value(mesh.vertices), Value(fvec), params)
    return mesh.with_vertices(moved.data)


def estimate_errors(
    mesh: Mesh, feature, params: MlpParams, samples_per_face: int, seed: int
) -> PerFaceError:
    """Per-face error estimates from uniformly sampled face points.

    samples_per_face points are drawn on every face, scored by the network,
    averaged per face, and clamped to >= 0.
    """
    rng = np.random.default_rng(seed)
    points, _, _ = sample_per_face(mesh.vertices, mesh.faces, samples_per_face, rng)
    fvec = _feature_vector(feature)
    raw = error_predictions(Value(points), Value(fvec), params)
    per_face = raw.data.reshape(mesh.num_faces, samples_per_face).mean(axis=1)
    return PerFaceError(np.maximum(per_face, 0.0))


def prune_by_threshold(mesh: Mesh, errors: PerFaceError, tau: float):
    """Drop faces whose estimated error exceeds tau.

    Returns (pruned mesh, vertex remap).  Raises EmptyMeshError when the
    threshold would remove everything; the pipeline reports that as a stage
    failure.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if len(errors) != mesh.num_faces:
        raise ValueError(
            f"{len(errors)} error entries for {mesh.num_faces} faces"
        )
    return prune_faces(mesh, errors.values > tau)


def refine_boundary(mesh: Mesh, loops: list, feature, params: MlpParams) -> Mesh:
    """Apply in-plane boundary displacements; interior vertices bit-identical."""
    fvec = _feature_vector(feature)
    refined = refine_positions(Value(mesh.vertices), loops, Value(fvec), params)
    return mesh.with_vertices(refined.data)


def encode_pointcloud(cloud: PointCloud, params: MlpParams) -> ShapeFeature:
    """Permutation-invariant feature of a point cloud."""
    pooled = encode_points(cloud.points, params)
    return ShapeFeature(pooled.data)
