"""Triangle meshes, point clouds, and topology operations.

The mesh is the object being shaped: an indexed triangle surface that the
deformation networks move and the pruning step cuts open.  Meshes are
immutable after construction; every derived quantity (normals, areas, edge
table, adjacency) is computed eagerly so concurrent reads are safe, and
mutating operations return new meshes.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

logger = logging.getLogger(__name__)


class MeshError(Exception):
    """Invalid mesh topology, geometry, or construction parameters."""


class EmptyMeshError(MeshError):
    """An operation would leave the mesh with no faces."""


class MeshParseError(MeshError):
    """A mesh file could not be parsed.

    Carries the 1-based line number of the offending record.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class Mesh:
    """Immutable indexed triangle mesh.

    Parameters
    ----------
    vertices : array_like
        (V, 3) float coordinates in model units.
    faces : array_like
        (F, 3) integer vertex indices, counter-clockwise when viewed from
        outside the surface.

    Notes
    -----
    Construction validates that every face index is in range, every face
    has three distinct vertices, and every undirected edge borders at most
    two faces.  Non-manifold edge configurations are rejected outright;
    pinched boundary vertices (more than two boundary edges at one vertex)
    are legal and handled by :func:`extract_boundary_loops`.
    """

    def __init__(self, vertices, faces):
        vertices = np.asarray(vertices, dtype=np.float64)
        faces = np.asarray(faces, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise MeshError(f"vertices must be (V, 3), got {vertices.shape}")
        if faces.size == 0:
            raise EmptyMeshError("mesh has no faces")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise MeshError(f"faces must be (F, 3), got {faces.shape}")
        out_of_range = (faces < 0) | (faces >= len(vertices))
        if out_of_range.any():
            bad = int(np.argmax(out_of_range.any(axis=1)))
            raise MeshError(
                f"face index out of range [0, {len(vertices)}) at face {bad}"
            )
        degen = (
            (faces[:, 0] == faces[:, 1])
            | (faces[:, 1] == faces[:, 2])
            | (faces[:, 2] == faces[:, 0])
        )
        if degen.any():
            raise MeshError(f"degenerate face (repeated vertex) at index {int(np.argmax(degen))}")

        # +0.0 canonicalizes any -0.0 so identical geometry is bit-identical
        self.vertices = vertices + 0.0
        self.faces = faces.copy()
        self.vertices.setflags(write=False)
        self.faces.setflags(write=False)

        self._build_edges()
        self._build_face_geometry()
        self._build_vertex_adjacency()

    # -- derived structure ------------------------------------------------

    def _build_edges(self):
        f = self.faces
        directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        undirected = np.sort(directed, axis=1)
        edges, inverse, counts = np.unique(
            undirected, axis=0, return_inverse=True, return_counts=True
        )
        inverse = inverse.reshape(-1)
        if counts.max() > 2:
            e = edges[int(np.argmax(counts))]
            raise MeshError(
                f"non-manifold edge ({e[0]}, {e[1]}) shared by {int(counts.max())} faces"
            )
        self.edges = edges
        self.edges.setflags(write=False)
        # Incident faces per edge, -1 padded; directed edge k belongs to face k % F.
        face_ids = np.tile(np.arange(len(f)), 3)
        edge_faces = np.full((len(edges), 2), -1, dtype=np.int64)
        slot = np.zeros(len(edges), dtype=np.int64)
        for eid, fid in zip(inverse, face_ids):
            edge_faces[eid, slot[eid]] = fid
            slot[eid] += 1
        self.edge_faces = edge_faces
        self.edge_faces.setflags(write=False)
        self.edge_face_count = slot
        self.edge_face_count.setflags(write=False)

    def _build_face_geometry(self):
        v = self.vertices
        f = self.faces
        e1 = v[f[:, 1]] - v[f[:, 0]]
        e2 = v[f[:, 2]] - v[f[:, 0]]
        cross = np.cross(e1, e2)
        norms = np.linalg.norm(cross, axis=1)
        self.face_areas = 0.5 * norms
        with np.errstate(invalid="ignore", divide="ignore"):
            normals = np.where(norms[:, None] > 0.0, cross / norms[:, None], 0.0)
        self.face_normals = normals
        self.face_areas.setflags(write=False)
        self.face_normals.setflags(write=False)

    def _build_vertex_adjacency(self):
        adj = [[] for _ in range(len(self.vertices))]
        for a, b in self.edges:
            adj[a].append(int(b))
            adj[b].append(int(a))
        self.vertex_adjacency = [np.array(sorted(n), dtype=np.int64) for n in adj]

    # -- queries -----------------------------------------------------------

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_faces(self):
        return len(self.faces)

    @property
    def num_edges(self):
        return len(self.edges)

    def boundary_edge_mask(self):
        """Boolean mask over ``edges``: True where the edge borders one face."""
        return self.edge_face_count == 1

    def interior_edge_face_pairs(self):
        """(K, 2) face-index pairs across each interior (two-face) edge."""
        mask = self.edge_face_count == 2
        return self.edge_faces[mask]

    def is_closed(self):
        return not self.boundary_edge_mask().any()

    def with_vertices(self, vertices):
        """New mesh with the same faces and replaced vertex positions."""
        return Mesh(vertices, self.faces)

    def total_area(self):
        return float(self.face_areas.sum())

    def signed_volume(self):
        """Signed enclosed volume; positive for closed outward-oriented meshes."""
        v = self.vertices
        f = self.faces
        return float(np.einsum("ij,ij->i", v[f[:, 0]], np.cross(v[f[:, 1]], v[f[:, 2]])).sum() / 6.0)


@dataclass
class PointCloud:
    """Points with optional unit normals and per-point annotations.

    ``source_face`` and ``bary`` are set for mesh-sampled clouds and allow a
    sample's position to be re-expressed as a barycentric combination of the
    (possibly moved) face vertices.  ``scalars`` carries per-point values
    such as ground-truth reconstruction errors.
    """

    points: np.ndarray
    normals: Optional[np.ndarray] = None
    source_face: Optional[np.ndarray] = None
    bary: Optional[np.ndarray] = None
    scalars: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {self.points.shape}")
        n = len(self.points)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)
            if self.normals.shape != (n, 3):
                raise ValueError("normals length does not match points")
            lengths = np.linalg.norm(self.normals, axis=1)
            if not np.all(np.abs(lengths - 1.0) <= 1e-9):
                raise ValueError("normals must have unit norm within 1e-9")
        if self.source_face is not None:
            self.source_face = np.asarray(self.source_face, dtype=np.int64)
            if self.source_face.shape != (n,):
                raise ValueError("source_face length does not match points")
        if self.bary is not None:
            self.bary = np.asarray(self.bary, dtype=np.float64)
            if self.bary.shape != (n, 3):
                raise ValueError("bary must be (N, 3)")
        if self.scalars is not None:
            self.scalars = np.asarray(self.scalars, dtype=np.float64)
            if self.scalars.shape != (n,):
                raise ValueError("scalars length does not match points")

    def __len__(self):
        return len(self.points)


@dataclass
class BoundaryLoop:
    """Closed cycle of boundary vertices.

    ``vertices[i]`` is adjacent along the boundary to ``vertices[i-1]`` and
    ``vertices[(i+1) % len]``.  A pinched vertex may occur in more than one
    loop (or twice in one); each occurrence carries its own neighbor pair.
    """

    vertices: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.int64)
        if len(self.vertices) < 3:
            raise MeshError(f"boundary loop of length {len(self.vertices)} < 3")

    def __len__(self):
        return len(self.vertices)

    def neighbor_pairs(self):
        """(L, 2) array: boundary neighbors of each loop position."""
        v = self.vertices
        return np.stack([np.roll(v, 1), np.roll(v, -1)], axis=1)


# -- template construction --------------------------------------------------

_ICOSA_T = (1.0 + np.sqrt(5.0)) / 2.0

_ICOSA_VERTS = np.array(
    [
        (-1, _ICOSA_T, 0), (1, _ICOSA_T, 0), (-1, -_ICOSA_T, 0), (1, -_ICOSA_T, 0),
        (0, -1, _ICOSA_T), (0, 1, _ICOSA_T), (0, -1, -_ICOSA_T), (0, 1, -_ICOSA_T),
        (_ICOSA_T, 0, -1), (_ICOSA_T, 0, 1), (-_ICOSA_T, 0, -1), (-_ICOSA_T, 0, 1),
    ],
    dtype=np.float64,
)

_ICOSA_FACES = np.array(
    [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ],
    dtype=np.int64,
)

MAX_ICOSPHERE_LEVEL = 7


def make_icosphere(subdiv_level: int) -> Mesh:
    """Unit sphere by repeated midpoint subdivision of an icosahedron.

    Each level splits every triangle into four; midpoint vertices are
    deduplicated by their (sorted) endpoint index pair and re-projected to
    the unit sphere.  Level 4 gives the 2562-vertex template.
    """
    if subdiv_level < 0:
        raise MeshError("subdivision level must be non-negative")
    if subdiv_level > MAX_ICOSPHERE_LEVEL:
        raise MeshError(
            f"subdivision level {subdiv_level} exceeds guard {MAX_ICOSPHERE_LEVEL}"
        )
    verts = [v / np.linalg.norm(v) for v in _ICOSA_VERTS]
    faces = [tuple(f) for f in _ICOSA_FACES]
    for _ in range(subdiv_level):
        midpoint = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            idx = midpoint.get(key)
            if idx is None:
                m = 0.5 * (verts[a] + verts[b])
                m = m / np.linalg.norm(m)
                verts.append(m)
                idx = len(verts) - 1
                midpoint[key] = idx
            return idx

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return Mesh(np.array(verts), np.array(faces, dtype=np.int64))


def make_grid_square(n: int) -> Mesh:
    """n-by-n vertex grid on the unit square, each quad split in two.

    The result is a topological disk (one boundary loop) oriented
    counter-clockwise viewed from +z.
    """
    if n < 2:
        raise MeshError("grid needs at least 2 vertices per side")
    xs = np.linspace(0.0, 1.0, n)
    xv, yv = np.meshgrid(xs, xs, indexing="xy")
    verts = np.stack([xv.ravel(), yv.ravel(), np.zeros(n * n)], axis=1)

    def vid(i, j):
        return j * n + i

    faces = []
    for j in range(n - 1):
        for i in range(n - 1):
            v00, v10 = vid(i, j), vid(i + 1, j)
            v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
            faces.append((v00, v10, v11))
            faces.append((v00, v11, v01))
    return Mesh(verts, np.array(faces, dtype=np.int64))


# -- sampling ----------------------------------------------------------------


def sample_on_faces(vertices, faces, count, rng, face_weights=None):
    """Low-level area-weighted sampler over a face soup.

    Returns (points, face_idx, bary) where ``bary`` are the barycentric
    weights of each point in its source face.  Used by both the public
    sampler and the training loop (which re-expresses the points as a
    differentiable combination of moved vertices).
    """
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    if face_weights is None:
        e1 = v[f[:, 1]] - v[f[:, 0]]
        e2 = v[f[:, 2]] - v[f[:, 0]]
        face_weights = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)
    total = face_weights.sum()
    if not total > 0.0:
        raise MeshError("cannot sample: total face area is zero")
    probs = face_weights / total
    face_idx = rng.choice(len(f), size=count, p=probs)
    u = rng.random(count)
    w = rng.random(count)
    flip = u + w > 1.0
    u[flip] = 1.0 - u[flip]
    w[flip] = 1.0 - w[flip]
    bary = np.stack([1.0 - u - w, u, w], axis=1)
    tri = v[f[face_idx]]
    points = np.einsum("nk,nkd->nd", bary, tri)
    return points, face_idx, bary


def sample_per_face(vertices, faces, samples_per_face: int, rng):
    """Draw the same number of barycentric-uniform points on every face.

    Returns (points, face_idx, bary) with points grouped face by face:
    points[f * samples_per_face + s] lies on face f.  Unlike
    :func:`sample_on_faces` the draw ignores face areas; the error
    estimator wants every face represented equally.
    """
    if samples_per_face < 1:
        raise ValueError("samples_per_face must be >= 1")
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    u = rng.random((len(f), samples_per_face))
    w = rng.random((len(f), samples_per_face))
    flip = u + w > 1.0
    u[flip] = 1.0 - u[flip]
    w[flip] = 1.0 - w[flip]
    bary = np.stack([1.0 - u - w, u, w], axis=2).reshape(-1, 3)
    face_idx = np.repeat(np.arange(len(f)), samples_per_face)
    tri = v[f[face_idx]]
    points = np.einsum("nk,nkd->nd", bary, tri)
    return points, face_idx, bary


def sample_surface(mesh: Mesh, count: int, seed: int) -> PointCloud:
    """Draw ``count`` points area-weighted over the mesh surface.

    Barycentric coordinates are uniform within each face.  The returned
    cloud records the source face, barycentric weights, and the face normal
    of every point; fixed seeds give identical clouds.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    points, face_idx, bary = sample_on_faces(
        mesh.vertices, mesh.faces, count, rng, face_weights=mesh.face_areas
    )
    return PointCloud(
        points=points,
        normals=_safe_unit(mesh.face_normals[face_idx]),
        source_face=face_idx,
        bary=bary,
    )


def _safe_unit(vectors):
    lengths = np.linalg.norm(vectors, axis=1, keepdims=True)
    return np.where(lengths > 0, vectors / np.where(lengths > 0, lengths, 1.0), 0.0)


# -- topology modification ----------------------------------------------------


def prune_faces(mesh: Mesh, remove_mask) -> tuple[Mesh, np.ndarray]:
    """Remove the masked faces and compact unreferenced vertices.

    Returns the new mesh and a vertex remap (old index -> new index, -1 for
    deleted vertices) so per-vertex state can be re-indexed.
    """
    remove_mask = np.asarray(remove_mask, dtype=bool)
    if remove_mask.shape != (mesh.num_faces,):
        raise ValueError(
            f"mask length {remove_mask.shape} does not match face count {mesh.num_faces}"
        )
    if remove_mask.all():
        raise EmptyMeshError("pruning mask removes every face")
    kept_faces = mesh.faces[~remove_mask]
    used = np.zeros(mesh.num_vertices, dtype=bool)
    used[kept_faces.ravel()] = True
    remap = np.full(mesh.num_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(int(used.sum()))
    new_mesh = Mesh(mesh.vertices[used], remap[kept_faces])
    return new_mesh, remap


def euler_characteristic(mesh: Mesh) -> int:
    """V - E + F."""
    return mesh.num_vertices - mesh.num_edges + mesh.num_faces


def extract_boundary_loops(mesh: Mesh) -> list[BoundaryLoop]:
    """Partition the boundary edges (edges bordering one face) into loops.

    Closed meshes return an empty list.  At a pinched vertex (more than two
    boundary edges) the edges are paired in ascending opposite-vertex-index
    order, which splits the loops deterministically; the pinch is noted on
    the module logger at debug level.
    """
    boundary = mesh.edges[mesh.boundary_edge_mask()]
    if len(boundary) == 0:
        return []

    incident: dict[int, list[int]] = {}
    for a, b in boundary:
        incident.setdefault(int(a), []).append(int(b))
        incident.setdefault(int(b), []).append(int(a))

    # partner[v][u] = w: a loop passing through v enters from u and leaves to w
    partner: dict[int, dict[int, int]] = {}
    for v, nbrs in incident.items():
        nbrs = sorted(nbrs)
        if len(nbrs) % 2 != 0:
            raise MeshError(f"odd boundary-edge degree at vertex {v}")
        if len(nbrs) > 2:
            # routine after pruning; the pairing below handles it, so keep
            # the note out of the way unless debugging loop extraction
            logger.debug(
                "non-manifold boundary pinch at vertex %d (%d boundary edges)",
                v,
                len(nbrs),
            )
        pairs = {}
        for i in range(0, len(nbrs), 2):
            pairs[nbrs[i]] = nbrs[i + 1]
            pairs[nbrs[i + 1]] = nbrs[i]
        partner[v] = pairs

    remaining = {(min(int(a), int(b)), max(int(a), int(b))) for a, b in boundary}
    loops = []
    while remaining:
        u, v = min(remaining)
        cycle = [u]
        remaining.discard((u, v))
        prev, cur = u, v
        # Walk directed edges; the pairing at each vertex makes the step
        # deterministic.  The cycle closes when the next step would repeat
        # the starting directed edge (u -> v).  A pinch vertex may be
        # visited twice within one cycle, giving two occurrences.
        while not (cur == u and partner[cur][prev] == v):
            cycle.append(cur)
            nxt = partner[cur][prev]
            remaining.discard((min(cur, nxt), max(cur, nxt)))
            prev, cur = cur, nxt
        loops.append(BoundaryLoop(np.array(cycle, dtype=np.int64)))
    return loops


# -- file I/O -----------------------------------------------------------------

DEGENERATE_AREA_EPS = 1e-12


def load_obj(path) -> Mesh:
    """Load a triangles-only Wavefront OBJ (1-based indices).

    Face records may carry ``v/vt/vn`` slash syntax; only the vertex index
    is used.  Quad or larger faces, zero/negative indices, and out-of-range
    indices raise :class:`MeshParseError` naming the line.
    """
    verts = []
    faces = []
    face_lines = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise MeshParseError("vertex record needs 3 coordinates", lineno)
                try:
                    verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except ValueError as exc:
                    raise MeshParseError(f"bad vertex coordinate: {exc}", lineno)
            elif tag == "f":
                idx = parts[1:]
                if len(idx) != 3:
                    raise MeshParseError(
                        f"face with {len(idx)} vertices; only triangles are supported",
                        lineno,
                    )
                face = []
                for token in idx:
                    head = token.split("/")[0]
                    try:
                        k = int(head)
                    except ValueError:
                        raise MeshParseError(f"bad face index {head!r}", lineno)
                    if k < 1:
                        raise MeshParseError(
                            f"face index {k} is not positive (OBJ indices are 1-based)",
                            lineno,
                        )
                    face.append(k - 1)
                faces.append(face)
                face_lines.append(lineno)
            # vn / vt / o / g / s / usemtl / mtllib records are ignored
    if not faces:
        raise MeshParseError("no faces in file", None)
    faces = np.array(faces, dtype=np.int64)
    over = faces >= len(verts)
    if over.any():
        bad = int(np.argmax(over.any(axis=1)))
        raise MeshParseError(
            f"face index {int(faces[bad].max()) + 1} exceeds vertex count {len(verts)}",
            face_lines[bad],
        )
    return Mesh(np.array(verts, dtype=np.float64), faces)


def save_obj(mesh: Mesh, path, drop_degenerate: bool = True):
    """Write a triangles-only OBJ.

    Faces with area below ``DEGENERATE_AREA_EPS`` (possible after boundary
    refinement) are dropped at export; the in-memory mesh is never modified.
    """
    faces = mesh.faces
    if drop_degenerate:
        keep = mesh.face_areas >= DEGENERATE_AREA_EPS
        if not keep.all():
            logger.warning("dropping %d degenerate faces at export", int((~keep).sum()))
            faces = faces[keep]
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.17g} {y:.17g} {z:.17g}\n")
        for a, b, c in faces:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")


def save_ply(cloud: PointCloud, path):
    """Write an oriented point cloud as ascii PLY (x y z nx ny nz).

    This is the hand-off format for external Poisson surface reconstruction,
    so normals are required.
    """
    if cloud.normals is None:
        raise ValueError("PLY export requires normals")
    n = len(cloud)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {n}\n")
        for prop in ("x", "y", "z", "nx", "ny", "nz"):
            fh.write(f"property double {prop}\n")
        fh.write("end_header\n")
        for p, m in zip(cloud.points, cloud.normals):
            fh.write(
                f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g} {m[0]:.17g} {m[1]:.17g} {m[2]:.17g}\n"
            )
