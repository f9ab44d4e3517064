"""Synthetic shapes spanning genus 0 through genus k, plus dataset files.

Four families: ellipsoids are the genus-0 control; tori, boxes with a
through-hole, and plates with several holes force the pipeline to open the
template's topology.  Every generated mesh is closed, manifold, outward
oriented, and normalized so the farthest vertex from the centroid sits at
distance 1 (making pruning thresholds comparable across shapes).
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .mesh import (
    Mesh,
    PointCloud,
    euler_characteristic,
    load_obj,
    make_icosphere,
    sample_surface,
    save_obj,
)

logger = logging.getLogger(__name__)

FAMILIES = ("ellipsoid", "torus", "box_with_hole", "plate_with_holes")

GT_CLOUD_POINTS = 10000
ENCODER_CLOUD_POINTS = 2500

CLOUD_MAGIC = b"TMCLOUD1"

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


class DataError(ValueError):
    """Invalid shape parameters or a broken dataset directory."""


@dataclass
class ShapeSpec:
    """Family name, family-specific parameters, and the generation seed."""

    family: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DataError(f"unknown family {self.family!r}, expected one of {FAMILIES}")

    @property
    def genus(self) -> int:
        if self.family == "ellipsoid":
            return 0
        if self.family in ("torus", "box_with_hole"):
            return 1
        return int(self.params.get("holes", 1))


def _normalize(mesh: Mesh) -> Mesh:
    centered = mesh.vertices - mesh.vertices.mean(axis=0)
    radius = np.linalg.norm(centered, axis=1).max()
    return mesh.with_vertices(centered / radius)


def _oriented(mesh: Mesh) -> Mesh:
    if mesh.signed_volume() < 0:
        return Mesh(mesh.vertices, mesh.faces[:, ::-1])
    return mesh


def _ellipsoid(params: dict, resolution: int) -> Mesh:
    radii = np.asarray(params["radii"], dtype=np.float64)
    if radii.shape != (3,) or (radii <= 0).any():
        raise DataError(f"ellipsoid radii must be 3 positive values, got {radii}")
    # one subdivision step per ~3 resolution units keeps vertex counts in
    # the same range as the grid-based families
    level = min(4, max(1, (resolution + 1) // 3))
    sphere = make_icosphere(level)
    return sphere.with_vertices(sphere.vertices * radii)


def _torus(params: dict, resolution: int) -> Mesh:
    major = float(params["major"])
    minor = float(params["minor"])
    if not 0 < minor < major:
        raise DataError(f"torus needs 0 < minor < major, got {minor}, {major}")
    n = 4 * resolution
    m = 3 * resolution
    theta = 2 * np.pi * np.arange(n) / n
    phi = 2 * np.pi * np.arange(m) / m
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    r = major + minor * np.cos(pp)
    verts = np.stack(
        [r * np.cos(tt), r * np.sin(tt), minor * np.sin(pp)], axis=2
    ).reshape(-1, 3)
    faces = []
    for i in range(n):
        for j in range(m):
            v00 = i * m + j
            v01 = i * m + (j + 1) % m
            v10 = ((i + 1) % n) * m + j
            v11 = ((i + 1) % n) * m + (j + 1) % m
            faces.append((v00, v10, v11))
            faces.append((v00, v11, v01))
    return Mesh(verts, np.array(faces, dtype=np.int64))


def _extruded_plate(keep: np.ndarray, thickness: float) -> Mesh:
    """Solid from a boolean cell grid extruded along z.

    ``keep[j, i]`` marks a filled unit cell.  Vertices exist only where
    referenced.  Walls are emitted wherever a filled cell meets an empty
    cell or the outside, so any hole in the grid becomes a tunnel.
    """
    ny, nx = keep.shape
    if not keep.any():
        raise DataError("extrusion grid has no filled cells")
    index = {}
    verts = []

    def vid(i, j, top):
        key = (i, j, top)
        if key not in index:
            index[key] = len(verts)
            verts.append((float(i), float(j), thickness if top else 0.0))
        return index[key]

    faces = []
    for j in range(ny):
        for i in range(nx):
            if not keep[j, i]:
                continue
            # top (+z) and bottom (-z), both wound outward
            t00, t10 = vid(i, j, True), vid(i + 1, j, True)
            t11, t01 = vid(i + 1, j + 1, True), vid(i, j + 1, True)
            faces += [(t00, t10, t11), (t00, t11, t01)]
            b00, b10 = vid(i, j, False), vid(i + 1, j, False)
            b11, b01 = vid(i + 1, j + 1, False), vid(i, j + 1, False)
            faces += [(b00, b11, b10), (b00, b01, b11)]

    def filled(i, j):
        return 0 <= i < nx and 0 <= j < ny and keep[j, i]

    # walls along every filled/empty cell edge, wound to face the empty side
    for j in range(ny):
        for i in range(nx):
            if not keep[j, i]:
                continue
            if not filled(i, j - 1):  # south wall
                a0, a1 = vid(i, j, False), vid(i + 1, j, False)
                a2, a3 = vid(i + 1, j, True), vid(i, j, True)
                faces += [(a0, a1, a2), (a0, a2, a3)]
            if not filled(i, j + 1):  # north wall
                a0, a1 = vid(i + 1, j + 1, False), vid(i, j + 1, False)
                a2, a3 = vid(i, j + 1, True), vid(i + 1, j + 1, True)
                faces += [(a0, a1, a2), (a0, a2, a3)]
            if not filled(i - 1, j):  # west wall
                a0, a1 = vid(i, j + 1, False), vid(i, j, False)
                a2, a3 = vid(i, j, True), vid(i, j + 1, True)
                faces += [(a0, a1, a2), (a0, a2, a3)]
            if not filled(i + 1, j):  # east wall
                a0, a1 = vid(i + 1, j, False), vid(i + 1, j + 1, False)
                a2, a3 = vid(i + 1, j + 1, True), vid(i + 1, j, True)
                faces += [(a0, a1, a2), (a0, a2, a3)]
    return Mesh(np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64))


def _box_with_hole(params: dict, resolution: int) -> Mesh:
    n = max(4, resolution)
    hole = int(params.get("hole_cells", max(1, n // 3)))
    if hole > n - 2:
        raise DataError(f"hole of {hole} cells needs a margin inside {n} cells")
    keep = np.ones((n, n), dtype=bool)
    lo = (n - hole) // 2
    keep[lo : lo + hole, lo : lo + hole] = False
    return _extruded_plate(keep, thickness=float(params.get("thickness", n * 0.6)))


def _plate_with_holes(params: dict, resolution: int) -> Mesh:
    holes = int(params.get("holes", 2))
    if holes < 1:
        raise DataError("plate needs at least one hole")
    # each hole spans a 2x2 cell block on a compact grid so it stays wide
    # after unit normalization (narrow holes leave webbing errors inside
    # deformation fit noise); one-cell struts and margins keep hole walls
    # from sharing edges (which would be non-manifold)
    nx = 3 * holes + 1
    ny = max(5, resolution // 2 + 1)
    keep = np.ones((ny, nx), dtype=bool)
    mid = ny // 2
    for h in range(holes):
        keep[mid - 1 : mid + 1, 3 * h + 1 : 3 * h + 3] = False
    return _extruded_plate(keep, thickness=float(params.get("thickness", 1.2)))


_GENERATORS = {
    "ellipsoid": _ellipsoid,
    "torus": _torus,
    "box_with_hole": _box_with_hole,
    "plate_with_holes": _plate_with_holes,
}


def generate_shape(spec: ShapeSpec, resolution: int = 8) -> Mesh:
    """Closed manifold mesh for a spec, normalized and outward oriented."""
    if resolution < 1:
        raise DataError("resolution must be >= 1")
    mesh = _GENERATORS[spec.family](spec.params, resolution)
    mesh = _normalize(_oriented(mesh))
    expected_chi = 2 - 2 * spec.genus
    chi = euler_characteristic(mesh)
    if chi != expected_chi or not mesh.is_closed():
        raise DataError(
            f"{spec.family} generator produced chi={chi} (expected {expected_chi}), "
            f"closed={mesh.is_closed()}"
        )
    return mesh


def random_spec(family: str, seed: int) -> ShapeSpec:
    """Family parameters drawn from ranges that keep the generators valid."""
    rng = np.random.default_rng([seed, FAMILIES.index(family)])
    if family == "ellipsoid":
        params = {"radii": rng.uniform(0.4, 1.0, size=3).tolist()}
    elif family == "torus":
        major = float(rng.uniform(0.6, 0.9))
        params = {"major": major, "minor": float(rng.uniform(0.2, 0.45) * major)}
    elif family == "box_with_hole":
        # a template membrane over a hole can dimple inward until it hugs
        # the tunnel walls, hiding all but ~hole-radius of error at the
        # center; holes below ~3 cells normalize too narrow for that peak
        # to separate from deformation fit noise
        params = {
            "hole_cells": int(rng.integers(3, 5)),
            "thickness": float(rng.uniform(2.0, 4.0)),
        }
    else:
        params = {"holes": int(rng.integers(2, 4)), "thickness": float(rng.uniform(1.0, 2.0))}
    return ShapeSpec(family=family, params=params, seed=seed)


# -- datasets ---------------------------------------------------------------------


@dataclass
class DatasetItem:
    """One shape with its ground-truth and encoder clouds."""

    shape_id: str
    spec: ShapeSpec
    mesh: Mesh
    gt_cloud: PointCloud
    encoder_cloud: PointCloud
    split: str


DEFAULT_MIX = {family: 0.25 for family in FAMILIES}


def make_dataset(
    count: int,
    seed: int,
    family_mix: Optional[dict] = None,
    resolution: int = 8,
) -> list:
    """Deterministic list of DatasetItems with a recorded 70/10/20 split.

    The ground-truth cloud has 10,000 area-weighted surface samples with
    face normals; the encoder cloud is a 2,500-point subset of it.
    """
    if count < 1:
        raise DataError("count must be >= 1")
    mix = dict(DEFAULT_MIX if family_mix is None else family_mix)
    bad = set(mix) - set(FAMILIES)
    if bad:
        raise DataError(f"unknown families in mix: {sorted(bad)}")
    total = sum(mix.values())
    if total <= 0:
        raise DataError("family mix weights must sum to a positive value")
    names = sorted(mix)
    probs = np.array([mix[n] / total for n in names])

    rng = np.random.default_rng([seed, 0])
    families = [names[k] for k in rng.choice(len(names), size=count, p=probs)]
    splits = _split_labels(count, seed)

    items = []
    for i, family in enumerate(families):
        spec = random_spec(family, seed=int(np.random.default_rng([seed, 1, i]).integers(2**31)))
        mesh = generate_shape(spec, resolution=resolution)
        gt = sample_surface(mesh, GT_CLOUD_POINTS, seed=int(np.random.default_rng([seed, 2, i]).integers(2**31)))
        pick = np.random.default_rng([seed, 3, i]).choice(
            GT_CLOUD_POINTS, size=ENCODER_CLOUD_POINTS, replace=False
        )
        encoder_cloud = PointCloud(points=gt.points[pick], normals=gt.normals[pick])
        items.append(
            DatasetItem(
                shape_id=f"shape_{i:04d}",
                spec=spec,
                mesh=mesh,
                gt_cloud=gt,
                encoder_cloud=encoder_cloud,
                split=splits[i],
            )
        )
    return items


def _split_labels(count: int, seed: int) -> list:
    order = np.random.default_rng([seed, 4]).permutation(count)
    n_train = int(np.floor(0.7 * count))
    n_val = int(np.floor(0.1 * count))
    labels = [""] * count
    for rank, idx in enumerate(order):
        if rank < n_train:
            labels[idx] = "train"
        elif rank < n_train + n_val:
            labels[idx] = "val"
        else:
            labels[idx] = "test"
    return labels


# -- persistence ---------------------------------------------------------------------


def save_cloud(points: np.ndarray, path) -> None:
    """Binary cloud: 8-byte magic, int64 LE count, count little-endian double triples."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise DataError(f"cloud must be (n, 3), got {points.shape}")
    with open(path, "wb") as fh:
        fh.write(CLOUD_MAGIC)
        fh.write(struct.pack("<q", len(points)))
        fh.write(points.astype("<f8", copy=False).tobytes(order="C"))


def load_cloud(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CLOUD_MAGIC:
        raise DataError(f"bad cloud magic {blob[:8]!r}")
    (count,) = struct.unpack("<q", blob[8:16])
    expected = 16 + count * 24
    if count < 0 or len(blob) != expected:
        raise DataError(f"cloud length {len(blob)} does not match count {count}")
    return np.frombuffer(blob[16:], dtype="<f8").reshape(count, 3).astype(np.float64)


def save_dataset(items: list, out_dir) -> None:
    """Write OBJ meshes, binary clouds, and the JSON manifest."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for item in items:
        save_obj(item.mesh, out / f"{item.shape_id}.obj")
        save_cloud(item.gt_cloud.points, out / f"{item.shape_id}.gt.bin")
        save_cloud(item.gt_cloud.normals, out / f"{item.shape_id}.gtn.bin")
        save_cloud(item.encoder_cloud.points, out / f"{item.shape_id}.enc.bin")
        entries.append(
            {
                "id": item.shape_id,
                "family": item.spec.family,
                "params": item.spec.params,
                "seed": item.spec.seed,
                "genus": item.spec.genus,
                "split": item.split,
                "mesh": f"{item.shape_id}.obj",
                "gt_points": f"{item.shape_id}.gt.bin",
                "gt_normals": f"{item.shape_id}.gtn.bin",
                "encoder_points": f"{item.shape_id}.enc.bin",
            }
        )
    manifest = {"version": MANIFEST_VERSION, "count": len(items), "entries": entries}
    with open(out / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(data_dir, split: Optional[str] = None) -> list:
    """Read a dataset directory, optionally filtered to one split."""
    from pathlib import Path

    root = Path(data_dir)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise DataError(f"no {MANIFEST_NAME} in {root}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("version") != MANIFEST_VERSION:
        raise DataError(f"manifest version {manifest.get('version')} unsupported")
    items = []
    for entry in manifest["entries"]:
        if split is not None and entry["split"] != split:
            continue
        mesh = load_obj(root / entry["mesh"])
        gt_points = load_cloud(root / entry["gt_points"])
        gt_normals = load_cloud(root / entry["gt_normals"])
        enc_points = load_cloud(root / entry["encoder_points"])
        items.append(
            DatasetItem(
                shape_id=entry["id"],
                spec=ShapeSpec(entry["family"], entry["params"], entry["seed"]),
                mesh=mesh,
                gt_cloud=PointCloud(points=gt_points, normals=gt_normals),
                encoder_cloud=PointCloud(points=enc_points),
                split=entry["split"],
            )
        )
    if not items:
        raise DataError(f"no entries for split {split!r} in {root}")
    return items
