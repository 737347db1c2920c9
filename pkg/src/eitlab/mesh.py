"""Structured disk meshes with boundary electrodes.

The mesh is a ring-structured triangulation of a disk, built so that the
node set and the connectivity are invariant under rotation by one electrode
pitch.  Ring ``i`` carries ``2 * n_electrodes * i`` nodes, so a rotation by
``2*pi/n_electrodes`` is an exact index shift on every ring.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractError, NumericalError

MESH_SCHEMA_VERSION = 1


@dataclass
class Mesh:
    """Triangulated disk with electrode boundary segments.

    Attributes
    ----------
    nodes : (n_nodes, 2) float64
        Node coordinates, units of domain radii.
    elements : (n_elements, 3) int64
        CCW triangles as node index triples.
    electrode_segments : list of (k, 2) int64 arrays
        For each electrode, the boundary edges (node pairs) it covers,
        listed CCW; electrodes themselves are ordered CCW starting at
        angle 0.
    element_areas : (n_elements,) float64
        Precomputed positive triangle areas.
    radius : float
        Disk radius.
    """

    nodes: np.ndarray
    elements: np.ndarray
    electrode_segments: list[np.ndarray]
    element_areas: np.ndarray
    radius: float = 1.0
    _centroids: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def n_electrodes(self) -> int:
        return len(self.electrode_segments)

    def element_centroids(self) -> np.ndarray:
        """(n_elements, 2) centroids; computed once and cached."""
        if self._centroids is None:
            self._centroids = self.nodes[self.elements].mean(axis=1)
        return self._centroids


def _signed_areas(nodes: np.ndarray, elements: np.ndarray) -> np.ndarray:
    p = nodes[elements]
    u = p[:, 1] - p[:, 0]
    v = p[:, 2] - p[:, 0]
    return 0.5 * (u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0])


def build_disk_mesh(
    radius: float = 1.0,
    refinement: int = 2,
    n_electrodes: int = 16,
    electrode_coverage: float = 0.5,
) -> Mesh:
    """Build an n-fold rotationally symmetric disk mesh with electrodes.

    Parameters
    ----------
    radius : float
        Disk radius, > 0.
    refinement : int
        Radial refinement level, >= 1; the mesh has ``2 * refinement``
        rings and ``32 * refinement**2 * (n_electrodes / 16)`` triangles.
    n_electrodes : int
        Number of equally spaced boundary electrodes.
    electrode_coverage : float
        Fraction of the boundary circumference covered by electrode metal,
        in (0, 1).  Electrode k is centered at angle ``2*pi*k/n_electrodes``.
    """
    if radius <= 0:
        raise ContractError(f"radius must be > 0, got {radius}")
    if refinement < 1:
        raise ContractError(f"refinement must be >= 1, got {refinement}")
    if not 0 < electrode_coverage < 1:
        raise ContractError(
            f"electrode_coverage must be in (0, 1), got {electrode_coverage}"
        )
    if n_electrodes < 2:
        raise ContractError(f"need at least 2 electrodes, got {n_electrodes}")

    n_rings = 2 * refinement
    per_ring = 2 * n_electrodes  # nodes on ring 1; ring i carries per_ring * i

    nodes = [np.zeros((1, 2))]
    ring_offset = [0] * (n_rings + 1)  # global index of first node on ring i
    offset = 1
    for i in range(1, n_rings + 1):
        ring_offset[i] = offset
        n_i = per_ring * i
        theta = 2.0 * np.pi * np.arange(n_i) / n_i
        r_i = radius * i / n_rings
        nodes.append(np.column_stack([r_i * np.cos(theta), r_i * np.sin(theta)]))
        offset += n_i
    node_arr = np.concatenate(nodes, axis=0)

    tris: list[tuple[int, int, int]] = []
    # central fan
    n1 = per_ring
    for j in range(n1):
        tris.append((0, ring_offset[1] + j, ring_offset[1] + (j + 1) % n1))
    # annulus strips: per-sector zip of the inner and outer node rows; the
    # advance rule is integer-exact so every sector gets the same pattern
    for i in range(1, n_rings):
        p = 2 * i  # inner nodes per sector
        q = 2 * (i + 1)  # outer nodes per sector
        n_in = per_ring * i
        n_out = per_ring * (i + 1)
        for k in range(n_electrodes):
            inner = [ring_offset[i] + (k * p + m) % n_in for m in range(p + 1)]
            outer = [ring_offset[i + 1] + (k * q + m) % n_out for m in range(q + 1)]
            a = b = 0
            while a < p or b < q:
                if b < q and (a == p or (b + 1) * p <= (a + 1) * q):
                    tris.append((outer[b], outer[b + 1], inner[a]))
                    b += 1
                else:
                    tris.append((inner[a], outer[b], inner[a + 1]))
                    a += 1
    elem_arr = np.asarray(tris, dtype=np.int64)

    areas = _signed_areas(node_arr, elem_arr)
    bad = np.where(areas <= 1e-14 * radius**2)[0]
    if bad.size:
        raise NumericalError(
            f"degenerate triangle produced at element {bad[0]}: "
            f"nodes {elem_arr[bad[0]].tolist()}, area {areas[bad[0]]:.3e}"
        )

    # electrode edge selection on the boundary ring
    n_b = per_ring * n_rings
    off_b = ring_offset[n_rings]
    edges_per_sector = n_b // n_electrodes
    n_e = 2 * max(1, round(electrode_coverage * edges_per_sector / 2))
    n_e = min(n_e, edges_per_sector - 2)
    segments = []
    for k in range(n_electrodes):
        center = k * edges_per_sector
        js = [(center - n_e // 2 + m) % n_b for m in range(n_e)]
        seg = np.asarray(
            [(off_b + j, off_b + (j + 1) % n_b) for j in js], dtype=np.int64
        )
        segments.append(seg)

    return Mesh(
        nodes=node_arr,
        elements=elem_arr,
        electrode_segments=segments,
        element_areas=areas,
        radius=float(radius),
    )


def boundary_edges(mesh: Mesh) -> np.ndarray:
    """Edges belonging to exactly one triangle, as sorted node pairs."""
    e = mesh.elements
    all_edges = np.concatenate([e[:, [0, 1]], e[:, [1, 2]], e[:, [2, 0]]])
    all_edges = np.sort(all_edges, axis=1)
    uniq, counts = np.unique(all_edges, axis=0, return_counts=True)
    return uniq[counts == 1]


def edge_count(mesh: Mesh) -> int:
    """Number of distinct edges in the triangulation."""
    e = mesh.elements
    all_edges = np.concatenate([e[:, [0, 1]], e[:, [1, 2]], e[:, [2, 0]]])
    return np.unique(np.sort(all_edges, axis=1), axis=0).shape[0]


def validate_mesh(mesh: Mesh) -> None:
    """Check the Mesh invariants; raise ContractError on violation."""
    areas = _signed_areas(mesh.nodes, mesh.elements)
    if not np.all(areas > 0):
        raise ContractError("mesh has non-positive element areas")
    if not np.allclose(areas, mesh.element_areas):
        raise ContractError("stored element_areas disagree with geometry")
    # Euler relation for a disk: V - E + F = 1
    v, f = mesh.n_nodes, mesh.n_elements
    if v - edge_count(mesh) + f != 1:
        raise ContractError("Euler relation V - E + F = 1 violated")
    # boundary forms a single closed loop
    be = boundary_edges(mesh)
    nxt: dict[int, int] = {}
    for a, b in be:
        nxt.setdefault(int(a), []).append(int(b))  # type: ignore[arg-type]
    deg: dict[int, int] = {}
    for a, b in be:
        deg[int(a)] = deg.get(int(a), 0) + 1
        deg[int(b)] = deg.get(int(b), 0) + 1
    if any(d != 2 for d in deg.values()):
        raise ContractError("boundary is not a single closed loop")
    # electrode segments: disjoint edge sets lying on the boundary
    seen: set[tuple[int, int]] = set()
    bset = {tuple(e) for e in be.tolist()}
    for k, seg in enumerate(mesh.electrode_segments):
        for a, b in np.sort(seg, axis=1).tolist():
            if (a, b) in seen:
                raise ContractError(f"electrode {k} shares an edge with another")
            if (a, b) not in bset:
                raise ContractError(f"electrode {k} edge ({a},{b}) not on boundary")
            seen.add((a, b))


def rotation_node_permutation(mesh: Mesh, steps: int = 1) -> np.ndarray:
    """Node permutation realizing rotation by ``steps`` electrode pitches.

    Returns ``perm`` with ``nodes[perm[j]] == rotate(nodes[j])``; raises if
    the mesh is not symmetric under that rotation.
    """
    ang = 2.0 * np.pi * steps / mesh.n_electrodes
    c, s = np.cos(ang), np.sin(ang)
    rot = mesh.nodes @ np.array([[c, s], [-s, c]])
    tree = cKDTree(mesh.nodes)
    dist, perm = tree.query(rot)
    if dist.max() > 1e-9 * mesh.radius:
        raise ContractError("mesh is not rotationally symmetric at this pitch")
    return perm


def rotation_element_permutation(mesh: Mesh, steps: int = 1) -> np.ndarray:
    """Element permutation induced by rotation by ``steps`` pitches."""
    ang = 2.0 * np.pi * steps / mesh.n_electrodes
    c, s = np.cos(ang), np.sin(ang)
    cent = mesh.element_centroids()
    rot = cent @ np.array([[c, s], [-s, c]])
    tree = cKDTree(cent)
    dist, perm = tree.query(rot)
    if dist.max() > 1e-9 * mesh.radius:
        raise ContractError("element set is not rotationally symmetric")
    return perm


def save_mesh(mesh: Mesh, out_dir: str | Path) -> None:
    """Write manifest.json + nodes.f64 + elements.u32 into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema": MESH_SCHEMA_VERSION,
        "radius": mesh.radius,
        "n_nodes": mesh.n_nodes,
        "n_elements": mesh.n_elements,
        "electrode_segments": [seg.tolist() for seg in mesh.electrode_segments],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    mesh.nodes.astype("<f8").tofile(out / "nodes.f64")
    mesh.elements.astype("<u4").tofile(out / "elements.u32")


def load_mesh(in_dir: str | Path) -> Mesh:
    """Inverse of :func:`save_mesh`."""
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    nodes = np.fromfile(src / "nodes.f64", dtype="<f8").reshape(-1, 2)
    elements = np.fromfile(src / "elements.u32", dtype="<u4").astype(np.int64)
    elements = elements.reshape(-1, 3)
    if nodes.shape[0] != manifest["n_nodes"] or elements.shape[0] != manifest["n_elements"]:
        raise ContractError("mesh files disagree with manifest counts")
    segs = [np.asarray(s, dtype=np.int64) for s in manifest["electrode_segments"]]
    mesh = Mesh(
        nodes=nodes,
        elements=elements,
        electrode_segments=segs,
        element_areas=_signed_areas(nodes, elements),
        radius=float(manifest["radius"]),
    )
    validate_mesh(mesh)
    return mesh
