"""Tetrahedral meshes: loading, surface extraction and rest-state precomputation."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

# Outward-oriented faces of a positively oriented tet (v0, v1, v2, v3).
TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class TetMesh:
    """Immutable tet mesh plus everything the per-element kernels need.

    ``grad_op`` is the 4x3 matrix B with F = sum_v x_v B_v^T, so that
    ``dFdx[3*j + i, 3*v + l] = delta_il * B[v, j]`` (column-major vec(F)).
    """

    vertices_rest: np.ndarray
    tets: np.ndarray
    surface_faces: np.ndarray
    surface_edges: np.ndarray
    surface_vertices: np.ndarray
    Dm_inv: np.ndarray
    rest_volume: np.ndarray
    grad_op: np.ndarray
    mass: np.ndarray
    density: np.ndarray
    vertex_object: np.ndarray = field(repr=False)
    tet_object: np.ndarray = field(repr=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices_rest)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    @property
    def n_objects(self) -> int:
        return int(self.vertex_object.max()) + 1 if self.n_vertices else 0

    @property
    def dFdx(self) -> np.ndarray:
        """Per-tet 9x12 map from stacked vertex positions to vec(F)."""
        n = self.n_tets
        out = np.zeros((n, 9, 12), dtype=self.grad_op.dtype)
        for v in range(4):
            for j in range(3):
                for i in range(3):
                    out[:, 3 * j + i, 3 * v + i] = self.grad_op[:, v, j]
        return out

    def average_surface_edge_length(self, x: np.ndarray | None = None) -> float:
        x = self.vertices_rest if x is None else x
        e = self.surface_edges
        if len(e) == 0:
            return 0.0
        return float(np.linalg.norm(x[e[:, 0]] - x[e[:, 1]], axis=1).mean())

    def astype(self, dtype) -> "TetMesh":
        """Copy with the floating-point rest data cast to dtype."""
        dtype = np.dtype(dtype)
        if dtype == self.grad_op.dtype:
            return self
        cast = {k: getattr(self, k).astype(dtype) for k in
                ("vertices_rest", "Dm_inv", "rest_volume", "grad_op", "mass", "density")}
        return replace(self, **cast)

    def object_surface_faces(self, obj: int) -> np.ndarray:
        return self.surface_faces[self.vertex_object[self.surface_faces[:, 0]] == obj]

    @classmethod
    def from_arrays(cls, vertices, tets, density=1000.0, vertex_object=None) -> "TetMesh":
        vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        tets = np.ascontiguousarray(tets, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise MeshError("vertices must be an (n, 3) array")
        if tets.ndim != 2 or tets.shape[1] != 4:
            raise MeshError("tets must be an (m, 4) array")
        n = len(vertices)
        if tets.size and (tets.min() < 0 or tets.max() >= n):
            raise MeshError("tet references a vertex index out of range")
        if vertex_object is None:
            vertex_object = np.zeros(n, dtype=np.int64)
        vertex_object = np.asarray(vertex_object, dtype=np.int64)
        tet_object = vertex_object[tets[:, 0]] if len(tets) else np.zeros(0, np.int64)

        density = np.broadcast_to(np.asarray(density, dtype=np.float64), (len(tets),)).copy()

        Dm = rest_shape_matrices(vertices, tets)
        det = np.linalg.det(Dm)
        bad = np.flatnonzero(~(det > 0))
        if len(bad):
            raise MeshError(f"tet {bad[0]} has non-positive rest volume ({det[bad[0]] / 6:.3e})")
        Dm_inv = np.linalg.inv(Dm)
        rest_volume = det / 6.0

        grad_op = np.empty((len(tets), 4, 3))
        grad_op[:, 1:, :] = Dm_inv
        grad_op[:, 0, :] = -Dm_inv.sum(axis=1)

        mass = np.bincount(
            tets.ravel(), weights=np.repeat(density * rest_volume / 4.0, 4), minlength=n
        )
        if np.any(mass <= 0):
            raise MeshError(f"vertex {int(np.argmin(mass))} is not referenced by any tet")

        faces, edges, verts = extract_surface(tets)
        return cls(
            vertices_rest=vertices,
            tets=tets,
            surface_faces=faces,
            surface_edges=edges,
            surface_vertices=verts,
            Dm_inv=Dm_inv,
            rest_volume=rest_volume,
            grad_op=grad_op,
            mass=mass,
            density=density,
            vertex_object=vertex_object,
            tet_object=tet_object,
        )


def rest_shape_matrices(x: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Columns are the edge vectors x1-x0, x2-x0, x3-x0 of each tet."""
    x0 = x[tets[:, 0]]
    return np.stack([x[tets[:, 1]] - x0, x[tets[:, 2]] - x0, x[tets[:, 3]] - x0], axis=2)


def extract_surface(tets: np.ndarray):
    """Boundary faces (outward), deduplicated boundary edges and boundary vertices."""
    if len(tets) == 0:
        z = np.zeros((0, 3), np.int64)
        return z, np.zeros((0, 2), np.int64), np.zeros(0, np.int64)
    faces = tets[:, TET_FACES].reshape(-1, 3)
    keys = np.sort(faces, axis=1)
    _, first, inverse, counts = np.unique(
        keys, axis=0, return_index=True, return_inverse=True, return_counts=True
    )
    inverse = inverse.ravel()
    if np.any(counts > 2):
        warnings.warn(f"{int(np.sum(counts > 2))} faces shared by more than two tets", stacklevel=3)
    surface = faces[np.sort(first[counts == 1])]

    edges = np.concatenate([surface[:, [0, 1]], surface[:, [1, 2]], surface[:, [2, 0]]])
    edges, ecount = np.unique(np.sort(edges, axis=1), axis=0, return_counts=True)
    if np.any(ecount != 2):
        warnings.warn(
            f"non-manifold surface: {int(np.sum(ecount != 2))} edges not shared by exactly two faces",
            stacklevel=3,
        )
    verts = np.unique(surface)
    return surface.astype(np.int64), edges.astype(np.int64), verts.astype(np.int64)


def deformation_gradients(mesh: TetMesh, x: np.ndarray, tets=None) -> np.ndarray:
    """F = Ds Dm^-1 for all tets (or the given subset)."""
    if tets is None:
        tets = slice(None)
    T = mesh.tets[tets]
    B = mesh.grad_op[tets]
    return np.einsum("nvi,nvj->nij", x[T], B)


def compute_deformation_gradient(mesh: TetMesh, x: np.ndarray, tet: int) -> np.ndarray:
    return deformation_gradients(mesh, x, np.array([tet]))[0]


def merge_meshes(meshes) -> TetMesh:
    """Concatenate meshes into one; each input becomes its own object id."""
    verts, tets, dens, obj = [], [], [], []
    offset = 0
    for i, m in enumerate(meshes):
        verts.append(m.vertices_rest)
        tets.append(m.tets + offset)
        dens.append(m.density)
        obj.append(np.full(m.n_vertices, i, dtype=np.int64))
        offset += m.n_vertices
    return TetMesh.from_arrays(
        np.concatenate(verts), np.concatenate(tets), np.concatenate(dens), np.concatenate(obj)
    )


def transformed(mesh: TetMesh, vertices: np.ndarray) -> TetMesh:
    return TetMesh.from_arrays(vertices, mesh.tets, mesh.density, mesh.vertex_object)


# ---------------------------------------------------------------------------
# file formats


def _data_lines(path: Path):
    for raw in path.read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            yield line


def _read_tetgen(path: Path):
    base = path.with_suffix("")
    node, ele = base.with_suffix(".node"), base.with_suffix(".ele")
    try:
        lines = list(_data_lines(node))
        nv, dim = (int(t) for t in lines[0].split()[:2])
        if dim != 3:
            raise MeshError(f"{node}: expected 3D nodes, got dimension {dim}")
        rows = [ln.split() for ln in lines[1 : 1 + nv]]
        ids = np.array([int(r[0]) for r in rows])
        vertices = np.array([[float(v) for v in r[1:4]] for r in rows])

        lines = list(_data_lines(ele))
        nt, npt = (int(t) for t in lines[0].split()[:2])
        if npt != 4:
            raise MeshError(f"{ele}: only 4-node tets are supported, got {npt}")
        tets = np.array([[int(v) for v in ln.split()[1:5]] for ln in lines[1 : 1 + nt]])
    except (IndexError, ValueError) as exc:
        if isinstance(exc, MeshError):
            raise
        raise MeshError(f"cannot parse TetGen mesh {base}: {exc}") from exc
    if len(vertices) != nv or len(tets) != nt:
        raise MeshError(f"{base}: truncated file")
    # TetGen files may be 0- or 1-based; follow the node numbering.
    lookup = {int(k): i for i, k in enumerate(ids)}
    try:
        tets = np.vectorize(lookup.__getitem__)(tets) if nt else tets.reshape(0, 4)
    except KeyError as exc:
        raise MeshError(f"{ele}: unknown node id {exc}") from exc
    return vertices, tets


def _read_tmesh(path: Path):
    lines = list(_data_lines(path))
    sections: dict[str, list[list[float]]] = {}
    i = 0
    try:
        while i < len(lines):
            head = lines[i].split()
            name, count = head[0].lower(), int(head[1])
            sections[name] = [[float(t) for t in ln.split()] for ln in lines[i + 1 : i + 1 + count]]
            if len(sections[name]) != count:
                raise MeshError(f"{path}: section '{name}' truncated")
            i += count + 1
        vertices = np.array(sections["vertices"], dtype=np.float64).reshape(-1, 3)
        tets = np.array(sections["tets"], dtype=np.int64).reshape(-1, 4)
    except (KeyError, IndexError, ValueError) as exc:
        if isinstance(exc, MeshError):
            raise
        raise MeshError(f"cannot parse mesh {path}: {exc}") from exc
    return vertices, tets


FORMATS = {".node": "tetgen", ".ele": "tetgen", ".tmesh": "tmesh"}


def load_mesh(path, format: str | None = None, density: float = 1000.0) -> TetMesh:
    """Load a TetGen ``.node``/``.ele`` pair or a ``.tmesh`` text file."""
    path = Path(path)
    fmt = format or FORMATS.get(path.suffix.lower())
    if fmt == "tetgen":
        vertices, tets = _read_tetgen(path)
    elif fmt == "tmesh":
        vertices, tets = _read_tmesh(path)
    else:
        raise MeshError(f"unknown mesh format for {path} (use .node/.ele or .tmesh)")
    return TetMesh.from_arrays(vertices, tets, density)


def write_tmesh(path, vertices: np.ndarray, tets: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.write(f"vertices {len(vertices)}\n")
        for v in vertices:
            fh.write(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        fh.write(f"tets {len(tets)}\n")
        for t in tets:
            fh.write(f"{t[0]} {t[1]} {t[2]} {t[3]}\n")


def write_tetgen(base, vertices: np.ndarray, tets: np.ndarray) -> None:
    base = Path(base)
    with open(base.with_suffix(".node"), "w") as fh:
        fh.write(f"{len(vertices)} 3 0 0\n")
        for i, v in enumerate(vertices):
            fh.write(f"{i} {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
    with open(base.with_suffix(".ele"), "w") as fh:
        fh.write(f"{len(tets)} 4 0\n")
        for i, t in enumerate(tets):
            fh.write(f"{i} {t[0]} {t[1]} {t[2]} {t[3]}\n")


def box_mesh(size=(1.0, 1.0, 1.0), cells=(1, 1, 1), origin=(0.0, 0.0, 0.0)):
    """Lattice of boxes, each split into 5 tets with alternating parity.

    Returns ``(vertices, tets)``; used to build test inputs and demo scenes.
    """
    nx, ny, nz = cells
    gx = np.linspace(0.0, size[0], nx + 1) + origin[0]
    gy = np.linspace(0.0, size[1], ny + 1) + origin[1]
    gz = np.linspace(0.0, size[2], nz + 1) + origin[2]
    X, Y, Z = np.meshgrid(gx, gy, gz, indexing="ij")
    vertices = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)

    def vid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    even = [(0, 0, 0), (1, 1, 0), (1, 0, 1), (0, 1, 1)]
    odd = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 1)]
    tets = []
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                center, corners = (even, odd) if (i + j + k) % 2 == 0 else (odd, even)
                cid = [vid(i + a, j + b, k + c) for a, b, c in center]
                tets.append(cid)
                for a, b, c in corners:
                    nbrs = [
                        vid(i + a2, j + b2, k + c2)
                        for a2, b2, c2 in center
                        if abs(a - a2) + abs(b - b2) + abs(c - c2) == 1
                    ]
                    tets.append([vid(i + a, j + b, k + c)] + nbrs)
    tets = np.array(tets, dtype=np.int64)
    Dm = rest_shape_matrices(vertices, tets)
    flip = np.linalg.det(Dm) < 0
    tets[flip, 2], tets[flip, 3] = tets[flip, 3].copy(), tets[flip, 2].copy()
    return vertices, tets
