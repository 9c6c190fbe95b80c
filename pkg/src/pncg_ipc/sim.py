"""Implicit Euler time stepping, kinematic scripts and scene files."""
from __future__ import annotations

import dataclasses
import enum
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.spatial.transform import Rotation

from .contact import HalfSpace, build_exclusion_table, ground_contact_constraints
from .elasticity import MaterialModel, Model
from .mesh import TetMesh, box_mesh, load_mesh, merge_meshes
from .solver import (
    ContactModel, ConvergenceRecord, IncrementalPotential, MaterialGroup, SolverConfig,
    pncg_solve,
)

log = logging.getLogger(__name__)

SCHEMA = "pncg-scene/1"


class SceneError(ValueError):
    pass


class BC(enum.IntEnum):
    FREE = 0
    FIXED = 1
    SCRIPTED = 2


# ---------------------------------------------------------------------------
# scripts


@dataclass
class RigidScript:
    """Vertices follow a rigid motion of their initial placement over [start, stop].

    The motion is a rotation at `rate_deg` degrees per second about `axis`
    through `center`, followed by a translation at `velocity`.  After `stop`
    the vertices are held at the final pose, or set free if `release`.
    """

    vertices: np.ndarray
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    rate_deg: float = 0.0
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    start: float = 0.0
    stop: float = np.inf
    release: bool = False

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.int64)
        if len(self.vertices) == 0:
            raise SceneError("script selects no vertices")
        self.center = np.asarray(self.center, dtype=np.float64)
        axis = np.asarray(self.axis, dtype=np.float64)
        self.axis = axis / np.linalg.norm(axis)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)

    def active(self, t: float) -> bool:
        return not (self.release and t > self.stop)

    def elapsed(self, t: float) -> float:
        return float(np.clip(t - self.start, 0.0, self.stop - self.start))

    def rotation(self, t: float) -> np.ndarray:
        angle = np.deg2rad(self.rate_deg) * self.elapsed(t)
        return Rotation.from_rotvec(angle * self.axis).as_matrix()

    def positions(self, x_init: np.ndarray, t: float) -> np.ndarray:
        X = x_init[self.vertices]
        return (X - self.center) @ self.rotation(t).T + self.center + self.velocity * self.elapsed(t)


@dataclass
class FixedScript(RigidScript):
    """Vertices pinned at their initial placement."""


@dataclass
class PlaneScript:
    """A half-space wall whose boundary point moves at `velocity` over [start, stop].

    The wall is removed at `release` (never, if infinite).
    """

    point: np.ndarray
    normal: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    start: float = 0.0
    stop: float = np.inf
    release: float = np.inf

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=np.float64)
        n = np.asarray(self.normal, dtype=np.float64)
        self.normal = n / np.linalg.norm(n)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)

    def active(self, t: float) -> bool:
        return t < self.release

    def point_at(self, t: float) -> np.ndarray:
        return self.point + self.velocity * float(np.clip(t - self.start, 0.0, self.stop - self.start))


# ---------------------------------------------------------------------------
# scene description


@dataclass
class ObjectSpec:
    source: object  # Path of a mesh file, or (vertices, tets)
    material: MaterialModel
    density: float = 1000.0
    translate: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotate_deg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def load(self) -> TetMesh:
        if isinstance(self.source, (str, Path)):
            m = load_mesh(self.source)
            v, t = m.vertices_rest, m.tets
        else:
            v, t = self.source
        R = Rotation.from_euler("xyz", self.rotate_deg, degrees=True).as_matrix()
        v = self.scale * np.asarray(v, dtype=np.float64) @ R.T + self.translate
        return TetMesh.from_arrays(v, t, self.density)


@dataclass
class OutputConfig:
    frames: int = 100
    directory: str = "out"
    formats: tuple = ("obj", "csv", "json")


@dataclass
class Scene:
    name: str
    objects: list
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, -9.8, 0.0]))
    ground: list = field(default_factory=list)
    scripts: list = field(default_factory=list)
    solver: SolverConfig = field(default_factory=SolverConfig)
    d_hat_fraction: float = 0.5
    output: OutputConfig = field(default_factory=OutputConfig)
    precision: str = "double"


def _vec(v, name, n=3):
    a = np.asarray(v, dtype=np.float64)
    if a.shape != (n,):
        raise SceneError(f"{name} must be a list of {n} numbers")
    return a


def _material(d) -> MaterialModel:
    d = dict(d)
    try:
        model = Model.parse(d.pop("model", "nh"))
        if "youngs" in d:
            mat = MaterialModel.from_young(model, float(d.pop("youngs")), float(d.pop("poisson", 0.3)))
        else:
            mat = MaterialModel(model, float(d.pop("mu")), float(d.pop("lam")))
    except (KeyError, ValueError) as e:
        raise SceneError(f"bad material: {e}") from e
    if d:
        raise SceneError(f"unknown material keys {sorted(d)}")
    return mat


def _object(d, base: Path) -> ObjectSpec:
    d = dict(d)
    if "mesh" in d:
        path = base / d.pop("mesh")
        if not path.exists():
            raise SceneError(f"mesh file {path} not found")
        source = path
    elif "box" in d:
        b = d.pop("box")
        source = box_mesh(tuple(b["size"]), tuple(b["cells"]), tuple(b.get("origin", (0, 0, 0))))
    else:
        raise SceneError("object needs 'mesh' or 'box'")
    spec = ObjectSpec(source, _material(d.pop("material", {})), float(d.pop("density", 1000.0)))
    tr = d.pop("transform", {}) or {}
    spec.translate = _vec(tr.get("translate", (0, 0, 0)), "translate")
    spec.rotate_deg = _vec(tr.get("rotate_deg", (0, 0, 0)), "rotate_deg")
    spec.scale = float(tr.get("scale", 1.0))
    spec.velocity = _vec(d.pop("velocity", (0, 0, 0)), "velocity")
    if d:
        raise SceneError(f"unknown object keys {sorted(d)}")
    return spec


_SOLVER_KEYS = {f.name for f in dataclasses.fields(SolverConfig)}


def scene_from_dict(data: dict, base: Path = Path(".")) -> Scene:
    data = dict(data)
    if data.pop("schema", None) != SCHEMA:
        raise SceneError(f"scene must start with 'schema: {SCHEMA}'")
    objects = [_object(o, base) for o in data.pop("objects", [])]
    if not objects:
        raise SceneError("scene has no objects")
    scene = Scene(name=str(data.pop("name", "scene")), objects=objects)
    scene.gravity = _vec(data.pop("gravity", (0, -9.8, 0)), "gravity")
    for g in data.pop("ground", []) or []:
        scene.ground.append(HalfSpace(_vec(g["point"], "ground point"), _vec(g["normal"], "ground normal")))
    scene.scripts = [dict(s) for s in data.pop("scripts", []) or []]

    solver = dict(data.pop("solver", {}) or {})
    scene.d_hat_fraction = float(solver.pop("d_hat_fraction", 0.5))
    scene.precision = str(solver.pop("precision", "double"))
    unknown = set(solver) - _SOLVER_KEYS
    if unknown:
        raise SceneError(f"unknown solver keys {sorted(unknown)}")
    try:
        scene.solver = SolverConfig(**solver)
    except (TypeError, ValueError) as e:
        raise SceneError(f"bad solver config: {e}") from e

    out = dict(data.pop("output", {}) or {})
    scene.output = OutputConfig(int(out.pop("frames", 100)), str(out.pop("directory", "out")),
                                tuple(out.pop("formats", ("obj", "csv", "json"))))
    if out or data:
        raise SceneError(f"unknown scene keys {sorted(set(out) | set(data))}")
    return scene


def load_scene(path) -> Scene:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as e:
        raise SceneError(f"cannot read scene {path}: {e}") from e
    if not isinstance(data, dict):
        raise SceneError(f"{path} is not a scene mapping")
    return scene_from_dict(data, path.parent)


def _select(sel: dict, mesh: TetMesh, x: np.ndarray) -> np.ndarray:
    mask = np.ones(mesh.n_vertices, bool)
    if "object" in sel:
        mask &= mesh.vertex_object == int(sel["object"])
    if "box" in sel:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in sel["box"])
        mask &= np.all((x >= lo) & (x <= hi), axis=1)
    if "vertices" in sel:
        keep = np.zeros_like(mask)
        keep[np.asarray(sel["vertices"], dtype=np.int64)] = True
        mask &= keep
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        raise SceneError(f"selection {sel} matches no vertices")
    return idx


def build_script(d: dict, mesh: TetMesh, x: np.ndarray):
    d = dict(d)
    kind = d.pop("type", "rigid")
    try:
        if kind == "plane":
            return PlaneScript(_vec(d["point"], "point"), _vec(d["normal"], "normal"),
                               _vec(d.get("velocity", (0, 0, 0)), "velocity"),
                               float(d.get("start", 0.0)), float(d.get("stop", np.inf)),
                               float(d.get("release", np.inf)))
        verts = _select(d.get("select", {}), mesh, x)
        if kind == "fixed":
            return FixedScript(verts)
        if kind == "rigid":
            rot = d.get("rotate", {}) or {}
            center = rot.get("center")
            center = x[verts].mean(axis=0) if center is None else _vec(center, "center")
            return RigidScript(verts, center, _vec(rot.get("axis", (0, 0, 1)), "axis"),
                               float(rot.get("rate_deg", 0.0)),
                               _vec(d.get("velocity", (0, 0, 0)), "velocity"),
                               float(d.get("start", 0.0)), float(d.get("stop", np.inf)),
                               bool(d.get("release", False)))
    except KeyError as e:
        raise SceneError(f"script missing key {e}") from e
    raise SceneError(f"unknown script type {kind!r}")


# ---------------------------------------------------------------------------
# state and stepping


@dataclass
class SimState:
    x: np.ndarray
    v: np.ndarray
    x_tilde: np.ndarray
    t: float
    bc_mask: np.ndarray
    frame: int = 0
    plane_points: list = field(default_factory=list)


@dataclass
class StepResult:
    record: ConvergenceRecord
    wall_time: float
    planes_clamped: int = 0


class Simulation:
    """A scene instantiated into one merged mesh plus state."""

    def __init__(self, scene: Scene, config: SolverConfig | None = None):
        self.scene = scene
        self.config = config or scene.solver
        meshes = [o.load() for o in scene.objects]
        mesh = merge_meshes(meshes)
        dtype = np.float32 if scene.precision == "single" else np.float64
        self.dtype = dtype
        self.d_hat = self.config.d_hat or scene.d_hat_fraction * mesh.average_surface_edge_length()
        self.exclusion = build_exclusion_table(mesh, self.d_hat)
        self.mesh = mesh.astype(dtype)
        # one kernel batch per distinct material
        materials = list(dict.fromkeys(o.material for o in scene.objects))
        tet_material = np.array([materials.index(o.material) for o in scene.objects])[mesh.tet_object]
        self.groups = [MaterialGroup(m, np.flatnonzero(tet_material == i)) for i, m in enumerate(materials)]
        self.contact = ContactModel(self.mesh, self.d_hat, self.config.kappa, self.exclusion,
                                    scene.ground)
        x0 = mesh.vertices_rest.astype(dtype)
        self.x_init = x0.copy()
        scripts = [build_script(s, mesh, mesh.vertices_rest) if isinstance(s, dict) else s
                   for s in scene.scripts]
        self.rigid = [s for s in scripts if isinstance(s, RigidScript)]
        self.planes = [s for s in scripts if isinstance(s, PlaneScript)]
        v0 = np.concatenate([np.tile(o.velocity, (m.n_vertices, 1)) for o, m in zip(scene.objects, meshes)])
        self.state = SimState(x0, v0.astype(dtype), x0.copy(), 0.0, np.zeros(mesh.n_vertices, np.int8),
                              plane_points=[p.point.copy() for p in self.planes])
        self.apply_scripts(0.0)

    @property
    def h(self) -> float:
        return self.config.h

    def bc_mask_at(self, t: float) -> np.ndarray:
        mask = np.zeros(self.mesh.n_vertices, np.int8)
        for s in self.rigid:
            if s.active(t):
                mask[s.vertices] = BC.FIXED if isinstance(s, FixedScript) else BC.SCRIPTED
        return mask

    def scripted_positions(self, t: float):
        """[(vertex ids, positions)] for every script active at t."""
        return [(s.vertices, s.positions(self.x_init, t).astype(self.dtype))
                for s in self.rigid if s.active(t)]

    def apply_scripts(self, t: float) -> None:
        st = self.state
        st.bc_mask = self.bc_mask_at(t)
        for idx, pos in self.scripted_positions(t):
            st.x[idx] = pos

    def half_spaces(self, t: float | None = None):
        t = self.state.t if t is None else t
        out = list(self.scene.ground)
        for p, pt in zip(self.planes, self.state.plane_points):
            if p.active(t):
                out.append(HalfSpace(pt, p.normal))
        return out

    def _advance_planes(self, x, t1) -> int:
        """Move walls toward their scripted position, never by more than half the current gap."""
        clamped = 0
        surf = x[self.mesh.surface_vertices]
        for i, p in enumerate(self.planes):
            if not p.active(t1):
                continue
            cur = self.state.plane_points[i]
            target = p.point_at(t1)
            advance = float(np.dot(target - cur, p.normal))
            gap = float(np.min((surf - cur) @ p.normal))
            if advance > 0.5 * gap:
                target = target - (advance - 0.5 * gap) * p.normal
                clamped += 1
            self.state.plane_points[i] = target
        return clamped

    def step(self) -> StepResult:
        st, h = self.state, self.h
        t1 = st.t + h
        t0 = time.perf_counter()
        x_start = st.x.copy()
        mask = self.bc_mask_at(t1)
        for idx, pos in self.scripted_positions(t1):
            x_start[idx] = pos
        clamped = self._advance_planes(st.x, t1)
        self.contact.half_spaces = self.half_spaces(t1)

        x_tilde = (st.x + h * st.v + h * h * self.scene.gravity).astype(self.dtype)
        held = mask != BC.FREE
        x_tilde[held] = x_start[held]
        problem = IncrementalPotential(self.mesh, self.groups, x_tilde, h, self.contact, free=~held)
        x_new, rec = pncg_solve(problem, x_start, self.config, self.d_hat)

        st.v = ((x_new - st.x) / h).astype(self.dtype)
        st.x = x_new
        st.x_tilde = x_tilde
        st.t = t1
        st.frame += 1
        st.bc_mask = mask
        return StepResult(rec, time.perf_counter() - t0, clamped)


def step(sim: Simulation) -> StepResult:
    return sim.step()


def apply_scripts(sim: Simulation, t: float) -> None:
    sim.apply_scripts(t)


__all__ = [
    "SCHEMA", "SceneError", "BC", "RigidScript", "FixedScript", "PlaneScript", "ObjectSpec",
    "OutputConfig", "Scene", "SimState", "StepResult", "Simulation", "load_scene",
    "scene_from_dict", "build_script", "step", "apply_scripts", "ground_contact_constraints",
]
