"""Command line: run scenes, compare beta variants, audit frame directories.

    pncg-ipc run scenes/drop.yaml --frames 200 --out out/drop
    pncg-ipc ablation scenes/drop.yaml --steps 50 --variants dk fr prp
    pncg-ipc audit out/drop/frames --method brute

Exit codes: 0 ok, 2 scene/config error, 3 solver abort, 4 audit failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .audit import audit_configuration, min_distance, surface_from_faces
from .contact import PenetrationError
from .elasticity import InvertedElementError
from .mesh import MeshError
from .sim import Scene, SceneError, Simulation, load_scene
from .solver import CSV_COLUMNS, BetaVariant, SolverError

log = logging.getLogger("pncg_ipc")

EXIT_OK, EXIT_SCENE, EXIT_SOLVER, EXIT_AUDIT = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# OBJ frames


def surface_obj(mesh):
    """(vertex ids, faces renumbered 0-based against those ids)."""
    ids = np.asarray(mesh.surface_vertices)
    remap = np.full(mesh.n_vertices, -1, np.int64)
    remap[ids] = np.arange(len(ids))
    return ids, remap[mesh.surface_faces]


def write_obj(path, vertices, faces) -> None:
    lines = [f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}" for v in np.asarray(vertices, np.float64)]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path):
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "v":
            verts.append([float(t) for t in tok[1:4]])
        elif tok[0] == "f":
            faces.append([int(t.split("/")[0]) - 1 for t in tok[1:4]])
    return np.array(verts, np.float64).reshape(-1, 3), np.array(faces, np.int64).reshape(-1, 3)


# ---------------------------------------------------------------------------
# overrides


def add_overrides(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("overrides")
    g.add_argument("--h", type=float, help="time step (s)")
    g.add_argument("--d-hat", type=float, help="barrier activation distance (m)")
    g.add_argument("--kappa", type=float)
    g.add_argument("--epsilon", type=float)
    g.add_argument("--iter-max", type=int)
    g.add_argument("--beta", choices=[b.value for b in BetaVariant])
    g.add_argument("--splitting", help="off, per_object or collision_partition")
    g.add_argument("--frames", type=int)
    g.add_argument("--out", type=Path)
    g.add_argument("--precision", choices=["single", "double"])
    g.add_argument("--deterministic", action="store_true",
                   help="single worker thread; byte-identical convergence logs")
    g.add_argument("--threads", type=int, help="cap on the worker pool")


def apply_overrides(scene: Scene, args) -> Scene:
    solver = {}
    for arg, key in [("h", "h"), ("d_hat", "d_hat"), ("kappa", "kappa"), ("epsilon", "epsilon"),
                     ("iter_max", "iter_max"), ("beta", "beta_variant"), ("splitting", "splitting")]:
        val = getattr(args, arg, None)
        if val is not None:
            solver[key] = val
    try:
        scene.solver = dataclasses.replace(scene.solver, **solver)
    except ValueError as e:
        raise CliError(EXIT_SCENE, f"bad override: {e}") from e
    if getattr(args, "frames", None) is not None:
        scene.output.frames = args.frames
    if getattr(args, "out", None) is not None:
        scene.output.directory = str(args.out)
    if getattr(args, "precision", None):
        scene.precision = args.precision
    return scene


def configure_threads(args) -> None:
    import numba

    n = 1 if args.deterministic else args.threads
    if n:
        # the kernels are serial; the portable layer avoids probing TBB
        numba.config.THREADING_LAYER = "workqueue"
        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


def open_scene(path, args) -> Scene:
    try:
        scene = load_scene(path)
    except (SceneError, MeshError) as e:
        raise CliError(EXIT_SCENE, str(e)) from e
    return apply_overrides(scene, args)


def make_simulation(scene: Scene) -> Simulation:
    try:
        return Simulation(scene)
    except (SceneError, MeshError, PenetrationError, ValueError) as e:
        raise CliError(EXIT_SCENE, f"cannot set up scene: {e}") from e


# ---------------------------------------------------------------------------
# run


def _dump_state(sim: Simulation, path: Path) -> None:
    st = sim.state
    np.savez(path, x=st.x, v=st.v, x_tilde=st.x_tilde, t=st.t, frame=st.frame, bc_mask=st.bc_mask)


def run_scene(scene: Scene, out: Path, audit_method: str = "hash", dump_state: bool = False,
              quiet: bool = False) -> dict:
    """Simulate, writing frames/, convergence.csv and report.json under `out`."""
    sim = make_simulation(scene)
    frames_dir = out / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    ids, faces = surface_obj(sim.mesh)
    cfg = sim.config
    report = {
        "scene": scene.name,
        "vertices": sim.mesh.n_vertices,
        "tets": sim.mesh.n_tets,
        "d_hat": sim.d_hat,
        "solver": {"h": cfg.h, "kappa": cfg.kappa, "epsilon": cfg.epsilon, "iter_max": cfg.iter_max,
                   "beta_variant": cfg.beta_variant.value, "splitting": cfg.splitting.value,
                   "precision": scene.precision},
        "frames": [],
    }
    status, message = EXIT_OK, ""
    with open(out / "convergence.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["frame"] + CSV_COLUMNS)
        for f in range(1, scene.output.frames + 1):
            try:
                res = sim.step()
            except (SolverError, PenetrationError, InvertedElementError) as e:
                status, message = EXIT_SOLVER, f"frame {f}: solver abort: {e}"
                _dump_state(sim, out / "abort_state.npz")
                break
            rec = res.record
            writer.writerows([f] + row for row in rec.csv_rows())
            fh.flush()
            write_obj(frames_dir / f"frame_{f:04d}.obj", sim.state.x[ids], faces)
            if dump_state:
                _dump_state(sim, out / f"state_{f:04d}.npz")

            audit = audit_configuration(sim.mesh, sim.state.x, sim.half_spaces(), audit_method)
            counts = [r.n_constraints for r in rec.rows] or [0]
            report["frames"].append({
                "frame": f,
                "t": sim.state.t,
                "iterations": rec.iterations,
                "reason": rec.reason,
                "wall_time": res.wall_time,
                "min_distance": audit.min_distance,
                "ground_distance": audit.ground_distance if np.isfinite(audit.ground_distance) else None,
                "max_constraints": int(max(counts)),
                "planes_clamped": res.planes_clamped,
            })
            line = (f"audit frame {f:4d} min_distance {audit.overall:.6e} ({audit.kind}) "
                    f"iters {rec.iterations:3d} {rec.reason} {'ok' if audit.ok else 'FAIL'}")
            if not quiet:
                print(line, flush=True)
            if not audit.ok:
                status, message = EXIT_AUDIT, f"frame {f}: penetration audit failed ({audit.kind})"
                _dump_state(sim, out / "abort_state.npz")
                break

    report["summary"] = summarize(report["frames"])
    report["status"] = status
    report["message"] = message
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    if status:
        raise CliError(status, message)
    return report


def summarize(frames: list) -> dict:
    if not frames:
        return {"frames": 0}
    iters = np.array([f["iterations"] for f in frames])
    cmax = np.array([f["max_constraints"] for f in frames])
    dist = [min(f["min_distance"], f["ground_distance"] or np.inf) for f in frames]
    reasons = {}
    for f in frames:
        reasons[f["reason"]] = reasons.get(f["reason"], 0) + 1
    return {
        "frames": len(frames),
        "avg_iters": float(iters.mean()),
        "max_iters": int(iters.max()),
        "contact_avg": float(cmax.mean()),
        "contact_max": int(cmax.max()),
        "wall_time": float(sum(f["wall_time"] for f in frames)),
        "min_distance": float(min(dist)),
        "reasons": reasons,
    }


def cmd_run(args) -> int:
    scene = open_scene(args.scene, args)
    out = Path(scene.output.directory)
    report = run_scene(scene, out, args.audit, args.dump_state, args.quiet)
    s = report["summary"]
    print(f"{s['frames']} frames, avg iters {s['avg_iters']:.2f}, contacts avg {s['contact_avg']:.1f} "
          f"max {s['contact_max']}, min distance {s['min_distance']:.4e}, {s['wall_time']:.1f} s")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablation


def run_ablation(scene_path, variants, steps: int, args=None, out: Path | None = None) -> dict:
    """Iterations-to-termination per step for each beta variant, from one shared start."""
    results = {}
    traces = []
    for v in variants:
        scene = open_scene(scene_path, args) if args is not None else load_scene(scene_path)
        scene.solver = dataclasses.replace(scene.solver, beta_variant=v)
        sim = make_simulation(scene)
        iters = []
        for k in range(steps):
            try:
                rec = sim.step().record
            except (SolverError, PenetrationError, InvertedElementError) as e:
                raise CliError(EXIT_SOLVER, f"{v} step {k + 1}: solver abort: {e}") from e
            iters.append(rec.iterations)
            traces += [(v, k + 1, r.iter, float(r.energy), float(r.dE)) for r in rec.rows]
        results[v] = {"iterations": iters, "mean": float(np.mean(iters)),
                      "converged": int(sum(1 for i in iters if i < scene.solver.iter_max))}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation_traces.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variant", "step", "iter", "energy", "dE"])
            w.writerows((v, s, i, repr(e), repr(d)) for v, s, i, e, d in traces)
        (out / "ablation.json").write_text(json.dumps(results, indent=2) + "\n")
    return results


def cmd_ablation(args) -> int:
    variants = [BetaVariant(v).value for v in args.variants]
    out = args.out or Path("out") / "ablation"
    res = run_ablation(args.scene, variants, args.steps, args, out)
    print(f"{'variant':8s} {'mean iters':>10s} {'converged':>10s}")
    for v, r in res.items():
        print(f"{v:8s} {r['mean']:10.2f} {r['converged']:>6d}/{args.steps}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# audit


def audit_frames(frames_dir, d_hat=None, method="brute", quiet=False):
    """[(file name, min distance, kind)] for every OBJ frame in the directory."""
    files = sorted(Path(frames_dir).glob("*.obj"))
    if not files:
        raise CliError(EXIT_SCENE, f"no .obj frames in {frames_dir}")
    rows = []
    for path in files:
        x, faces = read_obj(path)
        d, kind, _ = min_distance(x, *surface_from_faces(faces), method=method)
        rows.append((path.name, d, kind))
        if not quiet:
            note = "" if d_hat is None else (" in contact range" if d < d_hat else "")
            print(f"audit {path.name} min_distance {d:.6e} ({kind}){note} {'ok' if d > 0 else 'FAIL'}")
    return rows


def cmd_audit(args) -> int:
    rows = audit_frames(args.frames_dir, args.d_hat, args.method, args.quiet)
    bad = [r[0] for r in rows if not r[1] > 0]
    if bad:
        raise CliError(EXIT_AUDIT, f"{len(bad)} frame(s) failed the audit: {', '.join(bad)}")
    print(f"{len(rows)} frames, min distance {min(r[1] for r in rows):.6e}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pncg-ipc", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a scene")
    r.add_argument("scene", type=Path)
    add_overrides(r)
    r.add_argument("--audit", choices=["hash", "brute"], default="hash",
                   help="per-frame distance audit (default: hash)")
    r.add_argument("--dump-state", action="store_true", help="write state_NNNN.npz every frame")
    r.add_argument("-q", "--quiet", action="store_true")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("ablation", help="compare beta variants over the first steps")
    a.add_argument("scene", type=Path)
    a.add_argument("--variants", nargs="+", default=["dk", "fr", "prp"])
    a.add_argument("--steps", type=int, default=50)
    add_overrides(a)
    a.set_defaults(func=cmd_ablation)

    d = sub.add_parser("audit", help="min surface distance of every OBJ frame")
    d.add_argument("frames_dir", type=Path)
    d.add_argument("--d-hat", type=float)
    d.add_argument("--method", choices=["brute", "hash"], default="brute")
    d.add_argument("-q", "--quiet", action="store_true")
    d.set_defaults(func=cmd_audit)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if hasattr(args, "deterministic"):
            configure_threads(args)
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
