"""End-to-end acceptance checks.

Each test carries a ``criterion`` marker; the terminal summary prints one
PASS/FAIL line per criterion.  The scene runs share module fixtures, so the
whole file takes several minutes.
"""
import csv
import dataclasses
import json
import time
from pathlib import Path

import numpy as np
import pytest

from pncg_ipc import cli
from pncg_ipc.contact import ConstraintSet, Kind, closest_point_edge_edge, closest_point_triangle
from pncg_ipc.elasticity import ElementBatch
from pncg_ipc.oracle import (
    brute_force_ee_distance, brute_force_pt_distance, dense_constraint_hessian, dense_element_hessian,
)
from pncg_ipc.sim import Simulation, load_scene
from pncg_ipc.solver import IncrementalPotential, SolverConfig, pncg_solve

from conftest import MODELS, material, random_F, soup_with_F

SCENES = Path(__file__).resolve().parents[1] / "scenes"

pytestmark = pytest.mark.slow


def rel(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


# ---------------------------------------------------------------------------
# scene runs shared by criteria 5-8 and 10


def run_cli(scene, out, *extra):
    t0 = time.perf_counter()
    code = cli.main(["run", str(scene), "--out", str(out), "--audit", "brute", "--deterministic", "-q",
                     *map(str, extra)])
    return code, time.perf_counter() - t0


def read_log(out):
    """{frame: [row dicts]} from convergence.csv."""
    frames = {}
    with open(out / "convergence.csv") as fh:
        for row in csv.DictReader(fh):
            frames.setdefault(int(row["frame"]), []).append(row)
    return frames


@pytest.fixture(scope="module")
def drop_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("drop")
    code, wall = run_cli(SCENES / "drop.yaml", out)
    return out, code, wall


@pytest.fixture(scope="module")
def squeeze_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("squeeze")
    code, wall = run_cli(SCENES / "squeeze.yaml", out)
    return out, code, wall


# ---------------------------------------------------------------------------


@pytest.mark.criterion(1, "element gradients match central differences (1e-5, 4 x 1000 samples)")
def test_derivative_correctness(record_property):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = {}
    for model in MODELS:
        mat = material(model)
        mesh, x = soup_with_F(rng, [random_F(rng, cond_max=10) for _ in range(1000)])
        g = ElementBatch(mesh, x, mat).gradient()
        fd = np.empty_like(g)
        # all tets are disjoint, so one perturbation per local coordinate covers the batch
        for v in range(4):
            for ax in range(3):
                idx = mesh.tets[:, v]
                h = 1e-6 * (1.0 + np.abs(x[idx, ax]))
                xp, xm = x.copy(), x.copy()
                xp[idx, ax] += h
                xm[idx, ax] -= h
                ep = ElementBatch(mesh, xp, mat).energy_density() * mesh.rest_volume
                em = ElementBatch(mesh, xm, mat).energy_density() * mesh.rest_volume
                fd[:, v, ax] = (ep - em) / (2 * h)
        err = np.abs(g - fd).reshape(len(g), -1).max(axis=1) / np.abs(g).reshape(len(g), -1).max(axis=1)
        worst[model.value] = float(err.max())
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max rel err {max(worst.values()):.1e}, {elapsed:.1f} s")
    assert max(worst.values()) <= 1e-5, worst
    assert elapsed <= 10.0


@pytest.mark.criterion(2, "diag / quadratic-form fast paths match dense oracles (1e-10, >= 1000 each)")
def test_fast_path_equivalence(record_property):
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    worst = 0.0
    for model in MODELS:
        mat = material(model)
        mesh, x = soup_with_F(rng, [random_F(rng, allow_inverted=model.value != "nh") for _ in range(1000)])
        b = ElementBatch(mesh, x, mat)
        diag = b.diag_hessian()
        p = rng.normal(size=(mesh.n_tets, 4, 3))
        q = b.quadratic_form(p)
        for e in range(mesh.n_tets):
            H = dense_element_hessian(mesh, x, e, mat)
            worst = max(worst, rel(diag[e].ravel(), np.diag(H)))
            pe = p[e].ravel()
            ref = pe @ H @ pe
            worst = max(worst, abs(q[e] - ref) / max(abs(ref), 1e-12 * np.abs(H).max()))

    # barrier: 1000 PT and EE constraints on disjoint vertex quadruples
    n = 1000
    X = rng.normal(size=(n, 4, 3))
    kinds = np.where(np.arange(n) % 2 == 0, Kind.PT, Kind.EE)
    d_hat = 1.0
    rows = []
    for k in range(n):
        fn = closest_point_triangle if kinds[k] == Kind.PT else closest_point_edge_edge
        _, _, d = fn(*X[k])
        X[k] *= rng.uniform(0.05, 0.95) * d_hat / d
        rows.append(fn(*X[k]))
    c = np.array([r[0] for r in rows])
    t = np.array([r[1] for r in rows])
    d = np.array([r[2] for r in rows])
    cs = ConstraintSet(kinds.astype(np.int64), np.arange(4 * n).reshape(n, 4), c, t, d, 3.0, d_hat)
    x = X.reshape(-1, 3)
    diag = cs.diag_hessian(4 * n, x).reshape(n, 12)
    p = rng.normal(size=(4 * n, 3))
    q = cs.local_quadratic_forms(p, x)
    for k in range(n):
        H = dense_constraint_hessian(c[k], t[k], cs.kappa, d_hat)
        worst = max(worst, rel(diag[k], np.diag(H)))
        pk = p[4 * k:4 * k + 4].ravel()
        ref = pk @ H @ pk
        worst = max(worst, abs(q[k] - ref) / max(abs(ref), 1e-12 * np.abs(H).max()))
    assert cs.quadratic_form(p, x) == pytest.approx(float(np.sum(q)), rel=1e-12)
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max rel err {worst:.1e}, {elapsed:.1f} s")
    assert worst <= 1e-10
    assert elapsed <= 10.0


def distance_configs(rng, n_each):
    """PT and EE quadruples: generic plus near-degenerate families."""
    def normal(k):
        return rng.normal(size=(k, 4, 3))

    pt, ee = [normal(n_each)], [normal(n_each)]
    # point almost in the triangle's plane
    X = normal(n_each // 4)
    nrm = np.cross(X[:, 2] - X[:, 1], X[:, 3] - X[:, 1])
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    X[:, 0] -= (np.einsum("bi,bi->b", X[:, 0] - X[:, 1], nrm) - 1e-9 * rng.normal(size=len(X)))[:, None] * nrm
    pt.append(X)
    # nearly collinear triangles
    X = normal(n_each // 4)
    s = rng.uniform(-1, 2, size=(len(X), 1))
    X[:, 3] = X[:, 1] + s * (X[:, 2] - X[:, 1]) + 1e-9 * rng.normal(size=(len(X), 3))
    pt.append(X)
    # tiny triangles
    X = normal(n_each // 4)
    X[:, 2:] = X[:, 1:2] + 1e-7 * rng.normal(size=(len(X), 2, 3))
    pt.append(X)
    # nearly and exactly parallel edges
    X = normal(n_each // 4)
    X[:, 3] = X[:, 2] + (X[:, 1] - X[:, 0]) * rng.uniform(0.2, 2, (len(X), 1)) + 1e-9 * rng.normal(size=(len(X), 3))
    ee.append(X)
    X = normal(n_each // 8)
    X[:, 3] = X[:, 2] + (X[:, 1] - X[:, 0]) * rng.uniform(-2, 2, (len(X), 1))
    ee.append(X)
    # collapsed edges
    X = normal(n_each // 8)
    X[:, 1] = X[:, 0]
    ee.append(X)
    # almost intersecting edges
    X = normal(n_each // 4)
    s, u = rng.uniform(0.1, 0.9, (2, len(X), 1))
    mid = X[:, 0] + s * (X[:, 1] - X[:, 0])
    dirn = rng.normal(size=(len(X), 3))
    X[:, 2] = mid - u * dirn + 1e-6 * rng.normal(size=(len(X), 3))
    X[:, 3] = mid + (1 - u) * dirn
    ee.append(X)
    return np.concatenate(pt), np.concatenate(ee)


@pytest.mark.criterion(3, "closest points match the grid-search oracle (1e-7 abs, >= 10 000 configurations)")
def test_distance_correctness(record_property):
    rng = np.random.default_rng(303)
    t0 = time.perf_counter()
    PT, EE = distance_configs(rng, 3000)
    ours_pt = np.array([closest_point_triangle(*X)[2] for X in PT])
    ours_ee = np.array([closest_point_edge_edge(*X)[2] for X in EE])
    ref_pt = brute_force_pt_distance(PT[:, 0], PT[:, 1], PT[:, 2], PT[:, 3])
    ref_ee = brute_force_ee_distance(EE[:, 0], EE[:, 1], EE[:, 2], EE[:, 3])
    err = max(np.abs(ours_pt - ref_pt).max(), np.abs(ours_ee - ref_ee).max())
    elapsed = time.perf_counter() - t0
    total = len(PT) + len(EE)
    record_property("detail", f"{total} configs, max abs err {err:.1e}, {elapsed:.1f} s")
    assert total >= 10_000
    assert err <= 1e-7
    assert elapsed <= 30.0


@pytest.mark.criterion(4, "inertia-only problem: one step lands on x_tilde (1e-12)")
def test_quadratic_exactness(block, record_property):
    rng = np.random.default_rng(404)
    x0 = block.vertices_rest
    x_tilde = x0 + 0.1 * rng.normal(size=x0.shape)
    problem = IncrementalPotential(block, [], x_tilde, 0.01)
    x1, rec1 = pncg_solve(problem, x0, SolverConfig(iter_max=1), d_hat=10.0)
    x, rec = pncg_solve(problem, x0, SolverConfig(), d_hat=10.0)
    r1 = float(np.max(np.abs(x1 - x_tilde)))
    record_property("detail", f"residual after one update {r1:.1e}, stop reason at iteration 1: {rec.reason}")
    assert r1 <= 1e-12
    # iteration 1 only confirms dE ~ 0 and stops
    assert rec.iterations == 2 and rec.reason == "converged"
    assert np.max(np.abs(x - x_tilde)) <= 1e-12


@pytest.mark.criterion(5, "capped iterations move no vertex more than d_hat / 2")
def test_step_cap_property(drop_run, squeeze_run, record_property):
    checked = capped = 0
    for out, code, _ in (drop_run, squeeze_run):
        assert code == 0
        d_hat = json.loads((out / "report.json").read_text())["d_hat"]
        for rows in read_log(out).values():
            for r in rows:
                checked += 1
                if int(r["capped"]):
                    capped += 1
                    assert float(r["step_inf"]) <= d_hat / 2 + 1e-12
    record_property("detail", f"{capped} capped of {checked} iterations")
    assert capped > 0


@pytest.mark.criterion(6, "drop and squeeze scenes, 200 frames each, every frame penetration-free, <= 10 min")
def test_penetration_free(drop_run, squeeze_run, record_property):
    summary = []
    total = 0.0
    for out, code, wall in (drop_run, squeeze_run):
        report = json.loads((out / "report.json").read_text())
        assert code == 0 and report["status"] == 0
        frames = report["frames"]
        assert len(frames) >= 200
        assert len(list((out / "frames").glob("*.obj"))) == len(frames)
        dist = [min(f["min_distance"], f["ground_distance"] or np.inf) for f in frames]
        assert min(dist) > 0
        total += wall
        summary.append(f"{report['scene']} {report['tets']} tets min {min(dist):.1e}")
    assert total <= 600.0
    record_property("detail", ", ".join(summary) + f", {total:.0f} s")


@pytest.mark.criterion(7, "drop scene, first 50 steps: DK mean iterations <= FR and <= PRP")
def test_ablation_ordering(drop_run, record_property):
    out, code, _ = drop_run
    assert code == 0
    # the DK column is the first 50 frames of the full run (same scene and settings)
    report = json.loads((out / "report.json").read_text())
    dk = float(np.mean([f["iterations"] for f in report["frames"][:50]]))
    res = cli.run_ablation(SCENES / "drop.yaml", ["fr", "prp"], 50)
    fr, prp = res["fr"]["mean"], res["prp"]["mean"]
    record_property("detail", f"DK {dk:.2f}, FR {fr:.2f}, PRP {prp:.2f}")
    assert dk <= fr and dk <= prp


@pytest.mark.criterion(8, "converged steps end with dE < eps dE0; equilibrium returns on the dE0 floor")
def test_termination(drop_run, squeeze_run, record_property):
    n = 0
    for out, code, _ in (drop_run, squeeze_run):
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        eps = report["solver"]["epsilon"]
        reasons = {f["frame"]: f["reason"] for f in report["frames"]}
        for frame, rows in read_log(out).items():
            if reasons[frame] == "converged":
                n += 1
                assert float(rows[-1]["dE"]) < eps * float(rows[0]["dE"])
    sim = Simulation(load_scene(SCENES / "rest.yaml"))
    for _ in range(3):
        rec = sim.step().record
        assert rec.reason == "dE0_floor" and rec.iterations == 1
    record_property("detail", f"{n} converged steps checked")


@pytest.mark.criterion(9, "per-object splitting: free body's alphas equal its solo-run alphas (1e-12)")
def test_splitting_correctness(record_property):
    scene = load_scene(SCENES / "two_body.yaml")
    sim = Simulation(scene)
    free = sim.mesh.vertex_object == 1
    solo_scene = dataclasses.replace(scene, objects=[scene.objects[1]],
                                     solver=dataclasses.replace(scene.solver, d_hat=sim.d_hat))
    solo = Simulation(solo_scene)
    worst, compared, differ = 0.0, 0, False
    for _ in range(scene.output.frames):
        st = sim.state
        # seed the solo run with the free body's current state
        solo.state.x, solo.state.v, solo.state.t = st.x[free].copy(), st.v[free].copy(), st.t
        rec2 = sim.step().record
        rec1 = solo.step().record
        n = min(rec1.iterations, rec2.iterations)
        a2 = np.array([r.alphas[1] for r in rec2.rows[:n]])
        a1 = np.array([r.alphas[0] for r in rec1.rows[:n]])
        worst = max(worst, float(np.max(np.abs(a2 - a1) / np.abs(a1))))
        compared += n
        differ |= any(r.alphas[0] != r.alphas[1] for r in rec2.rows)
    record_property("detail", f"{compared} iterations compared, max rel diff {worst:.1e}")
    assert differ and compared > 0
    assert worst <= 1e-12


@pytest.mark.criterion(10, "two --deterministic drop runs give byte-identical convergence logs")
def test_determinism(drop_run, tmp_path, record_property):
    out, code, _ = drop_run
    assert code == 0
    code2, _ = run_cli(SCENES / "drop.yaml", tmp_path / "again")
    assert code2 == 0
    a = (out / "convergence.csv").read_bytes()
    b = (tmp_path / "again" / "convergence.csv").read_bytes()
    record_property("detail", f"{len(a)} bytes")
    assert a == b
