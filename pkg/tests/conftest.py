import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pncg_ipc.elasticity import MaterialModel, Model
from pncg_ipc.mesh import TetMesh, box_mesh

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

MODELS = [Model.NEO_HOOKEAN, Model.STABLE_NEO_HOOKEAN, Model.ARAP, Model.FIXED_COROTATED]


def material(model, mu=1.3, lam=2.1):
    return MaterialModel(model, mu, lam)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def random_F(rng, cond_max=10.0, allow_inverted=False):
    """Random F = U diag(s) V^T with singular values in [0.5, 0.5 * cond_max]."""
    s = rng.uniform(0.5, 0.5 * cond_max, 3)
    if allow_inverted and rng.random() < 0.3:
        s[2] = -s[2]
    return random_rotation(rng) @ np.diag(s) @ random_rotation(rng).T


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def unit_tet():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=np.float64)
    return TetMesh.from_arrays(v, np.array([[0, 1, 2, 3]]), 1000.0)


@pytest.fixture
def cube5():
    v, t = box_mesh((1.0, 1.0, 1.0), (1, 1, 1))
    return TetMesh.from_arrays(v, t, 1000.0)


@pytest.fixture
def block():
    v, t = box_mesh((0.3, 0.2, 0.2), (3, 2, 2))
    return TetMesh.from_arrays(v, t, 1000.0)


def soup_with_F(rng, Fs, jitter=True):
    """Disjoint tets with random rest shapes, deformed so tet e has gradient Fs[e]."""
    n = len(Fs)
    base = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=np.float64)
    rest = np.empty((n, 4, 3))
    for e in range(n):
        A = np.eye(3) + (0.3 * rng.uniform(-1, 1, (3, 3)) if jitter else 0.0)
        if np.linalg.det(A) < 0:
            A[:, 0] *= -1
        rest[e] = base @ A.T + rng.normal(size=3)
    mesh = TetMesh.from_arrays(rest.reshape(-1, 3), np.arange(4 * n).reshape(n, 4))
    x = np.einsum("nij,nvj->nvi", np.asarray(Fs), rest).reshape(-1, 3)
    return mesh, x


# one pass/fail line per acceptance criterion, printed after the run

_CRITERIA = pytest.StashKey[dict]()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    detail = dict(item.user_properties).get("detail", "")
    lines = item.config.stash.setdefault(_CRITERIA, {})
    lines[mark.args[0]] = f"criterion {mark.args[0]:2d} {'PASS' if rep.passed else 'FAIL'}  {mark.args[1]}" + (
        f"  [{detail}]" if detail else "")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
