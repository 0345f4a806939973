import numpy as np
import pytest

from dwrflow.euler import FlowConfig
from dwrflow.io import load_mesh
from dwrflow.mesh import generate_naca_omesh

SQUARE = """NODES 4
0 0
1 0
1 1
0 1
TRIANGLES 2
0 1 2
0 2 3
BOUNDARY 4
0 1 2
1 2 2
2 3 2
3 0 2
"""

# 4 x 4 structured square, every boundary edge far field
def square_text(n=4):
    lines = [f"NODES {(n + 1) ** 2}"]
    for j in range(n + 1):
        for i in range(n + 1):
            lines.append(f"{i / n!r} {j / n!r}")
    tris = []
    for j in range(n):
        for i in range(n):
            a = j * (n + 1) + i
            b, c, d = a + 1, a + n + 2, a + n + 1
            tris += [(a, b, c), (a, c, d)]
    lines.append(f"TRIANGLES {len(tris)}")
    lines += [f"{a} {b} {c}" for a, b, c in tris]
    bnd = []
    for i in range(n):
        bnd += [(i, i + 1), (n * (n + 1) + i, n * (n + 1) + i + 1), (i * (n + 1), (i + 1) * (n + 1)),
                (i * (n + 1) + n, (i + 1) * (n + 1) + n)]
    lines.append(f"BOUNDARY {len(bnd)}")
    lines += [f"{a} {b} 2" for a, b in bnd]
    return "\n".join(lines) + "\n"


@pytest.fixture
def square_path(tmp_path):
    p = tmp_path / "square.mesh"
    p.write_text(SQUARE)
    return p


@pytest.fixture(scope="session")
def grid_mesh(tmp_path_factory):
    p = tmp_path_factory.mktemp("grid") / "grid.mesh"
    p.write_text(square_text(6))
    return load_mesh(p)


@pytest.fixture(scope="session")
def small_omesh():
    return generate_naca_omesh("0012", n_around=32, n_radial=6)


@pytest.fixture(scope="session")
def subsonic():
    return FlowConfig(mach=0.5, alpha=0.0)


@pytest.fixture(scope="session")
def transonic():
    return FlowConfig(mach=0.8, alpha=1.25)


def perturbed(mesh, cfg, scale=0.02, seed=0):
    from dwrflow.primal import freestream_field

    rng = np.random.default_rng(seed)
    u = freestream_field(mesh, cfg)
    return u * (1.0 + scale * rng.standard_normal(u.shape))


@pytest.fixture(scope="session")
def subsonic_state(small_omesh, subsonic):
    """Converged Ma 0.5, alpha 0 solution on the small O-mesh."""
    from dwrflow.primal import freestream_field, newton_solve

    return newton_solve(freestream_field(small_omesh, subsonic), small_omesh, subsonic)


@pytest.fixture(scope="session", autouse=True)
def adjoint_audit():
    """Every Jacobian assembled in the suite passes the transpose identity."""
    import adjoint_audit as audit

    mp = pytest.MonkeyPatch()
    audit.install(mp)
    yield audit.CHECKED
    mp.undo()


def pytest_terminal_summary(terminalreporter):
    import sys

    acc = sys.modules.get("test_acceptance")
    results = getattr(acc, "RESULTS", {})
    if not results:
        return
    import adjoint_audit as audit

    tr = terminalreporter
    tr.section("acceptance criteria")
    for name, (ok, detail) in results.items():
        tr.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    tr.write_line(f"transpose audit over the whole run: {audit.CHECKED['systems']} systems, "
                  f"worst {audit.CHECKED['worst']:.2e}")
