"""End-to-end runs: solve, adapt, train, predict, bench and compare."""
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import plotting
from .adaptation import REPORT_COLUMNS, adapt_step_exact, adapt_step_surrogate, report_row
from .dual import solve_dual
from .functional import evaluate
from .io import read_csv, write_csv, write_vtk
from .linsolve import BlockSGS
from .parallel import ElementLoop, set_threads
from .primal import (HISTORY_COLUMNS, assemble_jacobian, assemble_residual, cell_update, freestream_field,
                     history_rows, newton_solve)
from .reconstruction import build_patch_cache, reconstruct
from .surrogate import (build_dataset, load_model, predict_field, save_model, target_statistics, train,
                        zero_model)

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


def _out(rc, *parts):
    path = os.path.join(rc.out, *parts)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    return path


def _setup(rc):
    set_threads(rc.threads)
    os.makedirs(rc.out, exist_ok=True)


# ------------------------------------------------------------------ solve
def solve_primal(rc, mesh, u0=None):
    u0 = freestream_field(mesh, rc.flow) if u0 is None else u0
    cache = build_patch_cache(mesh) if rc.solver.order == 2 else None
    st = newton_solve(u0, mesh, rc.flow, opts=rc.solver, cache=cache)
    J = evaluate(st.u, mesh, rc.spec(), rc.flow, rc.solver, cache, phi=st.phi)
    return st, J, cache


def run_solve(rc):
    """Primal solve on the configured mesh; writes the Newton history, the field and J."""
    _setup(rc)
    mesh = rc.mesh.build()
    t0 = time.perf_counter()
    st, J, _ = solve_primal(rc, mesh)
    seconds = time.perf_counter() - t0
    hist = _out(rc, "solve_history.csv")
    write_csv(hist, HISTORY_COLUMNS, history_rows(st.history))
    write_vtk(mesh, {"u": st.u}, _out(rc, "solve.vtk"))
    write_csv(_out(rc, "solve_summary.csv"), ("key", "value"),
              [("case", rc.case), ("mesh", rc.mesh.describe()), ("checksum", mesh.checksum()),
               ("elements", mesh.n_active), ("J", J), ("newton_iterations", st.iteration),
               ("residual_l1", st.residual_norm_l1), ("wall_seconds", seconds)])
    plotting.newton_history(st.history, _out(rc, "solve_history.png"))
    log.info("solve: %d elements, J = %.8g, %d Newton steps", mesh.n_active, J, st.iteration)
    return {"mesh": mesh, "state": st, "J": J, "seconds": seconds}


# ------------------------------------------------------------------ adapt
def _load_dual_model(rc, model):
    if model is None or isinstance(model, str):
        path = model or rc.model
        if not path:
            log.warning("no surrogate model given; using the zero model (no refinement will happen)")
            return zero_model()
        return load_model(path)
    return model


def adapt_loop(rc, mesh, u, mode="exact", model=None, tag="adapt", write=True):
    """``rc.adapt.max_rounds`` adaptation rounds followed by a primal solve on the final mesh."""
    spec = rc.spec()
    rows, reports = [], []
    for r in range(rc.adapt.max_rounds):
        try:
            if mode == "exact":
                res = adapt_step_exact(mesh, u, rc.flow, spec, rc.adapt, rc.solver)
            else:
                res = adapt_step_surrogate(mesh, u, rc.flow, spec, rc.adapt, model, rc.solver)
        except Exception as err:
            raise PipelineError(f"{tag} round {r}: {err}") from err
        rep = res.report
        rows.append(report_row(r, rep))
        reports.append(dict(rep, round=r, checksum=mesh.checksum()))
        log.info("%s round %d: %d -> %d elements, J = %.8g, estimate %.8g, dual %.2f s", tag, r,
                 rep["elements_before"], rep["elements_after"], rep["J_coarse"], rep["J_estimate"],
                 rep["dual_wall_seconds"])
        if write:
            write_vtk(mesh, {"u": res.fields["u"], "z": res.fields["z"], "eta": res.fields["eta"],
                             "flag": res.fields["flags"].astype(float)}, _out(rc, tag, f"round_{r}.vtk"))
        mesh, u = res.mesh, res.fields["u_next"]
    try:
        st, J, _ = solve_primal(rc, mesh, u)
    except Exception as err:
        raise PipelineError(f"{tag} final solve: {err}") from err
    if write:
        write_vtk(mesh, {"u": st.u}, _out(rc, tag, "final.vtk"))
    return {"rows": rows, "reports": reports, "mesh": mesh, "u": st.u, "J": J}


def run_adapt(rc, dual_mode=None, model=None):
    """Adaptation with the exact or the surrogate dual; writes per-round CSV, VTK and a figure."""
    _setup(rc)
    mode = dual_mode or rc.dual
    if mode not in ("exact", "surrogate"):
        raise ValueError(f"unknown dual mode {mode!r}")
    model = _load_dual_model(rc, model) if mode == "surrogate" else None
    mesh = rc.mesh.build()
    u = freestream_field(mesh, rc.flow)
    res = adapt_loop(rc, mesh, u, mode, model, tag=f"adapt_{mode}")
    write_csv(_out(rc, f"adapt_{mode}.csv"), REPORT_COLUMNS, res["rows"])
    write_csv(_out(rc, f"adapt_{mode}_summary.csv"), ("key", "value"),
              [("case", rc.case), ("dual", mode), ("rounds", rc.adapt.max_rounds),
               ("elements_final", res["mesh"].n_active), ("J_final", res["J"])])
    if res["rows"]:
        plotting.adapt_rounds(res["reports"], _out(rc, f"adapt_{mode}.png"))
    return res


# ------------------------------------------------------------------ train
def training_runs(rc):
    """Primal and exact dual fields on uniformly refined copies of the configured mesh."""
    base = rc.mesh.build()
    runs = []
    for mach, alpha in rc.train_cases:
        cfg = type(rc.flow)(mach=mach, alpha=alpha, gamma=rc.flow.gamma)
        spec = type(rc.spec()).for_flow(rc.functional, cfg, pressure=rc.pressure)
        u_prev, prev = None, None
        for level in sorted(rc.train_levels):
            mesh = base.uniform_refine(level) if level > 0 else base
            cache = build_patch_cache(mesh) if rc.solver.order == 2 else None
            u0 = freestream_field(mesh, cfg) if prev is None else _transfer(u_prev, prev, mesh)
            st = newton_solve(u0, mesh, cfg, opts=rc.solver, cache=cache)
            R = assemble_residual(st.u, mesh, cache, cfg, rc.solver, phi=st.phi)
            z = solve_dual(st.u, mesh, cache, cfg, spec, rc.solver, shift=st.shift, phi=st.phi).z
            runs.append((mesh, st.u, R, z, cfg))
            log.info("training data: Ma %.3g alpha %.3g level %d, %d elements", mach, alpha, level, mesh.n_active)
            u_prev, prev = st.u, mesh
    return runs


def _transfer(u, old, new):
    from .mesh import transfer_field

    return transfer_field(u, old, new)


def run_train(rc, model_path=None):
    """Build the dataset (unless configured), cross-validate, fit and save the surrogate."""
    _setup(rc)
    dataset = rc.dataset
    if not dataset or not os.path.exists(dataset):
        dataset = dataset or _out(rc, "dataset.csv")
        build_dataset(training_runs(rc), dataset)
    model, reports = train(dataset, rc.train)
    path = model_path or rc.model or _out(rc, "surrogate.model")
    save_model(model, path)
    rows = []
    for rep in reports:
        for e, tl in enumerate(rep.train_loss):
            vl = rep.val_loss[e] if e < len(rep.val_loss) else float("nan")
            rows.append([rep.fold, e, tl, vl])
    write_csv(_out(rc, "training.csv"), ("fold", "epoch", "train_loss", "val_loss"), rows)
    plotting.training_curves(reports, _out(rc, "training.png"))
    from .surrogate import load_dataset

    _, T, _ = load_dataset(dataset)
    stats = target_statistics(T)
    log.info("trained surrogate saved to %s; |z| < 0.01 for %.1f%% of targets", path,
             100 * stats.get("fraction_below_0.01", float("nan")))
    return {"model": model, "reports": reports, "path": path, "dataset": dataset, "target_stats": stats}


# ---------------------------------------------------------------- predict
def run_predict(rc, model=None):
    """Primal solve, then the surrogate dual on the same mesh."""
    _setup(rc)
    model = _load_dual_model(rc, model)
    mesh = rc.mesh.build()
    st, J, cache = solve_primal(rc, mesh)
    R = assemble_residual(st.u, mesh, cache, rc.flow, rc.solver, phi=st.phi)
    dual = predict_field(model, mesh, st.u, R, rc.flow)
    write_csv(_out(rc, "predict.csv"), ("element", "z0", "z1", "z2", "z3"),
              [[i, *row] for i, row in enumerate(dual.z.tolist())])
    write_vtk(mesh, {"u": st.u, "z": dual.z}, _out(rc, "predict.vtk"))
    plotting.field_map(mesh, dual.z[:, 0], _out(rc, "predict_z0.png"), "z0")
    return {"mesh": mesh, "z": dual.z, "J": J, "seconds": dual.info["seconds"]}


# ------------------------------------------------------------------ bench
BENCH_STAGES = ("reconstruct", "residual", "cell_update", "predict_field", "smoother")
PARALLEL_STAGES = ("reconstruct", "residual", "cell_update", "predict_field")


@dataclass
class BenchReport:
    """Wall seconds per stage and thread count; ``speedup[s][N] = t(1) / t(N)``."""

    elements: int
    times: dict = field(default_factory=dict)
    speedup: dict = field(default_factory=dict)
    identical: dict = field(default_factory=dict)

    def rows(self):
        out = []
        for s, per in self.times.items():
            for n, t in per.items():
                out.append([s, n, t, self.speedup[s][n], int(self.identical.get(s, True))])
        return out


def _best_of(fn, repeat):
    best, value = np.inf, None
    for _ in range(repeat):
        t0 = time.perf_counter()
        value = fn()
        best = min(best, time.perf_counter() - t0)
    return best, value


def bench_mesh(rc):
    mesh = rc.mesh.build()
    return mesh.uniform_refine(rc.bench_refine) if rc.bench_refine > 0 else mesh


def run_bench(rc, thread_counts=None, mesh=None, repeat=3, model=None):
    """Time the element-parallel stages and the sequential smoother at each thread count."""
    os.makedirs(rc.out, exist_ok=True)
    counts = sorted(set(int(n) for n in (thread_counts or rc.bench_threads)) | {1})
    mesh = mesh or bench_mesh(rc)
    cfg, opts = rc.flow, rc.solver
    cache = build_patch_cache(mesh)
    rng = np.random.default_rng(rc.seed)
    u = freestream_field(mesh, cfg) * (1.0 + 0.01 * rng.standard_normal((mesh.n_active, 1)))
    du = 1e-3 * rng.standard_normal(u.shape)
    model = _load_dual_model(rc, model) if (model is not None or rc.model) else _bench_model(rc.seed)
    R = assemble_residual(u, mesh, cache, cfg, opts)
    system = assemble_jacobian(u, mesh, cache, cfg, opts.alpha_reg, opts, residual=R)
    sgs = BlockSGS(system.matrix, system.n)
    b = system.rhs.reshape(-1)
    report = BenchReport(mesh.n_active)
    outputs = {}
    for n in counts:
        eng = ElementLoop(n)
        stages = {
            "reconstruct": lambda: reconstruct(u, cache, mesh, eng),
            "residual": lambda: assemble_residual(u, mesh, cache, cfg, opts, eng),
            "cell_update": lambda: cell_update(u, du, 0.5, eng, cfg.gamma)[0],
            "predict_field": lambda: predict_field(model, mesh, u, R, cfg, eng).z,
            "smoother": lambda: sgs.sweep(np.zeros_like(b), b),
        }
        for s, fn in stages.items():
            t, value = _best_of(fn, repeat)
            report.times.setdefault(s, {})[n] = t
            ref = outputs.setdefault(s, value)
            report.identical[s] = report.identical.get(s, True) and np.array_equal(ref, value)
        eng.close()
        log.info("bench threads=%d: %s", n, ", ".join(f"{s} {report.times[s][n]:.3f}s" for s in stages))
    for s, per in report.times.items():
        report.speedup[s] = {n: per[1] / per[n] for n in per}
        for n, sp_ in report.speedup[s].items():
            if sp_ > n * 1.05:
                log.warning("%s speedup %.2f at %d threads exceeds the ideal bound", s, sp_, n)
    write_csv(_out(rc, "bench.csv"), ("stage", "threads", "seconds", "speedup", "identical"), report.rows())
    plotting.speedup(report, _out(rc, "bench.png"))
    return report


def _bench_model(seed):
    from .surrogate import init_weights

    m = init_weights(seed=seed, dropout=0.0)
    m.mean[:] = 0.0
    m.std[:] = 1.0
    return m


# ---------------------------------------------------------------- compare
def reference_functional(rc, mesh, u=None):
    """J on ``rc.reference_levels`` uniform refinements, cached by mesh checksum."""
    path = _out(rc, "reference.csv")
    key = (mesh.checksum(), str(rc.reference_levels), f"{rc.flow.mach!r}", f"{rc.flow.alpha!r}", rc.functional)
    if os.path.exists(path):
        _, rows = read_csv(path)
        for row in rows:
            if tuple(row[:5]) == key:
                return float(row[5])
    fine = mesh.uniform_refine(rc.reference_levels) if rc.reference_levels > 0 else mesh
    u0 = None if u is None else _transfer(u, mesh, fine)
    _, J, _ = solve_primal(rc, fine, u0)
    rows = read_csv(path)[1] if os.path.exists(path) else []
    write_csv(path, ("checksum", "levels", "mach", "alpha", "functional", "J", "elements"),
              rows + [[*key, J, fine.n_active]])
    return J


COMPARE_COLUMNS = ("round", "elements_exact", "elements_surrogate", "J_exact", "J_surrogate", "J_error_exact",
                   "J_error_surrogate", "dual_seconds_exact", "dual_seconds_surrogate")


def run_compare(rc, model=None, reference=None):
    """Exact and surrogate adaptation from the same initial mesh and primal solution."""
    _setup(rc)
    model = _load_dual_model(rc, model)
    mesh_e, mesh_s = rc.mesh.build(), rc.mesh.build()
    if mesh_e.checksum() != mesh_s.checksum():
        raise PipelineError("initial meshes differ between the exact and surrogate runs")
    st, _, _ = solve_primal(rc, mesh_e)
    J_ref = reference if reference is not None else reference_functional(rc, mesh_e, st.u)
    ex = adapt_loop(rc, mesh_e, st.u.copy(), "exact", tag="compare_exact")
    su = adapt_loop(rc, mesh_s, st.u.copy(), "surrogate", model, tag="compare_surrogate")
    rows = []
    for a, b in zip(ex["reports"], su["reports"]):
        rows.append([a["round"], a["elements_before"], b["elements_before"], a["J_coarse"], b["J_coarse"],
                     abs(a["J_coarse"] - J_ref), abs(b["J_coarse"] - J_ref), a["dual_wall_seconds"],
                     b["dual_wall_seconds"]])
    rows.append(["final", ex["mesh"].n_active, su["mesh"].n_active, ex["J"], su["J"], abs(ex["J"] - J_ref),
                 abs(su["J"] - J_ref), float("nan"), float("nan")])
    write_csv(_out(rc, "compare.csv"), COMPARE_COLUMNS, rows)
    plotting.comparison(rows, J_ref, _out(rc, "compare.png"))
    return {"rows": rows, "J_ref": J_ref, "exact": ex, "surrogate": su}
