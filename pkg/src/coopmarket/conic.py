"""Solver-agnostic conic programs, a continuous conic solve contract, a
deterministic branch-and-bound layer for mixed-integer conic programs, and
big-M linearization utilities.

The canonical form is minimization with linear objective, equality and <=
rows, second-order cone blocks ||x_J|| <= x_head, rotated blocks
2*x_a*x_b >= sum x_J^2 (a, b >= 0), variable bounds, and a set of binary
variables.  The continuous solve is a pluggable contract; the default
backend is Clarabel (interior point).  A scripted test double is provided
for unit-testing callers.
"""

from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import sparse

from .errors import SolverFailure

OPTIMAL = "Optimal"
INFEASIBLE = "Infeasible"
UNBOUNDED = "Unbounded"
ITER_LIMIT = "IterLimit"
NUMERICAL_FAILURE = "NumericalFailure"


@dataclass
class SolverConfig:
    """Tolerances and limits shared by the backend, B&B and Benders loop.

    big_m is None by default: callers compute M per linearized product from
    model bounds (with a safety factor) instead of one global constant.
    """

    feas_tol: float = 1e-8
    rel_gap: float = 1e-6          # B&B relative optimality gap
    epsilon: float = 1e-6          # Benders termination threshold
    big_m: Optional[float] = None
    mu_min: float = -1e9
    node_limit: int = 200_000
    time_limit: Optional[float] = None
    seed: int = 0
    int_tol: float = 1e-6
    max_iterations: int = 10_000   # Benders iteration cap

    def __post_init__(self):
        for name in ("feas_tol", "rel_gap", "epsilon", "int_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")


@dataclass
class Solution:
    status: str
    x: Optional[np.ndarray] = None
    objective: Optional[float] = None
    duals_eq: Optional[np.ndarray] = None
    duals_ineq: Optional[np.ndarray] = None
    stats: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


class ConicProgram:
    """Incrementally built conic program in canonical minimization form."""

    def __init__(self):
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.names: list[str] = []
        self.obj: list[float] = []
        self.obj_const: float = 0.0
        self.eq_rows: list[tuple[tuple[int, ...], tuple[float, ...], float]] = []
        self.ineq_rows: list[tuple[tuple[int, ...], tuple[float, ...], float]] = []
        self.soc_blocks: list[tuple[int, tuple[int, ...]]] = []
        self.rsoc_blocks: list[tuple[int, int, tuple[int, ...]]] = []
        self.binaries: set[int] = set()

    @property
    def n_vars(self) -> int:
        return len(self.lb)

    def add_var(self, lb: float = -math.inf, ub: float = math.inf,
                name: str = "", obj: float = 0.0, binary: bool = False) -> int:
        idx = len(self.lb)
        if binary:
            lb, ub = 0.0, 1.0
            self.binaries.add(idx)
        if lb > ub:
            raise ValueError(f"variable {name or idx}: lb {lb} > ub {ub}")
        self.lb.append(float(lb))
        self.ub.append(float(ub))
        self.names.append(name or f"x{idx}")
        self.obj.append(float(obj))
        return idx

    def add_obj(self, idx: int, coef: float):
        self.obj[idx] += float(coef)

    def _row(self, coeffs: dict[int, float], rhs: float):
        items = sorted((i, float(v)) for i, v in coeffs.items() if v != 0.0)
        for i, _ in items:
            if not 0 <= i < self.n_vars:
                raise IndexError(f"row references unknown variable {i}")
        idx = tuple(i for i, _ in items)
        val = tuple(v for _, v in items)
        return idx, val, float(rhs)

    def add_eq(self, coeffs: dict[int, float], rhs: float):
        self.eq_rows.append(self._row(coeffs, rhs))

    def add_ineq(self, coeffs: dict[int, float], rhs: float):
        """Row sum coeffs[i] * x_i <= rhs."""
        self.ineq_rows.append(self._row(coeffs, rhs))

    def add_soc(self, head: int, tail):
        tail = tuple(int(i) for i in tail)
        for i in (head, *tail):
            if not 0 <= i < self.n_vars:
                raise IndexError(f"cone references unknown variable {i}")
        if head in self.binaries:
            raise ValueError("binary variable cannot head a cone")
        self.soc_blocks.append((int(head), tail))

    def add_rsoc(self, a: int, b: int, tail):
        tail = tuple(int(i) for i in tail)
        for i in (a, b, *tail):
            if not 0 <= i < self.n_vars:
                raise IndexError(f"cone references unknown variable {i}")
        if a in self.binaries or b in self.binaries:
            raise ValueError("binary variable cannot head a cone")
        self.rsoc_blocks.append((int(a), int(b), tail))

    def copy(self) -> "ConicProgram":
        p = ConicProgram()
        p.lb = list(self.lb)
        p.ub = list(self.ub)
        p.names = list(self.names)
        p.obj = list(self.obj)
        p.obj_const = self.obj_const
        p.eq_rows = list(self.eq_rows)
        p.ineq_rows = list(self.ineq_rows)
        p.soc_blocks = list(self.soc_blocks)
        p.rsoc_blocks = list(self.rsoc_blocks)
        p.binaries = set(self.binaries)
        return p


def check_feasibility(p: ConicProgram, x: np.ndarray) -> float:
    """Largest scaled violation of bounds, rows and cones at x."""
    worst = 0.0
    lb = np.array(p.lb)
    ub = np.array(p.ub)
    finite_lb = np.isfinite(lb)
    finite_ub = np.isfinite(ub)
    if finite_lb.any():
        worst = max(worst, float(np.max((lb - x)[finite_lb] / (1 + np.abs(lb[finite_lb])))))
    if finite_ub.any():
        worst = max(worst, float(np.max((x - ub)[finite_ub] / (1 + np.abs(ub[finite_ub])))))
    for idx, val, rhs in p.eq_rows:
        lhs = sum(v * x[i] for i, v in zip(idx, val))
        worst = max(worst, abs(lhs - rhs) / (1 + abs(rhs)))
    for idx, val, rhs in p.ineq_rows:
        lhs = sum(v * x[i] for i, v in zip(idx, val))
        worst = max(worst, (lhs - rhs) / (1 + abs(rhs)))
    for head, tail in p.soc_blocks:
        norm = math.sqrt(sum(x[j] ** 2 for j in tail))
        worst = max(worst, (norm - x[head]) / (1 + abs(x[head])))
    for a, b, tail in p.rsoc_blocks:
        sq = sum(x[j] ** 2 for j in tail)
        worst = max(worst, (sq - 2 * x[a] * x[b]) / (1 + abs(sq)))
        worst = max(worst, -x[a], -x[b])
    return worst


class ClarabelBackend:
    """Default continuous conic backend (interior point, deterministic)."""

    name = "clarabel"

    def solve(self, p: ConicProgram, cfg: SolverConfig,
              lb_override: Optional[dict[int, float]] = None,
              ub_override: Optional[dict[int, float]] = None) -> Solution:
        import clarabel

        n = p.n_vars
        lb = np.array(p.lb)
        ub = np.array(p.ub)
        if lb_override:
            for i, v in lb_override.items():
                lb[i] = v
        if ub_override:
            for i, v in ub_override.items():
                ub[i] = v

        rows_i: list[int] = []
        rows_j: list[int] = []
        rows_v: list[float] = []
        b: list[float] = []
        cones = []
        r = 0

        def put(j: int, v: float):
            rows_i.append(r)
            rows_j.append(j)
            rows_v.append(v)

        n_eq = len(p.eq_rows)
        for idx, val, rhs in p.eq_rows:
            for j, v in zip(idx, val):
                put(j, v)
            b.append(rhs)
            r += 1
        if n_eq:
            cones.append(clarabel.ZeroConeT(n_eq))

        n_ineq = len(p.ineq_rows)
        for idx, val, rhs in p.ineq_rows:
            for j, v in zip(idx, val):
                put(j, v)
            b.append(rhs)
            r += 1
        ub_idx = [j for j in range(n) if np.isfinite(ub[j])]
        for j in ub_idx:
            put(j, 1.0)
            b.append(ub[j])
            r += 1
        lb_idx = [j for j in range(n) if np.isfinite(lb[j])]
        for j in lb_idx:
            put(j, -1.0)
            b.append(-lb[j])
            r += 1
        n_nonneg = n_ineq + len(ub_idx) + len(lb_idx)
        if n_nonneg:
            cones.append(clarabel.NonnegativeConeT(n_nonneg))

        for head, tail in p.soc_blocks:
            put(head, -1.0)
            b.append(0.0)
            r += 1
            for j in tail:
                put(j, -1.0)
                b.append(0.0)
                r += 1
            cones.append(clarabel.SecondOrderConeT(1 + len(tail)))
        # rotated cone 2ab >= ||x||^2 as SOC: ||(a-b, sqrt(2) x)|| <= a+b
        sq2 = math.sqrt(2.0)
        for a, bb, tail in p.rsoc_blocks:
            put(a, -1.0)
            put(bb, -1.0)
            b.append(0.0)
            r += 1
            put(a, -1.0)
            put(bb, 1.0)
            b.append(0.0)
            r += 1
            for j in tail:
                put(j, -sq2)
                b.append(0.0)
                r += 1
            cones.append(clarabel.SecondOrderConeT(2 + len(tail)))

        A = sparse.csc_matrix(
            (rows_v, (rows_i, rows_j)), shape=(r, n)
        )
        P = sparse.csc_matrix((n, n))
        q = np.array(p.obj)

        settings = clarabel.DefaultSettings()
        settings.verbose = False
        tol = min(1e-9, cfg.feas_tol / 10.0)
        settings.tol_feas = tol
        settings.tol_gap_abs = tol
        settings.tol_gap_rel = tol
        settings.max_iter = 400
        if cfg.time_limit:
            settings.time_limit = cfg.time_limit

        try:
            solver = clarabel.DefaultSolver(P, q, A, np.array(b), cones, settings)
            res = solver.solve()
        except BaseException as exc:  # pyo3 errors do not subclass Exception
            return Solution(status=NUMERICAL_FAILURE, stats={"error": str(exc)})

        status = str(res.status)
        stats = {"backend_status": status, "iterations": res.iterations,
                 "solve_time": res.solve_time}
        if status in ("Solved", "AlmostSolved"):
            x = np.array(res.x)
            z = np.array(res.z)
            duals_eq = z[:n_eq] if n_eq else np.zeros(0)
            duals_ineq = z[n_eq:n_eq + n_ineq] if n_ineq else np.zeros(0)
            viol = check_feasibility(p, x) if status == "AlmostSolved" else 0.0
            if status == "AlmostSolved" and viol > cfg.feas_tol:
                return Solution(status=NUMERICAL_FAILURE, x=x, stats=stats)
            return Solution(
                status=OPTIMAL, x=x, objective=float(res.obj_val) + p.obj_const,
                duals_eq=duals_eq, duals_ineq=duals_ineq, stats=stats,
            )
        if status == "PrimalInfeasible":
            return Solution(status=INFEASIBLE, stats=stats)
        if status == "DualInfeasible":
            return Solution(status=UNBOUNDED, stats=stats)
        if status in ("MaxIterations", "MaxTime"):
            return Solution(status=ITER_LIMIT, stats=stats)
        return Solution(status=NUMERICAL_FAILURE, stats=stats)


class ScriptedBackend:
    """Test double: returns pre-programmed solutions in call order."""

    name = "scripted"

    def __init__(self, solutions):
        self.solutions = list(solutions)
        self.calls: list[tuple] = []

    def solve(self, p, cfg, lb_override=None, ub_override=None) -> Solution:
        self.calls.append((p, lb_override, ub_override))
        if not self.solutions:
            raise SolverFailure("scripted backend exhausted")
        return self.solutions.pop(0)


_default_backend = ClarabelBackend()


def solve_continuous(p: ConicProgram, cfg: Optional[SolverConfig] = None,
                     backend=None, *, relax: bool = False,
                     lb_override=None, ub_override=None) -> Solution:
    """Solve the continuous program; integrality marks are rejected unless
    relax=True (they are then treated as their [0,1] bounds)."""
    cfg = cfg or SolverConfig()
    backend = backend or _default_backend
    if p.binaries and not relax:
        raise ValueError("program has integrality marks; use solve_mixed or relax=True")
    return backend.solve(p, cfg, lb_override=lb_override, ub_override=ub_override)


def _fractional_binaries(p: ConicProgram, x: np.ndarray, fixes: dict[int, float],
                         int_tol: float) -> list[tuple[float, int]]:
    out = []
    for j in sorted(p.binaries):
        if j in fixes:
            continue
        dist = abs(x[j] - round(x[j]))
        if dist > int_tol:
            out.append((dist, j))
    return out


def _polish_integral(p: ConicProgram, cfg, backend, x: np.ndarray) -> Optional[Solution]:
    """Re-solve with all binaries fixed at their rounded values."""
    fix = {j: float(round(x[j])) for j in p.binaries}
    sol = solve_continuous(p, cfg, backend, relax=True,
                           lb_override=fix, ub_override=fix)
    return sol if sol.optimal else None


def solve_mixed(p: ConicProgram, cfg: Optional[SolverConfig] = None,
                backend=None) -> Solution:
    """Best-first branch-and-bound with depth-first plunging.

    Branches on the most fractional binary (ties: lowest index); prunes on
    the relative gap; integral incumbents are polished by a fixed-binary
    re-solve.  Deterministic for identical inputs in single-worker mode.
    """
    cfg = cfg or SolverConfig()
    backend = backend or _default_backend
    if not p.binaries:
        raise ValueError("program has no integrality marks; use solve_continuous")

    t0 = time.perf_counter()
    nodes_solved = 0
    counter = 0
    incumbent: Optional[Solution] = None
    inc_obj = math.inf
    best_bound = -math.inf
    saw_iterlimit = False

    def node_solve(fixes: dict[int, float]) -> Solution:
        nonlocal nodes_solved
        nodes_solved += 1
        return solve_continuous(p, cfg, backend, relax=True,
                                lb_override=fixes, ub_override=fixes)

    def prune_threshold() -> float:
        if incumbent is None:
            return math.inf
        return inc_obj - cfg.rel_gap * max(abs(inc_obj), 1e-9)

    root = node_solve({})
    if root.status == UNBOUNDED:
        return Solution(status=UNBOUNDED, stats={"nodes": nodes_solved})
    if root.status == INFEASIBLE:
        return Solution(status=INFEASIBLE, stats={"nodes": nodes_solved})
    if not root.optimal:
        return Solution(status=root.status, stats={"nodes": nodes_solved})

    heap: list[tuple[float, int, dict, Solution]] = []
    heapq.heappush(heap, (root.objective, counter, {}, root))

    def consider(sol: Solution) -> bool:
        """Try sol as an integral incumbent; returns True if integral."""
        nonlocal incumbent, inc_obj
        fracs = _fractional_binaries(p, sol.x, {}, cfg.int_tol)
        if fracs:
            return False
        polished = _polish_integral(p, cfg, backend, sol.x) or sol
        if polished.objective < inc_obj:
            incumbent = polished
            inc_obj = polished.objective
        return True

    while heap:
        if nodes_solved >= cfg.node_limit:
            saw_iterlimit = True
            break
        if cfg.time_limit and time.perf_counter() - t0 > cfg.time_limit:
            saw_iterlimit = True
            break
        bound, _, fixes, sol = heapq.heappop(heap)
        best_bound = bound
        if bound >= prune_threshold():
            break  # heap is bound-sorted: nothing left can improve
        # depth-first plunge from this node
        while True:
            fracs = _fractional_binaries(p, sol.x, fixes, cfg.int_tol)
            if not fracs:
                consider(sol)
                break
            j = max(fracs, key=lambda fj: (fj[0], -fj[1]))[1]
            children = []
            for v in (0.0, 1.0):
                cf = dict(fixes)
                cf[j] = v
                csol = node_solve(cf)
                if csol.optimal and csol.objective < prune_threshold():
                    children.append((csol.objective, cf, csol))
                elif csol.status == ITER_LIMIT:
                    saw_iterlimit = True
            if not children:
                break
            children.sort(key=lambda c: c[0])
            obj, fixes, sol = children[0]
            for cobj, cf, cs in children[1:]:
                counter += 1
                heapq.heappush(heap, (cobj, counter, cf, cs))
            if nodes_solved >= cfg.node_limit:
                saw_iterlimit = True
                break

    stats = {"nodes": nodes_solved, "best_bound": best_bound,
             "time": time.perf_counter() - t0}
    if incumbent is None:
        status = ITER_LIMIT if saw_iterlimit else INFEASIBLE
        return Solution(status=status, stats=stats)
    gap = inc_obj - best_bound if heap else 0.0
    stats["gap"] = max(0.0, gap)
    status = ITER_LIMIT if (saw_iterlimit and heap) else OPTIMAL
    return Solution(status=status, x=incumbent.x, objective=inc_obj,
                    stats=stats)


@dataclass(frozen=True)
class LinearizedProduct:
    """Registry entry for one big-M linearized product aux = binary * cont."""

    binary: int
    cont: int
    aux: int
    M: float


def linearize_product(p: ConicProgram, binary: int, cont: int, M: float,
                      name: str = "") -> LinearizedProduct:
    """Add an auxiliary variable and the four big-M rows forcing
    aux = x[binary] * x[cont] at any feasible binary point.

    The caller guarantees |x[cont]| <= M; undersized M is caught after the
    solve by audit_bigM.
    """
    if binary not in p.binaries:
        raise ValueError(f"variable {binary} is not marked binary")
    if M <= 0:
        raise ValueError("M must be > 0")
    aux = p.add_var(lb=-M, ub=M, name=name or f"{p.names[cont]}*{p.names[binary]}")
    p.add_ineq({aux: 1.0, binary: -M}, 0.0)
    p.add_ineq({aux: -1.0, binary: -M}, 0.0)
    p.add_ineq({aux: 1.0, cont: -1.0, binary: M}, M)
    p.add_ineq({aux: -1.0, cont: 1.0, binary: M}, M)
    return LinearizedProduct(binary=binary, cont=cont, aux=aux, M=M)


@dataclass
class BigMAudit:
    violations: list[tuple[LinearizedProduct, float]]
    saturations: list[tuple[LinearizedProduct, float]]

    @property
    def ok(self) -> bool:
        return not self.violations and not self.saturations

    def describe(self) -> str:
        lines = []
        for e, err in self.violations:
            lines.append(f"product aux#{e.aux}: |IP - I*P| = {err:.3e} (BigM violation)")
        for e, mag in self.saturations:
            kind = "BigMTooSmall" if mag > e.M else "near saturation"
            lines.append(f"product aux#{e.aux}: |P| = {mag:.6g} vs M = {e.M:.6g} ({kind})")
        return "\n".join(lines) if lines else "ok"


def audit_bigM(x: np.ndarray, registry: list[LinearizedProduct],
               tol: float = 1e-6, saturation: float = 0.99) -> BigMAudit:
    """Check every linearized product at the solution point.

    Flags |IP - I*P| > tol and |P| > saturation * M (the latter indicates an
    undersized or barely-sized big-M)."""
    violations = []
    saturations = []
    for e in registry:
        i_val = x[e.binary]
        p_val = x[e.cont]
        ip_val = x[e.aux]
        err = abs(ip_val - i_val * p_val)
        if err > tol:
            violations.append((e, err))
        if abs(p_val) > saturation * e.M:
            saturations.append((e, abs(p_val)))
    return BigMAudit(violations, saturations)


def dump_program(p: ConicProgram) -> str:
    """Plain-text canonical form; floats via repr so load is bit-exact."""
    out = [f"conicprogram v1 {p.n_vars}"]
    for i in range(p.n_vars):
        binary = 1 if i in p.binaries else 0
        out.append(f"var {i} {p.names[i]} {p.lb[i]!r} {p.ub[i]!r} {binary}")
    out.append(f"objconst {p.obj_const!r}")
    for i, c in enumerate(p.obj):
        if c != 0.0:
            out.append(f"obj {i} {c!r}")
    for kind, rows in (("eq", p.eq_rows), ("ineq", p.ineq_rows)):
        for idx, val, rhs in rows:
            terms = " ".join(f"{i} {v!r}" for i, v in zip(idx, val))
            out.append(f"{kind} {rhs!r} {len(idx)} {terms}".rstrip())
    for head, tail in p.soc_blocks:
        out.append(f"soc {head} {' '.join(map(str, tail))}".rstrip())
    for a, b, tail in p.rsoc_blocks:
        out.append(f"rsoc {a} {b} {' '.join(map(str, tail))}".rstrip())
    return "\n".join(out) + "\n"


def load_program(text: str) -> ConicProgram:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split()
    if header[:2] != ["conicprogram", "v1"]:
        raise ValueError("not a v1 conic program dump")
    p = ConicProgram()
    for ln in lines[1:]:
        parts = ln.split()
        kind = parts[0]
        if kind == "var":
            _, name, lb, ub, binary = parts[1:6]
            idx = p.add_var(lb=float(lb), ub=float(ub), name=name)
            if binary == "1":
                p.binaries.add(idx)
        elif kind == "objconst":
            p.obj_const = float(parts[1])
        elif kind == "obj":
            p.obj[int(parts[1])] = float(parts[2])
        elif kind in ("eq", "ineq"):
            rhs = float(parts[1])
            k = int(parts[2])
            coeffs = {}
            for t in range(k):
                coeffs[int(parts[3 + 2 * t])] = float(parts[4 + 2 * t])
            (p.add_eq if kind == "eq" else p.add_ineq)(coeffs, rhs)
        elif kind == "soc":
            binaries = p.binaries
            p.binaries = set()  # bypass the cone-head guard during load
            p.add_soc(int(parts[1]), [int(v) for v in parts[2:]])
            p.binaries = binaries
        elif kind == "rsoc":
            binaries = p.binaries
            p.binaries = set()
            p.add_rsoc(int(parts[1]), int(parts[2]), [int(v) for v in parts[3:]])
            p.binaries = binaries
        else:
            raise ValueError(f"unknown record {kind!r}")
    return p
