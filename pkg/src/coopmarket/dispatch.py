"""Robust coalition dispatch: model building, solving, the characteristic
function, recourse evaluation and Monte Carlo feasibility verification.

For a fixed coalition the worst-case recourse constraints reduce to linear
rows: each affine share multiplies the support value of the member-masked
ones pattern over the coalition's uncertainty set.  The only cones in the
dispatch program are the rotated-cone epigraphs of the quadratic load
utility and MT cost.  Orientation convention for a positive (surplus) total
deviation: loads absorb by increasing (uses rd_up headroom), MTs by backing
off (rg_dw), the operator by taking energy (rm_dw); the opposite reserves
cover deficits.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .conic import ConicProgram, SolverConfig, Solution, solve_continuous, \
    OPTIMAL, INFEASIBLE, UNBOUNDED
from .errors import DimensionMismatch, EmptyCoalition, InfeasibleModel, \
    ModeMismatch, SolverFailure, UnboundedModel
from .model import Coalition, DispatchSchedule, Scenario, evaluate_payoff
from .uncertainty import effective_budget


class DispatchMode(str, Enum):
    """Case I / II / III operating regimes.

    ISOLATED: each prosumer alone (singletons only).
    ELECTRICITY_ONLY: coalition trading without short-term data; the
    uncertainty set is the per-prosumer boxes by default, or the historical
    ellipsoid at budget k_h when the scenario config selects it.
    JOINT_DATA: coalition trading with the budget reduced by the members'
    data contributions.
    """

    ISOLATED = "isolated"
    ELECTRICITY_ONLY = "electricity_only"
    JOINT_DATA = "joint_data"


class CoalitionSet:
    """The uncertainty set a coalition faces under a dispatch mode.

    Exposes per-period support values of the member-masked ones pattern and
    boundary sampling of member-dimension deviations.
    """

    def __init__(self, scenario: Scenario, coalition: Coalition, mode: DispatchMode):
        self.scenario = scenario
        self.coalition = coalition
        self.mode = mode
        owners = scenario.drg_owners()
        self.member_dims = [j for j, owner in enumerate(owners) if owner in coalition]
        unc = scenario.uncertainty
        pref = scenario.config.get("electricity_set", "box")
        has_ellipsoid = getattr(unc, "kind", None) == "ellipsoid"
        if mode == DispatchMode.JOINT_DATA and has_ellipsoid:
            self.kind = "ellipsoid"
            self.budget = effective_budget(scenario.contributions, coalition)
            self.label = f"ellipsoid[r(C)={self.budget:.6g}]"
        elif mode != DispatchMode.JOINT_DATA and has_ellipsoid and pref == "historical":
            self.kind = "ellipsoid"
            self.budget = scenario.contributions.k_h
            self.label = f"ellipsoid[k_h={self.budget:.6g}]"
        else:
            self.kind = "box"
            self.budget = None
            self.label = "box"

    @property
    def n_member_dims(self) -> int:
        return len(self.member_dims)

    def _pattern(self, t: int) -> np.ndarray:
        unc = self.scenario.uncertainty
        W = self.scenario.n_drg
        if unc.coupling == "joint":
            a = np.zeros(self.scenario.horizon * W)
            for j in self.member_dims:
                a[t * W + j] = 1.0
        else:
            a = np.zeros(W)
            a[self.member_dims] = 1.0
        return a

    def supports(self) -> tuple[np.ndarray, np.ndarray]:
        """(s_plus, s_minus): worst-case +/- total member deviation per period."""
        T = self.scenario.horizon
        s_plus = np.zeros(T)
        s_minus = np.zeros(T)
        if not self.member_dims:
            return s_plus, s_minus
        if self.kind == "box":
            drgs = self.scenario.drg_specs()
            width = sum(drgs[j].dpw_max for j in self.member_dims)
            return width.copy(), width.copy()
        unc = self.scenario.uncertainty
        for t in range(T):
            a = self._pattern(t)
            s_plus[t] = unc.support(t, a, self.budget)
            s_minus[t] = unc.support(t, -a, self.budget)
        return s_plus, s_minus

    def sample_member_deviations(self, n: int, seed: int) -> np.ndarray:
        """Boundary samples of member-DRG deviations, shape (n, T, k)."""
        from .uncertainty import sample_ellipsoid

        T = self.scenario.horizon
        k = self.n_member_dims
        out = np.zeros((n, T, k))
        if k == 0:
            return out
        rng = np.random.default_rng(seed)
        if self.kind == "box":
            drgs = self.scenario.drg_specs()
            widths = np.stack([drgs[j].dpw_max for j in self.member_dims], axis=1)  # (T, k)
            signs = rng.choice([-1.0, 1.0], size=(n, T, k))
            return signs * widths[None, :, :]
        unc = self.scenario.uncertainty
        if unc.coupling == "joint":
            pts = sample_ellipsoid(unc.ellipsoid(0, self.budget), n,
                                   seed=int(rng.integers(2**31)))
            W = self.scenario.n_drg
            cube = pts.reshape(n, T, W)
            return cube[:, :, self.member_dims]
        for t in range(T):
            pts = sample_ellipsoid(unc.ellipsoid(t, self.budget), n,
                                   seed=int(rng.integers(2**31)))
            out[:, t, :] = pts[:, self.member_dims]
        return out


@dataclass
class RobustCounterpart:
    """Conic program for one coalition plus the map back to schedule fields."""

    program: ConicProgram
    vmap: dict
    coalition: Coalition
    mode: DispatchMode
    s_plus: np.ndarray
    s_minus: np.ndarray
    set_label: str


# row groups used by the infeasibility diagnosis, in relaxation order
_GROUP_ROBUST = "reserve adequacy (robust support rows)"
_GROUP_HEADROOM = "reserve capacity (load/MT headroom rows)"
_GROUP_BALANCE = "power balance"


def build_counterpart(s: Scenario, coalition: Coalition, mode: DispatchMode,
                      skip_groups: frozenset = frozenset()) -> RobustCounterpart:
    """Assemble the coalition dispatch SOCP.

    Objective terms, balance restricted to members, headroom rows, the
    affine-share budget row, and one linear robust row per reserve direction
    and period using the support values of the coalition's set.
    Maximization is expressed as minimization of the negated payoff.
    """
    s.require_valid()
    if len(coalition) == 0:
        raise EmptyCoalition("coalition must have at least one member")
    if mode == DispatchMode.ISOLATED and len(coalition) != 1:
        raise ModeMismatch("isolated mode accepts only singleton coalitions")

    cset = CoalitionSet(s, coalition, mode)
    s_plus, s_minus = cset.supports()
    T = s.horizon
    tar = s.tariff
    p = ConicProgram()
    vmap: dict = {"pd0": {}, "ps": {}, "pb": {}, "rd_up": {}, "rd_dw": {},
                  "rm_up": {}, "rm_dw": {}, "pg0": {}, "rg_up": {}, "rg_dw": {},
                  "gamma_d": {}, "gamma_m": {}, "gamma_g": {}}
    half = None

    def get_half():
        nonlocal half
        if half is None:
            half = p.add_var(lb=0.5, ub=0.5, name="half")
        return half

    for i in coalition:
        pro = s.prosumers[i]
        cap = pro.exchange_cap if pro.exchange_cap is not None else np.inf
        vmap["gamma_d"][i] = p.add_var(lb=0.0, ub=1.0, name=f"gd[{i}]")
        vmap["gamma_m"][i] = p.add_var(lb=0.0, ub=1.0, name=f"gm[{i}]")
        for m in range(len(pro.machines)):
            vmap["gamma_g"][i, m] = p.add_var(lb=0.0, ub=1.0, name=f"gg[{i},{m}]")
        for t in range(T):
            vmap["pd0"][i, t] = p.add_var(lb=0.0, ub=pro.pd_max[t],
                                          name=f"pd0[{i},{t}]", obj=-pro.lam[t])
            vmap["ps"][i, t] = p.add_var(lb=0.0, ub=cap, name=f"ps[{i},{t}]",
                                         obj=-tar.pi_sell[t])
            vmap["pb"][i, t] = p.add_var(lb=0.0, ub=cap, name=f"pb[{i},{t}]",
                                         obj=tar.pi_buy[t])
            vmap["rd_up"][i, t] = p.add_var(lb=0.0, name=f"rdup[{i},{t}]",
                                            obj=pro.pi_d_up[t])
            vmap["rd_dw"][i, t] = p.add_var(lb=0.0, name=f"rddw[{i},{t}]",
                                            obj=pro.pi_d_dw[t])
            vmap["rm_up"][i, t] = p.add_var(lb=0.0, name=f"rmup[{i},{t}]",
                                            obj=tar.pi_m_up[t])
            vmap["rm_dw"][i, t] = p.add_var(lb=0.0, name=f"rmdw[{i},{t}]",
                                            obj=tar.pi_m_dw[t])
            if pro.beta[t] > 0:
                u = p.add_var(lb=0.0, name=f"ud[{i},{t}]", obj=pro.beta[t])
                p.add_rsoc(u, get_half(), [vmap["pd0"][i, t]])
            for m, mach in enumerate(pro.machines):
                vmap["pg0"][i, m, t] = p.add_var(lb=0.0, ub=mach.pg_max,
                                                 name=f"pg0[{i},{m},{t}]", obj=mach.b)
                vmap["rg_up"][i, m, t] = p.add_var(lb=0.0, name=f"rgup[{i},{m},{t}]",
                                                   obj=mach.pi_g_up[t])
                vmap["rg_dw"][i, m, t] = p.add_var(lb=0.0, name=f"rgdw[{i},{m},{t}]",
                                                   obj=mach.pi_g_dw[t])
                p.obj_const += mach.c
                if mach.a > 0:
                    u = p.add_var(lb=0.0, name=f"ug[{i},{m},{t}]", obj=mach.a)
                    p.add_rsoc(u, get_half(), [vmap["pg0"][i, m, t]])

    # power balance per period over members (Eq. 9 scope)
    if _GROUP_BALANCE not in skip_groups:
        for t in range(T):
            coeffs: dict[int, float] = {}
            rhs = 0.0
            for i in coalition:
                pro = s.prosumers[i]
                coeffs[vmap["pd0"][i, t]] = 1.0
                coeffs[vmap["ps"][i, t]] = 1.0
                coeffs[vmap["pb"][i, t]] = -1.0
                for m in range(len(pro.machines)):
                    coeffs[vmap["pg0"][i, m, t]] = -1.0
                rhs += sum(d.pw0[t] for d in pro.drgs)
            p.add_eq(coeffs, rhs)

    # load and MT headroom while providing reserve
    if _GROUP_HEADROOM not in skip_groups:
        for i in coalition:
            pro = s.prosumers[i]
            for t in range(T):
                p.add_ineq({vmap["pd0"][i, t]: 1.0, vmap["rd_up"][i, t]: 1.0},
                           pro.pd_max[t])
                p.add_ineq({vmap["pd0"][i, t]: -1.0, vmap["rd_dw"][i, t]: 1.0},
                           -pro.pd_min[t])
                for m, mach in enumerate(pro.machines):
                    p.add_ineq({vmap["pg0"][i, m, t]: 1.0,
                                vmap["rg_up"][i, m, t]: 1.0}, mach.pg_max)
                    p.add_ineq({vmap["pg0"][i, m, t]: -1.0,
                                vmap["rg_dw"][i, m, t]: 1.0}, 0.0)

    # affine shares sum to one over members
    coeffs = {vmap["gamma_d"][i]: 1.0 for i in coalition}
    for i in coalition:
        coeffs[vmap["gamma_m"][i]] = 1.0
        for m in range(len(s.prosumers[i].machines)):
            coeffs[vmap["gamma_g"][i, m]] = 1.0
    p.add_eq(coeffs, 1.0)

    # robust reserve rows: share * support <= reserve, per direction and period
    if _GROUP_ROBUST not in skip_groups:
        for t in range(T):
            sp, sm = s_plus[t], s_minus[t]
            if sp == 0.0 and sm == 0.0:
                continue
            for i in coalition:
                pro = s.prosumers[i]
                p.add_ineq({vmap["gamma_d"][i]: sp, vmap["rd_up"][i, t]: -1.0}, 0.0)
                p.add_ineq({vmap["gamma_d"][i]: sm, vmap["rd_dw"][i, t]: -1.0}, 0.0)
                p.add_ineq({vmap["gamma_m"][i]: sp, vmap["rm_dw"][i, t]: -1.0}, 0.0)
                p.add_ineq({vmap["gamma_m"][i]: sm, vmap["rm_up"][i, t]: -1.0}, 0.0)
                for m in range(len(pro.machines)):
                    p.add_ineq({vmap["gamma_g"][i, m]: sp,
                                vmap["rg_dw"][i, m, t]: -1.0}, 0.0)
                    p.add_ineq({vmap["gamma_g"][i, m]: sm,
                                vmap["rg_up"][i, m, t]: -1.0}, 0.0)

    return RobustCounterpart(program=p, vmap=vmap, coalition=coalition, mode=mode,
                             s_plus=s_plus, s_minus=s_minus, set_label=cset.label)


def extract_schedule(s: Scenario, rc: RobustCounterpart, x: np.ndarray) -> DispatchSchedule:
    sched = DispatchSchedule.zeros(s, rc.coalition)
    pd0 = np.array(sched.pd0)
    ps = np.array(sched.ps)
    pb = np.array(sched.pb)
    rd_up = np.array(sched.rd_up)
    rd_dw = np.array(sched.rd_dw)
    rm_up = np.array(sched.rm_up)
    rm_dw = np.array(sched.rm_dw)
    gamma_d = np.array(sched.gamma_d)
    gamma_m = np.array(sched.gamma_m)
    pg0 = [np.array(a) for a in sched.pg0]
    rg_up = [np.array(a) for a in sched.rg_up]
    rg_dw = [np.array(a) for a in sched.rg_dw]
    gamma_g = [np.array(a) for a in sched.gamma_g]
    clip = lambda v: 0.0 if abs(v) < 1e-12 else v
    for i in rc.coalition:
        gamma_d[i] = clip(x[rc.vmap["gamma_d"][i]])
        gamma_m[i] = clip(x[rc.vmap["gamma_m"][i]])
        for m in range(len(s.prosumers[i].machines)):
            gamma_g[i][m] = clip(x[rc.vmap["gamma_g"][i, m]])
        for t in range(s.horizon):
            pd0[i, t] = clip(x[rc.vmap["pd0"][i, t]])
            ps[i, t] = clip(x[rc.vmap["ps"][i, t]])
            pb[i, t] = clip(x[rc.vmap["pb"][i, t]])
            rd_up[i, t] = clip(x[rc.vmap["rd_up"][i, t]])
            rd_dw[i, t] = clip(x[rc.vmap["rd_dw"][i, t]])
            rm_up[i, t] = clip(x[rc.vmap["rm_up"][i, t]])
            rm_dw[i, t] = clip(x[rc.vmap["rm_dw"][i, t]])
            for m in range(len(s.prosumers[i].machines)):
                pg0[i][m, t] = clip(x[rc.vmap["pg0"][i, m, t]])
                rg_up[i][m, t] = clip(x[rc.vmap["rg_up"][i, m, t]])
                rg_dw[i][m, t] = clip(x[rc.vmap["rg_dw"][i, m, t]])
    return DispatchSchedule(
        coalition=rc.coalition, pd0=pd0, ps=ps, pb=pb, rd_up=rd_up, rd_dw=rd_dw,
        rm_up=rm_up, rm_dw=rm_dw, pg0=tuple(pg0), rg_up=tuple(rg_up),
        rg_dw=tuple(rg_dw), gamma_d=gamma_d, gamma_m=gamma_m, gamma_g=tuple(gamma_g),
    )


@dataclass
class CoalitionValue:
    coalition: Coalition
    value: float
    schedule: Optional[DispatchSchedule]
    mode: DispatchMode
    status: str = OPTIMAL
    iterations: int = 0
    wall_time: float = 0.0
    set_label: str = ""


def _diagnose_infeasibility(s: Scenario, coalition: Coalition, mode: DispatchMode,
                            cfg: SolverConfig, backend) -> str:
    relax_order = [_GROUP_ROBUST, _GROUP_HEADROOM, _GROUP_BALANCE]
    dropped: list[str] = []
    for group in relax_order:
        dropped.append(group)
        rc = build_counterpart(s, coalition, mode, skip_groups=frozenset(dropped))
        sol = solve_continuous(rc.program, cfg, backend)
        if sol.status == OPTIMAL:
            return group
    return "unknown (model infeasible even without balance rows)"


def solve_dispatch(s: Scenario, coalition: Coalition, mode: DispatchMode,
                   cfg: Optional[SolverConfig] = None, backend=None) -> CoalitionValue:
    """Optimal robust dispatch and payoff U(C) for one coalition."""
    cfg = cfg or SolverConfig()
    t0 = time.perf_counter()
    rc = build_counterpart(s, coalition, mode)
    sol = solve_continuous(rc.program, cfg, backend)
    wall = time.perf_counter() - t0
    if sol.status == INFEASIBLE:
        culprit = _diagnose_infeasibility(s, coalition, mode, cfg, backend)
        raise InfeasibleModel(
            f"dispatch infeasible for {coalition}; first relaxation restoring "
            f"feasibility: {culprit}", solution=sol)
    if sol.status == UNBOUNDED:
        raise UnboundedModel(
            f"dispatch unbounded for {coalition}; check tariffs and caps", solution=sol)
    if sol.status != OPTIMAL:
        raise SolverFailure(f"dispatch solve failed: {sol.status}", solution=sol)
    sched = extract_schedule(s, rc, sol.x)
    return CoalitionValue(
        coalition=coalition, value=-sol.objective, schedule=sched, mode=mode,
        status=sol.status, iterations=sol.stats.get("iterations", 0),
        wall_time=wall, set_label=rc.set_label,
    )


class ValueCache:
    """Memoized characteristic function, safe for concurrent access.

    Keys are (scenario content hash, coalition bitmask, mode); the empty
    coalition has value 0 by convention.
    """

    def __init__(self):
        self._store: dict = {}
        self._lock = threading.Lock()
        self.misses = 0

    def value(self, s: Scenario, coalition: Coalition, mode: DispatchMode,
              cfg: Optional[SolverConfig] = None, backend=None) -> CoalitionValue:
        if len(coalition) == 0:
            return CoalitionValue(coalition=coalition, value=0.0, schedule=None,
                                  mode=mode, status=OPTIMAL)
        key = (s.content_hash(), coalition.mask, mode)
        with self._lock:
            hit = self._store.get(key)
        if hit is not None:
            return hit
        cv = solve_dispatch(s, coalition, mode, cfg, backend)
        with self._lock:
            self.misses += 1
            self._store.setdefault(key, cv)
            return self._store[key]


_global_cache = ValueCache()


def characteristic_value(s: Scenario, coalition: Coalition, mode: DispatchMode,
                         cfg: Optional[SolverConfig] = None, backend=None,
                         cache: Optional[ValueCache] = None) -> CoalitionValue:
    """Memoizing wrapper over solve_dispatch; v(empty) = 0."""
    cache = cache or _global_cache
    return cache.value(s, coalition, mode, cfg, backend)


def recourse_response(sched: DispatchSchedule, deviations: np.ndarray,
                      ) -> tuple[np.ndarray, list[np.ndarray], np.ndarray]:
    """Affine recourse for given member-DRG deviations.

    deviations: (T, k) per-period member-DRG deviations (k = member DRG
    count; a 1-D array is accepted when k == 1).  Returns (rd, rg, rm) where
    rd[i, t] is the load increase, rg[i][m, t] the MT back-off and rm[i, t]
    the operator absorption, all proportional to the period total via the
    schedule's shares.
    """
    dev = np.asarray(deviations, dtype=float)
    T = sched.pd0.shape[1]
    if dev.ndim == 1:
        dev = dev[:, None]
    if dev.shape[0] != T:
        raise DimensionMismatch(f"deviation rows {dev.shape[0]} != horizon {T}")
    totals = dev.sum(axis=1)
    rd = sched.gamma_d[:, None] * totals[None, :]
    rm = sched.gamma_m[:, None] * totals[None, :]
    rg = [g[:, None] * totals[None, :] for g in sched.gamma_g]
    return rd, rg, rm


@dataclass
class RobustnessReport:
    n_samples: int
    n_violations: int
    max_violation: float
    by_class: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.n_violations == 0


def verify_robust_feasibility(sched: DispatchSchedule, s: Scenario,
                              coalition: Coalition, mode: DispatchMode,
                              n_samples: int = 10_000, seed: int = 0,
                              tol: float = 1e-6) -> RobustnessReport:
    """Sample boundary deviations and check the recourse stays within the
    procured reserves (report-only)."""
    cset = CoalitionSet(s, coalition, mode)
    k = cset.n_member_dims
    if k == 0:
        return RobustnessReport(n_samples=n_samples, n_violations=0, max_violation=0.0)

    dev = cset.sample_member_deviations(n_samples, seed)   # (n, T, k)
    totals = dev.sum(axis=2)                               # (n, T)
    by_class: dict[str, float] = {}
    viol = np.zeros(totals.shape)

    def track(cls: str, excess: np.ndarray):
        nonlocal viol
        by_class[cls] = max(by_class.get(cls, 0.0), float(excess.max(initial=0.0)))
        viol = np.maximum(viol, excess)

    for i in coalition:
        rd = sched.gamma_d[i] * totals
        track("load_up", rd - sched.rd_up[i][None, :])
        track("load_dw", -rd - sched.rd_dw[i][None, :])
        rm = sched.gamma_m[i] * totals
        track("operator_dw", rm - sched.rm_dw[i][None, :])
        track("operator_up", -rm - sched.rm_up[i][None, :])
        for m in range(len(s.prosumers[i].machines)):
            rg = sched.gamma_g[i][m] * totals
            track("machine_dw", rg - sched.rg_dw[i][m][None, :])
            track("machine_up", -rg - sched.rg_up[i][m][None, :])

    share_sum = sched.gamma_d[list(coalition)].sum() + sched.gamma_m[list(coalition)].sum()
    share_sum += sum(sched.gamma_g[i].sum() for i in coalition)
    balance_gap = np.abs(totals * (share_sum - 1.0))
    track("recourse_balance", balance_gap)

    n_violations = int((viol > tol).any(axis=1).sum())
    return RobustnessReport(
        n_samples=n_samples, n_violations=n_violations,
        max_violation=float(viol.max(initial=0.0)), by_class=by_class,
    )
