"""Domain types for market scenarios, coalitions and dispatch schedules.

Everything here is plain data plus pure arithmetic: payoff evaluation of a
fixed schedule and coalition enumeration.  No optimization happens in this
module.  All container types freeze their numpy arrays after construction so
instances can be shared across threads.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .errors import DimensionMismatch, ScenarioValidationError, TooManyPlayers

MAX_ENUMERABLE_PLAYERS = 20


def _freeze(a, shape=None) -> np.ndarray:
    out = np.array(a, dtype=float)
    if shape is not None and out.shape != shape:
        raise DimensionMismatch(f"expected shape {shape}, got {out.shape}")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class TimeGrid:
    """Dispatch horizon: ``horizon`` periods of ``period_hours`` each.

    Prices are quoted per MWh / per MW for one period; with the default
    1-hour period, energy and power coincide numerically.
    """

    horizon: int
    period_hours: float = 1.0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass(frozen=True, eq=False)
class MachineSpec:
    """Microturbine with quadratic per-period cost a*p^2 + b*p + c.

    The constant term c is incurred every period: there is no commitment
    variable in this market model.
    """

    pg_max: float
    a: float
    b: float
    c: float
    pi_g_up: np.ndarray
    pi_g_dw: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pi_g_up", _freeze(self.pi_g_up))
        object.__setattr__(self, "pi_g_dw", _freeze(self.pi_g_dw))


@dataclass(frozen=True, eq=False)
class DrgSpec:
    """Renewable generator: per-period forecast and box half-width."""

    pw0: np.ndarray
    dpw_max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pw0", _freeze(self.pw0))
        object.__setattr__(self, "dpw_max", _freeze(self.dpw_max))


@dataclass(frozen=True, eq=False)
class ProsumerSpec:
    """One market participant: flexible load, optional MTs and DRGs.

    lam/beta are the load-utility coefficients (utility = lam*p - beta*p^2,
    concave for beta >= 0).
    """

    id: str
    pd_min: np.ndarray
    pd_max: np.ndarray
    lam: np.ndarray
    beta: np.ndarray
    pi_d_up: np.ndarray
    pi_d_dw: np.ndarray
    machines: tuple[MachineSpec, ...] = ()
    drgs: tuple[DrgSpec, ...] = ()
    exchange_cap: Optional[float] = None

    def __post_init__(self):
        for name in ("pd_min", "pd_max", "lam", "beta", "pi_d_up", "pi_d_dw"):
            object.__setattr__(self, name, _freeze(getattr(self, name)))
        object.__setattr__(self, "machines", tuple(self.machines))
        object.__setattr__(self, "drgs", tuple(self.drgs))


@dataclass(frozen=True, eq=False)
class TariffSchedule:
    """Operator feed-in tariff: energy buy/sell and reserve prices per period."""

    pi_buy: np.ndarray
    pi_sell: np.ndarray
    pi_m_up: np.ndarray
    pi_m_dw: np.ndarray

    def __post_init__(self):
        for name in ("pi_buy", "pi_sell", "pi_m_up", "pi_m_dw"):
            object.__setattr__(self, name, _freeze(getattr(self, name)))

    def scaled(self, mult: float) -> "TariffSchedule":
        return TariffSchedule(
            pi_buy=self.pi_buy * mult,
            pi_sell=self.pi_sell * mult,
            pi_m_up=self.pi_m_up * mult,
            pi_m_dw=self.pi_m_dw * mult,
        )


@dataclass(frozen=True, order=True)
class Coalition:
    """Subset of prosumer indices 0..n_players-1, stored as a bitmask."""

    mask: int
    n_players: int

    def __post_init__(self):
        if not 0 <= self.mask < (1 << self.n_players):
            raise ValueError(f"mask {self.mask} out of range for {self.n_players} players")

    @classmethod
    def of(cls, members, n_players: int) -> "Coalition":
        mask = 0
        for i in members:
            if not 0 <= i < n_players:
                raise ValueError(f"player index {i} out of range")
            mask |= 1 << i
        return cls(mask, n_players)

    @classmethod
    def grand(cls, n_players: int) -> "Coalition":
        return cls((1 << n_players) - 1, n_players)

    def members(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.n_players) if self.mask >> i & 1)

    def __contains__(self, i: int) -> bool:
        return bool(self.mask >> i & 1)

    def __len__(self) -> int:
        return int(self.mask).bit_count()

    def __iter__(self) -> Iterator[int]:
        return iter(self.members())

    @property
    def is_grand(self) -> bool:
        return self.mask == (1 << self.n_players) - 1

    @property
    def is_proper(self) -> bool:
        return 1 <= len(self) <= self.n_players - 1

    def issubset(self, other: "Coalition") -> bool:
        return self.mask & ~other.mask == 0

    def union(self, other: "Coalition") -> "Coalition":
        return Coalition(self.mask | other.mask, self.n_players)

    def add(self, i: int) -> "Coalition":
        return Coalition(self.mask | (1 << i), self.n_players)

    def __repr__(self):
        return f"Coalition({{{','.join(map(str, self.members()))}}}/{self.n_players})"


def enumerate_coalitions(n_players: int, proper_only: bool = False) -> Iterator[Coalition]:
    """Yield all subsets (or all proper subsets) in increasing bitmask order.

    Guarded at 2^20 subsets; larger games must use the constraint-generation
    path instead of enumeration.
    """
    if n_players > MAX_ENUMERABLE_PLAYERS:
        raise TooManyPlayers(
            f"{n_players} players exceed the enumeration guard of "
            f"{MAX_ENUMERABLE_PLAYERS}; use the Benders path"
        )
    full = 1 << n_players
    lo = 1 if proper_only else 0
    hi = full - 1 if proper_only else full
    for mask in range(lo, hi):
        yield Coalition(mask, n_players)


@dataclass
class ValidationIssue:
    code: str
    message: str
    fatal: bool = True


@dataclass
class ValidationReport:
    issues: list[ValidationIssue] = field(default_factory=list)

    def error(self, code: str, message: str):
        self.issues.append(ValidationIssue(code, message, fatal=True))

    def warn(self, code: str, message: str):
        self.issues.append(ValidationIssue(code, message, fatal=False))

    @property
    def ok(self) -> bool:
        return not any(i.fatal for i in self.issues)

    @property
    def warnings(self) -> list[ValidationIssue]:
        return [i for i in self.issues if not i.fatal]

    def describe(self) -> str:
        if not self.issues:
            return "ok"
        return "\n".join(
            f"  [{'ERROR' if i.fatal else 'warn'}] {i.code}: {i.message}" for i in self.issues
        )


@dataclass(frozen=True, eq=False)
class Scenario:
    """A full market instance.

    ``uncertainty`` is a set model from :mod:`coopmarket.uncertainty` (box or
    ellipsoid family), ``contributions`` a
    :class:`~coopmarket.uncertainty.DataContribution`.  ``config`` carries
    run defaults (see :mod:`coopmarket.scenario_io` for the schema).
    """

    name: str
    time: TimeGrid
    prosumers: tuple[ProsumerSpec, ...]
    tariff: TariffSchedule
    uncertainty: object
    contributions: object
    seed: int = 0
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "prosumers", tuple(self.prosumers))

    @property
    def n_players(self) -> int:
        return len(self.prosumers)

    @property
    def horizon(self) -> int:
        return self.time.horizon

    def drg_owners(self) -> list[int]:
        """Prosumer index owning each DRG dimension, in canonical order."""
        owners = []
        for i, p in enumerate(self.prosumers):
            owners.extend([i] * len(p.drgs))
        return owners

    def drg_specs(self) -> list[DrgSpec]:
        return [d for p in self.prosumers for d in p.drgs]

    @property
    def n_drg(self) -> int:
        return sum(len(p.drgs) for p in self.prosumers)

    def content_hash(self) -> str:
        """Stable digest of the scenario content, used as a memoization key."""
        cached = getattr(self, "_content_hash", None)
        if cached is None:
            from .scenario_io import scenario_to_dict

            payload = json.dumps(scenario_to_dict(self), sort_keys=True)
            cached = hashlib.sha256(payload.encode()).hexdigest()
            object.__setattr__(self, "_content_hash", cached)
        return cached

    def validate(self) -> ValidationReport:
        return validate_scenario(self)

    def require_valid(self):
        report = self.validate()
        if not report.ok:
            raise ScenarioValidationError(report)


def _check_len(report: ValidationReport, arr: np.ndarray, T: int, what: str):
    if arr.shape != (T,):
        report.error("DimensionMismatch", f"{what} has shape {arr.shape}, expected ({T},)")


def validate_scenario(s: Scenario) -> ValidationReport:
    """Semantic checks over a scenario; every downstream operation rejects
    scenarios that fail them.

    Errors carry the spec'd codes: NonPositiveDefiniteShape, TariffArbitrage,
    EmptyBudget, BoundsInverted, DimensionMismatch.
    """
    report = ValidationReport()
    T = s.time.horizon

    for name in ("pi_buy", "pi_sell", "pi_m_up", "pi_m_dw"):
        arr = getattr(s.tariff, name)
        _check_len(report, arr, T, f"tariff.{name}")
        if arr.size and arr.min() < 0:
            report.error("NegativePrice", f"tariff.{name} has negative entries")
    if s.tariff.pi_buy.shape == (T,) and s.tariff.pi_sell.shape == (T,):
        if np.any(s.tariff.pi_sell > s.tariff.pi_buy + 1e-12):
            report.error(
                "TariffArbitrage",
                "pi_sell exceeds pi_buy in some period (round-trip arbitrage)",
            )

    if not s.prosumers:
        report.error("NoProsumers", "scenario has no prosumers")

    for i, p in enumerate(s.prosumers):
        tag = f"prosumer[{i}]({p.id})"
        for name in ("pd_min", "pd_max", "lam", "beta", "pi_d_up", "pi_d_dw"):
            _check_len(report, getattr(p, name), T, f"{tag}.{name}")
        if p.pd_min.shape == (T,) and p.pd_max.shape == (T,):
            if np.any(p.pd_min < -1e-12):
                report.error("BoundsInverted", f"{tag}: pd_min negative")
            if np.any(p.pd_min > p.pd_max + 1e-12):
                report.error("BoundsInverted", f"{tag}: pd_min > pd_max")
        if p.beta.shape == (T,) and np.any(p.beta < 0):
            report.error("NonConcaveUtility", f"{tag}: beta must be >= 0")
        for name in ("pi_d_up", "pi_d_dw"):
            arr = getattr(p, name)
            if arr.shape == (T,) and np.any(arr < 0):
                report.error("NegativePrice", f"{tag}.{name} negative")
        if p.exchange_cap is not None and p.exchange_cap < 0:
            report.error("BoundsInverted", f"{tag}: exchange_cap negative")
        for m, mach in enumerate(p.machines):
            mtag = f"{tag}.machine[{m}]"
            if mach.pg_max < 0:
                report.error("BoundsInverted", f"{mtag}: pg_max negative")
            if mach.a < 0:
                report.error("NonConvexCost", f"{mtag}: quadratic coefficient a must be >= 0")
            for name in ("pi_g_up", "pi_g_dw"):
                arr = getattr(mach, name)
                _check_len(report, arr, T, f"{mtag}.{name}")
                if arr.shape == (T,) and np.any(arr < 0):
                    report.error("NegativePrice", f"{mtag}.{name} negative")
        for w, drg in enumerate(p.drgs):
            wtag = f"{tag}.drg[{w}]"
            _check_len(report, drg.pw0, T, f"{wtag}.pw0")
            _check_len(report, drg.dpw_max, T, f"{wtag}.dpw_max")
            if drg.pw0.shape == (T,) and np.any(drg.pw0 < 0):
                report.error("BoundsInverted", f"{wtag}: negative forecast")
            if drg.dpw_max.shape == (T,) and np.any(drg.dpw_max < 0):
                report.error("BoundsInverted", f"{wtag}: negative box half-width")

    if s.uncertainty is not None:
        s.uncertainty.validate_into(report, n_dims=s.n_drg, horizon=T)
    if s.contributions is not None:
        s.contributions.validate_into(report, n_players=s.n_players)
    if getattr(s.uncertainty, "kind", None) == "ellipsoid" and s.contributions is None:
        report.error(
            "EmptyBudget",
            "ellipsoid uncertainty requires a contributions block (k_h sets the budget)",
        )

    return report


@dataclass(frozen=True, eq=False)
class DispatchSchedule:
    """Base-case dispatch, reserves and affine recourse shares for one coalition.

    Arrays cover all prosumers of the scenario; entries for non-members are
    zero.  Per-machine arrays are ragged: ``pg0[i]`` has shape (M_i, T).
    """

    coalition: Coalition
    pd0: np.ndarray          # (N, T)
    ps: np.ndarray           # (N, T) sold to operator
    pb: np.ndarray           # (N, T) bought from operator
    rd_up: np.ndarray        # (N, T)
    rd_dw: np.ndarray
    rm_up: np.ndarray
    rm_dw: np.ndarray
    pg0: tuple[np.ndarray, ...]    # per prosumer: (M_i, T)
    rg_up: tuple[np.ndarray, ...]
    rg_dw: tuple[np.ndarray, ...]
    gamma_d: np.ndarray      # (N,)
    gamma_m: np.ndarray      # (N,)
    gamma_g: tuple[np.ndarray, ...]  # per prosumer: (M_i,)

    def __post_init__(self):
        for name in ("pd0", "ps", "pb", "rd_up", "rd_dw", "rm_up", "rm_dw",
                     "gamma_d", "gamma_m"):
            object.__setattr__(self, name, _freeze(getattr(self, name)))
        for name in ("pg0", "rg_up", "rg_dw", "gamma_g"):
            object.__setattr__(self, name, tuple(_freeze(a) for a in getattr(self, name)))

    @classmethod
    def zeros(cls, scenario: Scenario, coalition: Coalition) -> "DispatchSchedule":
        N, T = scenario.n_players, scenario.horizon
        per_machine = lambda shape_t: tuple(
            np.zeros((len(p.machines),) + shape_t) for p in scenario.prosumers
        )
        return cls(
            coalition=coalition,
            pd0=np.zeros((N, T)), ps=np.zeros((N, T)), pb=np.zeros((N, T)),
            rd_up=np.zeros((N, T)), rd_dw=np.zeros((N, T)),
            rm_up=np.zeros((N, T)), rm_dw=np.zeros((N, T)),
            pg0=per_machine((T,)), rg_up=per_machine((T,)), rg_dw=per_machine((T,)),
            gamma_d=np.zeros(N), gamma_m=np.zeros(N), gamma_g=per_machine(()),
        )

    def replace(self, **kwargs) -> "DispatchSchedule":
        from dataclasses import replace as _replace

        return _replace(self, **kwargs)


def _prosumer_payoff(s: Scenario, i: int, sched: DispatchSchedule) -> np.ndarray:
    """Per-period payoff terms of one prosumer under a fixed schedule."""
    p = s.prosumers[i]
    tar = s.tariff
    val = tar.pi_sell * sched.ps[i] - tar.pi_buy * sched.pb[i]
    val += p.lam * sched.pd0[i] - p.beta * sched.pd0[i] ** 2
    for m, mach in enumerate(p.machines):
        pg = sched.pg0[i][m]
        val -= mach.a * pg**2 + mach.b * pg + mach.c
        val -= mach.pi_g_up * sched.rg_up[i][m] + mach.pi_g_dw * sched.rg_dw[i][m]
    val -= tar.pi_m_up * sched.rm_up[i] + tar.pi_m_dw * sched.rm_dw[i]
    val -= p.pi_d_up * sched.rd_up[i] + p.pi_d_dw * sched.rd_dw[i]
    return val


def evaluate_payoff(s: Scenario, coalition: Coalition, sched: DispatchSchedule) -> float:
    """Total payoff of ``coalition`` under a fixed schedule (pure arithmetic).

    Sum over members and periods of: energy exchange revenue, load utility,
    MT cost, and the three reserve procurement costs.  Additive over disjoint
    prosumer sets by construction.
    """
    if coalition.n_players != s.n_players:
        raise DimensionMismatch("coalition sized for a different scenario")
    if sched.pd0.shape != (s.n_players, s.horizon):
        raise DimensionMismatch(
            f"schedule shaped {sched.pd0.shape}, scenario needs {(s.n_players, s.horizon)}"
        )
    return float(sum(_prosumer_payoff(s, i, sched).sum() for i in coalition))


def per_prosumer_payoffs(s: Scenario, coalition: Coalition, sched: DispatchSchedule) -> np.ndarray:
    """Payoff split by member (zeros for non-members)."""
    out = np.zeros(s.n_players)
    for i in coalition:
        out[i] = _prosumer_payoff(s, i, sched).sum()
    return out
