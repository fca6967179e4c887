"""Batch experiments over synthetic course economies.

`run_experiment` sweeps a parameter grid — supply ratio, popular-course
count, mistake severity, answer-flip rate, query-price noise — and runs
every requested mechanism on the *same* instances in every cell, so a
difference between two rows is never an artifact of different economies.
It emits two deterministic CSVs: per-(cell, mechanism) summaries with
95% normal-approximation confidence intervals, and the raw per-run values
behind them, so external tooling can redo the statistics. Wall times are
kept out of both (they would break byte-for-byte reproducibility) and
travel separately.

Three companion studies answer questions a mechanism table cannot:

- `opt_in_study` prices one student's decision to answer comparison
  queries while everyone else's behavior is held fixed, as a price taker
  against a frozen price vector;
- `audit_fairness` checks a finished allocation against envy, maximin-share,
  and Pareto yardsticks (the latter two by exhaustive search on small
  economies);
- `query_algorithm_study` traces how fast each query generator accumulates
  ordinal training data and how often the student's answer surprises the
  model it was trained into.

All utilities reported anywhere in this module are *true* utilities —
reports and models decide allocations, never the scoreboard.
"""

from __future__ import annotations

import csv
import io
import itertools
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .catalog import indices_of, make_catalog, popcount
from .elicitation import ALGORITHMS, answer_query, new_session
from .market import Stage1Config, Valuer, demand, draw_budgets, stage1_search
from .mechanism import (
    CM_STAR,
    FRESH,
    MLCM,
    MLCM_PROJECTED,
    MechanismConfig,
    PerturbSpec,
    PriceSource,
    bootstrap_model,
    run_mechanism,
)
from .prefgen import GeneratorConfig, Instance, eval_true, generate_instance
from .reporting import PROFILE_6_POPULAR, PROFILE_9_POPULAR, report
from .valuemodel import TrainConfig

NOBODY_ELSE = "NOBODY_ELSE"
EVERYBODY_ELSE = "EVERYBODY_ELSE"

_MODEL_KINDS = (MLCM, MLCM_PROJECTED)

#: reporting-mistake calibrations by number of popular courses; economies
#: without a dedicated calibration borrow the 9-popular one
_PROFILES = {9: PROFILE_9_POPULAR, 6: PROFILE_6_POPULAR}


def mechanism_label(cfg: MechanismConfig) -> str:
    """Row label: the kind, plus query parametrization where it matters."""
    if cfg.kind in _MODEL_KINDS:
        return f"{cfg.kind}({cfg.query_algorithm},{cfg.n_queries})"
    return cfg.kind


@dataclass(frozen=True)
class ExperimentSpec:
    """A grid of economies crossed with a panel of mechanisms.

    Every cell (one combination of the list-valued axes) runs all
    mechanisms on instances seeded identically across cells: instance t
    always uses ``seed + t``. γ scales the mistake profile, ``p_ms`` sets
    the chance a comparison answer is flipped, and a non-None price noise
    perturbs the query-phase prices of model-based mechanisms only.
    """

    mechanisms: tuple[MechanismConfig, ...]
    supply_ratios: tuple[float, ...] = (1.25,)
    n_populars: tuple[int, ...] = (9,)
    gammas: tuple[float, ...] = (1.0,)
    p_ms: tuple[float, ...] = (0.0,)
    price_noises: tuple[PerturbSpec | None, ...] = (None,)
    n_instances: int = 50
    n_students: int = 30
    n_courses: int = 25
    max_courses: int = 5
    additive: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_instances < 1:
            raise ValueError("need at least one instance per cell")
        if not self.mechanisms:
            raise ValueError("need at least one mechanism")
        labels = [mechanism_label(c) for c in self.mechanisms]
        if len(set(labels)) != len(labels):
            raise ValueError(f"mechanism labels must be unique, got {labels}")
        if any(s is not None for s in self.price_noises):
            for c in self.mechanisms:
                if c.kind in _MODEL_KINDS and c.price_source.kind != FRESH:
                    raise ValueError(
                        "price-noise axis conflicts with an explicit price source"
                    )
        for axis in ("supply_ratios", "n_populars", "gammas", "p_ms"):
            if not getattr(self, axis):
                raise ValueError(f"{axis} must not be empty")


@dataclass(frozen=True)
class Cell:
    """One grid point; every mechanism row in it shares these knobs."""

    supply_ratio: float
    n_popular: int
    gamma: float
    p_m: float
    noise: PerturbSpec | None

    @property
    def noise_label(self) -> str:
        if self.noise is None:
            return "none"
        return f"{self.noise.kind}:{self.noise.scale:g}"


@dataclass
class RawRun:
    cell: Cell
    mechanism: str
    instance: int
    seed: int
    status: str  # "ok" or "error"
    avg_utility: float  # unnormalized mean true utility
    min_utility: float  # unnormalized worst-off true utility
    wall_s: float
    error: str = ""
    avg_norm: float = float("nan")  # filled once the cell divisor is known
    min_norm: float = float("nan")


@dataclass
class MetricsRow:
    """One summary line: a mechanism inside one grid cell.

    ``avg_utility`` and ``min_utility`` are normalized so the clairvoyant
    bound averages exactly 100 inside the cell; the divisor is the cell
    mean of its per-run average utility, for both columns. Wall time never
    enters the CSV.
    """

    supply_ratio: float
    n_popular: int
    gamma: float
    p_m: float
    price_noise: str
    mechanism: str
    n_runs: int
    n_failures: int
    avg_utility: float
    avg_ci95: float
    min_utility: float
    min_ci95: float
    wall_time_s: float


def _csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _f(x: float) -> str:
    return f"{x:.6f}"


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    rows: list[MetricsRow]
    raw: list[RawRun]
    ci_convention: str = "normal95"

    def metrics_csv(self) -> str:
        header = [
            "supply_ratio", "n_popular", "gamma", "p_m", "price_noise",
            "mechanism", "n_runs", "n_failures",
            "avg_utility", "avg_ci95", "min_utility", "min_ci95",
        ]
        return _csv(header, [
            [_f(r.supply_ratio), r.n_popular, _f(r.gamma), _f(r.p_m),
             r.price_noise, r.mechanism, r.n_runs, r.n_failures,
             _f(r.avg_utility), _f(r.avg_ci95), _f(r.min_utility), _f(r.min_ci95)]
            for r in self.rows
        ])

    def raw_csv(self) -> str:
        header = [
            "supply_ratio", "n_popular", "gamma", "p_m", "price_noise",
            "mechanism", "instance", "seed", "status",
            "avg_utility", "min_utility", "avg_norm", "min_norm", "error",
        ]
        return _csv(header, [
            [_f(r.cell.supply_ratio), r.cell.n_popular, _f(r.cell.gamma),
             _f(r.cell.p_m), r.cell.noise_label, r.mechanism, r.instance,
             r.seed, r.status, _f(r.avg_utility), _f(r.min_utility),
             _f(r.avg_norm), _f(r.min_norm), r.error]
            for r in self.raw
        ])

    def times(self) -> dict[str, float]:
        """Total seconds per summary row, keyed like the CSV rows."""
        out: dict[str, float] = {}
        for r in self.rows:
            key = (f"sr={r.supply_ratio:g}/pop={r.n_popular}/gamma={r.gamma:g}"
                   f"/pm={r.p_m:g}/noise={r.price_noise}/{r.mechanism}")
            out[key] = round(r.wall_time_s, 3)
        return out


def _profile_for(cell: Cell):
    base = _PROFILES.get(cell.n_popular, PROFILE_9_POPULAR)
    return replace(base, gamma=cell.gamma, p_m=cell.p_m)


def _build_instance(spec: ExperimentSpec, cell: Cell, inst_seed: int) -> Instance:
    cat = make_catalog(
        m=spec.n_courses,
        n_students=spec.n_students,
        max_courses=spec.max_courses,
        supply_ratio=cell.supply_ratio,
        n_popular=cell.n_popular,
    )
    defaults = GeneratorConfig(seed=0)
    # favorites and synergy centers scale down with the popular pool so
    # small grids stay within the generator's n_centers <= n_favorites
    # <= n_popular ordering
    n_fav = min(defaults.n_favorites, cell.n_popular)
    gen = GeneratorConfig(
        n_popular=cell.n_popular,
        n_favorites=n_fav,
        n_centers=min(defaults.n_centers, n_fav),
        max_courses=spec.max_courses,
        additive_mode=spec.additive,
        seed=inst_seed,
    )
    return Instance(cat, generate_instance(gen, cat, spec.n_students))


def _cell_configs(
    spec: ExperimentSpec, cell: Cell, inst_seed: int
) -> list[tuple[str, MechanismConfig]]:
    """The per-instance mechanism configs for one cell, anchor first.

    The clairvoyant bound is always present — it is the normalization
    divisor — even when the caller did not ask for it.
    """
    prof = _profile_for(cell)
    templates = list(spec.mechanisms)
    if not any(c.kind == CM_STAR for c in templates):
        templates.insert(0, MechanismConfig(CM_STAR))
    out = []
    for c in templates:
        changes: dict = {"seed": inst_seed, "mistakes": prof}
        if (
            cell.noise is not None
            and c.kind in _MODEL_KINDS
            and c.price_source.kind == FRESH
        ):
            changes["price_source"] = PriceSource.perturbed(
                replace(cell.noise, seed=inst_seed)
            )
        out.append((mechanism_label(c), replace(c, **changes)))
    return out


def build_instances(spec: ExperimentSpec, cell: Cell | None = None) -> list[Instance]:
    """The instances a spec would run in one cell (its first, by default).

    Instance seeds depend only on ``spec.seed`` and the instance index, so
    every cell — and every caller that wants to study the same economies
    outside `run_experiment` — sees the same markets.
    """
    if cell is None:
        cell = Cell(
            spec.supply_ratios[0], spec.n_populars[0], spec.gammas[0],
            spec.p_ms[0], spec.price_noises[0],
        )
    return [
        _build_instance(spec, cell, spec.seed + t)
        for t in range(spec.n_instances)
    ]


def run_experiment(spec: ExperimentSpec) -> ExperimentResult:
    """Run the whole grid; individual run failures are recorded, not fatal.

    Within a cell, every mechanism sees the same instances (seeds
    ``spec.seed + t``), and across cells instance t is regenerated from the
    same seed, so any two rows anywhere in the table are paired samples.
    """
    cells = [
        Cell(*combo)
        for combo in itertools.product(
            spec.supply_ratios, spec.n_populars, spec.gammas,
            spec.p_ms, spec.price_noises,
        )
    ]
    raw: list[RawRun] = []
    rows: list[MetricsRow] = []
    for cell in cells:
        cell_raw: dict[str, list[RawRun]] = {}
        labels_in_order: list[str] = []
        for t in range(spec.n_instances):
            inst_seed = spec.seed + t
            inst = _build_instance(spec, cell, inst_seed)
            for label, cfg in _cell_configs(spec, cell, inst_seed):
                if label not in cell_raw:
                    cell_raw[label] = []
                    labels_in_order.append(label)
                t0 = time.perf_counter()
                try:
                    res = run_mechanism(inst, cfg)
                    run = RawRun(
                        cell, label, t, inst_seed, "ok",
                        float(res.utilities.mean()), float(res.utilities.min()),
                        time.perf_counter() - t0,
                    )
                except Exception as exc:  # keep the batch alive
                    run = RawRun(
                        cell, label, t, inst_seed, "error",
                        float("nan"), float("nan"),
                        time.perf_counter() - t0, error=f"{type(exc).__name__}: {exc}",
                    )
                cell_raw[label].append(run)
                raw.append(run)

        star = [r for r in cell_raw.get(CM_STAR, []) if r.status == "ok"]
        divisor = float(np.mean([r.avg_utility for r in star])) if star else float("nan")
        for label in labels_in_order:
            runs = cell_raw[label]
            ok = [r for r in runs if r.status == "ok"]
            for r in ok:
                r.avg_norm = 100.0 * r.avg_utility / divisor
                r.min_norm = 100.0 * r.min_utility / divisor
            avgs = np.array([r.avg_norm for r in ok])
            mins = np.array([r.min_norm for r in ok])

            def ci(v: np.ndarray) -> float:
                if v.size < 2:
                    return 0.0
                return float(1.96 * v.std(ddof=1) / np.sqrt(v.size))

            rows.append(MetricsRow(
                supply_ratio=cell.supply_ratio,
                n_popular=cell.n_popular,
                gamma=cell.gamma,
                p_m=cell.p_m,
                price_noise=cell.noise_label,
                mechanism=label,
                n_runs=len(ok),
                n_failures=len(runs) - len(ok),
                avg_utility=float(avgs.mean()) if ok else float("nan"),
                avg_ci95=ci(avgs),
                min_utility=float(mins.mean()) if ok else float("nan"),
                min_ci95=ci(mins),
                wall_time_s=sum(r.wall_s for r in runs),
            ))
    return ExperimentResult(spec=spec, rows=rows, raw=raw)


# -- the opt-in decision ----------------------------------------------------

MLCM_PREF = "MLCM"
CM_PREF = "CM"
INDIFFERENT = "INDIFFERENT"


@dataclass
class OptInRow:
    cell: Cell
    instance: int
    student: int
    u_opt_out: float
    u_opt_in: float
    preferred: str
    gain_pct: float


@dataclass
class OptInSummary:
    cell: Cell
    mode: str
    n_students: int
    pct_mlcm: float
    pct_cm: float
    pct_indifferent: float
    expected_gain_pct: float
    gain_if_mlcm_pct: float
    gain_if_cm_pct: float


@dataclass
class OptInResult:
    mode: str
    students: list[OptInRow]
    summaries: list[OptInSummary]

    def per_student_csv(self) -> str:
        header = ["supply_ratio", "n_popular", "gamma", "p_m", "instance",
                  "student", "u_opt_out", "u_opt_in", "preferred", "gain_pct"]
        return _csv(header, [
            [_f(r.cell.supply_ratio), r.cell.n_popular, _f(r.cell.gamma),
             _f(r.cell.p_m), r.instance, r.student,
             _f(r.u_opt_out), _f(r.u_opt_in), r.preferred, _f(r.gain_pct)]
            for r in self.students
        ])

    def summary_csv(self) -> str:
        header = ["supply_ratio", "n_popular", "gamma", "p_m", "mode",
                  "n_students", "pct_mlcm", "pct_cm", "pct_indifferent",
                  "expected_gain_pct", "gain_if_mlcm_pct", "gain_if_cm_pct"]
        return _csv(header, [
            [_f(s.cell.supply_ratio), s.cell.n_popular, _f(s.cell.gamma),
             _f(s.cell.p_m), s.mode, s.n_students, _f(s.pct_mlcm),
             _f(s.pct_cm), _f(s.pct_indifferent), _f(s.expected_gain_pct),
             _f(s.gain_if_mlcm_pct), _f(s.gain_if_cm_pct)]
            for s in self.summaries
        ])


def _gain_pct(u_in: float, u_out: float) -> float:
    """Relative gain in percent; a zero baseline counts as ±100 or 0."""
    if u_out > 0:
        return 100.0 * (u_in - u_out) / u_out
    if u_in == u_out:
        return 0.0
    return 100.0 if u_in > u_out else -100.0


def opt_in_study(spec: ExperimentSpec, mode: str) -> OptInResult:
    """How much a single student gains by answering comparison queries.

    The focal student is a price taker: prices are frozen at the stage-one
    vector of the world she is *not* part of changing — everyone on raw
    reports (``NOBODY_ELSE``) or everyone on query-refined models
    (``EVERYBODY_ELSE``) — and her two candidate schedules are her demand
    at those prices with and without her own model. Opting in while
    answering zero queries leaves her report untouched, so it never moves
    her schedule. Gains are relative percentages of her opt-out utility.

    The query parametrization (count, algorithm) comes from the first
    model-based mechanism in ``spec.mechanisms``; the price-noise axis is
    ignored — prices here are pinned by the mode, not by a noise model.
    """
    if mode not in (NOBODY_ELSE, EVERYBODY_ELSE):
        raise ValueError(f"unknown opt-in mode {mode!r}")
    template = next(
        (c for c in spec.mechanisms if c.kind in _MODEL_KINDS), None
    )
    if template is None:
        raise ValueError("spec needs a model-based mechanism to study opting in")
    tc = TrainConfig()
    n_q = template.n_queries

    students: list[OptInRow] = []
    summaries: list[OptInSummary] = []
    for sr, npop, gamma, p_m in itertools.product(
        spec.supply_ratios, spec.n_populars, spec.gammas, spec.p_ms
    ):
        cell = Cell(sr, npop, gamma, p_m, None)
        prof = _profile_for(cell)
        cell_rows: list[OptInRow] = []
        for t in range(spec.n_instances):
            inst_seed = spec.seed + t
            inst = _build_instance(spec, cell, inst_seed)
            n, m = inst.n, inst.catalog.m
            perms = [u.perm for u in inst.students]
            budgets = draw_budgets(n, beta=template.beta, seed=inst_seed)
            reports = [
                report(u, prof, seed=(inst_seed, i))
                for i, u in enumerate(inst.students)
            ]
            gui = [
                Valuer.from_gui(r, p, m) for r, p in zip(reports, perms)
            ]

            final_models: dict[int, object] = {}
            if mode == NOBODY_ELSE:
                p_hat, _, _ = stage1_search(
                    gui, budgets, inst.catalog, Stage1Config(seed=inst_seed)
                )
                query_prices = p_hat
            else:
                cards = {}
                for i in range(n):
                    final_models[i], cards[i] = bootstrap_model(
                        reports[i], perms[i], m, inst_seed, i, tc
                    )
                boot = [
                    Valuer.from_model(final_models[i], perms[i]) for i in range(n)
                ]
                p3, _, _ = stage1_search(
                    boot, budgets, inst.catalog, Stage1Config(seed=inst_seed)
                )
                if n_q > 0:
                    for i in range(n):
                        s = new_session(
                            final_models[i], cards[i], p3, float(budgets.b[i]),
                            perms[i], algorithm=template.query_algorithm,
                            cfg=tc, seed=(inst_seed, i, 3),
                        )
                        _drive(s, inst.students[i], prof.p_m, n_q)
                        final_models[i] = s.model
                refined = [
                    Valuer.from_model(final_models[i], perms[i]) for i in range(n)
                ]
                p_hat, _, _ = stage1_search(
                    refined, budgets, inst.catalog,
                    Stage1Config(seed=inst_seed, p0=tuple(p3)),
                )
                query_prices = p3

            a_out = demand(gui, p_hat, budgets)
            for i in range(n):
                u_out = eval_true(inst.students[i], int(a_out[i]))
                if n_q == 0:
                    u_in = u_out
                else:
                    if i not in final_models:
                        model, card = bootstrap_model(
                            reports[i], perms[i], m, inst_seed, i, tc
                        )
                        s = new_session(
                            model, card, query_prices, float(budgets.b[i]),
                            perms[i], algorithm=template.query_algorithm,
                            cfg=tc, seed=(inst_seed, i, 3),
                        )
                        _drive(s, inst.students[i], prof.p_m, n_q)
                        final_models[i] = s.model
                    mv = Valuer.from_model(final_models[i], perms[i])
                    a_in = demand([mv], p_hat, [float(budgets.b[i])])[0]
                    u_in = eval_true(inst.students[i], int(a_in))
                pref = (
                    MLCM_PREF if u_in > u_out
                    else CM_PREF if u_out > u_in
                    else INDIFFERENT
                )
                cell_rows.append(OptInRow(
                    cell, t, i, u_out, u_in, pref, _gain_pct(u_in, u_out)
                ))
        students.extend(cell_rows)

        gains = np.array([r.gain_pct for r in cell_rows])
        kinds = np.array([r.preferred for r in cell_rows])
        def share(k: str) -> float:
            return 100.0 * float((kinds == k).mean()) if cell_rows else 0.0
        def cond(k: str) -> float:
            sel = gains[kinds == k]
            return float(sel.mean()) if sel.size else 0.0
        summaries.append(OptInSummary(
            cell=cell, mode=mode, n_students=len(cell_rows),
            pct_mlcm=share(MLCM_PREF), pct_cm=share(CM_PREF),
            pct_indifferent=share(INDIFFERENT),
            expected_gain_pct=float(gains.mean()) if cell_rows else 0.0,
            gain_if_mlcm_pct=cond(MLCM_PREF), gain_if_cm_pct=cond(CM_PREF),
        ))
    return OptInResult(mode=mode, students=students, summaries=summaries)


def _drive(session, student, p_m: float, n_queries: int) -> None:
    for _ in range(n_queries):
        q = session.next_query()
        if q is None:
            break
        session.submit_answer(
            q, answer_query(student, session.model, q, session.rng, p_m)
        )


# -- fairness audits --------------------------------------------------------

_EXHAUSTIVE_M = 8
_EXHAUSTIVE_N = 3


@dataclass
class AuditReport:
    """What a finished allocation guarantees each student.

    ``envy_residual[i, j]`` is i's envy toward j after the most helpful
    single-course removal from j's schedule (never worse than the raw
    envy); the allocation is envy-bounded at ``eps`` when the largest
    residual is at most ``eps``. ``mms`` holds each student's exhaustive
    (n+1)-maximin-share value and ``pareto_ok`` reports whether no feasible
    allocation improves *every* student by more than ``eps``; both are
    None when skipped, with the reason recorded in ``skipped``.
    """

    eps: float
    n: int
    envy_raw: np.ndarray
    envy_residual: np.ndarray
    envy_bound: float
    envy_ok: bool
    mms: np.ndarray | None = None
    mms_ok: bool | None = None
    pareto_ok: bool | None = None
    pareto_witness: tuple[int, ...] | None = None
    skipped: dict[str, str] = field(default_factory=dict)


def _as_fn(u):
    return u if callable(u) else (lambda x, _u=u: eval_true(_u, x))


def _pack(slots: int, caps: tuple[int, ...], masks: list[int],
          memo: dict) -> bool:
    """Can `slots` schedules from `masks` coexist within seat capacities?"""
    if slots == 0:
        return True
    key = (slots, caps)
    if key in memo:
        return memo[key]
    ok = False
    for z in masks:
        nxt = list(caps)
        fits = True
        zz = z
        while zz:
            j = (zz & -zz).bit_length() - 1
            if nxt[j] == 0:
                fits = False
                break
            nxt[j] -= 1
            zz &= zz - 1
        if fits and _pack(slots - 1, tuple(nxt), masks, memo):
            ok = True
            break
    memo[key] = ok
    return ok


def _maximin_share(u, m: int, caps: tuple[int, ...], slots: int,
                   k_cap: int | None) -> float:
    """Exhaustive l-maximin share: the best worst schedule over all
    capacity-respecting splits into `slots` schedules."""
    limit = k_cap if k_cap is not None else m
    masks = [
        x for x in range(1 << m)
        if popcount(x) <= limit and all(caps[j] >= 1 for j in indices_of(x))
    ]
    vals = sorted({float(u(x)) for x in masks}, reverse=True)
    for v in vals:
        good = [x for x in masks if float(u(x)) >= v]
        if _pack(slots, caps, good, {}):
            return v
    return vals[-1]


def audit_fairness(
    a,
    utilities,
    eps: float,
    capacities=None,
    max_courses: int | None = None,
) -> AuditReport:
    """Audit an allocation against envy, maximin-share, and Pareto bounds.

    ``utilities`` may be callables (bitmask -> value) or generated student
    preferences. Envy runs at any size; the maximin and Pareto checks are
    exhaustive searches and run only for m <= 8 courses and n <= 3
    students (and need ``capacities``) — beyond that they are skipped and
    the reason recorded, never silently approximated.
    """
    alloc = [int(x) for x in a]
    fns = [_as_fn(u) for u in utilities]
    n = len(alloc)
    if len(fns) != n:
        raise ValueError("one utility per student required")
    if eps < 0:
        raise ValueError("eps must be nonnegative")

    own = np.array([fns[i](alloc[i]) for i in range(n)])
    envy_raw = np.zeros((n, n))
    envy_res = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            raw = fns[i](alloc[j]) - own[i]
            best = raw
            for g in indices_of(alloc[j]):
                best = min(best, fns[i](alloc[j] & ~(1 << g)) - own[i])
            envy_raw[i, j] = raw
            envy_res[i, j] = min(raw, best)
    envy_bound = float(max(0.0, envy_res.max())) if n > 1 else 0.0

    rpt = AuditReport(
        eps=eps, n=n, envy_raw=envy_raw, envy_residual=envy_res,
        envy_bound=envy_bound, envy_ok=bool(envy_bound <= eps),
    )

    if capacities is None:
        rpt.skipped["maximin"] = rpt.skipped["pareto"] = "no capacities supplied"
        return rpt
    caps = tuple(int(q) for q in capacities)
    m = len(caps)
    if m > _EXHAUSTIVE_M or n > _EXHAUSTIVE_N:
        reason = (
            f"exhaustive checks capped at m<={_EXHAUSTIVE_M}, "
            f"n<={_EXHAUSTIVE_N}; got m={m}, n={n}"
        )
        rpt.skipped["maximin"] = rpt.skipped["pareto"] = reason
        return rpt

    rpt.mms = np.array([
        _maximin_share(fns[i], m, caps, n + 1, max_courses) for i in range(n)
    ])
    rpt.mms_ok = bool(np.all(own >= rpt.mms - eps))

    limit = max_courses if max_courses is not None else m
    space = [x for x in range(1 << m) if popcount(x) <= limit]
    candidates = [
        [x for x in space if fns[i](x) > own[i] + eps] for i in range(n)
    ]
    rpt.pareto_ok = True
    if all(candidates):
        witness = _find_assignment(candidates, caps)
        if witness is not None:
            rpt.pareto_ok = False
            rpt.pareto_witness = witness
    return rpt


def _find_assignment(
    candidates: list[list[int]], caps: tuple[int, ...]
) -> tuple[int, ...] | None:
    """First feasible pick of one schedule per student within capacities."""
    n = len(candidates)
    chosen: list[int] = []

    def rec(i: int, left: tuple[int, ...]) -> bool:
        if i == n:
            return True
        for z in candidates[i]:
            nxt = list(left)
            fits = True
            for j in indices_of(z):
                if nxt[j] == 0:
                    fits = False
                    break
                nxt[j] -= 1
            if fits:
                chosen.append(z)
                if rec(i + 1, tuple(nxt)):
                    return True
                chosen.pop()
        return False

    return tuple(chosen) if rec(0, caps) else None


# -- query-generator diagnostics --------------------------------------------


@dataclass
class QueryStudyResult:
    """Per-query curves for each generator over a batch of students.

    ``pairs[alg][t-1]`` is the mean ordinal-dataset size after t answered
    queries, over the sessions still active at t; ``agreement[alg][t-1]``
    is the fraction of those answers matching what the model about to ask
    predicted (a model tie counts as agreement — the model is not wrong
    when it declines to predict).
    """

    n_queries: int
    algorithms: tuple[str, ...]
    pairs: dict[str, np.ndarray]
    agreement: dict[str, np.ndarray]
    counts: dict[str, np.ndarray]

    def to_csv(self) -> str:
        header = ["algorithm", "query_index", "mean_inferred_pairs",
                  "agreement_rate", "n_sessions"]
        rows = []
        for alg in self.algorithms:
            for t in range(self.n_queries):
                rows.append([
                    alg, t + 1, _f(self.pairs[alg][t]),
                    _f(self.agreement[alg][t]), int(self.counts[alg][t]),
                ])
        return _csv(header, rows)


def query_algorithm_study(
    instances: list[Instance],
    n_queries: int,
    algorithms: tuple[str, ...] = ALGORITHMS,
    profile=PROFILE_9_POPULAR,
    tc: TrainConfig | None = None,
    seed: int = 0,
) -> QueryStudyResult:
    """Drive every student of every instance through each query generator.

    All generators start from the same per-student bootstrap model and the
    same fixed prices (the stage-one vector for those models), so the
    curves differ only in which comparisons were asked. Per query index the
    study records the ordinal-dataset size the answers pin down and
    whether the answer agreed with the asking model's prediction.
    """
    if n_queries < 1:
        raise ValueError("need at least one query")
    tc = tc if tc is not None else TrainConfig()
    pair_sum = {a: np.zeros(n_queries) for a in algorithms}
    agree_sum = {a: np.zeros(n_queries) for a in algorithms}
    counts = {a: np.zeros(n_queries, dtype=np.int64) for a in algorithms}

    for idx, inst in enumerate(instances):
        inst_seed = seed + idx
        n, m = inst.n, inst.catalog.m
        perms = [u.perm for u in inst.students]
        budgets = draw_budgets(n, seed=inst_seed)
        reports = [
            report(u, profile, seed=(inst_seed, i))
            for i, u in enumerate(inst.students)
        ]
        models, cards = {}, {}
        for i in range(n):
            models[i], cards[i] = bootstrap_model(
                reports[i], perms[i], m, inst_seed, i, tc
            )
        boot = [Valuer.from_model(models[i], perms[i]) for i in range(n)]
        p3, _, _ = stage1_search(
            boot, budgets, inst.catalog, Stage1Config(seed=inst_seed)
        )
        for alg in algorithms:
            for i in range(n):
                s = new_session(
                    models[i], cards[i], p3, float(budgets.b[i]), perms[i],
                    algorithm=alg, cfg=tc, seed=(inst_seed, i, 3),
                )
                for t in range(n_queries):
                    q = s.next_query()
                    if q is None:
                        break
                    dm = s.model.value(q.left) - s.model.value(q.right)
                    pred = q.left if dm > 0 else q.right if dm < 0 else None
                    w = answer_query(
                        inst.students[i], s.model, q, s.rng, profile.p_m
                    )
                    s.submit_answer(q, w)
                    pair_sum[alg][t] += s.inferred_pairs()
                    agree_sum[alg][t] += 1.0 if pred is None or pred == w else 0.0
                    counts[alg][t] += 1

    pairs = {
        a: np.divide(pair_sum[a], counts[a], out=np.zeros(n_queries),
                     where=counts[a] > 0)
        for a in algorithms
    }
    agreement = {
        a: np.divide(agree_sum[a], counts[a], out=np.zeros(n_queries),
                     where=counts[a] > 0)
        for a in algorithms
    }
    return QueryStudyResult(
        n_queries=n_queries, algorithms=tuple(algorithms),
        pairs=pairs, agreement=agreement, counts=counts,
    )
