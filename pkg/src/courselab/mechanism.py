"""End-to-end allocation mechanisms over one synthetic economy.

Six mechanisms share budgets, reports, and stage seeds, so any two runs on
the same instance and seed differ only where the mechanisms genuinely
differ:

- ``CM``: students file a one-shot report through the reporting language
  (mistakes included) and the three-stage price search clears the market
  on those reports.
- ``CM_NO_MISTAKES``: same, but the reports are filed without errors.
- ``CM_STAR``: clairvoyant upper bound — the stages run directly on true
  utilities, skipping the reporting language altogether.
- ``MLCM``: reports are used to train one monotone value model per
  student, prices are found on those models, each opted-in student then
  answers comparison queries at those prices, and the stages run on the
  retrained models (opted-out students keep their raw report).
- ``MLCM_PROJECTED``: like MLCM, but after the queries each model is
  distilled back into the reporting language and the stages run on the
  distilled reports.
- ``RSD``: random serial dictatorship on the reports; no prices at all.

The elicitation phases follow a fixed seed-derivation scheme (documented
on `run_mechanism`) so that MLCM with zero queries and everyone opted out
degenerates to CM exactly, allocation for allocation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .catalog import Catalog
from .elicitation import ALGORITHMS, new_session, simulate_student
from .market import (
    BudgetAssignment,
    Stage1Config,
    Valuer,
    clearing_error,
    draw_budgets,
    rsd,
    stage1_search,
    stage2_remove_oversubscription,
    stage3_fill,
)
from .prefgen import Instance, eval_true
from .reporting import PROFILE_9_POPULAR, GuiReport, MistakeProfile, report
from .valuemodel import (
    TrainConfig,
    build_cardinal,
    empty_ordinal,
    init_model,
    project_to_gui,
    train,
)

CM = "CM"
CM_STAR = "CM_STAR"
CM_NO_MISTAKES = "CM_NO_MISTAKES"
MLCM = "MLCM"
MLCM_PROJECTED = "MLCM_PROJECTED"
RSD = "RSD"

KINDS = (CM, CM_STAR, CM_NO_MISTAKES, MLCM, MLCM_PROJECTED, RSD)
_MODEL_KINDS = (MLCM, MLCM_PROJECTED)

FRESH = "FRESH"
EXTERNAL = "EXTERNAL"
PERTURBED = "PERTURBED"

GAUSS = "GAUSS"
UNIFORM = "UNIFORM"


@dataclass(frozen=True)
class PerturbSpec:
    """How to knock a price vector off its equilibrium.

    ``GAUSS`` adds independent N(0, scale) noise to every price;
    ``UNIFORM`` rescales each price by an independent factor drawn from
    U(1 - scale, 1 + scale), so scale=1 spreads a price p over (0, 2p).
    """

    kind: str
    scale: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in (GAUSS, UNIFORM):
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if self.scale < 0:
            raise ValueError("perturbation scale must be nonnegative")


def perturb_prices(p: np.ndarray, spec: PerturbSpec, b_min: float) -> np.ndarray:
    """Noisy copy of `p`, clamped to what the poorest student could pay."""
    rng = np.random.default_rng(spec.seed)
    p = np.asarray(p, dtype=np.float64)
    if spec.kind == GAUSS:
        out = p + rng.normal(0.0, spec.scale, size=p.shape)
    else:
        out = p * (1.0 + rng.uniform(-spec.scale, spec.scale, size=p.shape))
    return np.clip(out, 0.0, b_min)


@dataclass(frozen=True)
class PriceSource:
    """Where the query-phase prices come from.

    ``FRESH`` runs the stage-one search on the phase-two models;
    ``EXTERNAL`` uses `prices` verbatim; ``PERTURBED`` applies `noise`
    to `prices` — or, when `prices` is None, to a fresh search result.
    """

    kind: str = FRESH
    prices: tuple[float, ...] | None = None
    noise: PerturbSpec | None = None

    def __post_init__(self):
        if self.kind not in (FRESH, EXTERNAL, PERTURBED):
            raise ValueError(f"unknown price source {self.kind!r}")
        if self.kind == FRESH and (self.prices is not None or self.noise is not None):
            raise ValueError("FRESH takes neither prices nor noise")
        if self.kind == EXTERNAL and self.prices is None:
            raise ValueError("EXTERNAL requires prices")
        if self.kind == EXTERNAL and self.noise is not None:
            raise ValueError("EXTERNAL does not take noise")
        if self.kind == PERTURBED and self.noise is None:
            raise ValueError("PERTURBED requires a PerturbSpec")

    @classmethod
    def fresh(cls) -> "PriceSource":
        return cls(FRESH)

    @classmethod
    def external(cls, prices) -> "PriceSource":
        return cls(EXTERNAL, prices=tuple(float(x) for x in prices))

    @classmethod
    def perturbed(cls, noise: PerturbSpec, prices=None) -> "PriceSource":
        if prices is not None:
            prices = tuple(float(x) for x in prices)
        return cls(PERTURBED, prices=prices, noise=noise)


@dataclass(frozen=True)
class MechanismConfig:
    kind: str
    n_queries: int = 0
    query_algorithm: str | None = None
    opt_in: tuple[bool, ...] | None = None
    price_source: PriceSource = field(default_factory=PriceSource)
    mistakes: MistakeProfile = PROFILE_9_POPULAR
    bump: float = 0.10
    beta: float = 0.04
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown mechanism {self.kind!r}")
        if self.n_queries < 0:
            raise ValueError("n_queries must be nonnegative")
        if self.kind in _MODEL_KINDS:
            if self.query_algorithm not in ALGORITHMS:
                raise ValueError(
                    f"{self.kind} needs a query algorithm, one of {ALGORITHMS}"
                )
        else:
            if self.n_queries or self.query_algorithm is not None:
                raise ValueError(f"{self.kind} does not ask comparison queries")
            if self.opt_in is not None:
                raise ValueError(f"{self.kind} has no opt-in decision")
            if self.price_source.kind != FRESH:
                raise ValueError(f"{self.kind} does not take a price source")


@dataclass
class RunResult:
    kind: str
    allocation: np.ndarray
    utilities: np.ndarray
    prices: np.ndarray | None
    alphas: dict[str, float]
    budgets: np.ndarray | None
    query_prices: np.ndarray | None = None
    elicitation: list[dict] = field(default_factory=list)

    @property
    def total_utility(self) -> float:
        return float(self.utilities.sum())

    @property
    def min_utility(self) -> float:
        return float(self.utilities.min())


def result_to_json(res: RunResult) -> str:
    doc = {
        "kind": res.kind,
        "allocation": [int(x) for x in res.allocation],
        "utilities": [float(v) for v in res.utilities],
        "prices": None if res.prices is None else [float(v) for v in res.prices],
        "alphas": {k: float(v) for k, v in res.alphas.items()},
        "budgets": None if res.budgets is None else [float(v) for v in res.budgets],
        "query_prices": (
            None
            if res.query_prices is None
            else [float(v) for v in res.query_prices]
        ),
        "elicitation": res.elicitation,
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def _reports(inst: Instance, mp: MistakeProfile, seed: int) -> list[GuiReport]:
    return [report(u, mp, seed=(seed, i)) for i, u in enumerate(inst.students)]


def bootstrap_model(rep: GuiReport, perm, m: int, seed: int, i: int, tc: TrainConfig):
    """Student i's initial value model, fitted to her report alone.

    Returns the trained model together with the cardinal dataset it was
    fitted to (later retraining keeps anchoring to that same data). The
    derivation seeds ``(seed, i, 1)`` and ``(seed, i, 2)`` are part of the
    mechanism's reproducibility contract — anything that rebuilds a
    student's model outside `run_mechanism` must land on identical weights.
    """
    d = build_cardinal(rep, perm, seed=(seed, i, 1), m=m)
    scale = max(1.0, float(np.abs(d.targets).max()))
    model = init_model(m, hidden=tc.hidden, scale=scale, seed=(seed, i, 2))
    return train(model, d, empty_ordinal(), tc), d


def _stages(
    valuers: list[Valuer],
    b: BudgetAssignment,
    catalog: Catalog,
    k: int,
    cfg: MechanismConfig,
    p0: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, dict[str, float]]:
    s1cfg = Stage1Config(seed=cfg.seed, p0=None if p0 is None else tuple(p0))
    p1, a1, rep1 = stage1_search(valuers, b, catalog, s1cfg)
    p2, a2 = stage2_remove_oversubscription(p1, a1, valuers, b, catalog)
    a3 = stage3_fill(
        p2, a2, valuers, b, bump=cfg.bump, catalog=catalog, order_seed=cfg.seed
    )
    alphas = {
        "stage1": rep1.alpha,
        "stage2": clearing_error(a2, p2, catalog, k).alpha,
        "stage3": clearing_error(a3, p2, catalog, k).alpha,
    }
    return p2, a3, alphas


def _finish(
    inst: Instance,
    cfg: MechanismConfig,
    alloc: np.ndarray,
    prices: np.ndarray | None,
    alphas: dict[str, float],
    budgets: BudgetAssignment | None,
    query_prices: np.ndarray | None = None,
    elicitation: list[dict] | None = None,
) -> RunResult:
    utilities = np.array(
        [eval_true(u, int(x)) for u, x in zip(inst.students, alloc)], dtype=np.float64
    )
    return RunResult(
        kind=cfg.kind,
        allocation=alloc,
        utilities=utilities,
        prices=prices,
        alphas=alphas,
        budgets=None if budgets is None else budgets.b,
        query_prices=query_prices,
        elicitation=elicitation or [],
    )


def run_mechanism(inst: Instance, cfg: MechanismConfig) -> RunResult:
    """Run one mechanism on one instance, deterministically in `cfg.seed`.

    Every random draw is derived from the seed by a fixed scheme —
    budgets and stage seeds from the seed itself; reports from
    ``(seed, i)``; the per-student training targets, model weights,
    query sessions, and report distillation from ``(seed, i, 1..4)`` —
    so mechanisms compared on the same instance and seed share budgets
    and reports, and enabling queries or opt-ins perturbs nothing else.
    """
    n, m = inst.n, inst.catalog.m
    k = max(u.perm.max_courses for u in inst.students)
    perms = [u.perm for u in inst.students]

    mp = cfg.mistakes.noiseless() if cfg.kind == CM_NO_MISTAKES else cfg.mistakes
    if cfg.kind == CM_STAR:
        reports = None
        valuers = [Valuer.from_true(u) for u in inst.students]
    else:
        reports = _reports(inst, mp, cfg.seed)
        valuers = [
            Valuer.from_gui(r, u.perm, m) for r, u in zip(reports, inst.students)
        ]

    if cfg.kind == RSD:
        alloc = rsd(reports, inst.catalog, seed=cfg.seed, perms=perms)
        return _finish(inst, cfg, alloc, None, {}, None)

    budgets = draw_budgets(n, beta=cfg.beta, seed=cfg.seed)

    if cfg.kind in (CM, CM_STAR, CM_NO_MISTAKES):
        prices, alloc, alphas = _stages(valuers, budgets, inst.catalog, k, cfg)
        return _finish(inst, cfg, alloc, prices, alphas, budgets)

    # model-based mechanisms, in five phases
    opt = (
        np.ones(n, dtype=bool)
        if cfg.opt_in is None
        else np.asarray(cfg.opt_in, dtype=bool)
    )
    if opt.shape != (n,):
        raise ValueError(f"opt_in must have one flag per student, got {opt.shape}")

    # phase 2: one monotone value model per opted-in student, trained on
    # cardinal targets inferred from that student's report
    models: dict[int, object] = {}
    cards: dict[int, object] = {}
    tc = TrainConfig()
    for i in np.flatnonzero(opt):
        models[i], cards[i] = bootstrap_model(reports[i], perms[i], m, cfg.seed, i, tc)

    def mixed():
        return [
            Valuer.from_model(models[i], perms[i]) if opt[i] else valuers[i]
            for i in range(n)
        ]

    # phase 3: the prices the queries will be asked at
    ps = cfg.price_source
    if ps.kind == EXTERNAL:
        p3 = np.asarray(ps.prices, dtype=np.float64)
    elif ps.kind == PERTURBED and ps.prices is not None:
        p3 = np.asarray(ps.prices, dtype=np.float64)
    else:
        p3, _, _ = stage1_search(
            mixed(), budgets, inst.catalog, Stage1Config(seed=cfg.seed)
        )
    if ps.kind == PERTURBED:
        p3 = perturb_prices(p3, ps.noise, float(budgets.b.min()))
    if p3.shape != (m,):
        raise ValueError(f"expected {m} prices, got shape {p3.shape}")

    # phase 4: comparison queries at fixed prices, one session per
    # opted-in student, each answer folded back into the model
    logs = []
    for i in np.flatnonzero(opt):
        s = new_session(
            models[i],
            cards[i],
            p3,
            float(budgets.b[i]),
            perms[i],
            algorithm=cfg.query_algorithm,
            cfg=tc,
            seed=(cfg.seed, i, 3),
        )
        simulate_student(inst.students[i], mp, s, cfg.n_queries)
        models[i] = s.model
        logs.append(
            {
                "student": int(i),
                "algorithm": cfg.query_algorithm,
                "n_answers": len(s.answered),
                "inferred_pairs": s.inferred_pairs(),
            }
        )

    # phase 5: clear the market on what the queries taught us — final
    # models for opted-in students, the raw report for everyone else
    if cfg.kind == MLCM:
        final = mixed()
    else:
        final = [
            Valuer.from_gui(
                project_to_gui(models[i], k_samples=1000, seed=(cfg.seed, i, 4)),
                perms[i],
                m,
            )
            if opt[i]
            else valuers[i]
            for i in range(n)
        ]
    # The final clearing starts its price walk at the query prices: the
    # updated models describe nearly the same market the queries were asked
    # in, so the old equilibrium is both the fastest and the most relevant
    # starting point — the answers taught the models about bundles near
    # that frontier, and a cold walk could wander somewhere they say
    # nothing about.
    prices, alloc, alphas = _stages(final, budgets, inst.catalog, k, cfg, p0=p3)
    return _finish(inst, cfg, alloc, prices, alphas, budgets, p3, logs)
