"""The base-value/adjustment reporting language and its mistake model.

Students report a base value in [0,100] per course (0 means "not reported")
and optionally a pairwise additive adjustment in [-200,200] for course pairs
whose bases they both reported. A reported schedule is worth the sum of its
base values plus every adjustment fully inside it.

The mistake model has four parameters: students forget a fraction f_b of
their base values (lowest-valued first), additive Gaussian noise sigma_b hits
the surviving bases (clamped back into [0,100]; a value clamped to 0 counts
as forgotten), a fraction f_a of the true pairwise adjustments is forgotten,
and the rest get multiplicative uniform noise of half-width sigma_a. A common
multiplier gamma scales all four at once; p_m is the probability of answering
a comparison query wrongly and is consumed by the elicitation layer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .catalog import Schedule, ScheduleSpace, indices_of
from .prefgen import Instance, TrueUtility, eval_true, schedule_space

Pair = tuple[int, int]  # always stored sorted ascending


@dataclass
class GuiReport:
    base: dict[int, float] = field(default_factory=dict)
    adjustments: dict[Pair, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for j, v in self.base.items():
            if not (0.0 < v <= 100.0):
                raise ValueError(f"reported base for course {j} out of (0,100]")
        for (j, jj), a in self.adjustments.items():
            if j >= jj:
                raise ValueError("adjustment pairs must be sorted ascending")
            if j not in self.base or jj not in self.base:
                raise ValueError("adjustment requires both bases reported")
            if not (-200.0 <= a <= 200.0):
                raise ValueError("adjustment out of [-200,200]")

    def to_json(self) -> str:
        doc = {
            "base": {str(j): v for j, v in sorted(self.base.items())},
            "adj": [[j, jj, a] for (j, jj), a in sorted(self.adjustments.items())],
        }
        return json.dumps(doc, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "GuiReport":
        doc = json.loads(text)
        return GuiReport(
            base={int(j): float(v) for j, v in doc["base"].items()},
            adjustments={
                (int(j), int(jj)): float(a) for j, jj, a in doc.get("adj", [])
            },
        )


@dataclass(frozen=True)
class MistakeProfile:
    f_b: float
    f_a: float
    sigma_b: float
    sigma_a: float
    gamma: float = 1.0
    p_m: float = 0.0

    def __post_init__(self) -> None:
        if not (0 <= self.f_b <= 1 and 0 <= self.f_a <= 1 and 0 <= self.p_m <= 1):
            raise ValueError("probabilities must lie in [0,1]")
        if self.sigma_b < 0 or self.sigma_a < 0 or self.gamma < 0:
            raise ValueError("noise scales must be nonnegative")

    def scaled(self) -> tuple[float, float, float, float]:
        """The four parameters after applying the common multiplier."""
        g = self.gamma
        return (min(1.0, self.f_b * g), min(1.0, self.f_a * g),
                self.sigma_b * g, self.sigma_a * g)

    @staticmethod
    def noiseless() -> "MistakeProfile":
        return MistakeProfile(0.0, 0.0, 0.0, 0.0)


#: calibrated against the observed reporting behavior of the 9-popular-course
#: economy (and its 6-popular sibling); see the calibrate CLI op
PROFILE_9_POPULAR = MistakeProfile(f_b=0.5, f_a=0.48, sigma_b=23.0, sigma_a=0.2)
PROFILE_6_POPULAR = MistakeProfile(f_b=0.5, f_a=0.4825, sigma_b=17.0, sigma_a=0.2)


def true_adjustments(u: TrueUtility) -> dict[Pair, float]:
    """Degree-2 shadow of the synergy tables.

    For every course pair inside one center's complement set the pair is
    worth psi(2) times the pair's base mass; substitute-set pairs contribute
    xi(2) likewise. Pairs covered by several centers accumulate. Zero-valued
    pairs are omitted — a zero adjustment is no adjustment.
    """
    out: dict[Pair, float] = {}
    for c in u.centers:
        for members, table in ((c.complements, c.psi), (c.substitutes, c.xi)):
            if len(members) < 2 or table[2] == 0.0:
                continue
            ids = sorted(members)
            for a_i in range(len(ids)):
                for b_i in range(a_i + 1, len(ids)):
                    j, jj = ids[a_i], ids[b_i]
                    val = table[2] * (u.base[j] + u.base[jj])
                    if val != 0.0:
                        out[(j, jj)] = out.get((j, jj), 0.0) + val
    return {k: v for k, v in out.items() if v != 0.0}


def report(u: TrueUtility, mp: MistakeProfile, seed) -> GuiReport:
    """One student's (possibly mistaken) report of her true preferences.

    Deterministic under seed. The forgotten-base count is floor(f_b times the
    number of positive-base courses), dropping the lowest true values first;
    Gaussian noise can push further low values to zero, which also unreports
    them.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    f_b, f_a, sigma_b, sigma_a = mp.scaled()

    positive = [j for j in range(u.m) if u.base[j] > 0]
    positive.sort(key=lambda j: (u.base[j], j))
    n_forget = int(np.floor(f_b * len(positive)))
    survivors = sorted(positive[n_forget:])

    base: dict[int, float] = {}
    if survivors:
        noise = rng.normal(0.0, sigma_b, size=len(survivors)) if sigma_b > 0 else (
            np.zeros(len(survivors)))
        for j, eps in zip(survivors, noise):
            v = float(np.clip(u.base[j] + eps, 0.0, 100.0))
            if v > 0.0:
                base[j] = v

    adjustments: dict[Pair, float] = {}
    for pair, alpha in sorted(true_adjustments(u).items()):
        if pair[0] not in base or pair[1] not in base:
            continue
        if f_a > 0 and rng.random() < f_a:
            continue
        factor = 1.0 + (rng.uniform(-sigma_a, sigma_a) if sigma_a > 0 else 0.0)
        val = float(np.clip(alpha * factor, -200.0, 200.0))
        if val != 0.0:
            adjustments[pair] = val
    return GuiReport(base=base, adjustments=adjustments)


def eval_gui(r: GuiReport, x: Schedule) -> float:
    """Reported value of a schedule: bases plus fully-contained adjustments."""
    total = 0.0
    ids = indices_of(x)
    inside = set(ids)
    for j in ids:
        total += r.base.get(j, 0.0)
    for (j, jj), a in r.adjustments.items():
        if j in inside and jj in inside:
            total += a
    return total


def gui_utilities(r: GuiReport, space: ScheduleSpace) -> np.ndarray:
    """Reported value of every schedule in the space (vectorized eval_gui)."""
    base_vec = np.zeros(space.m, dtype=np.float64)
    for j, v in r.base.items():
        base_vec[j] = v
    out = space.matrix @ base_vec
    for (j, jj), a in r.adjustments.items():
        out += (space.matrix[:, j] * space.matrix[:, jj]).astype(np.float64) * a
    return out


@dataclass
class CalibrationReport:
    mean_bases: float
    mean_low: float  # reported values in (0, 50)
    mean_high: float  # reported values in [50, 100]
    mean_adjustments: float
    median_adjustments: float
    min_adjustments: int
    max_adjustments: int
    cq_accuracy_pct: float
    median_disagreement_pct: float
    n_students: int

    CSV_HEADER = (
        "mean_bases,mean_low,mean_high,mean_adjustments,median_adjustments,"
        "min_adjustments,max_adjustments,cq_accuracy_pct,"
        "median_disagreement_pct,n_students"
    )

    def to_csv_row(self) -> str:
        return (
            f"{self.mean_bases:.4f},{self.mean_low:.4f},{self.mean_high:.4f},"
            f"{self.mean_adjustments:.4f},{self.median_adjustments:.1f},"
            f"{self.min_adjustments},{self.max_adjustments},"
            f"{self.cq_accuracy_pct:.4f},{self.median_disagreement_pct:.4f},"
            f"{self.n_students}"
        )


def calibration_metrics(
    instances: list[Instance],
    mp: MistakeProfile,
    n_probe_pairs: int = 25,
    seed: int = 0,
) -> CalibrationReport:
    """Reporting-behavior summary over a population of simulated students.

    Reports are generated per student under the mistake profile; accuracy is
    the share of sampled probe pairs (distinct full-size permissible
    schedules) on which the report agrees in sign with the true preference.
    On disagreeing pairs the recorded difference is the true-utility cost of
    following the report, scaled by the reported value of the schedule the
    report picked: (true(picked) − true(preferred)) / gui(picked). True units
    in the numerator measure what the mistake actually costs; the reported
    denominator expresses it on the scale the student herself put on that
    schedule. The median of those (negative) percentages goes into the last
    column.
    """
    n_total = sum(inst.n for inst in instances)
    if n_total < 100:
        raise ValueError("calibration needs at least 100 students")

    root = np.random.SeedSequence(seed)
    report_seeds, probe_seeds = root.spawn(2)
    report_children = report_seeds.spawn(n_total)
    probe_children = probe_seeds.spawn(n_total)

    n_bases, n_low, n_high, n_adj = [], [], [], []
    agree = 0
    probes = 0
    regrets: list[float] = []

    idx = 0
    for inst in instances:
        space = schedule_space(inst.students[0].perm, inst.catalog.m)
        size = min(5, inst.students[0].perm.max_courses)
        full = np.flatnonzero(space.sizes == size)
        for u in inst.students:
            r = report(u, mp, report_children[idx])
            vals = list(r.base.values())
            n_bases.append(len(vals))
            n_low.append(sum(1 for v in vals if 0 < v < 50))
            n_high.append(sum(1 for v in vals if 50 <= v <= 100))
            n_adj.append(len(r.adjustments))

            rng = np.random.Generator(np.random.PCG64(probe_children[idx]))
            for _ in range(n_probe_pairs):
                a_row, b_row = rng.choice(full, size=2, replace=False)
                xa, xb = int(space.masks[a_row]), int(space.masks[b_row])
                dt = eval_true(u, xa) - eval_true(u, xb)
                dg = eval_gui(r, xa) - eval_gui(r, xb)
                probes += 1
                if np.sign(dt) == np.sign(dg):
                    agree += 1
                else:
                    liked, picked = (xa, xb) if dt > 0 else (xb, xa)
                    denom = eval_gui(r, picked)
                    if denom > 0:
                        regrets.append(
                            100.0
                            * (eval_true(u, picked) - eval_true(u, liked))
                            / denom
                        )
            idx += 1

    return CalibrationReport(
        mean_bases=float(np.mean(n_bases)),
        mean_low=float(np.mean(n_low)),
        mean_high=float(np.mean(n_high)),
        mean_adjustments=float(np.mean(n_adj)),
        median_adjustments=float(np.median(n_adj)),
        min_adjustments=int(np.min(n_adj)),
        max_adjustments=int(np.max(n_adj)),
        cq_accuracy_pct=100.0 * agree / probes,
        median_disagreement_pct=float(np.median(regrets)) if regrets else 0.0,
        n_students=n_total,
    )
