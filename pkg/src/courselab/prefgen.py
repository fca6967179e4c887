"""Synthetic student preferences on a latent course grid.

Each student values single courses additively (favorites drawn from the
popular set get high base values) and carries a few *synergy centers*: around
a center course c, the L1 ball of radius r_s forms a substitute set and the
L-inf ball of radius r_c (minus the substitutes, plus c itself) forms a
complement set. Step tables psi (nonnegative, nondecreasing) and xi
(nonpositive, nonincreasing) translate "how many courses of the set are in
the schedule" into a multiplicative bonus/penalty on the set's total base
value:

    value(x) = sum_{j in x} base_j
             + sum_c psi_c(|x ∩ C_c|) * sum_{j in C_c} base_j
             + sum_c xi_c(|x ∩ S_c|)  * sum_{j in S_c} base_j

Note the inner sums run over the *full* sets, not the intersection — adding a
third complement scales the whole set's base mass. psi(0)=psi(1)=xi(0)=xi(1)=0
so singletons are worth exactly their base value.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .catalog import (
    Catalog,
    Permissibility,
    Schedule,
    ScheduleSpace,
    indices_of,
    mask_of,
    popcount,
)


@dataclass(frozen=True)
class SynergyCenter:
    center: int
    substitutes: frozenset[int]
    complements: frozenset[int]
    psi: tuple[float, ...]  # indexed by |x ∩ complements|, length |C|+1
    xi: tuple[float, ...]  # indexed by |x ∩ substitutes|, length |S|+1

    def __post_init__(self) -> None:
        if self.center not in self.substitutes or self.center not in self.complements:
            raise ValueError("center must belong to both of its sets")
        if len(self.psi) != len(self.complements) + 1:
            raise ValueError("psi table length must be |complements|+1")
        if len(self.xi) != len(self.substitutes) + 1:
            raise ValueError("xi table length must be |substitutes|+1")
        if self.psi[0] != 0 or self.psi[1] != 0 or self.xi[0] != 0 or self.xi[1] != 0:
            raise ValueError("psi/xi must vanish at counts 0 and 1")
        if any(b < a for a, b in zip(self.psi, self.psi[1:])) or any(
            v < 0 for v in self.psi
        ):
            raise ValueError("psi must be nonnegative and nondecreasing")
        if any(b > a for a, b in zip(self.xi, self.xi[1:])) or any(
            v > 0 for v in self.xi
        ):
            raise ValueError("xi must be nonpositive and nonincreasing")


@dataclass
class TrueUtility:
    base: np.ndarray  # per-course base value, >= 0
    centers: list[SynergyCenter]
    perm: Permissibility
    favorites: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        self.base = np.asarray(self.base, dtype=np.float64)
        if (self.base < 0).any():
            raise ValueError("base values must be nonnegative")
        self._comp_masks = [mask_of(c.complements) for c in self.centers]
        self._subs_masks = [mask_of(c.substitutes) for c in self.centers]
        self._comp_idx = [sorted(c.complements) for c in self.centers]
        self._subs_idx = [sorted(c.substitutes) for c in self.centers]
        self._comp_sums = [float(self.base[ix].sum()) for ix in self._comp_idx]
        self._subs_sums = [float(self.base[ix].sum()) for ix in self._subs_idx]

    @property
    def m(self) -> int:
        return len(self.base)

    def utilities(self, space: ScheduleSpace) -> np.ndarray:
        """Value of every schedule in the space (vectorized eval_true)."""
        out = space.matrix @ self.base
        for c, cidx, sidx, csum, ssum in zip(
            self.centers, self._comp_idx, self._subs_idx,
            self._comp_sums, self._subs_sums,
        ):
            comp_count = space.matrix[:, cidx].sum(axis=1).astype(np.int64)
            subs_count = space.matrix[:, sidx].sum(axis=1).astype(np.int64)
            out += np.asarray(c.psi)[comp_count] * csum
            out += np.asarray(c.xi)[subs_count] * ssum
        return out


def eval_true(u: TrueUtility, x: Schedule) -> float:
    """Value of one schedule under the latent-synergy preference model."""
    total = float(u.base[indices_of(x)].sum()) if x else 0.0
    for c, cmask, smask, csum, ssum in zip(
        u.centers, u._comp_masks, u._subs_masks, u._comp_sums, u._subs_sums
    ):
        total += c.psi[popcount(x & cmask)] * csum
        total += c.xi[popcount(x & smask)] * ssum
    return total


_SPACES: dict[tuple, ScheduleSpace] = {}


def schedule_space(perm: Permissibility, m: int) -> ScheduleSpace:
    """Shared ScheduleSpace cache keyed by (permissibility, m)."""
    key = (m, perm.max_courses, perm.ineligible, perm.slot_conflicts)
    if key not in _SPACES:
        _SPACES[key] = ScheduleSpace(perm, m)
    return _SPACES[key]


#: slack for float32 cost sums when testing affordability
COST_EPS = 1e-6


def affordable_mask(space: ScheduleSpace, p: np.ndarray, b: float) -> np.ndarray:
    return space.cost(p) <= np.float64(b) + COST_EPS


def masked_argmax(
    space: ScheduleSpace,
    scores: np.ndarray,
    afford: np.ndarray,
    exclude=(),
) -> Schedule | None:
    """Best affordable schedule by score; ties to the smallest mask.

    Returns None when exclusion leaves nothing affordable at all.
    """
    ok = afford.copy()
    for x in exclude:
        row = space.get_row(x)
        if row is not None:
            ok[row] = False
    if not ok.any():
        return None
    masked = np.where(ok, scores, -np.inf)
    return int(space.masks[int(np.argmax(masked))])


def argmax_true(
    u: TrueUtility,
    p: np.ndarray,
    b: float,
    exclude=(),
    space: ScheduleSpace | None = None,
) -> Schedule:
    """Utility-maximizing affordable permissible schedule.

    The empty schedule is always affordable, so exhausting every option via
    ``exclude`` is the only way to get nothing back; in that case the empty
    schedule is returned as the canonical fallback.
    """
    space = space or schedule_space(u.perm, u.m)
    best = masked_argmax(space, u.utilities(space), affordable_mask(space, p, b), exclude)
    return 0 if best is None else best


@dataclass(frozen=True)
class GeneratorConfig:
    n_popular: int = 9
    n_favorites: int = 5
    n_centers: int = 2
    r_s: int = 1
    r_c: int = 1
    fav_low: float = 50.0
    fav_high: float = 100.0
    other_low: float = 0.0
    other_high: float = 45.0
    psi_max: float = 0.3
    xi_max: float = 0.3
    max_courses: int = 5
    additive_mode: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if not (self.n_centers <= self.n_favorites <= self.n_popular):
            raise ValueError("need n_centers <= n_favorites <= n_popular")
        if self.fav_low > self.fav_high or self.other_low > self.other_high:
            raise ValueError("value ranges must be ordered")
        if self.psi_max < 0 or self.xi_max < 0:
            raise ValueError("step magnitudes must be nonnegative")


def synergy_sets(catalog: Catalog, center: int, r_s: int, r_c: int):
    """Substitute and complement course sets around one center course."""
    pos = catalog.positions()
    d = np.abs(pos - pos[center])
    l1 = d.sum(axis=1)
    linf = d.max(axis=1)
    subs = frozenset(np.flatnonzero(l1 <= r_s).tolist())
    comp = frozenset(np.flatnonzero(linf <= r_c).tolist()) - subs | {center}
    return subs, comp


def _step_table(length: int, magnitude: float, rng: np.random.Generator, sign: int):
    """Single-step table of the given length+1: zero below a jump position.

    The jump position is uniform on {2, ..., length+1}; a position past the
    end means the table never fires at feasible bundle sizes. Tables of
    length < 2 cannot express any synergy and come back all-zero.
    """
    table = [0.0] * (length + 1)
    if length >= 2:
        pos = int(rng.integers(2, length + 2))
        mag = float(rng.uniform(0.0, magnitude)) * sign
        for t in range(pos, length + 1):
            table[t] = mag
    return tuple(table)


def generate_instance(
    cfg: GeneratorConfig, catalog: Catalog, n: int
) -> list[TrueUtility]:
    """Draw n students. Deterministic under cfg.seed."""
    popular = catalog.popular_ids
    if cfg.n_popular != len(popular):
        raise ValueError(
            f"config says {cfg.n_popular} popular courses, catalog has {len(popular)}"
        )
    if cfg.n_favorites > len(popular):
        raise ValueError("more favorites than popular courses")
    perm = Permissibility(max_courses=cfg.max_courses)
    students = []
    for child in np.random.SeedSequence(cfg.seed).spawn(n):
        rng = np.random.Generator(np.random.PCG64(child))
        favorites = rng.choice(popular, size=cfg.n_favorites, replace=False)
        favorites = tuple(int(f) for f in favorites)
        base = rng.uniform(cfg.other_low, cfg.other_high, size=catalog.m)
        base[list(favorites)] = rng.uniform(
            cfg.fav_low, cfg.fav_high, size=cfg.n_favorites
        )
        centers: list[SynergyCenter] = []
        if not cfg.additive_mode:
            picked = rng.choice(favorites, size=cfg.n_centers, replace=False)
            for c in sorted(int(v) for v in picked):
                subs, comp = synergy_sets(catalog, c, cfg.r_s, cfg.r_c)
                centers.append(
                    SynergyCenter(
                        center=c,
                        substitutes=subs,
                        complements=comp,
                        psi=_step_table(len(comp), cfg.psi_max, rng, +1),
                        xi=_step_table(len(subs), cfg.xi_max, rng, -1),
                    )
                )
        students.append(
            TrueUtility(base=base, centers=centers, perm=perm, favorites=favorites)
        )
    return students


# --- instance files ---------------------------------------------------------

@dataclass
class Instance:
    catalog: Catalog
    students: list[TrueUtility]

    @property
    def n(self) -> int:
        return len(self.students)


def instance_to_json(inst: Instance) -> str:
    def center_doc(c: SynergyCenter) -> dict:
        return {
            "c": c.center,
            "S": sorted(c.substitutes),
            "C": sorted(c.complements),
            "psi": list(c.psi),
            "xi": list(c.xi),
        }

    def perm_doc(perm: Permissibility) -> dict:
        return {
            "k": perm.max_courses,
            "ineligible": sorted(perm.ineligible),
            "conflicts": [sorted(g) for g in perm.slot_conflicts],
        }

    doc = {
        "catalog": json.loads(inst.catalog.to_json()),
        "students": [
            {
                "base": [float(v) for v in s.base],
                "centers": [center_doc(c) for c in s.centers],
                "perm": perm_doc(s.perm),
                "favorites": list(s.favorites),
            }
            for s in inst.students
        ],
    }
    return json.dumps(doc, sort_keys=True)


def instance_from_json(text: str) -> Instance:
    doc = json.loads(text)
    catalog = Catalog.from_json(json.dumps(doc["catalog"]))
    students = []
    for s in doc["students"]:
        perm = Permissibility(
            max_courses=s["perm"]["k"],
            ineligible=frozenset(s["perm"]["ineligible"]),
            slot_conflicts=tuple(frozenset(g) for g in s["perm"]["conflicts"]),
        )
        centers = [
            SynergyCenter(
                center=c["c"],
                substitutes=frozenset(c["S"]),
                complements=frozenset(c["C"]),
                psi=tuple(c["psi"]),
                xi=tuple(c["xi"]),
            )
            for c in s["centers"]
        ]
        students.append(
            TrueUtility(
                base=np.array(s["base"], dtype=np.float64),
                centers=centers,
                perm=perm,
                favorites=tuple(s.get("favorites", ())),
            )
        )
    return Instance(catalog=catalog, students=students)
