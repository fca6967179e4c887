"""Courses, schedules, and permissibility predicates.

A schedule is a plain int bitmask: bit j (LSB = course 0) is set iff course j
is in the schedule. This keeps schedules hashable, cheap to compare, and easy
to feed into numpy once expanded via ScheduleSpace. Everything downstream
(preference evaluation, demand computation, elicitation) shares this encoding.

Canonical ordering: ascending integer mask. Ties anywhere in the codebase are
broken toward the smallest mask, i.e. earliest-indexed courses win.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterator

import numpy as np

Schedule = int

#: Hard cap for the bitmask fast path. Instances beyond this need a different
#: demand oracle (out of scope here); we refuse loudly instead of degrading.
MAX_ENUM_COURSES = 32


class CapabilityError(Exception):
    """The requested instance size exceeds the enumeration fast path."""


@dataclass(frozen=True)
class Course:
    id: int
    capacity: int
    latent_pos: tuple[int, int]  # (x, y) cell on the latent grid
    popular: bool = False
    time_slot: int | None = None

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise ValueError(f"course {self.id}: capacity must be >= 1")


@dataclass(frozen=True)
class Permissibility:
    """Which schedules a single student may take.

    A schedule is permissible iff it has at most ``max_courses`` courses,
    contains no ineligible course, and takes at most one course per time slot.
    """

    max_courses: int
    ineligible: frozenset[int] = frozenset()
    slot_conflicts: tuple[frozenset[int], ...] = ()

    def ineligible_mask(self) -> int:
        return mask_of(self.ineligible)

    def conflict_masks(self) -> list[int]:
        return [mask_of(group) for group in self.slot_conflicts]


def mask_of(courses) -> Schedule:
    m = 0
    for j in courses:
        m |= 1 << j
    return m


def indices_of(x: Schedule) -> list[int]:
    out = []
    j = 0
    while x:
        if x & 1:
            out.append(j)
        x >>= 1
        j += 1
    return out


def popcount(x: Schedule) -> int:
    return int(x).bit_count()


def is_permissible(x: Schedule, perm: Permissibility) -> bool:
    if popcount(x) > perm.max_courses:
        return False
    if x & perm.ineligible_mask():
        return False
    for g in perm.conflict_masks():
        if popcount(x & g) > 1:
            return False
    return True


def enumerate_permissible(perm: Permissibility, m: int) -> Iterator[Schedule]:
    """Yield every permissible schedule over m courses, ascending by mask.

    Generates combinations of eligible courses up to the cardinality cap and
    filters slot conflicts, so the cost is O(#permissible) rather than O(2^m).
    """
    if m > MAX_ENUM_COURSES:
        raise CapabilityError(
            f"enumeration supports at most {MAX_ENUM_COURSES} courses, got {m}"
        )
    if perm.max_courses < 0:
        raise ValueError("max_courses must be nonnegative")
    eligible = [j for j in range(m) if j not in perm.ineligible]
    conflicts = perm.conflict_masks()
    masks = []
    for size in range(min(perm.max_courses, len(eligible)) + 1):
        for combo in combinations(eligible, size):
            x = mask_of(combo)
            if all(popcount(x & g) <= 1 for g in conflicts):
                masks.append(x)
    masks.sort()
    yield from masks


class ScheduleSpace:
    """Dense view of one student-class's permissible schedules.

    Holds the sorted mask list plus a float32 indicator matrix (schedules x
    courses) so demand/argmax queries become a matmul + masked argmax. Build
    once per (permissibility, m) pair and share; instances are immutable.
    """

    def __init__(self, perm: Permissibility, m: int):
        self.perm = perm
        self.m = m
        self.masks = np.fromiter(enumerate_permissible(perm, m), dtype=np.int64)
        self.matrix = ((self.masks[:, None] >> np.arange(m)) & 1).astype(np.float32)
        self.sizes = self.matrix.sum(axis=1).astype(np.int32)
        self._row_of = {int(mk): i for i, mk in enumerate(self.masks)}

    def __len__(self) -> int:
        return len(self.masks)

    def row_of(self, x: Schedule) -> int:
        return self._row_of[int(x)]

    def get_row(self, x: Schedule) -> int | None:
        return self._row_of.get(int(x))

    def cost(self, p: np.ndarray) -> np.ndarray:
        """Price of every schedule at price vector p."""
        return self.matrix @ np.asarray(p, dtype=np.float32)


@dataclass
class Catalog:
    courses: list[Course]
    supply_ratio: float
    slots: dict[int, list[int]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        seen = set()
        for c in self.courses:
            if c.latent_pos in seen:
                raise ValueError(f"duplicate latent position {c.latent_pos}")
            seen.add(c.latent_pos)

    @property
    def m(self) -> int:
        return len(self.courses)

    @property
    def capacities(self) -> np.ndarray:
        return np.array([c.capacity for c in self.courses], dtype=np.int64)

    @property
    def popular_ids(self) -> list[int]:
        return [c.id for c in self.courses if c.popular]

    def positions(self) -> np.ndarray:
        return np.array([c.latent_pos for c in self.courses], dtype=np.int64)

    def to_json(self) -> str:
        doc = {
            "m": self.m,
            "supply_ratio": self.supply_ratio,
            "courses": [
                {
                    "id": c.id,
                    "capacity": c.capacity,
                    "x": c.latent_pos[0],
                    "y": c.latent_pos[1],
                    "popular": c.popular,
                    "slot": c.time_slot,
                }
                for c in self.courses
            ],
        }
        return json.dumps(doc, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "Catalog":
        doc = json.loads(text)
        courses = [
            Course(
                id=c["id"],
                capacity=c["capacity"],
                latent_pos=(c["x"], c["y"]),
                popular=c["popular"],
                time_slot=c.get("slot"),
            )
            for c in doc["courses"]
        ]
        cat = Catalog(courses=courses, supply_ratio=doc["supply_ratio"])
        cat.slots = _slots_from_courses(courses)
        return cat


def _slots_from_courses(courses: list[Course]) -> dict[int, list[int]]:
    slots: dict[int, list[int]] = {}
    for c in courses:
        if c.time_slot is not None:
            slots.setdefault(c.time_slot, []).append(c.id)
    return slots


def grid_shape(m: int) -> tuple[int, int]:
    """Smallest near-square (rows, cols) grid with at least m cells."""
    cols = math.ceil(math.sqrt(m))
    rows = math.ceil(m / cols)
    return rows, cols


def spread_ids(m: int, count: int) -> list[int]:
    """count ids spread evenly across [0, m) — deterministic, no RNG."""
    if count > m:
        raise ValueError("cannot mark more popular courses than exist")
    if count == 0:
        return []
    return sorted({int(round(v)) for v in np.linspace(0, m - 1, count)})


def make_catalog(
    m: int,
    n_students: int,
    max_courses: int,
    supply_ratio: float,
    n_popular: int,
) -> Catalog:
    """Build the standard synthetic catalog.

    Total seats are round(supply_ratio * n_students * max_courses), split as
    evenly as possible with the remainder going to the lowest-id courses.
    Courses sit row-major on the smallest near-square grid; popular courses
    are spread evenly across the id range.
    """
    total_seats = round(supply_ratio * n_students * max_courses)
    if total_seats < m:
        raise ValueError("supply too small: some course would get zero seats")
    base, extra = divmod(total_seats, m)
    popular = set(spread_ids(m, n_popular))
    _, cols = grid_shape(m)
    courses = [
        Course(
            id=j,
            capacity=base + (1 if j < extra else 0),
            latent_pos=(j % cols, j // cols),
            popular=j in popular,
        )
        for j in range(m)
    ]
    return Catalog(courses=courses, supply_ratio=supply_ratio)
