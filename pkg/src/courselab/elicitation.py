"""Comparison-query elicitation: binary-insertion-sort querying and baselines.

A session owns one student's trained value model plus the fixed prices and
budget that define which schedules are worth asking about. Three query
generators are supported:

- OBIS: keeps every queried schedule in a list sorted best-first by the
  student's answers. Each new candidate (the model's best affordable
  schedule not yet queried) is inserted by binary search, asking only the
  comparisons whose answers are not already known. Completing an insertion
  reveals the candidate's relation to *every* list member, so the ordinal
  training set grows superlinearly in the number of queries. The model is
  retrained once per completed insertion.
- NAIVE: always compares the model's best unqueried schedule against the
  best schedule found so far. A win reveals the challenger's relation to
  every schedule queried before (by transitivity through the reigning
  best); a loss reveals exactly one pair. Retrains after every answer.
- RANDOM: uniformly random pairs of distinct affordable schedules, never
  repeating a pair; one ordinal pair per answer. Retrains after every
  answer.

The binary search is deliberately stateless: the bounds are recomputed from
the set of answered queries each time, so interrupting and resuming a
session (or replaying its log) cannot diverge from a straight-through run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .catalog import Permissibility, Schedule
from .prefgen import (
    TrueUtility,
    affordable_mask,
    eval_true,
    masked_argmax,
    schedule_space,
)
from .reporting import MistakeProfile
from .valuemodel import (
    CardinalDataset,
    MonotoneValueModel,
    OrdinalDataset,
    TrainConfig,
    ordinal_from_ranking,
    train,
)

OBIS = "OBIS"
NAIVE = "NAIVE"
RANDOM = "RANDOM"
ALGORITHMS = (OBIS, NAIVE, RANDOM)


class ProtocolError(RuntimeError):
    """A query/answer arrived out of order or referenced the wrong query."""


@dataclass(frozen=True)
class ComparisonQuery:
    left: Schedule
    right: Schedule
    id: int

    def __post_init__(self) -> None:
        if self.left == self.right:
            raise ValueError("a comparison needs two distinct schedules")


def _pair_key(a: Schedule, b: Schedule) -> tuple[int, int]:
    return (a, b) if a <= b else (b, a)


@dataclass
class ElicitationSession:
    model: MonotoneValueModel
    d_card: CardinalDataset
    prices: np.ndarray
    budget: float
    perm: Permissibility
    algorithm: str = OBIS
    cfg: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    # sorted list of queried schedules, best first (OBIS); best-so-far
    # reigns at index 0 for NAIVE; unused by RANDOM
    sorted_list: list[Schedule] = field(default_factory=list)
    answered: dict[tuple[int, int], Schedule] = field(default_factory=dict)
    pending: Schedule | None = None
    outstanding: ComparisonQuery | None = None
    done: bool = False
    events: list[dict] = field(default_factory=list)
    # (list length before insertion, queries it took) per completed insertion
    insertion_costs: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        self.prices = np.asarray(self.prices, dtype=np.float64)
        self.rng = np.random.Generator(np.random.PCG64(self.seed))
        self._space = schedule_space(self.perm, self.model.m)
        self._afford = affordable_mask(self._space, self.prices, self.budget)
        self._queried: list[Schedule] = []  # every schedule ever in a query
        self._extra_pairs: list[tuple[Schedule, Schedule]] = []  # NAIVE/RANDOM
        self._asked_pairs: set[tuple[int, int]] = set()
        self._pending_queries = 0
        self._next_id = 0
        if self.algorithm in (OBIS, NAIVE):
            top = self._best_unqueried()
            if top is None:
                self.done = True
            else:
                self.sorted_list.append(top)
                self._queried.append(top)
                if self.algorithm == OBIS:
                    self.pending = self._best_unqueried()
                    self.done = self.pending is None

    # -- helpers ----------------------------------------------------------

    def _best_unqueried(self) -> Schedule | None:
        """Model argmax over affordable schedules not yet involved anywhere.

        The empty schedule never carries information, so it is never a
        query candidate; when nothing else is affordable the session ends.
        """
        exclude = set(self._queried) | set(self.sorted_list) | {0}
        if self.pending is not None:
            exclude.add(self.pending)
        scores = self.model.values(self._space.matrix)
        return masked_argmax(self._space, scores, self._afford, exclude)

    def _ordinal(self) -> OrdinalDataset:
        if self.algorithm == OBIS:
            return ordinal_from_ranking(self.sorted_list)
        pref = np.array([a for a, _ in self._extra_pairs], dtype=np.int64)
        disp = np.array([b for _, b in self._extra_pairs], dtype=np.int64)
        return OrdinalDataset(pref, disp)

    def _retrain(self) -> None:
        self.model = train(self.model, self.d_card, self._ordinal(), self.cfg)

    def _search_bounds(self) -> tuple[int, int] | int:
        """Replay the binary search for `pending` purely from answers.

        Returns the insertion index when the position is pinned down, or
        the (left, right, probe) state whose probe comparison is unanswered.
        """
        lo, hi = 0, len(self.sorted_list) - 1
        while lo <= hi:
            mid = (lo + hi) // 2
            key = _pair_key(self.pending, self.sorted_list[mid])
            if key not in self.answered:
                return (lo, hi)
            if self.answered[key] == self.pending:
                hi = mid - 1  # pending beats this one: look closer to the top
            else:
                lo = mid + 1
        return lo

    def _advance_obis(self) -> None:
        """Insert `pending` whenever the answers pin its position."""
        while not self.done:
            state = self._search_bounds()
            if isinstance(state, tuple):
                return
            self.sorted_list.insert(state, self.pending)
            self.insertion_costs.append((len(self.sorted_list) - 1, self._pending_queries))
            self._pending_queries = 0
            self._retrain()
            self.pending = self._best_unqueried()
            if self.pending is None:
                self.done = True

    # -- the protocol surface ---------------------------------------------

    def inferred_pairs(self) -> int:
        """Ordinal pairs the answers so far pin down (|S| choose 2 under OBIS)."""
        return len(self._ordinal())

    def next_query(self) -> ComparisonQuery | None:
        if self.outstanding is not None:
            raise ProtocolError("previous query is still unanswered")
        if self.done:
            return None
        if self.algorithm == OBIS:
            state = self._search_bounds()
            assert isinstance(state, tuple), "insertable pending not advanced"
            lo, hi = state
            mid = (lo + hi) // 2
            q = ComparisonQuery(self.pending, self.sorted_list[mid], self._next_id)
        elif self.algorithm == NAIVE:
            challenger = self._best_unqueried()
            if challenger is None:
                self.done = True
                return None
            q = ComparisonQuery(challenger, self.sorted_list[0], self._next_id)
        else:
            pair = self._draw_random_pair()
            if pair is None:
                self.done = True
                return None
            q = ComparisonQuery(pair[0], pair[1], self._next_id)
        self._next_id += 1
        self.outstanding = q
        self.events.append({"type": "query", "id": q.id, "left": q.left, "right": q.right})
        return q

    def _draw_random_pair(self) -> tuple[Schedule, Schedule] | None:
        candidates = self._space.masks[self._afford & (self._space.masks != 0)]
        n = candidates.size
        if n < 2 or len(self._asked_pairs) >= n * (n - 1) // 2:
            return None
        while True:
            i, j = self.rng.choice(n, size=2, replace=False)
            a, b = int(candidates[i]), int(candidates[j])
            if _pair_key(a, b) not in self._asked_pairs:
                return a, b

    def submit_answer(self, q: ComparisonQuery, winner: Schedule) -> None:
        if self.outstanding is None or q.id != self.outstanding.id:
            raise ProtocolError("answer does not match the outstanding query")
        if winner not in (q.left, q.right):
            raise ProtocolError("winner must be one of the queried schedules")
        self.outstanding = None
        self.answered[_pair_key(q.left, q.right)] = winner
        self._asked_pairs.add(_pair_key(q.left, q.right))
        self.events.append({"type": "answer", "id": q.id, "winner": winner})
        loser = q.right if winner == q.left else q.left

        if self.algorithm == OBIS:
            self._pending_queries += 1
            self._advance_obis()
        elif self.algorithm == NAIVE:
            challenger, best = q.left, q.right
            if winner == challenger:
                # by transitivity the challenger also beats everything the
                # dethroned best had already beaten
                self._extra_pairs.extend((challenger, s) for s in self._queried)
                self.sorted_list[0] = challenger
            else:
                self._extra_pairs.append((best, challenger))
            self._queried.append(challenger)
            self._retrain()
        else:
            self._extra_pairs.append((winner, loser))
            for s in (q.left, q.right):
                if s not in self._queried:
                    self._queried.append(s)
            self._retrain()


def new_session(
    model: MonotoneValueModel,
    d_card: CardinalDataset,
    prices: np.ndarray,
    budget: float,
    perm: Permissibility,
    algorithm: str = OBIS,
    cfg: TrainConfig | None = None,
    seed: int = 0,
) -> ElicitationSession:
    return ElicitationSession(
        model=model,
        d_card=d_card,
        prices=prices,
        budget=budget,
        perm=perm,
        algorithm=algorithm,
        cfg=cfg if cfg is not None else TrainConfig(),
        seed=seed,
    )


def answer_query(
    u: TrueUtility,
    model: MonotoneValueModel,
    q: ComparisonQuery,
    rng: np.random.Generator,
    p_m: float = 0.0,
) -> Schedule:
    """The simulated student's answer to one comparison.

    Truth decides; exact ties go to the schedule the model currently rates
    higher, then to the smaller bitmask. With probability p_m the answer is
    flipped (a careless click).
    """
    du = eval_true(u, q.left) - eval_true(u, q.right)
    if du > 0:
        winner = q.left
    elif du < 0:
        winner = q.right
    else:
        dm = model.value(q.left) - model.value(q.right)
        if dm > 0:
            winner = q.left
        elif dm < 0:
            winner = q.right
        else:
            winner = min(q.left, q.right)
    if p_m > 0 and rng.random() < p_m:
        winner = q.right if winner == q.left else q.left
    return winner


def simulate_student(
    u: TrueUtility, mp: MistakeProfile, s: ElicitationSession, n_queries: int
) -> ElicitationSession:
    """Run up to n_queries through the session with simulated answers."""
    for _ in range(n_queries):
        q = s.next_query()
        if q is None:
            break
        s.submit_answer(q, answer_query(u, s.model, q, s.rng, mp.p_m))
    return s
