"""HTTP facade: live elicitation sessions over a simulated cohort.

One server hosts one economy. A live participant claims a student slot in
an otherwise simulated cohort, files her course report through the same
language the simulated students use, answers comparison queries against
her own value model, and can finally ask for an allocation in which her
slot is decided by everything she taught the server — while the rest of
the cohort behaves exactly as in a batch run.

The participant is a price taker: her query prices are the stage-one
equilibrium of the fully simulated cohort, computed once per server
lifetime. That keeps the price vector part of the session-creation
snapshot, keeps report submission latency to one model fit, and mirrors
how a single student's opt-in decision is priced in the batch studies.
``/allocate`` then clears the real market — live models included —
starting its price walk from that same vector.

Every session appends its events (creation, report, queries, answers) to
one JSON-lines file. Restarting the server replays those files: model
weights are re-derived from the same seeds, each logged query is
re-generated and checked against the log, so a crash can't silently fork
a session's history.
"""

from __future__ import annotations

import json
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from .catalog import indices_of
from .elicitation import (
    ALGORITHMS,
    OBIS,
    ComparisonQuery,
    ElicitationSession,
    new_session,
    simulate_student,
)
from .market import (
    Stage1Config,
    Valuer,
    clearing_error,
    draw_budgets,
    stage1_search,
    stage2_remove_oversubscription,
    stage3_fill,
)
from .mechanism import CM, MLCM, bootstrap_model
from .prefgen import (
    Instance,
    affordable_mask,
    instance_from_json,
    schedule_space,
)
from .reporting import PROFILE_9_POPULAR, GuiReport, MistakeProfile, report
from .valuemodel import TrainConfig

REPORTING = "REPORTING"
ELICITING = "ELICITING"
DONE = "DONE"


@dataclass
class LabConfig:
    instance: Instance
    data_dir: Path
    seed: int = 0
    beta: float = 0.04
    algorithm: str = OBIS
    sim_queries: int = 10  # queries each simulated student answers in /allocate
    profile: MistakeProfile = PROFILE_9_POPULAR
    bump: float = 0.10

    def __post_init__(self):
        self.data_dir = Path(self.data_dir)
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown query algorithm {self.algorithm!r}")
        if self.sim_queries < 0:
            raise ValueError("sim_queries must be nonnegative")


@dataclass
class LiveSession:
    id: str
    student: int
    status: str = REPORTING
    opt_in: bool = True
    gui: GuiReport | None = None
    session: ElicitationSession | None = None
    lock: threading.Lock = field(default_factory=threading.Lock)


class Lab:
    """Everything the endpoints share: economy, cohort, prices, sessions."""

    def __init__(self, cfg: LabConfig):
        self.cfg = cfg
        self.inst = cfg.instance
        self.n, self.m = self.inst.n, self.inst.catalog.m
        self.tc = TrainConfig()
        self.budgets = draw_budgets(self.n, beta=cfg.beta, seed=cfg.seed)
        # the simulated cohort's reports exist up front; a live participant
        # replaces her slot's report, never its permissibility or budget
        self.sim_reports = [
            report(u, cfg.profile, seed=(cfg.seed, i))
            for i, u in enumerate(self.inst.students)
        ]
        self._sim_models: dict[int, tuple] = {}
        self._prices: np.ndarray | None = None
        self.sessions: dict[str, LiveSession] = {}
        self._big_lock = threading.Lock()
        self.query_prices()  # fix the price vector before anyone connects
        cfg.data_dir.mkdir(parents=True, exist_ok=True)
        self._replay_all()

    # -- deterministic building blocks -----------------------------------

    def _sim_model(self, i: int):
        if i not in self._sim_models:
            self._sim_models[i] = bootstrap_model(
                self.sim_reports[i], self.inst.students[i].perm, self.m,
                self.cfg.seed, i, self.tc,
            )
        return self._sim_models[i]

    def query_prices(self) -> np.ndarray:
        """Stage-one prices of the all-simulated cohort on its models."""
        if self._prices is None:
            valuers = [
                Valuer.from_model(self._sim_model(i)[0], u.perm)
                for i, u in enumerate(self.inst.students)
            ]
            p, _, _ = stage1_search(
                valuers, self.budgets, self.inst.catalog,
                Stage1Config(seed=self.cfg.seed),
            )
            self._prices = p
        return self._prices

    def _log_path(self, sid: str) -> Path:
        return self.cfg.data_dir / f"{sid}.jsonl"

    def _append(self, sid: str, event: dict) -> None:
        with self._log_path(sid).open("a") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
            fh.flush()

    # -- session lifecycle ------------------------------------------------

    def taken_slots(self) -> set[int]:
        return {s.student for s in self.sessions.values()}

    def create_session(self, student: int | None, sid: str | None = None,
                       log: bool = True) -> LiveSession:
        with self._big_lock:
            taken = self.taken_slots()
            if student is None:
                free = [i for i in range(self.n) if i not in taken]
                if not free:
                    raise HTTPException(409, "every student slot is taken")
                student = free[0]
            if not (0 <= student < self.n):
                raise HTTPException(
                    422, f"student must be in [0, {self.n})"
                )
            if student in taken:
                raise HTTPException(409, f"student slot {student} is taken")
            sid = sid or uuid.uuid4().hex[:12]
            live = LiveSession(id=sid, student=student)
            self.sessions[sid] = live
            if log:
                self._append(sid, {
                    "e": "created", "id": sid, "student": student,
                    "seed": self.cfg.seed,
                })
            return live

    def get(self, sid: str) -> LiveSession:
        live = self.sessions.get(sid)
        if live is None:
            raise HTTPException(404, f"unknown session {sid!r}")
        return live

    def submit_report(self, live: LiveSession, gui: GuiReport,
                      opt_in: bool, log: bool = True) -> None:
        if live.status != REPORTING:
            raise HTTPException(409, "report was already submitted")
        i = live.student
        perm = self.inst.students[i].perm
        model, card = bootstrap_model(gui, perm, self.m, self.cfg.seed, i, self.tc)
        live.gui = gui
        live.opt_in = opt_in
        live.session = new_session(
            model, card, self.query_prices(), float(self.budgets.b[i]), perm,
            algorithm=self.cfg.algorithm, cfg=self.tc, seed=(self.cfg.seed, i, 3),
        )
        live.status = DONE if not opt_in else (
            ELICITING if not live.session.done else DONE
        )
        if log:
            self._append(live.id, {
                "e": "report", "report": json.loads(gui.to_json()),
                "opt_in": opt_in,
            })

    def next_query(self, live: LiveSession, log: bool = True):
        if live.status == REPORTING:
            raise HTTPException(409, "submit the report first")
        if live.status == DONE:
            return None
        s = live.session
        if s.outstanding is not None:
            return s.outstanding  # idempotent re-read
        q = s.next_query()
        if q is None:
            live.status = DONE
            return None
        if log:
            self._append(live.id, {
                "e": "query", "qid": q.id,
                "left": indices_of(q.left), "right": indices_of(q.right),
            })
        return q

    def submit_answer(self, live: LiveSession, query_id: int,
                      winner: str, log: bool = True) -> None:
        if live.status != ELICITING:
            raise HTTPException(409, "session is not taking answers")
        s = live.session
        q = s.outstanding
        if q is None:
            raise HTTPException(409, "no outstanding query to answer")
        if q.id != query_id:
            raise HTTPException(
                409, f"outstanding query is {q.id}, not {query_id}"
            )
        s.submit_answer(q, q.left if winner == "left" else q.right)
        if s.done:
            live.status = DONE
        if log:
            self._append(live.id, {"e": "answer", "qid": query_id, "winner": winner})

    # -- replay -----------------------------------------------------------

    def _replay_all(self) -> None:
        for path in sorted(self.cfg.data_dir.glob("*.jsonl")):
            self._replay(path)

    def _replay(self, path: Path) -> None:
        """Reconstruct one session from its log, verifying every query.

        The log stores what the server *sent*; the queries are regenerated
        from the same seeds and must come out identical, otherwise the log
        belongs to a different configuration and replaying it would
        silently rewrite history — that is a hard error.
        """
        live = None
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            ev = json.loads(line)
            kind = ev["e"]
            if kind == "created":
                if ev["seed"] != self.cfg.seed:
                    raise RuntimeError(
                        f"{path.name}:{lineno}: log was written under seed "
                        f"{ev['seed']}, server runs seed {self.cfg.seed}"
                    )
                live = self.create_session(ev["student"], sid=ev["id"], log=False)
            elif kind == "report":
                gui = GuiReport.from_json(json.dumps(ev["report"]))
                self.submit_report(live, gui, ev["opt_in"], log=False)
            elif kind == "query":
                q = self.next_query(live, log=False)
                got = (q.id, indices_of(q.left), indices_of(q.right))
                want = (ev["qid"], ev["left"], ev["right"])
                if got != want:
                    raise RuntimeError(
                        f"{path.name}:{lineno}: replayed query {got} "
                        f"diverges from logged {want}"
                    )
            elif kind == "answer":
                self.submit_answer(live, ev["qid"], ev["winner"], log=False)
            else:
                raise RuntimeError(f"{path.name}:{lineno}: unknown event {kind!r}")

    # -- read models ------------------------------------------------------

    def summary(self, live: LiveSession, top: int = 5) -> list[dict]:
        if live.session is None:
            raise HTTPException(409, "submit the report first")
        i = live.student
        perm = self.inst.students[i].perm
        space = schedule_space(perm, self.m)
        afford = affordable_mask(
            space, self.query_prices(), float(self.budgets.b[i])
        )
        scores = live.session.model.values(space.matrix)
        rows = [
            (float(scores[r]), int(space.masks[r]))
            for r in np.flatnonzero(afford & (space.masks != 0))
        ]
        rows.sort(key=lambda t: (-t[0], t[1]))
        p = self.query_prices()
        return [
            {
                "courses": indices_of(mask),
                "predicted_value": val,
                "cost": float(sum(p[j] for j in indices_of(mask))),
            }
            for val, mask in rows[:top]
        ]

    def allocate(self, kind: str) -> dict:
        """Clear the whole market, live slots included.

        ``MLCM`` drives every simulated student through her own query
        session while live slots contribute the models their humans
        actually trained (their report alone if they opted out); ``CM``
        uses raw reports for everyone. Live sessions still waiting for a
        report fall back to their slot's simulated twin.
        """
        if kind not in (CM, MLCM):
            raise HTTPException(422, f"allocate supports CM or MLCM, not {kind!r}")
        with self._big_lock:
            by_slot = {
                s.student: s for s in self.sessions.values() if s.gui is not None
            }
            valuers: list[Valuer] = []
            for i, u in enumerate(self.inst.students):
                live = by_slot.get(i)
                if kind == CM:
                    gui = live.gui if live else self.sim_reports[i]
                    valuers.append(Valuer.from_gui(gui, u.perm, self.m))
                elif live is not None:
                    if live.opt_in:
                        valuers.append(Valuer.from_model(live.session.model, u.perm))
                    else:
                        valuers.append(Valuer.from_gui(live.gui, u.perm, self.m))
                else:
                    model, card = self._sim_model(i)
                    if self.cfg.sim_queries > 0:
                        s = new_session(
                            model, card, self.query_prices(),
                            float(self.budgets.b[i]), u.perm,
                            algorithm=self.cfg.algorithm, cfg=self.tc,
                            seed=(self.cfg.seed, i, 3),
                        )
                        model = simulate_student(
                            u, self.cfg.profile, s, self.cfg.sim_queries
                        ).model
                    valuers.append(Valuer.from_model(model, u.perm))

            k = max(u.perm.max_courses for u in self.inst.students)
            p0 = tuple(self.query_prices()) if kind == MLCM else None
            p1, a1, _ = stage1_search(
                valuers, self.budgets, self.inst.catalog,
                Stage1Config(seed=self.cfg.seed, p0=p0),
            )
            p2, a2 = stage2_remove_oversubscription(
                p1, a1, valuers, self.budgets, self.inst.catalog
            )
            a3 = stage3_fill(
                p2, a2, valuers, self.budgets, bump=self.cfg.bump,
                catalog=self.inst.catalog, order_seed=self.cfg.seed,
            )
            alpha = clearing_error(a3, p2, self.inst.catalog, k).alpha
            out = {
                "kind": kind,
                "prices": [float(x) for x in p2],
                "alpha": float(alpha),
                "sessions": {},
            }
            for sid, live in self.sessions.items():
                if live.gui is None:
                    continue
                mask = int(a3[live.student])
                entry = {
                    "student": live.student,
                    "courses": indices_of(mask),
                    "cost": float(sum(p2[j] for j in indices_of(mask))),
                }
                if live.session is not None:
                    entry["predicted_value"] = float(live.session.model.value(mask))
                out["sessions"][sid] = entry
            return out


# -- request/response bodies --------------------------------------------------


class CreateBody(BaseModel):
    student: int | None = None


class ReportBody(BaseModel):
    bases: list[float]
    adjustments: list[tuple[int, int, float]] = []
    opt_in: bool = True


class AnswerBody(BaseModel):
    query_id: int
    winner: Literal["left", "right"]


class AllocateBody(BaseModel):
    kind: str = MLCM


def _course_doc(lab: Lab, j: int) -> dict:
    c = lab.inst.catalog.courses[j]
    return {
        "id": c.id,
        "capacity": c.capacity,
        "popular": c.popular,
        "price": float(lab.query_prices()[c.id]),
    }


def _query_doc(lab: Lab, live: LiveSession, q: ComparisonQuery | None) -> dict:
    s = live.session
    base = {
        "answered": len(s.answered) if s else 0,
        "inferred_pairs": s.inferred_pairs() if s else 0,
        "status": live.status,
    }
    if q is None:
        base["done"] = True
        return base
    base["done"] = False
    base["query"] = {
        "id": q.id,
        "left": [_course_doc(lab, j) for j in indices_of(q.left)],
        "right": [_course_doc(lab, j) for j in indices_of(q.right)],
    }
    return base


def _parse_report(lab: Lab, body: ReportBody) -> GuiReport:
    if len(body.bases) != lab.m:
        raise HTTPException(
            422, f"expected {lab.m} base values, got {len(body.bases)}"
        )
    for v in body.bases:
        if not (0.0 <= v <= 100.0):
            raise HTTPException(422, f"base value {v} outside [0, 100]")
    for i, j, a in body.adjustments:
        if not (-200.0 <= a <= 200.0):
            raise HTTPException(422, f"adjustment {a} outside [-200, 200]")
    try:
        return GuiReport(
            base={j: v for j, v in enumerate(body.bases) if v > 0},
            adjustments={
                (min(i, j), max(i, j)): a
                for i, j, a in body.adjustments
            },
        )
    except ValueError as exc:
        raise HTTPException(422, str(exc))


def create_app(lab: Lab) -> FastAPI:
    app = FastAPI(title="course lab", docs_url=None, redoc_url=None)
    app.state.lab = lab

    @app.post("/sessions", status_code=201)
    def create_session(body: CreateBody | None = None):
        live = lab.create_session(body.student if body else None)
        i = live.student
        return {
            "id": live.id,
            "student": i,
            "status": live.status,
            "budget": float(lab.budgets.b[i]),
            "prices": [float(x) for x in lab.query_prices()],
            "max_courses": lab.inst.students[i].perm.max_courses,
            "catalog": json.loads(lab.inst.catalog.to_json()),
        }

    @app.put("/sessions/{sid}/report")
    def put_report(sid: str, body: ReportBody):
        live = lab.get(sid)
        gui = _parse_report(lab, body)
        with live.lock:
            lab.submit_report(live, gui, body.opt_in)
        return {"status": live.status}

    @app.get("/sessions/{sid}/next-query")
    def get_next_query(sid: str):
        live = lab.get(sid)
        with live.lock:
            q = lab.next_query(live)
            return _query_doc(lab, live, q)

    @app.post("/sessions/{sid}/answer")
    def post_answer(sid: str, body: AnswerBody):
        live = lab.get(sid)
        with live.lock:
            lab.submit_answer(live, body.query_id, body.winner)
            return {
                "answered": len(live.session.answered),
                "inferred_pairs": live.session.inferred_pairs(),
                "status": live.status,
            }

    @app.get("/sessions/{sid}/summary")
    def get_summary(sid: str):
        live = lab.get(sid)
        with live.lock:
            s = live.session
            return {
                "status": live.status,
                "answered": len(s.answered) if s else 0,
                "inferred_pairs": s.inferred_pairs() if s else 0,
                "top": lab.summary(live),
            }

    @app.post("/allocate")
    def post_allocate(body: AllocateBody | None = None):
        kind = body.kind if body else MLCM
        return lab.allocate(kind)

    return app


def app_from_files(
    instance_path: str | Path,
    data_dir: str | Path,
    seed: int = 0,
    algorithm: str = OBIS,
    sim_queries: int = 10,
) -> FastAPI:
    inst = instance_from_json(Path(instance_path).read_text())
    cfg = LabConfig(
        instance=inst, data_dir=Path(data_dir), seed=seed,
        algorithm=algorithm, sim_queries=sim_queries,
    )
    return create_app(Lab(cfg))
