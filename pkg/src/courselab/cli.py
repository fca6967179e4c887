"""Command-line front door.

Every verb resolves its parameters, writes a ``config.json`` echo of them
next to its outputs, and derives all randomness from ``--seed`` — rerun
any command with the same seed and the output files come back
byte-identical. Wall-clock timings are never written unless explicitly
asked for (``--times``), precisely to keep that promise.

Verbs:

  gen        write one synthetic economy as instance.json
  calibrate  reporting-mistake summary statistics over simulated students
  run        the mechanism battery on one market configuration
  sweep      the same battery across robustness axes (γ, p_m, noise, …)
  optin      single-student opt-in gains at fixed prices
  qstudy     query-generator comparison curves
  audit      fairness audit of an allocation (envy / maximin / Pareto)
  serve      the live-session HTTP service
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from .catalog import make_catalog
from .elicitation import ALGORITHMS, OBIS
from .harness import (
    EVERYBODY_ELSE,
    NOBODY_ELSE,
    ExperimentSpec,
    audit_fairness,
    build_instances,
    mechanism_label,
    opt_in_study,
    query_algorithm_study,
    run_experiment,
)
from .market import allocation_from_json
from .mechanism import (
    CM,
    CM_NO_MISTAKES,
    CM_STAR,
    GAUSS,
    MLCM,
    MLCM_PROJECTED,
    RSD,
    UNIFORM,
    MechanismConfig,
    PerturbSpec,
    run_mechanism,
)
from .prefgen import (
    GeneratorConfig,
    Instance,
    generate_instance,
    instance_from_json,
    instance_to_json,
)
from .reporting import PROFILE_6_POPULAR, PROFILE_9_POPULAR, calibration_metrics

_PROFILES = {9: PROFILE_9_POPULAR, 6: PROFILE_6_POPULAR}
_MODEL = (MLCM, MLCM_PROJECTED)


def _econ_args(p: argparse.ArgumentParser, instances: int = 50) -> None:
    p.add_argument("--courses", type=int, default=25)
    p.add_argument("--students", type=int, default=30)
    p.add_argument("--max-courses", type=int, default=5)
    p.add_argument("--popular", type=int, default=9)
    p.add_argument("--supply-ratio", type=float, default=1.25)
    p.add_argument("--instances", type=int, default=instances)
    p.add_argument("--additive", action="store_true",
                   help="draw purely additive preferences (no synergies)")
    p.add_argument(
        "--paper-scale", action="store_true",
        help="100 students and 500 instances per cell (long run)",
    )


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("."))


def _apply_scale(ns: argparse.Namespace) -> None:
    if getattr(ns, "paper_scale", False):
        ns.students, ns.instances = 100, 500


def _write(out: Path, name: str, text: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    if not text.endswith("\n"):
        text += "\n"
    (out / name).write_text(text)
    print(f"wrote {out / name}")


def _echo_config(out: Path, verb: str, params: dict) -> None:
    doc = {"command": verb, **params}
    _write(out, "config.json", json.dumps(doc, indent=1, sort_keys=True))


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _noises(text: str) -> tuple[PerturbSpec | None, ...]:
    """'GAUSS:0.2,UNIFORM:0.5' -> (None, gauss spec, uniform spec)."""
    out: list[PerturbSpec | None] = [None]
    for part in text.split(","):
        if not part.strip():
            continue
        kind, scale = part.split(":")
        kind = kind.strip().upper()
        if kind not in (GAUSS, UNIFORM):
            raise SystemExit(f"unknown noise kind {kind!r} (GAUSS or UNIFORM)")
        out.append(PerturbSpec(kind, float(scale)))
    return tuple(out)


def _battery(
    n_queries: int, algorithms: tuple[str, ...], projected: bool = False
) -> tuple:
    mechs = [
        MechanismConfig(CM_STAR),
        MechanismConfig(CM),
        MechanismConfig(CM_NO_MISTAKES),
        MechanismConfig(RSD),
    ]
    mechs += [
        MechanismConfig(MLCM, n_queries=n_queries, query_algorithm=a)
        for a in algorithms
    ]
    if projected:
        mechs.append(MechanismConfig(
            MLCM_PROJECTED, n_queries=n_queries, query_algorithm=OBIS
        ))
    return tuple(mechs)


def _spec_params(spec: ExperimentSpec) -> dict:
    return {
        "mechanisms": [mechanism_label(c) for c in spec.mechanisms],
        "supply_ratios": list(spec.supply_ratios),
        "n_populars": list(spec.n_populars),
        "gammas": list(spec.gammas),
        "p_ms": list(spec.p_ms),
        "price_noises": [
            "none" if s is None else f"{s.kind}:{s.scale:g}"
            for s in spec.price_noises
        ],
        "n_instances": spec.n_instances,
        "n_students": spec.n_students,
        "n_courses": spec.n_courses,
        "max_courses": spec.max_courses,
        "additive": spec.additive,
        "seed": spec.seed,
        "ci_convention": "normal95",
    }


def _emit_experiment(ns: argparse.Namespace, spec: ExperimentSpec, verb: str):
    res = run_experiment(spec)
    _write(ns.out, "metrics.csv", res.metrics_csv())
    _write(ns.out, "raw.csv", res.raw_csv())
    _echo_config(ns.out, verb, _spec_params(spec))
    if ns.times:
        _write(ns.out, "times.json",
               json.dumps(res.times(), indent=1, sort_keys=True))
    failures = sum(r.n_failures for r in res.rows)
    if failures:
        print(f"warning: {failures} runs failed; see raw.csv", file=sys.stderr)
    return 0


# -- verbs --------------------------------------------------------------------


def cmd_gen(ns: argparse.Namespace) -> int:
    cat = make_catalog(
        m=ns.courses, n_students=ns.students, max_courses=ns.max_courses,
        supply_ratio=ns.supply_ratio, n_popular=ns.popular,
    )
    n_fav = min(5, ns.popular)
    gen = GeneratorConfig(
        n_popular=ns.popular, n_favorites=n_fav, n_centers=min(2, n_fav),
        max_courses=ns.max_courses, additive_mode=ns.additive, seed=ns.seed,
    )
    inst = Instance(cat, generate_instance(gen, cat, ns.students))
    _write(ns.out, "instance.json", instance_to_json(inst))
    _echo_config(ns.out, "gen", {
        "courses": ns.courses, "students": ns.students,
        "max_courses": ns.max_courses, "popular": ns.popular,
        "supply_ratio": ns.supply_ratio, "additive": ns.additive,
        "seed": ns.seed,
    })
    return 0


def cmd_calibrate(ns: argparse.Namespace) -> int:
    per = min(ns.per_instance, ns.students)
    chunks = math.ceil(ns.students / per)
    profile = _PROFILES.get(ns.popular, PROFILE_9_POPULAR)
    if ns.gamma != 1.0:
        profile = profile.scaled(ns.gamma)
    instances = []
    remaining = ns.students
    for t in range(chunks):
        n_here = min(per, remaining)
        remaining -= n_here
        cat = make_catalog(
            m=ns.courses, n_students=n_here, max_courses=ns.max_courses,
            supply_ratio=ns.supply_ratio, n_popular=ns.popular,
        )
        n_fav = min(5, ns.popular)
        gen = GeneratorConfig(
            n_popular=ns.popular, n_favorites=n_fav, n_centers=min(2, n_fav),
            max_courses=ns.max_courses,
            additive_mode=ns.additive, seed=ns.seed + t,
        )
        instances.append(Instance(cat, generate_instance(gen, cat, n_here)))
    rep = calibration_metrics(
        instances, profile, n_probe_pairs=ns.probe_pairs, seed=ns.seed
    )
    _write(ns.out, "calibration.csv",
           rep.CSV_HEADER + "\n" + rep.to_csv_row())
    _echo_config(ns.out, "calibrate", {
        "students": ns.students, "per_instance": per, "courses": ns.courses,
        "max_courses": ns.max_courses, "popular": ns.popular,
        "supply_ratio": ns.supply_ratio, "gamma": ns.gamma,
        "probe_pairs": ns.probe_pairs, "additive": ns.additive,
        "seed": ns.seed,
    })
    return 0


def cmd_run(ns: argparse.Namespace) -> int:
    _apply_scale(ns)
    spec = ExperimentSpec(
        mechanisms=_battery(ns.queries, tuple(ns.algorithms), ns.projected),
        supply_ratios=(ns.supply_ratio,),
        n_populars=(ns.popular,),
        n_instances=ns.instances,
        n_students=ns.students,
        n_courses=ns.courses,
        max_courses=ns.max_courses,
        additive=ns.additive,
        seed=ns.seed,
    )
    return _emit_experiment(ns, spec, "run")


def cmd_sweep(ns: argparse.Namespace) -> int:
    _apply_scale(ns)
    mechs = (
        MechanismConfig(CM),
        MechanismConfig(MLCM, n_queries=ns.queries, query_algorithm=OBIS),
    )
    spec = ExperimentSpec(
        mechanisms=mechs,
        supply_ratios=_floats(ns.supply_ratios),
        n_populars=tuple(int(x) for x in ns.populars.split(",")),
        gammas=_floats(ns.gammas),
        p_ms=_floats(ns.p_ms),
        price_noises=_noises(ns.noises),
        n_instances=ns.instances,
        n_students=ns.students,
        n_courses=ns.courses,
        max_courses=ns.max_courses,
        additive=ns.additive,
        seed=ns.seed,
    )
    return _emit_experiment(ns, spec, "sweep")


def cmd_optin(ns: argparse.Namespace) -> int:
    _apply_scale(ns)
    spec = ExperimentSpec(
        mechanisms=(
            MechanismConfig(MLCM, n_queries=ns.queries, query_algorithm=OBIS),
        ),
        supply_ratios=(ns.supply_ratio,),
        n_populars=(ns.popular,),
        n_instances=ns.instances,
        n_students=ns.students,
        n_courses=ns.courses,
        max_courses=ns.max_courses,
        additive=ns.additive,
        seed=ns.seed,
    )
    res = opt_in_study(spec, ns.mode)
    _write(ns.out, "optin_students.csv", res.per_student_csv())
    _write(ns.out, "optin_summary.csv", res.summary_csv())
    _echo_config(ns.out, "optin", {
        **_spec_params(spec), "mode": ns.mode, "queries": ns.queries,
    })
    return 0


def cmd_qstudy(ns: argparse.Namespace) -> int:
    spec = ExperimentSpec(
        mechanisms=(MechanismConfig(CM_STAR),),  # only the economies matter
        supply_ratios=(ns.supply_ratio,),
        n_populars=(ns.popular,),
        n_instances=ns.instances,
        n_students=ns.students,
        n_courses=ns.courses,
        max_courses=ns.max_courses,
        additive=ns.additive,
        seed=ns.seed,
    )
    res = query_algorithm_study(
        build_instances(spec),
        n_queries=ns.queries,
        profile=_PROFILES.get(ns.popular, PROFILE_9_POPULAR),
        seed=ns.seed,
    )
    _write(ns.out, "qstudy.csv", res.to_csv())
    _echo_config(ns.out, "qstudy", {
        "queries": ns.queries, "instances": ns.instances,
        "students": ns.students, "courses": ns.courses,
        "max_courses": ns.max_courses, "popular": ns.popular,
        "supply_ratio": ns.supply_ratio, "additive": ns.additive,
        "seed": ns.seed,
    })
    return 0


def cmd_audit(ns: argparse.Namespace) -> int:
    inst = instance_from_json(Path(ns.instance).read_text())
    caps = tuple(int(c.capacity) for c in inst.catalog.courses)
    k = max(u.perm.max_courses for u in inst.students)
    if ns.allocation is not None:
        alloc, _ = allocation_from_json(Path(ns.allocation).read_text())
        source = Path(ns.allocation).name
    else:
        cfg = MechanismConfig(
            ns.mechanism,
            n_queries=ns.queries if ns.mechanism in _MODEL else 0,
            query_algorithm=OBIS if ns.mechanism in _MODEL else None,
            seed=ns.seed,
        )
        result = run_mechanism(inst, cfg)
        alloc = result.allocation
        source = mechanism_label(cfg)
    rpt = audit_fairness(
        alloc, inst.students, eps=ns.eps, capacities=caps, max_courses=k
    )
    doc = {
        "source": source,
        "eps": rpt.eps,
        "n": rpt.n,
        "allocation": [int(x) for x in alloc],
        "envy_bound": rpt.envy_bound,
        "envy_ok": rpt.envy_ok,
        "envy_residual": [[round(float(v), 9) for v in row]
                          for row in rpt.envy_residual],
        "mms": None if rpt.mms is None else [float(v) for v in rpt.mms],
        "mms_ok": rpt.mms_ok,
        "pareto_ok": rpt.pareto_ok,
        "pareto_witness": rpt.pareto_witness,
        "skipped": rpt.skipped,
    }
    _write(ns.out, "audit.json", json.dumps(doc, indent=1, sort_keys=True))
    _echo_config(ns.out, "audit", {
        "instance": Path(ns.instance).name, "source": source,
        "eps": ns.eps, "seed": ns.seed,
    })
    return 0


def cmd_serve(ns: argparse.Namespace) -> int:
    import uvicorn

    from .service import app_from_files

    app = app_from_files(
        ns.instance, ns.data_dir, seed=ns.seed,
        algorithm=ns.algorithm, sim_queries=ns.sim_queries,
    )
    uvicorn.run(app, host=ns.host, port=ns.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="courselab",
        description="Desk-scale laboratory for ML-powered course allocation.",
    )
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen", help="write a synthetic economy to instance.json")
    _econ_args(p)
    _common(p)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("calibrate", help="reporting-mistake summary statistics")
    p.add_argument("--students", type=int, default=2000,
                   help="total simulated students")
    p.add_argument("--per-instance", type=int, default=100)
    p.add_argument("--courses", type=int, default=25)
    p.add_argument("--max-courses", type=int, default=5)
    p.add_argument("--popular", type=int, default=9)
    p.add_argument("--supply-ratio", type=float, default=1.25)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--probe-pairs", type=int, default=25)
    p.add_argument("--additive", action="store_true")
    _common(p)
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("run", help="mechanism battery on one market")
    _econ_args(p)
    p.add_argument("--queries", type=int, default=10)
    p.add_argument("--algorithms", nargs="+", default=list(ALGORITHMS),
                   choices=list(ALGORITHMS))
    p.add_argument("--projected", action="store_true",
                   help="also run the model-distilled-to-report variant")
    p.add_argument("--times", action="store_true",
                   help="also write times.json (not byte-reproducible)")
    _common(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("sweep", help="battery across robustness axes")
    _econ_args(p)
    p.add_argument("--queries", type=int, default=10)
    p.add_argument("--supply-ratios", default="1.25")
    p.add_argument("--populars", default="9")
    p.add_argument("--gammas", default="1.0")
    p.add_argument("--p-ms", default="0.0")
    p.add_argument("--noises", default="",
                   help="price perturbations, e.g. GAUSS:0.2,UNIFORM:0.5")
    p.add_argument("--times", action="store_true")
    _common(p)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("optin", help="single-student opt-in gains")
    _econ_args(p)
    p.add_argument("--mode", choices=(NOBODY_ELSE, EVERYBODY_ELSE),
                   default=NOBODY_ELSE)
    p.add_argument("--queries", type=int, default=10)
    _common(p)
    p.set_defaults(fn=cmd_optin)

    p = sub.add_parser("qstudy", help="query-generator comparison curves")
    _econ_args(p, instances=4)
    p.add_argument("--queries", type=int, default=25)
    _common(p)
    p.set_defaults(fn=cmd_qstudy)

    p = sub.add_parser("audit", help="fairness audit of an allocation")
    p.add_argument("--instance", required=True, help="instance.json path")
    p.add_argument("--allocation",
                   help="allocation JSON; omit to run --mechanism instead")
    p.add_argument("--mechanism", default=MLCM,
                   choices=(CM_STAR, CM, CM_NO_MISTAKES, MLCM, MLCM_PROJECTED, RSD))
    p.add_argument("--queries", type=int, default=10)
    p.add_argument("--eps", type=float, required=True,
                   help="tolerance for all three checks")
    _common(p)
    p.set_defaults(fn=cmd_audit)

    p = sub.add_parser("serve", help="run the live-session HTTP service")
    p.add_argument("--instance", required=True, help="instance.json path")
    p.add_argument("--data-dir", required=True, type=Path)
    p.add_argument("--port", type=int, default=8734)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--algorithm", default=OBIS, choices=list(ALGORITHMS))
    p.add_argument("--sim-queries", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_serve)

    return ap


def main(argv: list[str] | None = None) -> int:
    ns = build_parser().parse_args(argv)
    return ns.fn(ns)


if __name__ == "__main__":
    raise SystemExit(main())
