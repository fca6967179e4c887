import numpy as np
import pytest

from courselab.catalog import Permissibility, make_catalog, mask_of
from courselab.prefgen import (
    GeneratorConfig,
    Instance,
    SynergyCenter,
    TrueUtility,
    generate_instance,
    schedule_space,
)
from courselab.reporting import (
    CalibrationReport,
    GuiReport,
    MistakeProfile,
    PROFILE_9_POPULAR,
    calibration_metrics,
    eval_gui,
    gui_utilities,
    report,
    true_adjustments,
)


def make_student_with_synergies():
    base = np.array([10.0, 20.0, 30.0, 5.0, 0.0, 40.0])
    center = SynergyCenter(
        center=0,
        substitutes=frozenset({0, 3}),
        complements=frozenset({0, 1, 2}),
        psi=(0.0, 0.0, 0.2, 0.2),
        xi=(0.0, 0.0, -0.1),
    )
    return TrueUtility(base=base, centers=[center],
                       perm=Permissibility(max_courses=4))


def test_true_adjustments_degree_two_shadow():
    u = make_student_with_synergies()
    adj = true_adjustments(u)
    # complement pairs at psi(2)=0.2 over their base mass
    assert adj[(0, 1)] == pytest.approx(0.2 * 30.0)
    assert adj[(0, 2)] == pytest.approx(0.2 * 40.0)
    assert adj[(1, 2)] == pytest.approx(0.2 * 50.0)
    # substitute pair at xi(2)=-0.1
    assert adj[(0, 3)] == pytest.approx(-0.1 * 15.0)
    assert set(adj) == {(0, 1), (0, 2), (1, 2), (0, 3)}


def test_noiseless_report_is_exact():
    u = make_student_with_synergies()
    r = report(u, MistakeProfile.noiseless(), seed=1)
    assert r.base == {j: u.base[j] for j in range(6) if u.base[j] > 0}
    assert r.adjustments == pytest.approx(true_adjustments(u))


def test_gamma_zero_collapses_to_noiseless():
    u = make_student_with_synergies()
    quiet = report(u, MistakeProfile(0.5, 0.48, 23, 0.2, gamma=0.0), seed=3)
    exact = report(u, MistakeProfile.noiseless(), seed=4)
    assert quiet.base == exact.base
    assert quiet.adjustments == pytest.approx(exact.adjustments)


def test_forget_everything():
    u = make_student_with_synergies()
    r = report(u, MistakeProfile(1.0, 0.0, 0.0, 0.0), seed=2)
    assert r.base == {} and r.adjustments == {}


def test_forgotten_courses_are_the_lowest_valued():
    u = make_student_with_synergies()
    r = report(u, MistakeProfile(0.5, 0.0, 0.0, 0.0), seed=5)
    # 5 positive-base courses, floor(0.5*5)=2 forgotten: courses 3 (5.0) and 0 (10.0)
    assert set(r.base) == {1, 2, 5}
    forgotten_max = max(u.base[j] for j in (0, 3))
    assert all(u.base[j] >= forgotten_max for j in r.base)


def test_report_deterministic_under_seed():
    u = make_student_with_synergies()
    a = report(u, PROFILE_9_POPULAR, seed=42)
    b = report(u, PROFILE_9_POPULAR, seed=42)
    assert a.base == b.base and a.adjustments == b.adjustments


def test_adjustment_needs_both_bases():
    u = make_student_with_synergies()
    # forget 3 of 5 positive courses -> courses {3,0,1} dropped, so any
    # adjustment touching them must vanish
    r = report(u, MistakeProfile(0.6, 0.0, 0.0, 0.0), seed=6)
    assert set(r.base) == {2, 5}
    assert r.adjustments == {}


def test_eval_gui_examples():
    r = GuiReport(base={0: 75.0, 1: 77.0, 2: 42.0, 3: 45.0})
    assert eval_gui(r, 0) == 0.0
    assert eval_gui(r, mask_of([1, 3])) == 122.0
    r2 = GuiReport(base={0: 10.0, 1: 20.0}, adjustments={(0, 1): 10.0})
    assert eval_gui(r2, mask_of([0, 1])) == 40.0
    assert eval_gui(r2, mask_of([0])) == 10.0


def test_eval_gui_additive_increments():
    rng = np.random.default_rng(0)
    base = {j: float(rng.uniform(1, 100)) for j in range(6)}
    adjustments = {}
    for j in range(6):
        for jj in range(j + 1, 6):
            if rng.random() < 0.4:
                adjustments[(j, jj)] = float(rng.uniform(-50, 50))
    r = GuiReport(base=base, adjustments=adjustments)
    for _ in range(100):
        x = int(rng.integers(0, 64))
        j = int(rng.integers(0, 6))
        if x >> j & 1:
            continue
        lhs = eval_gui(r, x | 1 << j) - eval_gui(r, x)
        want = base[j] + sum(
            a for (p, q), a in adjustments.items()
            if (p == j and x >> q & 1) or (q == j and x >> p & 1)
        )
        assert lhs == pytest.approx(want)


def test_gui_utilities_matches_scalar():
    u = make_student_with_synergies()
    r = report(u, PROFILE_9_POPULAR, seed=9)
    space = schedule_space(u.perm, 6)
    vec = gui_utilities(r, space)
    for i, mk in enumerate(space.masks):
        assert vec[i] == pytest.approx(eval_gui(r, int(mk)))


def test_report_validation():
    with pytest.raises(ValueError):
        GuiReport(base={0: 101.0})
    with pytest.raises(ValueError):
        GuiReport(base={0: 50.0}, adjustments={(0, 1): 10.0})
    with pytest.raises(ValueError):
        GuiReport(base={0: 50.0, 1: 60.0}, adjustments={(1, 0): 10.0})
    with pytest.raises(ValueError):
        GuiReport(base={0: 50.0, 1: 60.0}, adjustments={(0, 1): 250.0})


def test_report_json_round_trip():
    u = make_student_with_synergies()
    r = report(u, PROFILE_9_POPULAR, seed=10)
    again = GuiReport.from_json(r.to_json())
    assert again.base == r.base
    assert again.adjustments == r.adjustments
    assert again.to_json() == r.to_json()


def test_calibration_perfect_reports_give_full_accuracy():
    cat = make_catalog(m=10, n_students=20, max_courses=4, supply_ratio=1.5,
                       n_popular=5)
    cfg = GeneratorConfig(n_popular=5, n_favorites=3, n_centers=1,
                          additive_mode=True, seed=3, max_courses=4)
    inst = Instance(catalog=cat, students=generate_instance(cfg, cat, 120))
    rep = calibration_metrics([inst], MistakeProfile.noiseless(),
                              n_probe_pairs=5, seed=0)
    assert rep.cq_accuracy_pct == 100.0
    assert rep.median_disagreement_pct == 0.0
    assert rep.n_students == 120


def test_calibration_requires_population():
    cat = make_catalog(m=6, n_students=5, max_courses=3, supply_ratio=2.0,
                       n_popular=3)
    cfg = GeneratorConfig(n_popular=3, n_favorites=2, n_centers=1, seed=1,
                          max_courses=3)
    inst = Instance(catalog=cat, students=generate_instance(cfg, cat, 10))
    with pytest.raises(ValueError):
        calibration_metrics([inst], MistakeProfile.noiseless())


def test_calibration_csv_row_shape():
    row = CalibrationReport(12.5, 6.3, 6.2, 1.0, 1.0, 0, 9, 81.0, -15.5, 2000)
    assert len(row.to_csv_row().split(",")) == len(
        CalibrationReport.CSV_HEADER.split(","))
