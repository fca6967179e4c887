"""Mechanism tests: configuration validation, price perturbation, the
degeneracy identities that tie the mechanisms together, and determinism."""

import json

import numpy as np
import pytest

from courselab.catalog import make_catalog
from courselab.elicitation import NAIVE, OBIS, RANDOM
from courselab.market import is_feasible, seat_counts
from courselab.mechanism import (
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
    PriceSource,
    RunResult,
    perturb_prices,
    result_to_json,
    run_mechanism,
)
from courselab.prefgen import GeneratorConfig, Instance, generate_instance


def small_instance(seed=0, n=6, additive=False):
    # tiny economy so the model mechanisms stay fast: 10 courses, 3-course
    # schedules, everything else at generator defaults scaled down
    cat = make_catalog(m=10, n_students=n, max_courses=3, supply_ratio=1.25, n_popular=4)
    cfg = GeneratorConfig(
        n_popular=4,
        n_favorites=3,
        n_centers=0 if additive else 1,
        max_courses=3,
        additive_mode=additive,
        seed=seed,
    )
    return Instance(cat, generate_instance(cfg, cat, n))


# ---------------------------------------------------------------------------
# Configuration validation


def test_unknown_mechanism_kind_rejected():
    with pytest.raises(ValueError, match="unknown mechanism"):
        MechanismConfig("CLAIRVOYANT")


def test_query_fields_rejected_outside_model_mechanisms():
    with pytest.raises(ValueError, match="does not ask"):
        MechanismConfig(CM, n_queries=5)
    with pytest.raises(ValueError, match="opt-in"):
        MechanismConfig(CM_STAR, opt_in=(True, False))
    with pytest.raises(ValueError, match="price source"):
        MechanismConfig(RSD, price_source=PriceSource.external([0.1]))


def test_model_mechanisms_require_query_algorithm():
    with pytest.raises(ValueError, match="query algorithm"):
        MechanismConfig(MLCM, n_queries=3)
    with pytest.raises(ValueError, match="query algorithm"):
        MechanismConfig(MLCM_PROJECTED, n_queries=3, query_algorithm="GREEDY")


def test_negative_query_count_rejected():
    with pytest.raises(ValueError, match="nonnegative"):
        MechanismConfig(MLCM, n_queries=-1, query_algorithm=OBIS)


def test_perturb_spec_validation():
    with pytest.raises(ValueError, match="perturbation kind"):
        PerturbSpec("LAPLACE", 0.1)
    with pytest.raises(ValueError, match="nonnegative"):
        PerturbSpec(GAUSS, -0.5)


def test_price_source_validation():
    with pytest.raises(ValueError, match="FRESH"):
        PriceSource("FRESH", prices=(0.1,))
    with pytest.raises(ValueError, match="requires prices"):
        PriceSource("EXTERNAL")
    with pytest.raises(ValueError, match="does not take noise"):
        PriceSource("EXTERNAL", prices=(0.1,), noise=PerturbSpec(GAUSS, 0.1))
    with pytest.raises(ValueError, match="requires a PerturbSpec"):
        PriceSource("PERTURBED")
    with pytest.raises(ValueError, match="unknown price source"):
        PriceSource("WARM")


def test_opt_in_shape_checked():
    inst = small_instance()
    cfg = MechanismConfig(MLCM, query_algorithm=OBIS, opt_in=(True,) * 4, seed=1)
    with pytest.raises(ValueError, match="one flag per student"):
        run_mechanism(inst, cfg)


# ---------------------------------------------------------------------------
# Price perturbation


def test_gauss_zero_scale_is_identity():
    p = np.array([0.0, 0.3, 0.8])
    got = perturb_prices(p, PerturbSpec(GAUSS, 0.0, seed=5), b_min=1.0)
    assert np.array_equal(got, p)


def test_uniform_perturbation_stays_in_band_and_clamps():
    p = np.array([0.5, 1.2, 0.0, 0.9])
    spec = PerturbSpec(UNIFORM, 0.5, seed=11)
    got = perturb_prices(p, spec, b_min=1.0)
    assert np.all(got >= 0.0) and np.all(got <= 1.0)
    unclamped = p * (1 + np.random.default_rng(11).uniform(-0.5, 0.5, size=4))
    assert np.allclose(got, np.clip(unclamped, 0.0, 1.0))
    assert got[2] == 0.0  # zero price scales to zero


def test_gauss_perturbation_clamps_to_poorest_budget():
    p = np.array([50.0, 50.0])
    got = perturb_prices(p, PerturbSpec(GAUSS, 0.01, seed=2), b_min=1.02)
    assert np.all(got == 1.02)


# ---------------------------------------------------------------------------
# Degeneracy identities


def test_mlcm_with_everyone_opted_out_is_cm_exactly():
    inst = small_instance(seed=3)
    cm = run_mechanism(inst, MechanismConfig(CM, seed=3))
    mlcm = run_mechanism(
        inst,
        MechanismConfig(
            MLCM,
            n_queries=4,
            query_algorithm=OBIS,
            opt_in=(False,) * inst.n,
            seed=3,
        ),
    )
    assert np.array_equal(cm.allocation, mlcm.allocation)
    assert np.array_equal(cm.utilities, mlcm.utilities)
    assert mlcm.elicitation == []


def test_clairvoyant_equals_noiseless_reports_on_additive_instances():
    # with no synergy tables the reporting language expresses the whole
    # utility function, so mistake-free reports and true utilities induce
    # the same demand at every price vector
    for seed in (0, 4):
        inst = small_instance(seed=seed, additive=True)
        star = run_mechanism(inst, MechanismConfig(CM_STAR, seed=seed))
        nm = run_mechanism(inst, MechanismConfig(CM_NO_MISTAKES, seed=seed))
        assert np.array_equal(star.allocation, nm.allocation)


# ---------------------------------------------------------------------------
# Price sources


def test_external_prices_are_used_verbatim():
    inst = small_instance(seed=5)
    given = [0.25] * inst.catalog.m
    res = run_mechanism(
        inst,
        MechanismConfig(
            MLCM,
            n_queries=1,
            query_algorithm=NAIVE,
            price_source=PriceSource.external(given),
            seed=5,
        ),
    )
    assert np.allclose(res.query_prices, given)


def test_perturbed_source_with_zero_noise_keeps_given_prices():
    inst = small_instance(seed=5)
    given = [0.4] * inst.catalog.m
    res = run_mechanism(
        inst,
        MechanismConfig(
            MLCM,
            n_queries=1,
            query_algorithm=RANDOM,
            price_source=PriceSource.perturbed(PerturbSpec(GAUSS, 0.0), prices=given),
            seed=5,
        ),
    )
    assert np.allclose(res.query_prices, given)


# ---------------------------------------------------------------------------
# End-to-end shapes


def test_rsd_has_no_prices_and_is_feasible():
    inst = small_instance(seed=7)
    res = run_mechanism(inst, MechanismConfig(RSD, seed=7))
    assert res.prices is None and res.budgets is None and res.alphas == {}
    assert is_feasible(res.allocation, inst.catalog, [u.perm for u in inst.students])


def test_cm_run_shape_and_feasibility():
    inst = small_instance(seed=2)
    res = run_mechanism(inst, MechanismConfig(CM, seed=2))
    assert res.allocation.shape == (inst.n,)
    assert res.utilities.shape == (inst.n,)
    assert set(res.alphas) == {"stage1", "stage2", "stage3"}
    assert is_feasible(res.allocation, inst.catalog, [u.perm for u in inst.students])
    over = seat_counts(res.allocation, inst.catalog.m) - inst.catalog.capacities
    assert (over <= 0).all()


def test_mlcm_elicitation_logs_cover_opted_in_students_only():
    inst = small_instance(seed=9)
    opt = (True, False, True, False, True, False)
    res = run_mechanism(
        inst,
        MechanismConfig(
            MLCM, n_queries=2, query_algorithm=OBIS, opt_in=opt, seed=9
        ),
    )
    assert [e["student"] for e in res.elicitation] == [0, 2, 4]
    assert all(e["algorithm"] == OBIS for e in res.elicitation)
    assert all(e["n_answers"] <= 2 for e in res.elicitation)


def test_mlcm_projected_runs_and_yields_feasible_allocation():
    inst = small_instance(seed=6)
    res = run_mechanism(
        inst,
        MechanismConfig(MLCM_PROJECTED, n_queries=2, query_algorithm=OBIS, seed=6),
    )
    assert is_feasible(res.allocation, inst.catalog, [u.perm for u in inst.students])
    assert np.isfinite(res.utilities).all()


def test_runs_are_deterministic_in_the_seed():
    inst = small_instance(seed=1)
    cfg = MechanismConfig(MLCM, n_queries=3, query_algorithm=NAIVE, seed=4)
    a = run_mechanism(inst, cfg)
    b = run_mechanism(inst, cfg)
    assert np.array_equal(a.allocation, b.allocation)
    assert np.array_equal(a.prices, b.prices)
    assert a.elicitation == b.elicitation


def test_result_json_is_loadable_and_complete():
    inst = small_instance(seed=8)
    res = run_mechanism(inst, MechanismConfig(CM, seed=8))
    doc = json.loads(result_to_json(res))
    assert doc["kind"] == CM
    assert len(doc["allocation"]) == inst.n
    assert len(doc["utilities"]) == inst.n
    assert doc["budgets"] is not None and len(doc["budgets"]) == inst.n
    assert doc["query_prices"] is None


def test_total_and_min_utility_properties():
    u = np.array([3.0, 1.0, 2.0])
    res = RunResult(
        kind=CM, allocation=np.zeros(3, dtype=np.int64), utilities=u,
        prices=None, alphas={}, budgets=None,
    )
    assert res.total_utility == 6.0
    assert res.min_utility == 1.0
