import json

import numpy as np
import pytest

from courselab.catalog import Permissibility, make_catalog, mask_of
from courselab.prefgen import (
    GeneratorConfig,
    Instance,
    SynergyCenter,
    TrueUtility,
    argmax_true,
    eval_true,
    generate_instance,
    instance_from_json,
    instance_to_json,
    schedule_space,
    synergy_sets,
)
from oracles import exhaustive_argmax, synergy_objective_by_assignment


def tiny_catalog(m=8, n_popular=4):
    return make_catalog(m=m, n_students=6, max_courses=3, supply_ratio=2.0,
                        n_popular=n_popular)


def test_synergy_sets_on_wide_grid():
    # 30 courses sit on a 5x6 grid; course 9 is at (3, 1). Its L1-radius-1
    # ball is the plus shape {9, 3, 8, 10, 15}; the L-inf ball minus that,
    # plus the center, gives the diagonal corners {9, 2, 4, 14, 16}.
    cat = make_catalog(m=30, n_students=10, max_courses=5, supply_ratio=1.25,
                       n_popular=9)
    subs, comp = synergy_sets(cat, center=9, r_s=1, r_c=1)
    assert subs == frozenset({9, 3, 8, 10, 15})
    assert comp == frozenset({9, 2, 4, 14, 16})


def test_additive_mode_has_no_centers():
    cat = tiny_catalog()
    cfg = GeneratorConfig(n_popular=4, n_favorites=3, n_centers=2,
                          additive_mode=True, seed=11, max_courses=3)
    students = generate_instance(cfg, cat, 5)
    for s in students:
        assert s.centers == []
        x = mask_of([0, 2, 5])
        assert eval_true(s, x) == pytest.approx(s.base[[0, 2, 5]].sum())


def test_same_seed_same_instance():
    cat = tiny_catalog()
    cfg = GeneratorConfig(n_popular=4, n_favorites=3, n_centers=1, seed=99,
                          max_courses=3)
    a = generate_instance(cfg, cat, 4)
    b = generate_instance(cfg, cat, 4)
    for sa, sb in zip(a, b):
        np.testing.assert_array_equal(sa.base, sb.base)
        assert sa.centers == sb.centers
        assert sa.favorites == sb.favorites


def test_config_validation():
    with pytest.raises(ValueError):
        GeneratorConfig(n_popular=3, n_favorites=4, n_centers=1)
    cat = tiny_catalog(n_popular=4)
    with pytest.raises(ValueError):
        generate_instance(GeneratorConfig(n_popular=9), cat, 1)


def test_eval_true_empty_and_additive_example():
    u = TrueUtility(base=np.array([85.0, 70, 50, 40]), centers=[],
                    perm=Permissibility(max_courses=2))
    assert eval_true(u, 0) == 0.0
    assert eval_true(u, mask_of([0, 2])) == 135.0


def test_argmax_with_budget_cutting_off_top_pair():
    # the two best courses together cost 1.2 > budget, so the optimum pairs
    # the best course with a cheap one
    u = TrueUtility(base=np.array([85.0, 70, 50, 40]), centers=[],
                    perm=Permissibility(max_courses=2))
    p = np.array([0.6, 0.6, 0.3, 0.3])
    got = argmax_true(u, p, 1.0)
    assert got == mask_of([0, 2])
    assert eval_true(u, got) == 135.0


def test_argmax_nothing_affordable_returns_empty():
    u = TrueUtility(base=np.array([5.0, 6.0]), centers=[],
                    perm=Permissibility(max_courses=2))
    assert argmax_true(u, np.array([9.0, 9.0]), 1.0) == 0


def test_step_tables_satisfy_shape_invariants():
    cat = tiny_catalog()
    cfg = GeneratorConfig(n_popular=4, n_favorites=3, n_centers=2, seed=5,
                          max_courses=3)
    for s in generate_instance(cfg, cat, 30):
        for c in s.centers:
            assert c.psi[0] == c.psi[1] == 0
            assert c.xi[0] == c.xi[1] == 0
            assert all(b >= a for a, b in zip(c.psi, c.psi[1:]))
            assert all(b <= a for a, b in zip(c.xi, c.xi[1:]))
            assert c.center in c.substitutes and c.center in c.complements


def test_center_invariant_rejected():
    with pytest.raises(ValueError):
        SynergyCenter(center=0, substitutes=frozenset({1}),
                      complements=frozenset({0}), psi=(0.0, 0.0), xi=(0.0, 0.0))


def _random_students(n_instances, seed0):
    cat = tiny_catalog()
    out = []
    for i in range(n_instances):
        cfg = GeneratorConfig(n_popular=4, n_favorites=3, n_centers=2,
                              seed=seed0 + i, max_courses=3)
        out.append((cat, generate_instance(cfg, cat, 2)))
    return out


def test_eval_matches_assignment_enumeration():
    rng = np.random.default_rng(3)
    for cat, students in _random_students(15, seed0=100):
        for u in students:
            centers = [
                (c.complements, c.substitutes, c.psi, c.xi) for c in u.centers
            ]
            for _ in range(40):
                mask = int(rng.integers(0, 2 ** cat.m))
                ids = {j for j in range(cat.m) if mask >> j & 1}
                want = synergy_objective_by_assignment(u.base, centers, ids)
                assert eval_true(u, mask) == pytest.approx(want, abs=1e-9)


def test_argmax_matches_exhaustive_scan():
    rng = np.random.default_rng(4)
    for cat, students in _random_students(10, seed0=500):
        for u in students:
            centers = [
                (c.complements, c.substitutes, c.psi, c.xi) for c in u.centers
            ]
            p = rng.uniform(0, 0.5, size=cat.m)
            b = float(rng.uniform(0.5, 1.2))
            exclude = [int(rng.integers(0, 2 ** cat.m)) for _ in range(2)]
            got = argmax_true(u, p, b, exclude=exclude)
            want_mask, _ = exhaustive_argmax(
                lambda ids: synergy_objective_by_assignment(u.base, centers, ids),
                cat.m, u.perm.max_courses, p, b, exclude=exclude,
            )
            assert got == want_mask


def test_single_bit_deltas_decompose():
    # adding course j moves the value by base_j plus the table deltas of any
    # synergy set j belongs to
    for cat, students in _random_students(5, seed0=900):
        for u in students:
            space = schedule_space(u.perm, cat.m)
            rng = np.random.default_rng(1)
            for _ in range(30):
                x = int(space.masks[rng.integers(0, len(space))])
                for j in range(cat.m):
                    if x >> j & 1:
                        continue
                    y = x | (1 << j)
                    delta = eval_true(u, y) - eval_true(u, x)
                    want = u.base[j]
                    for c, csum, ssum in zip(u.centers, u._comp_sums, u._subs_sums):
                        if j in c.complements:
                            tau = len(c.complements & set(_bits(x)))
                            want += (c.psi[tau + 1] - c.psi[tau]) * csum
                        if j in c.substitutes:
                            kap = len(c.substitutes & set(_bits(x)))
                            want += (c.xi[kap + 1] - c.xi[kap]) * ssum
                    assert delta == pytest.approx(want, abs=1e-9)


def _bits(x):
    j = 0
    while x:
        if x & 1:
            yield j
        x >>= 1
        j += 1


def test_monotone_when_no_penalties():
    cat = tiny_catalog()
    cfg = GeneratorConfig(n_popular=4, n_favorites=3, n_centers=2, xi_max=0.0,
                          seed=21, max_courses=8)
    for u in generate_instance(cfg, cat, 5):
        rng = np.random.default_rng(7)
        for _ in range(50):
            x = int(rng.integers(0, 2 ** cat.m))
            j = int(rng.integers(0, cat.m))
            assert eval_true(u, x | (1 << j)) >= eval_true(u, x) - 1e-12


def test_vectorized_utilities_match_scalar():
    cat = tiny_catalog()
    cfg = GeneratorConfig(n_popular=4, n_favorites=3, n_centers=2, seed=13,
                          max_courses=3)
    (u,) = generate_instance(cfg, cat, 1)
    space = schedule_space(u.perm, cat.m)
    vec = u.utilities(space)
    for i, mk in enumerate(space.masks):
        assert vec[i] == pytest.approx(eval_true(u, int(mk)), abs=1e-9)


def test_instance_json_round_trip_bit_exact():
    cat = tiny_catalog()
    cfg = GeneratorConfig(n_popular=4, n_favorites=3, n_centers=2, seed=77,
                          max_courses=3)
    inst = Instance(catalog=cat, students=generate_instance(cfg, cat, 4))
    text = instance_to_json(inst)
    again = instance_from_json(text)
    assert instance_to_json(again) == text
    for a, b in zip(inst.students, again.students):
        np.testing.assert_array_equal(a.base, b.base)
        assert a.centers == b.centers
        assert json.dumps(a.perm.max_courses) == json.dumps(b.perm.max_courses)
