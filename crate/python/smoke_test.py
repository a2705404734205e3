"""Smoke test for the gwwalk extension module.

Build and install first, e.g. `maturin develop -m crates/py/Cargo.toml`,
then run `python -m pytest python/smoke_test.py`.
"""

import math

import pytest

import gwwalk


@pytest.fixture(scope="module")
def laws():
    return gwwalk.DerivedLaws(gwwalk.OffspringLaw([(0, 0.25), (2, 0.75)]))


def test_reference_law(laws):
    assert laws.q == pytest.approx(1 / 3, abs=1e-12)
    assert laws.mu == pytest.approx(1.5)
    assert laws.thresholds() == pytest.approx((2 / 3, math.sqrt(2), 2.0))
    assert [laws.regime(b) for b in (0.5, 1.0, 1.8, 2.5)] == [
        "recurrent",
        "ballistic_clt",
        "ballistic_no_clt",
        "sub_ballistic",
    ]
    assert sum(p for _, p in laws.trap_law.atoms()) == pytest.approx(1.0)


def test_invalid_laws_raise():
    with pytest.raises(gwwalk.GwwalkError, match="normalization"):
        gwwalk.OffspringLaw([(0, 0.2), (2, 0.7)])
    with pytest.raises(ValueError):
        gwwalk.DerivedLaws(gwwalk.OffspringLaw([(0, 0.5), (1, 0.5)]))
    law = gwwalk.OffspringLaw.from_json('[[0, "1/4"], [2, "3/4"]]')
    assert law.extinction_probability() == pytest.approx(1 / 3)


def test_tree_is_a_function_of_its_seed(laws):
    seed = gwwalk.derive_seed(gwwalk.DEFAULT_SEED, "tree", 0)
    a, b = gwwalk.Tree(laws, seed), gwwalk.Tree(laws, seed)
    assert a.to_text(4) == b.to_text(4)
    root = a.expand([])
    assert root["is_backbone"] and root["level"] == 0
    assert root["backbone_children"] >= 1
    assert a.generation_sizes(3)[0] == 1
    height, exact = a.branch_height([0], 8)
    assert 0 <= height <= 8 and isinstance(exact, bool)


def test_walk_and_regenerations(laws):
    tree = gwwalk.Tree(laws, 7)
    traj = gwwalk.run_walk(tree, 1.0, 20_000, 8, record_moves=True)
    assert len(traj) == 20_001
    assert all(abs(x - y) == 1 for x, y in zip(traj.levels, traj.levels[1:]))
    assert len(traj.vertices()) == len(traj)
    rec = traj.regenerations()
    assert len(rec["zeta_x"]) == len(rec["zeta_y"]) > 5
    assert all(dt > 0 and dl > 0 for dt, dl in rec["increments"])
    assert gwwalk.detect_regenerations([0, 1, 2, 1, 2, 3]) == ([1], 5)


def test_statistics():
    report = gwwalk.chi_square_test([25, 25, 50], [0.25, 0.25, 0.5])
    assert report["p_value"] == pytest.approx(1.0)
    with pytest.raises(gwwalk.GwwalkError):
        gwwalk.ks_normal([0.0] * 5)


def test_experiment_round_trip(laws):
    out = gwwalk.experiment("regimes", laws, [1.0, 1.8])
    assert out["pass"]
    assert out["tables"]["regimes"].startswith("beta,regime")
    speed = gwwalk.experiment(
        "speed", laws, [1.0], seed=3, params='{"steps": 20000, "walks": 2, "iid_blocks": 100}'
    )
    assert speed["tables"]["speed"].count("\n") == 2
