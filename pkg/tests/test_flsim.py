import numpy as np
import pytest

from ldprecon import flsim
from ldprecon.core import SeededRng
from ldprecon.data import SubjectSpec, gen_synthetic_batch
from ldprecon.exceptions import AggregationError
from ldprecon.ldp import LdpConfig
from ldprecon.model import TargetModel, build_structure, init_params

SHAPE = (1, 8, 8)


@pytest.fixture
def fed_setup():
    st = build_structure(SHAPE, K=32, D_b=5, N_m=4, batch_size=4)
    target = TargetModel(st.n_pixels, 8)
    rng = SeededRng(0)
    params = init_params(st, target, rng)
    spec = SubjectSpec(size_range=(0.25, 0.45))
    test = gen_synthetic_batch(rng, 40, *SHAPE, spec)
    users = flsim.make_users(rng, 4, 12, SHAPE, 4, LdpConfig(), spec)
    return flsim.Federation(st, target, test), params, users


def test_designate_victim_roles(fed_setup):
    _, _, users = fed_setup
    flsim.designate_victim(users, 2, tau=100.0)
    assert [u.is_victim for u in users] == [False, False, True, False]
    assert users[2].tau == 100.0 and users[0].tau == flsim.TAU_SMALL
    flsim.designate_victim(users, None, 0.0, 0.0)
    assert not any(u.is_victim for u in users)
    with pytest.raises(KeyError):
        flsim.designate_victim(users, 99, tau=1.0)


def _loop_average(users, params, rng, fed):
    """Oracle: recompute every non-victim update and average by hand."""
    streams = rng.spawn(len(users))
    acc, n = None, 0
    for u, s in zip(users, streams):
        _, bundle, _ = flsim._local_update(fed, params, u, s)
        if u.is_victim:
            continue
        g = bundle.target_grads()
        acc = {k: v.copy() for k, v in g.items()} if acc is None else \
            {k: acc[k] + g[k] for k in g}
        n += 1
    return {k: v / n for k, v in acc.items()}


def test_round_excludes_victim(fed_setup):
    fed, params, users = fed_setup
    flsim.designate_victim(users, 1, tau=fed.structure.tau)
    rep = flsim.run_round(users, params, SeededRng(9), fed)
    assert rep.victim_id == 1 and rep.victim_bundle is not None
    oracle = _loop_average(users, params, SeededRng(9), fed)
    for k in oracle:
        np.testing.assert_allclose(rep.aggregate[k], oracle[k], rtol=1e-12)
    assert len(rep.row()) == len(rep.CSV_COLUMNS)


def test_round_without_non_targets(fed_setup):
    fed, params, users = fed_setup
    flsim.designate_victim(users[:1], 0, tau=1.0)
    with pytest.raises(AggregationError):
        flsim.run_round(users[:1], params, SeededRng(0), fed)


def test_train_deterministic_and_csv(fed_setup):
    fed, params, users = fed_setup
    a = flsim.train(users, 3, 0.1, fed, params, SeededRng(1))
    b = flsim.train(users, 3, 0.1, fed, params, SeededRng(1))
    assert a.accuracy == b.accuracy
    assert [r.victim_id for r in a.reports] == [0, 1, 2]
    assert a.to_csv().splitlines()[0] == "round,accuracy,victim,mean_loss,mean_norm"
    empty = flsim.train(users, 0, 0.1, fed, params, SeededRng(1))
    assert empty.accuracy == [] and 0 <= empty.initial_accuracy <= 1
    off = flsim.train(users, 2, 0.1, fed, params, SeededRng(1), attack=False)
    assert all(r.victim_id is None for r in off.reports)


def test_train_leaves_structure_untouched(fed_setup):
    fed, params, users = fed_setup
    res = flsim.train(users, 2, 0.1, fed, params, SeededRng(1))
    assert set(res.reports[0].aggregate) == {k for k in params if k.startswith("target.")}


def test_attack_round_recovers_victim(fed_setup):
    fed, params, users = fed_setup
    rep, res = flsim.attack_round(users, 0, SeededRng(4), fed, params)
    assert rep.victim_id == 0
    assert res.sigma_hat == pytest.approx(LdpConfig().sigma, rel=0.1)
    assert len(res.final_images) == 4


def test_gradient_difference_proportions(fed_setup):
    fed, params, users = fed_setup
    props = flsim.gradient_difference(users, fed, params, 7)
    assert sum(props) == pytest.approx(1.0)
    again = flsim.gradient_difference(users, fed, params, 7)
    np.testing.assert_array_equal(props, again)
