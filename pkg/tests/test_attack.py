import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import make_upload
from ldprecon.attack import (AttackConfig, SampleReconstructor, align_and_filter,
                             estimate_sigma, noise_filter, primary_attack, quantize,
                             raw_reconstruct, reconstruct_bias, rescale_metrics, run_attack,
                             snap_reverse_indices)
from ldprecon.core import SeededRng
from ldprecon.exceptions import DomainError, InsufficientSamplesError
from ldprecon.ldp import LdpConfig, protect
from ldprecon.model import BIAS, WEIGHT
from ldprecon.optimize import ObjectiveWeights


def test_primary_attack_returns_batch_mean():
    x = np.random.default_rng(0).uniform(size=(4, 12))
    g = 0.7
    dw = (g * x).sum(axis=0)
    db = np.array([4 * g])
    np.testing.assert_allclose(primary_attack(dw, db), x.mean(axis=0))


def test_reconstruct_bias_average():
    rows = np.tile([1.0, -2.0, 0.0], (5, 1))
    np.testing.assert_array_equal(reconstruct_bias(rows), [1.0, -2.0, 0.0])
    noisy = rows + np.random.default_rng(0).normal(0, 0.1, rows.shape)
    np.testing.assert_allclose(reconstruct_bias(noisy), noisy.mean(axis=0), rtol=1e-12)


def test_raw_reconstruct_floor_and_shape():
    w = np.array([[2.0, 4.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0]])
    out, valid = raw_reconstruct(w, np.array([2.0, 0.0]), image_shape=(1, 1, 2))
    assert valid.tolist() == [True, False]
    np.testing.assert_array_equal(out[0], [[[1.0, 2.0]]])
    assert np.all(out[1] == 0)
    with pytest.raises(ValueError):
        raw_reconstruct(w, np.ones(3))


def test_estimate_sigma_behaviour(upload):
    st_, _, _, _, bundle = upload
    zp = st_.zero_positions()
    assert estimate_sigma(bundle, zp) == 0.0
    noisy = protect(bundle, LdpConfig(), SeededRng(0))
    assert estimate_sigma(noisy, zp) == pytest.approx(0.002, rel=0.05)
    with pytest.raises(InsufficientSamplesError):
        estimate_sigma(noisy, zp, min_negatives=10**9)
    positive = {WEIGHT: np.abs(noisy[WEIGHT])}
    with pytest.raises(DomainError):
        estimate_sigma(positive, zp)


def test_noise_filter_threshold_rule():
    img = np.array([[[[0.1, 0.5, -0.5, 0.0]]]])
    sigma = 0.01
    thr = 2.576 * sigma * np.sqrt(2)
    b = np.array([thr / 0.3])
    out, empty = noise_filter(img, sigma, b, return_flags=True)
    assert out.ravel().tolist() == [0.0, 0.5, -0.5, 0.0]
    assert empty.tolist() == [False]
    np.testing.assert_array_equal(noise_filter(img, 0.0, b), img)
    with pytest.raises(DomainError):
        noise_filter(img, sigma, b, z=0)


@settings(max_examples=30)
@given(st.integers(0, 10**6))
def test_noise_filter_never_grows_magnitudes(seed):
    g = np.random.default_rng(seed)
    x = g.normal(size=(3, 1, 4, 4))
    out = noise_filter(x, float(g.uniform(0, 1)), g.uniform(0.1, 3, 3))
    assert np.all((out == 0) | (out == x))


def test_quantize_grid():
    q = quantize(np.array([-0.2, 0.5, 1.3, 0.1234]))
    assert q.tolist()[:3] == [0.0, 128 / 255, 1.0]
    assert q[3] * 255 == pytest.approx(round(0.1234 * 255))


def test_align_and_filter_overlap():
    raw = np.arange(5 * 2, dtype=float).reshape(5, 1, 1, 2)
    metrics = np.arange(3 * 3, dtype=float).reshape(3, 1, 3)
    al = align_and_filter(raw, metrics, np.array([4, 2, 4]))
    assert al.units.tolist() == [2, 4]
    assert al.overlapped.tolist() == [False, True]
    assert al.sample_pair.tolist() == [1, 0, 1]
    np.testing.assert_array_equal(al.images[1], raw[3])
    assert al.discarded == 3


def test_snap_moves_to_active_units():
    bias = np.zeros(20)
    bias[[4, 9, 14]] = 1.0
    snapped, moved = snap_reverse_indices(np.array([6, 10, 13]), bias, threshold=0.5)
    assert snapped.tolist() == [5, 10, 15]
    assert moved.tolist() == [True, False, True]


def test_rescale_metrics():
    stats = np.ones((2, 1, 3))
    out, factor = rescale_metrics(stats, np.array([9.0, 20.0]), np.array([10, 20]))
    assert factor == pytest.approx(490 / 481)
    np.testing.assert_allclose(out, stats * factor)


def test_exact_reconstruction_single_sample():
    st_, _, _, masked, bundle = make_upload(2, B=1)
    res = run_attack(bundle, st_, AttackConfig(), reference=masked.images)
    assert res.sigma_hat == 0.0
    assert res.quality.mean_mse <= 1e-18
    assert res.quality.mean_ssim == 1.0


def test_batch_reconstruction_without_noise():
    st_, _, _, masked, bundle = make_upload(5, B=4)
    res = run_attack(bundle, st_, AttackConfig(), reference=masked.images)
    sep = ~res.overlapped
    assert res.quality.mse[sep].max() <= 1e-18
    assert len(res.final_images) == 4
    assert res.to_csv().splitlines()[0].startswith("sample,reverse_unit")


def test_noisy_reconstruction_beats_random():
    st_, _, _, masked, bundle = make_upload(3, B=4, shape=(3, 16, 16), K=64, D_b=50)
    noisy = protect(bundle, LdpConfig(), SeededRng(3))
    cfg = AttackConfig(weights=ObjectiveWeights(rounds=100))
    res = run_attack(noisy, st_, cfg, reference=masked.images)
    assert res.sigma_hat == pytest.approx(0.002, rel=0.1)
    assert res.quality.mean_psnr > 20


def test_estimator_api(upload):
    st_, _, _, _, bundle = upload
    est = SampleReconstructor(structure=st_, rounds=5)
    params = est.get_params()
    assert params["rounds"] == 5 and params["z"] == 2.576
    assert clone(est).get_params()["structure"] == st_
    with pytest.raises(NotFittedError):
        est.transform()
    out = est.fit(bundle.grads).transform()
    assert out.shape == (4, 3, 8, 8)
    np.testing.assert_array_equal(est.transform(bundle.grads), out)
    with pytest.raises(ValueError):
        SampleReconstructor().fit(bundle)


def test_attacker_never_sees_victim_state(upload):
    st_, _, _, _, bundle = upload
    noisy = protect(bundle, LdpConfig(C=1e-3), SeededRng(0))
    est = SampleReconstructor(structure=st_, rounds=0).fit(noisy)
    assert not any(hasattr(est, n) for n in ("delta_", "sigma_"))
    assert est.sigma_hat_ == pytest.approx(LdpConfig(C=1e-3).sigma, rel=0.1)
    assert noisy[BIAS].shape == (st_.D_b, st_.K)
