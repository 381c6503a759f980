"""Randomized central finite-difference checks shared by unit and acceptance tests."""

import warnings

import numpy as np

from ldprecon.core import SeededRng
from ldprecon.data import gen_synthetic_batch
from ldprecon.model import (METRIC_B, METRIC_W, TargetModel, build_structure,
                            forward_backward, init_params)
from ldprecon.optimize import ObjectiveWeights, objective, objective_grad


def _rel(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / scale)


def model_case(seed, h=1e-6, coords=25):
    """Worst relative error over parameter groups for one random instance."""
    gen = np.random.default_rng(seed)
    c = int(gen.choice([1, 3]))
    side = int(gen.integers(8, 11))
    K = int(gen.integers(8, 33))
    B = int(gen.integers(1, 5))
    st = build_structure((c, side, side), K=K, D_b=int(gen.integers(1, 6)),
                         N_m=int(gen.integers(1, 6)), batch_size=B,
                         tau=float(gen.uniform(0.5, 5.0)))
    rng = SeededRng(seed)
    target = TargetModel(st.n_pixels, int(gen.integers(3, 9)))
    params = init_params(st, target, rng)
    params[METRIC_W] = gen.normal(0, 0.05, params[METRIC_W].shape)
    params[METRIC_B] = gen.normal(0, 0.05, params[METRIC_B].shape)
    batch = gen_synthetic_batch(rng, B, c, side, side)

    def loss(p):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return forward_backward(st, target, p, batch.images, batch.labels, batch.masks)[0]

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        _, bundle = forward_backward(st, target, params, batch.images, batch.labels, batch.masks)
    worst = 0.0
    for name, value in params.items():
        flat = value.ravel()
        idx = gen.choice(flat.size, size=min(coords, flat.size), replace=False)
        # include the largest analytic entries so sparse groups are exercised
        idx = np.unique(np.concatenate([idx, np.argsort(-np.abs(bundle[name].ravel()))[:5]]))
        fd = np.empty(idx.size)
        for j, i in enumerate(idx):
            plus = {k: v.copy() for k, v in params.items()}
            minus = {k: v.copy() for k, v in params.items()}
            plus[name].ravel()[i] += h
            minus[name].ravel()[i] -= h
            fd[j] = (loss(plus) - loss(minus)) / (2 * h)
        an = bundle[name].ravel()[idx]
        if np.linalg.norm(an) == 0 and np.linalg.norm(fd) < 1e-9:
            continue
        worst = max(worst, _rel(an, fd))
    return worst


def optimize_case(seed, h=1e-7):
    """Relative error of the objective gradient on a random small batch."""
    gen = np.random.default_rng(1000 + seed)
    b, c = int(gen.integers(1, 3)), int(gen.choice([1, 3]))
    hh, ww = int(gen.integers(3, 7)), int(gen.integers(3, 7))
    x = gen.uniform(0.05, 0.95, (b, c, hh, ww))
    # targets well away from the current statistics keep the L1 terms smooth
    t = np.stack([np.full((b, c), v) for v in (gen.uniform(0.0, 2.0), 0.5, 50.0)], axis=-1)
    w = ObjectiveWeights(w_mu=float(gen.uniform(0.5, 5)), w_sigma=float(gen.uniform(0.5, 5)),
                         w_tv=float(gen.uniform(0.5, 5)))
    an = objective_grad(x, t, w)
    fd = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.ravel()[i] += h
        xm.ravel()[i] -= h
        fd.ravel()[i] = (objective(xp, t, w).sum() - objective(xm, t, w).sum()) / (2 * h)
    return _rel(an, fd)
