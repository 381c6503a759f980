import numpy as np
import pytest

from ldprecon.core import SeededRng
from ldprecon.data import extract_subject, gen_synthetic_batch
from ldprecon.model import TargetModel, build_structure, forward_backward, init_params


@pytest.fixture
def small_structure():
    return build_structure((3, 8, 8), K=32, D_b=10, N_m=4, batch_size=4)


def make_upload(seed, B=4, shape=(3, 8, 8), hidden=8, **structure_kw):
    """A clean (unprotected) gradient bundle for one synthetic batch."""
    kw = dict(K=32, D_b=10, N_m=4, batch_size=B)
    kw.update(structure_kw)
    st = build_structure(shape, **kw)
    rng = SeededRng(seed)
    target = TargetModel(st.n_pixels, hidden)
    params = init_params(st, target, rng)
    batch = gen_synthetic_batch(rng, B, *shape)
    masked = extract_subject(batch)
    _, bundle = forward_backward(st, target, params, batch.images, batch.labels, masked.masks)
    return st, target, params, masked, bundle


@pytest.fixture
def upload():
    return make_upload(0)


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / scale)
