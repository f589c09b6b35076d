"""Property-based invariants over randomized inputs."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from maskfield.aggregator import cross_entropy, mask_distance
from maskfield.render import composite_weights, softmax_rows
from maskfield.rng import uniform01

finite_floats = st.floats(min_value=-50, max_value=50, allow_nan=False)


@given(
    sigma=hnp.arrays(np.float64, (4, 12), elements=st.floats(0, 500)),
    delta=hnp.arrays(np.float64, (4, 12), elements=st.floats(1e-6, 0.2)),
)
@settings(max_examples=60, deadline=None)
def test_compositing_conserves_probability_mass(sigma, delta):
    w, trans_end = composite_weights(sigma, delta)
    assert np.all(w >= 0)
    assert np.all(trans_end >= 0)
    total = w.sum(axis=1) + trans_end
    assert np.abs(total - 1.0).max() < 1e-9


@given(
    sigma=hnp.arrays(np.float64, (3, 10), elements=st.floats(0, 200)),
    delta=hnp.arrays(np.float64, (3, 10), elements=st.floats(1e-6, 0.1)),
)
@settings(max_examples=60, deadline=None)
def test_transmittance_never_increases_along_a_ray(sigma, delta):
    tau = sigma * delta
    trans = np.exp(-np.cumsum(tau, axis=1))
    assert np.all(np.diff(trans, axis=1) <= 1e-15)


@given(logits=hnp.arrays(np.float64, (5, 4), elements=finite_floats))
@settings(max_examples=100, deadline=None)
def test_softmax_rows_are_distributions(logits):
    p = softmax_rows(logits)
    assert np.all(p >= 0)
    assert np.abs(p.sum(axis=1) - 1.0).max() < 1e-12


@given(
    m0=hnp.arrays(np.float64, (6, 3), elements=st.floats(0, 1)),
    m1=hnp.arrays(np.float64, (6, 3), elements=st.floats(0, 1)),
    w=st.floats(0.5, 10),
)
@settings(max_examples=100, deadline=None)
def test_mask_distance_stays_in_its_band(m0, m1, w):
    f = mask_distance(m0, m1, w=w, eps=0.0)
    assert np.all(f >= np.exp(-w) - 1e-12)
    assert np.all(f <= 1.0 + 1e-12)
    # symmetric in its arguments
    assert np.allclose(f, mask_distance(m1, m0, w=w, eps=0.0))


@given(rows=st.integers(1, 8), cols=st.integers(2, 6), seed=st.integers(0, 2**31))
@settings(max_examples=50, deadline=None)
def test_cross_entropy_is_minimal_at_the_target(rows, cols, seed):
    rng = np.random.default_rng(seed)
    gt = rng.dirichlet(np.ones(cols), size=rows)
    other = rng.dirichlet(np.ones(cols), size=rows)
    at_target = cross_entropy(gt, gt)
    elsewhere = cross_entropy(gt, other)
    assert np.all(at_target <= elsewhere + 1e-12)


@given(
    words=st.lists(st.integers(0, 2**63 - 1), min_size=1, max_size=4),
)
@settings(max_examples=100, deadline=None)
def test_counter_rng_is_pure(words):
    args = [np.uint64(w) for w in words]
    a = uniform01(*args)
    b = uniform01(*args)
    assert a == b
    assert 0.0 <= float(a) < 1.0
