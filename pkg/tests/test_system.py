import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wbgnn import autodiff as ad
from wbgnn.autodiff import Tensor
from wbgnn.system import (
    CPair,
    HybridSolution,
    ScheduleBasis,
    apply_permutation,
    check_constraints,
    compute_features,
    extract_scheduled,
    extract_scheduled_tape,
    sum_rate,
    sum_rate_tape,
)

from conftest import central_fd, random_channel, rel_err, tape_grads


def brute_force_rate(h, sol, sigma2, activity=None):
    """Independent loop-based SINR evaluation."""
    m_rb, kr, _ = h.shape
    k = sol.w_bb.shape[-1]
    n_r = kr // k
    a = np.ones((m_rb, k)) if activity is None else activity
    total = 0.0
    for m in range(m_rb):
        for u in range(k):
            v = sol.v_rf[u * n_r:(u + 1) * n_r]
            row = v.conj() @ h[m, u * n_r:(u + 1) * n_r] @ sol.w_rf
            s = [abs(row @ sol.w_bb[m, :, i]) ** 2 * a[m, i] for i in range(k)]
            interference = sum(s) - s[u]
            total += np.log2(1 + s[u] / (interference + n_r * sigma2))
    return total / m_rb


def random_solution(rng, m, k, n_r, n_t, n_rf):
    w_rf = np.exp(1j * rng.uniform(-np.pi, np.pi, (n_t, n_rf)))
    w_bb = rng.normal(size=(m, n_rf, k)) + 1j * rng.normal(size=(m, n_rf, k))
    v = np.exp(1j * rng.uniform(-np.pi, np.pi, k * n_r))
    return HybridSolution(w_rf, w_bb, v)


def test_scalar_rate_is_one_bit():
    one = np.ones((1, 1, 1), complex)
    sol = HybridSolution(np.ones((1, 1), complex), np.ones((1, 1, 1), complex), np.ones(1, complex))
    assert sum_rate(one, sol, 1.0) == pytest.approx(1.0, abs=1e-15)


def test_zero_baseband_gives_zero_rate(rng):
    h = random_channel(rng, 2, 2, 1, 4)
    sol = random_solution(rng, 2, 2, 1, 4, 2)
    sol.w_bb[:] = 0
    assert sum_rate(h, sol, 0.1) == 0.0


def test_orthogonal_users_with_zero_forcing():
    h = np.eye(2, dtype=complex)[None]
    p = 3.0
    sol = HybridSolution(np.eye(2, dtype=complex), np.sqrt(p / 2) * np.eye(2, dtype=complex)[None], np.ones(2, complex))
    closed = 2 * np.log2(1 + (p / 2) / 0.5)
    assert sum_rate(h, sol, 0.5) == pytest.approx(closed, abs=1e-9)
    assert brute_force_rate(h, sol, 0.5) == pytest.approx(closed, abs=1e-9)


@pytest.mark.parametrize("n_r", [1, 2])
def test_rate_matches_brute_force(rng, n_r):
    for _ in range(5):
        h = random_channel(rng, 3, 2, n_r, 4)
        sol = random_solution(rng, 3, 2, n_r, 4, 3)
        assert sum_rate(h, sol, 0.7) == pytest.approx(brute_force_rate(h, sol, 0.7), rel=1e-12)


def test_soft_activity_weights(rng):
    h = random_channel(rng, 2, 3, 1, 4)
    sol = random_solution(rng, 2, 3, 1, 4, 3)
    a = rng.uniform(0, 1, (2, 3))
    assert sum_rate(h, sol, 0.3, schedule=a) == pytest.approx(brute_force_rate(h, sol, 0.3, a), rel=1e-12)


def test_rate_errors(rng):
    h = random_channel(rng, 1, 2, 1, 4)
    sol = random_solution(rng, 1, 2, 1, 4, 2)
    with pytest.raises(ValueError):
        sum_rate(h, sol, 0.0)
    with pytest.raises(ValueError):
        sum_rate(random_channel(rng, 1, 3, 1, 4), sol, 1.0)


def test_per_stream_rates_sum_to_total(rng):
    h = random_channel(rng, 2, 2, 1, 4)
    sol = random_solution(rng, 2, 2, 1, 4, 2)
    se, rates = sum_rate(h, sol, 0.2, per_stream=True)
    assert rates.shape == (2, 2)
    assert se == pytest.approx(rates.sum() / 2)


def test_tape_rate_matches_array_rate(rng):
    h = np.stack([random_channel(rng, 2, 2, 2, 4) for _ in range(3)])
    sols = [random_solution(rng, 2, 2, 2, 4, 2) for _ in range(3)]
    w_rf = np.stack([s.w_rf for s in sols])
    w_bb = np.stack([s.w_bb for s in sols])
    v = np.stack([s.v_rf for s in sols])
    got = sum_rate_tape(CPair.from_complex(h), CPair.from_complex(w_rf), CPair.from_complex(w_bb), CPair.from_complex(v), 0.4)
    np.testing.assert_allclose(got.data, sum_rate(h, HybridSolution(w_rf, w_bb, v), 0.4), rtol=1e-12)


# -- metamorphic rows of the permutation table --------------------------------------

@pytest.fixture
def scheduled_problem(rng):
    h = random_channel(rng, 3, 3, 2, 4)
    sol = random_solution(rng, 3, 3, 2, 4, 3)
    return h, sol, sum_rate(h, sol, 0.25)


@pytest.mark.parametrize("axis, size", [("rb", 3), ("an-bs", 4), ("user-group", 3), ("an-ue-within-group", 2)])
def test_joint_permutation_leaves_rate_unchanged(scheduled_problem, rng, axis, size):
    h, sol, base = scheduled_problem
    for _ in range(5):
        perm = rng.permutation(size)
        hp = apply_permutation(h, axis, perm, num_rx=2)
        sp = apply_permutation(sol, axis, perm)
        assert sum_rate(hp, sp, 0.25) == pytest.approx(base, abs=1e-9)


def test_permuting_only_the_channel_changes_rate(scheduled_problem):
    h, sol, base = scheduled_problem
    assert abs(sum_rate(apply_permutation(h, "an-bs", [1, 0, 2, 3]), sol, 0.25) - base) > 1e-6


# -- extraction -----------------------------------------------------------------------

def test_extract_hard_selection():
    h = np.arange(12, dtype=float).reshape(1, 3, 4).astype(complex)
    B = np.array([[[0, 1, 0], [1, 0, 0]]], float)
    out = extract_scheduled(h, ScheduleBasis(B), 1)
    np.testing.assert_array_equal(out[0], h[0, [1, 0]])


def test_extract_soft_average():
    h = np.arange(12, dtype=float).reshape(1, 3, 4).astype(complex)
    out = extract_scheduled(h, np.array([[[0.5, 0.5, 0.0]]]), 1)
    np.testing.assert_allclose(out[0, 0], (h[0, 0] + h[0, 1]) / 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 2))
def test_hard_extraction_is_bit_exact_row_selection(seed, n_r):
    rng = np.random.default_rng(seed)
    m, k, kp = 2, 4, 2
    h = random_channel(rng, m, k, n_r, 3)
    idx = np.stack([rng.choice(k, kp, replace=False) for _ in range(m)])
    B = np.zeros((m, kp, k))
    for i in range(m):
        B[i, np.arange(kp), idx[i]] = 1
    oracle = np.stack([np.concatenate([h[i, u * n_r:(u + 1) * n_r] for u in idx[i]]) for i in range(m)])
    assert np.array_equal(extract_scheduled(h, B, n_r), oracle)
    hp = extract_scheduled_tape(CPair.from_complex(h[None]), Tensor(B[None]), n_r)
    assert np.array_equal(hp.to_complex()[0], oracle)


def test_rate_gradient_through_soft_extraction(rng):
    h = random_channel(rng, 2, 3, 1, 3)[None]
    sol = random_solution(rng, 2, 2, 1, 3, 2)
    hp = CPair.from_complex(h)
    w_rf, w_bb, v = (CPair.from_complex(x[None]) for x in (sol.w_rf, sol.w_bb, sol.v_rf))

    def fn(t):
        B = ad.softmax(t[0], 1.0)
        return ad.sum_(sum_rate_tape(extract_scheduled_tape(hp, B, 1), w_rf, w_bb, v, 0.5))

    logits = [rng.normal(size=(1, 2, 2, 3))]
    assert rel_err(tape_grads(fn, logits), central_fd(fn, logits)) < 1e-5


# -- features -------------------------------------------------------------------------

def test_strength_of_identity_block():
    h = np.eye(2, dtype=complex)[None]
    f = compute_features(h, num_rx=2)
    assert f.raw_strength[0, 0] == pytest.approx(np.sqrt(2))


def test_correlation_of_orthonormal_pair():
    f = compute_features(np.eye(2, dtype=complex)[None], num_rx=1)
    np.testing.assert_allclose(f.raw_orth[0], [0.5, 0.5])


def test_population_standardization():
    # hand oracle: (x - 2) / sqrt(2/3)
    raw = np.array([1.0, 2.0, 3.0])
    oracle = (raw - 2) / np.sqrt(2 / 3)
    np.testing.assert_allclose(np.round(oracle, 4), [-1.2247, 0, 1.2247])
    h = np.zeros((1, 3, 2), complex)
    h[0, :, 0] = raw
    np.testing.assert_allclose(compute_features(h, 1).strength[0], oracle, atol=1e-12)


def test_feature_normalization_invariants(rng):
    h = random_channel(rng, 3, 5, 2, 4)
    f = compute_features(h, 2)
    np.testing.assert_allclose(f.strength.mean(-1), 0, atol=1e-9)
    np.testing.assert_allclose(f.strength.std(-1), 1, atol=1e-9)
    np.testing.assert_allclose(f.orth.std(-1), 1, atol=1e-9)


def test_feature_degenerate_cases(rng):
    one = compute_features(random_channel(rng, 2, 1, 1, 4), 1)
    assert np.all(one.strength == 0) and np.all(one.orth == 0)
    h = random_channel(rng, 1, 3, 1, 4)
    h[0, 1] = 0
    f = compute_features(h, 1)
    assert f.zero_rows == 1 and np.all(np.isfinite(f.orth))


def test_features_permutation_behaviour(rng):
    h = random_channel(rng, 2, 4, 2, 4)
    f = compute_features(h, 2)
    g = compute_features(apply_permutation(h, "an-bs", rng.permutation(4)), 2)
    np.testing.assert_allclose(g.strength, f.strength, atol=1e-12)
    np.testing.assert_allclose(g.orth, f.orth, atol=1e-12)
    perm = rng.permutation(4)
    g = compute_features(apply_permutation(h, "user-group", perm, num_rx=2), 2)
    np.testing.assert_allclose(g.strength, f.strength[:, perm], atol=1e-12)
    np.testing.assert_allclose(g.orth, apply_permutation(f.orth[..., None], "user-group", perm, 2)[..., 0], atol=1e-12)


# -- permutations ---------------------------------------------------------------------

def test_permutation_basics(rng):
    h = random_channel(rng, 3, 2, 2, 4)
    assert np.array_equal(apply_permutation(h, "rb", [0, 1, 2]), h)
    twice = apply_permutation(apply_permutation(h, "rb", [1, 0, 2]), "rb", [1, 0, 2])
    assert np.array_equal(twice, h)
    swapped = apply_permutation(h, "user-group", [1, 0], num_rx=2)
    assert np.array_equal(swapped[:, :2], h[:, 2:]) and np.array_equal(swapped[:, 2:], h[:, :2])
    with pytest.raises(ValueError):
        apply_permutation(h, "rb", [0, 0, 1])
    with pytest.raises(ValueError):
        apply_permutation(h, "time", [0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["rb", "user-group", "an-ue-within-group", "an-bs"]))
def test_inverse_permutation_restores_bit_exactly(seed, axis):
    rng = np.random.default_rng(seed)
    h = random_channel(rng, 3, 4, 2, 4)
    size = {"rb": 3, "user-group": 4, "an-ue-within-group": 2, "an-bs": 4}[axis]
    perm = rng.permutation(size)
    back = apply_permutation(apply_permutation(h, axis, perm, 2), axis, np.argsort(perm), 2)
    assert np.array_equal(back, h)
    sol = random_solution(rng, 3, 4, 2, 4, 4)
    s2 = apply_permutation(apply_permutation(sol, axis, perm), axis, np.argsort(perm))
    assert all(np.array_equal(a, b) for a, b in zip((s2.w_rf, s2.w_bb, s2.v_rf), (sol.w_rf, sol.w_bb, sol.v_rf)))


# -- constraints ----------------------------------------------------------------------

def test_constraint_report(rng):
    w_rf = np.exp(1j * rng.uniform(-np.pi, np.pi, (4, 2)))
    w_bb = rng.normal(size=(2, 2, 2)) + 1j * rng.normal(size=(2, 2, 2))
    p = float(np.sum(np.abs(w_rf[None] @ w_bb) ** 2))
    sol = HybridSolution(w_rf, w_bb, np.ones(2, complex))
    r = check_constraints(sol, p)
    assert max(r.values()) < 1e-12
    bad = HybridSolution(w_rf.copy(), w_bb, np.ones(2, complex))
    bad.w_rf[0, 0] = 2.0
    assert check_constraints(bad, p)["unit_modulus_rf"] == pytest.approx(1.0)
    doubled = HybridSolution(w_rf, 2 * w_bb, np.ones(2, complex))
    assert check_constraints(doubled, p)["power_residual"] == pytest.approx(3.0)


def test_schedule_basis_validity():
    assert ScheduleBasis(np.array([[[1.0, 0, 0], [0, 0, 1]]])).is_valid()
    assert not ScheduleBasis(np.array([[[1.0, 0, 0], [1, 0, 0]]])).is_valid()
    assert ScheduleBasis(np.array([[[0.2, 0.8, 0.0]]]), "soft").is_valid()
