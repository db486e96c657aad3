import numpy as np
import pytest
from hypothesis import given, strategies as st

from invreg import (
    MultiEnvDataset, UnlabeledView, env_moment_summaries, h_combined, h_mir, h_vir, read_matrix, shared_eigenbasis_penalty,
    summaries_from_moments, vir_alternative_penalty, vir_penalty, write_matrix,
)
from invreg.scm import random_orthogonal

from conftest import random_dataset


def _all_rows(ds):
    return UnlabeledView(ds, np.arange(ds.n), ds.registry)


def _unlabeled(X, env):
    ds = MultiEnvDataset.from_arrays(np.asarray(X, float), np.full(len(X), np.nan), np.array(env, dtype=object))
    return _all_rows(ds)


# loop oracles written from the definitions
def mir_oracle(means):
    K = np.asarray(means, float).T
    p = K.shape[1]
    m = K.mean(axis=1)
    return sum(np.outer(K[:, i], K[:, i]) for i in range(p)) / p - np.outer(m, m)


def vir_oracle(covs):
    G = [np.asarray(c, float) for c in covs]
    Gbar = sum(G) / len(G)
    return sum((g - Gbar) @ (g - Gbar) for g in G) / len(G)


def test_summary_examples():
    s = env_moment_summaries(_unlabeled([[0, 0], [2, 0], [5, 5]], ["a", "a", "b"]))
    assert s[0].env == "a" and s[0].n == 2
    np.testing.assert_array_equal(s[0].mean, [1.0, 0.0])
    np.testing.assert_array_equal(s[0].cov, [[1.0, 0.0], [0.0, 0.0]])
    np.testing.assert_array_equal(s[1].cov, np.zeros((2, 2)))
    single = env_moment_summaries(_unlabeled([[5.0]], ["z"]))[0]
    assert single.mean.tolist() == [5.0] and single.cov.tolist() == [[0.0]]


def test_summaries_unchanged_by_row_duplication():
    ds = random_dataset(0, p=3, n=6)
    dup = MultiEnvDataset.from_arrays(np.vstack([ds.features, ds.features]),
                                      np.concatenate([ds.outcomes, ds.outcomes]),
                                      np.concatenate([ds.env_of_row, ds.env_of_row]))
    for a, b in zip(env_moment_summaries(_all_rows(ds)), env_moment_summaries(_all_rows(dup))):
        np.testing.assert_allclose(a.mean, b.mean, atol=1e-12)
        np.testing.assert_allclose(a.cov, b.cov, atol=1e-12)


def test_h_mir_examples():
    s = summaries_from_moments([[1.0, 0.0], [-1.0, 0.0]], [np.zeros((2, 2))] * 2)
    np.testing.assert_allclose(h_mir(s).H, [[1.0, 0.0], [0.0, 0.0]], atol=1e-15)
    same = summaries_from_moments([[2.0, 3.0]] * 3, [np.eye(2)] * 3)
    assert np.all(h_mir(same).H == 0)
    assert np.all(h_mir(same[:1]).H == 0)


def test_h_vir_examples(swapped_cov_summaries):
    np.testing.assert_allclose(h_vir(swapped_cov_summaries).H, np.diag([0.25, 0.25]), atol=1e-15)
    same = summaries_from_moments(np.zeros((3, 2)), [np.diag([1.0, 4.0])] * 3)
    assert np.all(h_vir(same).H == 0)
    assert np.all(h_vir(same[:1]).H == 0)


def test_h_combined_examples(swapped_cov_summaries):
    s = summaries_from_moments([[1.0, 0.0], [-1.0, 0.0]], [np.diag([2.0, 1.0]), np.diag([1.0, 2.0])])
    np.testing.assert_allclose(h_combined(s, 1, 0).H, h_mir(s).H, atol=0)
    np.testing.assert_allclose(h_combined(s, 0, 1).H, h_vir(s).H, atol=0)
    np.testing.assert_allclose(h_combined(s, 2, 3).H, [[2.75, 0.0], [0.0, 0.75]], atol=1e-15)
    with pytest.raises(ValueError):
        h_combined(s, -1, 1)


def test_penalty_examples(swapped_cov_summaries):
    s = swapped_cov_summaries
    assert vir_penalty(s, [1.0, 1.0]) == pytest.approx(0.5, abs=1e-12)
    assert vir_penalty(s, [0.0, 0.0]) == 0.0
    assert vir_alternative_penalty(s, [1.0, 1.0]) == pytest.approx(0.0, abs=1e-12)
    assert vir_alternative_penalty(s, [1.0, 0.0]) == pytest.approx(0.25, abs=1e-12)
    assert vir_alternative_penalty(s, [0.0, 0.0]) == 0.0
    same = summaries_from_moments(np.zeros((2, 2)), [np.eye(2)] * 2)
    assert vir_penalty(same, [3.0, -1.0]) == 0.0


def test_shared_eigenbasis_examples():
    lam = np.array([[2.0, 1.0], [1.0, 2.0]])
    assert shared_eigenbasis_penalty(np.eye(2), lam, [1.0, 1.0]) == pytest.approx(0.5, abs=1e-12)
    assert shared_eigenbasis_penalty(np.eye(2), [[1.0, 3.0]] * 4, [2.0, -5.0]) == 0.0
    assert shared_eigenbasis_penalty(np.eye(2), [[1.0, 3.0], [2.0, 3.0]], [0.0, 4.0]) == 0.0
    with pytest.raises(ValueError):
        shared_eigenbasis_penalty(np.array([[1.0, 0.5], [0.0, 1.0]]), lam, [1.0, 1.0])


@st.composite
def summaries(draw, max_p=6, max_d=4):
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    p, d = int(rng.integers(1, max_p + 1)), int(rng.integers(1, max_d + 1))
    means = rng.standard_normal((p, d)) * rng.uniform(0.1, 10)
    covs = []
    for _ in range(p):
        L = rng.standard_normal((d, int(rng.integers(1, d + 1))))
        covs.append(L @ L.T)
    return summaries_from_moments(means, covs), rng


@given(summaries())
def test_h_matrices_match_loop_oracles(data):
    s, _ = data
    np.testing.assert_allclose(h_mir(s).H, mir_oracle([x.mean for x in s]), atol=1e-10)
    np.testing.assert_allclose(h_vir(s).H, vir_oracle([x.cov for x in s]), atol=1e-10)


@given(summaries())
def test_h_symmetric_psd(data):
    s, _ = data
    for H in (h_mir(s).H, h_vir(s).H, h_combined(s, 0.3, 2.0).H):
        assert np.array_equal(H, H.T)
        scale = max(1.0, np.abs(H).max())
        assert np.linalg.eigvalsh(H).min() >= -1e-10 * scale


@given(summaries())
def test_vir_penalty_equals_quadratic_form(data):
    s, rng = data
    H = h_vir(s).H
    for beta in rng.standard_normal((5, s[0].mean.size)):
        assert vir_penalty(s, beta) == pytest.approx(beta @ H @ beta, rel=1e-10, abs=1e-10)


@given(summaries())
def test_cancellation_implication(data):
    # zero current penalty forces zero alternative penalty
    s, rng = data
    H = h_vir(s).H
    w, V = np.linalg.eigh(H)
    null = V[:, w <= 1e-12 * max(1.0, w.max())]
    if null.shape[1]:
        beta = null @ rng.standard_normal(null.shape[1])
        assert vir_penalty(s, beta) <= 1e-10
        assert vir_alternative_penalty(s, beta) <= 1e-10


@given(st.integers(0, 10_000))
def test_translation_invariance(seed):
    ds = random_dataset(seed, p=4, n=7)
    rng = np.random.default_rng(seed)
    shift_env = {e: rng.standard_normal(ds.d) * 5 for e in ds.registry}
    X_env = ds.features + np.stack([shift_env[e] for e in ds.env_of_row])
    common = ds.features + rng.standard_normal(ds.d) * 5
    base = env_moment_summaries(_all_rows(ds))

    def summ(X):
        return env_moment_summaries(_all_rows(MultiEnvDataset(X, ds.outcomes, ds.env_of_row, ds.registry)))

    np.testing.assert_allclose(h_vir(summ(X_env)).H, h_vir(base).H, atol=1e-10)
    np.testing.assert_allclose(h_mir(summ(common)).H, h_mir(base).H, atol=1e-10)


@given(summaries())
def test_environment_order_invariance(data):
    s, rng = data
    perm = [s[i] for i in rng.permutation(len(s))]
    for f in (h_mir, h_vir):
        np.testing.assert_allclose(f(perm).H, f(s).H, atol=1e-12)


@given(st.integers(0, 10_000))
def test_shared_eigenbasis_identity(seed):
    rng = np.random.default_rng(seed)
    d, p = int(rng.integers(1, 6)), int(rng.integers(1, 9))
    Q = random_orthogonal(d, rng)
    lam = rng.uniform(0, 3, (p, d))
    s = summaries_from_moments(np.zeros((p, d)), [(Q * l) @ Q.T for l in lam])
    for beta in rng.standard_normal((20, d)):
        assert vir_penalty(s, beta) == pytest.approx(shared_eigenbasis_penalty(Q, lam, beta), abs=1e-10)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        h_mir(summaries_from_moments([[0.0, 1.0], [1.0, 0.0]], [np.eye(2), np.eye(2)])
              + summaries_from_moments([[0.0]], [np.eye(1)]))


def test_matrix_file_roundtrip(tmp_path):
    H = np.array([[1 / 3, 0.1], [0.1, 2e-17]])
    write_matrix(H, tmp_path / "H.txt")
    assert (tmp_path / "H.txt").read_text().splitlines()[0] == "2"
    assert np.array_equal(read_matrix(tmp_path / "H.txt"), H)
