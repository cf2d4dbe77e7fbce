import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cae_qsvm.errors import EncodingError
from cae_qsvm.qkernel import (
    GramMatrix,
    decompose_ucry,
    encode_state,
    fidelity_kernel,
    gram_matrix,
    inverse,
    load_gram_csv,
    preparation_circuit,
    save_gram_csv,
    simulate,
)


def ucry_dense(angles, n_controls):
    m = 2**n_controls
    u = np.zeros((2 * m, 2 * m))
    for c, t in enumerate(angles):
        u[2 * c : 2 * c + 2, 2 * c : 2 * c + 2] = [[np.cos(t / 2), -np.sin(t / 2)],
                                                    [np.sin(t / 2), np.cos(t / 2)]]
    return u


def circuit_unitary(ops, n):
    """Columns are the images of the computational basis states."""
    dim = 2**n
    return simulate(ops, n, psi=np.eye(dim, dtype=complex)).T


def batched(op, reps):
    kind = op[0]
    if kind == "ucry":
        return ("ucry", op[1], op[2], np.repeat(op[3], reps, axis=0))
    if kind == "ry":
        return ("ry", op[1], np.repeat(op[2], reps, axis=0))
    return op


def unitary_of(ops_single, n):
    dim = 2**n
    return circuit_unitary([batched(op, dim) for op in ops_single], n)


@pytest.mark.parametrize("k", [0, 1, 2, 3])
def test_ucry_simulation_matches_block_diagonal(k):
    rng = np.random.default_rng(k)
    angles = rng.uniform(-np.pi, np.pi, (1, 2**k))
    u = unitary_of([("ucry", k, tuple(range(k)), angles)], k + 1)
    np.testing.assert_allclose(u, ucry_dense(angles[0], k), atol=1e-14)


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_gray_code_decomposition_equals_multiplexor(k):
    rng = np.random.default_rng(10 + k)
    angles = rng.uniform(-2 * np.pi, 2 * np.pi, (1, 2**k))
    op = ("ucry", k, tuple(range(k)), angles)
    gates = decompose_ucry(op)
    assert sum(g[0] == "cx" for g in gates) == 2**k
    np.testing.assert_allclose(unitary_of(gates, k + 1), ucry_dense(angles[0], k), atol=1e-12)


def test_inverse_circuit_is_adjoint():
    rng = np.random.default_rng(3)
    amps = rng.standard_normal((1, 8))
    amps /= np.linalg.norm(amps)
    for decompose in (False, True):
        ops = preparation_circuit(amps, decompose=decompose)
        u = unitary_of(ops, 3)
        ui = unitary_of(inverse(ops), 3)
        np.testing.assert_allclose(ui @ u, np.eye(8), atol=1e-12)


def test_encode_basis_vector():
    x = np.zeros(8)
    x[0] = 1.0
    psi = encode_state(x).amplitudes
    np.testing.assert_allclose(psi, x, atol=1e-15)


def test_encode_uniform_superposition():
    psi = encode_state(np.ones(8) / np.sqrt(8), 3).amplitudes
    np.testing.assert_allclose(psi, np.full(8, 1 / np.sqrt(8)), atol=1e-15)


@pytest.mark.parametrize("decompose", [False, True])
def test_encode_random_signed_64(decompose):
    rng = np.random.default_rng(4)
    for _ in range(20):
        x = rng.standard_normal(64)
        psi = encode_state(x, 6, decompose=decompose).amplitudes
        target = x / np.linalg.norm(x)
        err = min(np.max(np.abs(psi - target)), np.max(np.abs(psi + target)))
        assert err <= 1e-10


def test_encode_pads_short_vector():
    psi = encode_state([3.0, 4.0, 0.0], 2).amplitudes
    np.testing.assert_allclose(psi, [0.6, 0.8, 0.0, 0.0], atol=1e-15)


def test_encode_zero_vector_rejected():
    with pytest.raises(EncodingError):
        encode_state(np.zeros(4))
    with pytest.raises(EncodingError):
        encode_state(np.ones(5), 2)


def test_encode_norm_checked_after_every_gate():
    # check_norm=True raises if any gate drifts beyond 1e-12
    encode_state(np.random.default_rng(5).standard_normal(64), decompose=True, check_norm=True)


@pytest.mark.parametrize("mode", ["circuit", "analytic"])
def test_kernel_examples(mode):
    e0, e1 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    assert fidelity_kernel(e0, e0, mode=mode) == pytest.approx(1.0, abs=1e-12)
    assert fidelity_kernel(e0, e1, mode=mode) == pytest.approx(0.0, abs=1e-12)
    assert fidelity_kernel(e0, (e0 + e1) / np.sqrt(2), mode=mode) == pytest.approx(0.5, abs=1e-12)
    x = np.random.default_rng(6).standard_normal(16)
    assert fidelity_kernel(x, x, mode=mode) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("d", [2, 4, 8, 64])
def test_circuit_matches_squared_cosine(d):
    rng = np.random.default_rng(d)
    for _ in range(25):
        x, y = rng.standard_normal((2, d))
        oracle = np.dot(x, y) ** 2 / (np.dot(x, x) * np.dot(y, y))
        assert abs(fidelity_kernel(x, y, mode="circuit") - oracle) <= 1e-10
        assert abs(fidelity_kernel(x, y, mode="circuit", decompose=True) - oracle) <= 1e-10


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 8, elements=st.floats(-10, 10)),
       arrays(np.float64, 8, elements=st.floats(-10, 10)),
       st.floats(0.01, 100) | st.floats(-100, -0.01),
       st.floats(0.01, 100) | st.floats(-100, -0.01))
def test_kernel_properties(x, y, alpha, beta):
    if np.linalg.norm(x) < 1e-3 or np.linalg.norm(y) < 1e-3:
        return
    kxy = fidelity_kernel(x, y, mode="circuit")
    assert 0.0 <= kxy <= 1.0
    assert fidelity_kernel(y, x, mode="analytic") == fidelity_kernel(x, y, mode="analytic")
    assert abs(fidelity_kernel(y, x, mode="circuit") - kxy) <= 1e-12
    assert abs(fidelity_kernel(alpha * x, beta * y, mode="circuit") - kxy) <= 1e-10


def test_gram_identical_rows():
    g = gram_matrix(np.array([[1.0, 2.0], [1.0, 2.0]]))
    np.testing.assert_allclose(g.values, np.ones((2, 2)), atol=1e-12)


@pytest.mark.parametrize("mode", ["circuit", "analytic"])
def test_gram_is_valid_kernel_matrix(mode):
    rng = np.random.default_rng(7)
    x = rng.standard_normal((20, 64))
    k = gram_matrix(x, mode=mode).values
    assert np.array_equal(k, k.T)
    assert np.all(np.diag(k) == 1.0)
    assert np.all((k >= 0) & (k <= 1))
    assert np.linalg.eigvalsh(k).min() >= -1e-8


def test_gram_modes_agree_and_cross_gram():
    rng = np.random.default_rng(8)
    a, b = rng.standard_normal((6, 5)), rng.standard_normal((4, 5))
    np.testing.assert_allclose(gram_matrix(a).values, gram_matrix(a, mode="analytic").values, atol=1e-10)
    kc = gram_matrix(a, b).values
    assert kc.shape == (6, 4)
    for i in range(6):
        for j in range(4):
            assert kc[i, j] == pytest.approx(fidelity_kernel(a[i], b[j], mode="analytic"), abs=1e-10)


def test_gram_zero_row_named():
    x = np.ones((4, 4))
    x[2] = 0.0
    with pytest.raises(EncodingError, match="row 2"):
        gram_matrix(x)
    with pytest.raises(EncodingError, match="row 2"):
        gram_matrix(np.ones((2, 4)), x)


def test_gram_csv_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    g = gram_matrix(rng.standard_normal((5, 3)), rng.standard_normal((4, 3)),
                    row_ids=[10, 11, 12, 13, 14], col_ids=["a", "b", "c", "d"])
    save_gram_csv(g, tmp_path / "g.csv")
    back = load_gram_csv(tmp_path / "g.csv")
    assert back.row_ids == g.row_ids and back.col_ids == g.col_ids
    np.testing.assert_array_equal(back.values, g.values)
    assert isinstance(back, GramMatrix)
