"""Amplitude encoding and the all-zeros-projector fidelity kernel."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError, EncodingError, FormatError
from .circuit import (
    decompose_ucry,
    inverse,
    n_qubits_for,
    pad_and_normalize,
    preparation_angles,
    simulate,
)

KERNEL_MODES = ("circuit", "analytic")


@dataclass(frozen=True)
class QuantumState:
    amplitudes: np.ndarray
    n_qubits: int

    def __post_init__(self):
        if self.amplitudes.shape != (2**self.n_qubits,):
            raise ValueError("amplitude vector length must be 2**n_qubits")
        norm = float(np.sum(np.abs(self.amplitudes) ** 2))
        if abs(norm - 1.0) > 1e-12:
            raise EncodingError(f"state is not normalised (squared norm {norm!r})")


@dataclass
class GramMatrix:
    values: np.ndarray
    row_ids: list = field(default_factory=list)
    col_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not self.row_ids:
            self.row_ids = list(range(self.values.shape[0]))
        if not self.col_ids:
            self.col_ids = list(range(self.values.shape[1]))

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    @property
    def shape(self):
        return self.values.shape


def _ops_from_angles(angles, decompose):
    ops = [("ucry", k, tuple(range(k)), ang) for k, ang in enumerate(angles)]
    if decompose:
        ops = [g for op in ops for g in decompose_ucry(op)]
    return ops


def _resolve_qubits(dim, n_qubits):
    n = n_qubits_for(dim) if n_qubits is None else int(n_qubits)
    if 2**n < dim:
        raise EncodingError(f"{dim} features need at least {n_qubits_for(dim)} qubits, got {n}")
    return n


def encode_state(x, n_qubits=None, decompose=False, check_norm=True):
    """Prepare ``S(x)|0...0>`` by simulating the synthesised circuit.

    ``x`` is zero-padded to ``2**n_qubits`` entries and normalised first.
    """
    x = np.asarray(x, dtype=float).ravel()
    n = _resolve_qubits(x.size, n_qubits)
    amps = pad_and_normalize(x[None, :], n)
    ops = _ops_from_angles(preparation_angles(amps), decompose)
    psi = simulate(ops, n, check_norm=check_norm)[0]
    return QuantumState(psi, n)


def _analytic(a_hat, b_hat):
    overlap = a_hat @ b_hat.T
    return np.clip(overlap * overlap, 0.0, 1.0)


def _circuit_pairs(a_hat, b_hat, rows, cols, n, decompose, chunk, check_norm=False):
    """Fidelity for the index pairs (rows[p], cols[p]) by circuit simulation.

    Each pair prepares ``S(a)|0>``, runs the inverse preparation circuit of
    ``b`` on it and reads the probability of the all-zeros outcome.
    """
    angles_a = preparation_angles(a_hat)
    states_a = simulate(_ops_from_angles(angles_a, decompose), n, check_norm=check_norm)
    angles_b = preparation_angles(b_hat)
    out = np.empty(len(rows))
    for start in range(0, len(rows), chunk):
        r = rows[start : start + chunk]
        c = cols[start : start + chunk]
        ops = inverse(_ops_from_angles([ang[c] for ang in angles_b], decompose))
        psi = simulate(ops, n, psi=states_a[r], check_norm=check_norm)
        out[start : start + chunk] = np.abs(psi[:, 0]) ** 2
    return np.clip(out, 0.0, 1.0)


def fidelity_kernel(x, x_prime, n_qubits=None, mode="circuit", decompose=False):
    """``|<0...0| S(x')^dagger S(x) |0...0>|^2`` for a single pair."""
    if mode not in KERNEL_MODES:
        raise ValueError(f"mode must be one of {KERNEL_MODES}, got {mode!r}")
    x = np.asarray(x, dtype=float).ravel()
    x_prime = np.asarray(x_prime, dtype=float).ravel()
    n = _resolve_qubits(max(x.size, x_prime.size), n_qubits)
    a = pad_and_normalize(x[None, :], n)
    b = pad_and_normalize(x_prime[None, :], n)
    if mode == "analytic":
        return float(_analytic(a, b)[0, 0])
    return float(_circuit_pairs(a, b, np.array([0]), np.array([0]), n, decompose, 1,
                                check_norm=True)[0])


def _normalized_rows(x, n, label):
    try:
        return pad_and_normalize(x, n)
    except EncodingError as exc:
        raise EncodingError(f"{label}: {exc}") from None


def gram_matrix(a, b=None, n_qubits=None, mode="circuit", decompose=False, chunk=4096,
                row_ids=None, col_ids=None):
    """Fidelity-kernel Gram matrix.

    With ``b`` omitted the square matrix of ``a`` against itself is built
    from the strict upper triangle, mirrored, with the diagonal set to 1.
    With ``b`` given the rectangular cross-Gram ``K[i, j] = K(a_i, b_j)`` is
    returned (test rows against training columns when scoring).
    """
    if mode not in KERNEL_MODES:
        raise ValueError(f"mode must be one of {KERNEL_MODES}, got {mode!r}")
    a = np.atleast_2d(np.asarray(a, dtype=float))
    square = b is None
    b_arr = a if square else np.atleast_2d(np.asarray(b, dtype=float))
    if b_arr.shape[1] != a.shape[1]:
        raise DataError(f"feature dimensions differ: {a.shape[1]} vs {b_arr.shape[1]}")
    n = _resolve_qubits(a.shape[1], n_qubits)
    a_hat = _normalized_rows(a, n, "sample matrix A")
    b_hat = a_hat if square else _normalized_rows(b_arr, n, "sample matrix B")
    row_ids = list(row_ids) if row_ids is not None else list(range(a.shape[0]))
    if col_ids is None:
        col_ids = row_ids if square else list(range(b_arr.shape[0]))

    if square:
        m = a.shape[0]
        iu, ju = np.triu_indices(m, k=1)
        if mode == "analytic":
            upper = _analytic(a_hat, a_hat)[iu, ju]
        else:
            upper = _circuit_pairs(a_hat, a_hat, iu, ju, n, decompose, chunk)
        k = np.zeros((m, m))
        k[iu, ju] = upper
        k[ju, iu] = upper
        np.fill_diagonal(k, 1.0)
    elif mode == "analytic":
        k = _analytic(a_hat, b_hat)
    else:
        rows, cols = np.indices((a.shape[0], b_arr.shape[0]))
        k = _circuit_pairs(a_hat, b_hat, rows.ravel(), cols.ravel(), n, decompose,
                           chunk).reshape(a.shape[0], b_arr.shape[0])
    return GramMatrix(k, list(row_ids), list(col_ids))


def save_gram_csv(gram, path):
    """Row-major CSV; the header row carries the column sample ids."""
    g = gram if isinstance(gram, GramMatrix) else GramMatrix(np.asarray(gram))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", *g.col_ids])
        for rid, row in zip(g.row_ids, g.values):
            w.writerow([rid, *(repr(float(v)) for v in row)])


def load_gram_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["sample_id"]:
        raise FormatError(f"{path}: missing 'sample_id' header")
    col_ids = [_parse_id(c) for c in rows[0][1:]]
    row_ids, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(col_ids) + 1:
            raise FormatError(f"{path}: line {lineno} has {len(row) - 1} values, expected {len(col_ids)}")
        row_ids.append(_parse_id(row[0]))
        values.append([float(v) for v in row[1:]])
    return GramMatrix(np.array(values, dtype=float).reshape(len(row_ids), len(col_ids)),
                      row_ids, col_ids)


def _parse_id(s):
    try:
        return int(s)
    except ValueError:
        return s
