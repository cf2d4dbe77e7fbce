"""Real amplitude-encoding circuits and a batched dense statevector simulator.

Qubit 0 is the most significant bit of a basis-state index. A state
preparation circuit for a real vector of length ``2**n`` is a ladder of
uniformly controlled Y rotations: level ``k`` targets qubit ``k`` and is
controlled by qubits ``0..k-1``, one rotation angle per control pattern.
Level angles come from a binary tree of subtree norms; the last level uses
signed ``atan2`` so negative amplitudes come out exactly.

Circuits are simulated in batches: every op carries one parameter row per
batch element, so one pass prepares many states with different angles.
Ops are tuples:

* ``("ucry", target, controls, angles)`` with ``angles`` shaped (B, 2**len(controls))
* ``("ry", target, angles)`` with ``angles`` shaped (B,)
* ``("cx", control, target)``
"""

from __future__ import annotations

import numpy as np

from ..errors import EncodingError, NumericalError


def n_qubits_for(dim):
    """Smallest qubit count whose state space holds ``dim`` amplitudes."""
    return max(1, int(np.ceil(np.log2(dim)))) if dim > 1 else 1


def pad_and_normalize(x, n_qubits):
    """Zero-pad rows of ``x`` to ``2**n_qubits`` and scale each to unit norm."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    dim = 2**n_qubits
    if x.shape[1] > dim:
        raise EncodingError(f"vector of length {x.shape[1]} does not fit {n_qubits} qubits ({dim} amplitudes)")
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(~(norms > 0) | ~np.isfinite(norms))
    if bad.size:
        raise EncodingError(f"row {int(bad[0])} has zero or non-finite norm and cannot be amplitude encoded")
    out = np.zeros((x.shape[0], dim))
    out[:, : x.shape[1]] = x / norms[:, None]
    return out


def preparation_angles(amplitudes):
    """Per-level rotation angles for a batch of real unit vectors.

    Returns a list whose entry ``k`` has shape (B, 2**k).
    """
    a = np.atleast_2d(np.asarray(amplitudes, dtype=float))
    b, dim = a.shape
    n = int(round(np.log2(dim)))
    if 2**n != dim:
        raise EncodingError(f"amplitude vector length {dim} is not a power of two")
    # level-k norms: norms[k][:, c] is the norm of the subtree with prefix c
    norms = [None] * (n + 1)
    norms[n] = np.abs(a)
    for k in range(n - 1, 0, -1):
        child = norms[k + 1].reshape(b, 2**k, 2)
        norms[k] = np.sqrt(np.sum(child * child, axis=2))
    angles = []
    for k in range(n):
        if k == n - 1:
            pairs = a.reshape(b, 2**k, 2)
        else:
            pairs = norms[k + 1].reshape(b, 2**k, 2)
        angles.append(2.0 * np.arctan2(pairs[:, :, 1], pairs[:, :, 0]))
    return angles


def preparation_circuit(amplitudes, decompose=False):
    """Ops preparing each row of ``amplitudes`` from |0...0>.

    With ``decompose=True`` every uniformly controlled rotation is expanded
    into single-qubit RY and CNOT gates (Gray-code construction).
    """
    angles = preparation_angles(amplitudes)
    ops = [("ucry", k, tuple(range(k)), ang) for k, ang in enumerate(angles)]
    if decompose:
        ops = [g for op in ops for g in decompose_ucry(op)]
    return ops


def _gray(i):
    return i ^ (i >> 1)


def decompose_ucry(op):
    """Expand one ``ucry`` op into alternating RY / CNOT gates.

    For ``k`` controls, rotation ``i`` is followed by a CNOT whose control is
    the bit that flips between Gray codes ``g(i)`` and ``g(i+1)`` (wrapping
    around). A control pattern ``c`` then sees the net angle
    ``sum_i theta_i * (-1)**popcount(c & g(i))``, which is inverted exactly
    by a scaled transposed sign matrix.
    """
    _, target, controls, angles = op
    k = len(controls)
    if k == 0:
        return [("ry", target, angles[:, 0])]
    m = 2**k
    gray = np.array([_gray(i) for i in range(m)])
    signs = np.array([[(-1) ** bin(c & g).count("1") for g in gray] for c in range(m)], dtype=float)
    # rows of the sign matrix are orthogonal with norm^2 m, so its inverse is signs.T / m
    thetas = angles @ signs / m
    gates = []
    for i in range(m):
        gates.append(("ry", target, thetas[:, i]))
        flipped = gray[i] ^ gray[(i + 1) % m]
        bit = int(flipped).bit_length() - 1
        # bit 0 is the least significant control, i.e. the last control qubit
        gates.append(("cx", controls[k - 1 - bit], target))
    return gates


def inverse(ops):
    """Adjoint circuit: reversed order with negated rotation angles."""
    inv = []
    for op in reversed(ops):
        if op[0] == "ucry":
            inv.append(("ucry", op[1], op[2], -op[3]))
        elif op[0] == "ry":
            inv.append(("ry", op[1], -op[2]))
        else:
            inv.append(op)
    return inv


def zero_states(batch, n_qubits):
    psi = np.zeros((batch, 2**n_qubits), dtype=complex)
    psi[:, 0] = 1.0
    return psi


def _apply_ucry(psi, n, target, controls, angles):
    b = psi.shape[0]
    k = len(controls)
    if tuple(controls) != tuple(range(k)) or target != k:
        raise ValueError("uniformly controlled rotations must be controlled by the leading qubits")
    view = psi.reshape(b, 2**k, 2, 2 ** (n - k - 1))
    c = np.cos(angles / 2)[:, :, None]
    s = np.sin(angles / 2)[:, :, None]
    a0 = view[:, :, 0, :].copy()
    a1 = view[:, :, 1, :]
    view[:, :, 0, :] = c * a0 - s * a1
    view[:, :, 1, :] = s * a0 + c * a1


def _apply_ry(psi, n, target, angles):
    b = psi.shape[0]
    view = psi.reshape(b, 2**target, 2, 2 ** (n - target - 1))
    c = np.cos(angles / 2)[:, None, None]
    s = np.sin(angles / 2)[:, None, None]
    a0 = view[:, :, 0, :].copy()
    a1 = view[:, :, 1, :]
    view[:, :, 0, :] = c * a0 - s * a1
    view[:, :, 1, :] = s * a0 + c * a1


def _apply_cx(psi, n, control, target):
    b = psi.shape[0]
    view = psi.reshape(b, *([2] * n))
    one0 = [slice(None)] * (n + 1)
    one0[1 + control] = 1
    one0[1 + target] = 0
    one1 = list(one0)
    one1[1 + target] = 1
    one0, one1 = tuple(one0), tuple(one1)
    tmp = view[one0].copy()
    view[one0] = view[one1]
    view[one1] = tmp


def simulate(ops, n_qubits, psi=None, batch=None, check_norm=False, norm_tol=1e-12):
    """Apply ``ops`` to a batch of statevectors (default: all |0...0>).

    With ``check_norm`` the norm of every state is verified after each gate.
    """
    if psi is None:
        if batch is None:
            batch = _batch_size(ops)
        psi = zero_states(batch, n_qubits)
    else:
        psi = np.array(psi, dtype=complex)
    for op in ops:
        kind = op[0]
        if kind == "ucry":
            _apply_ucry(psi, n_qubits, op[1], op[2], op[3])
        elif kind == "ry":
            _apply_ry(psi, n_qubits, op[1], op[2])
        elif kind == "cx":
            _apply_cx(psi, n_qubits, op[1], op[2])
        else:
            raise ValueError(f"unknown gate {kind!r}")
        if check_norm:
            drift = np.max(np.abs(np.linalg.norm(psi, axis=1) - 1.0))
            if drift > norm_tol:
                raise NumericalError(f"statevector norm drifted by {drift:.3e} after gate {kind}")
    return psi


def _batch_size(ops):
    for op in ops:
        if op[0] == "ucry":
            return op[3].shape[0]
        if op[0] == "ry":
            return op[2].shape[0]
    return 1
