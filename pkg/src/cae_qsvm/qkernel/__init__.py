"""Simulated amplitude-encoding fidelity kernel."""

from .circuit import (
    decompose_ucry,
    inverse,
    n_qubits_for,
    pad_and_normalize,
    preparation_angles,
    preparation_circuit,
    simulate,
)
from .kernel import (
    GramMatrix,
    QuantumState,
    encode_state,
    fidelity_kernel,
    gram_matrix,
    load_gram_csv,
    save_gram_csv,
)
