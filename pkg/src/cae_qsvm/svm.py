"""Two-class and one-class SVMs on precomputed kernels.

Both problems are solved in the common dual form::

    min  0.5 * a^T Q a + p^T a
    s.t. y^T a = delta,  0 <= a_i <= C_i

* weighted C-SVM: ``Q = (y y^T) * K``, ``p = -1``, ``delta = 0``,
  ``C_i = C * w[y_i]``
* nu-OCSVM: ``Q = K``, ``p = 0``, ``y = 1``, ``delta = 1``,
  ``C_i = 1 / (nu * n)``

by sequential minimal optimisation with maximal-violating-pair selection,
followed by an exact solve on the free set. Decision values are
``f(x) = sum_j a_j y_j K(x_j, x) - rho`` (``y_j = 1`` for the one-class
model) and ``f >= 0`` is labelled normal (+1).
"""

from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, FormatError, NumericalError

MODEL_FORMAT = "cae-qsvm-svm"
MODEL_VERSION = 1
SNAP_RTOL = 1e-12


@dataclass
class SolverResult:
    alpha: np.ndarray
    gradient: np.ndarray
    iterations: int
    violation: float
    objective_history: list = field(default_factory=list)


def _objective(alpha, grad, p):
    # grad = Q a + p, so 0.5 a^T Q a + p^T a = 0.5 a^T (grad + p)
    return 0.5 * float(alpha @ (grad + p))


def _violation(alpha, grad, y, C):
    yg = -y * grad
    up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
    low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
    if not up.any() or not low.any():
        return 0.0, -1, -1
    i = int(np.flatnonzero(up)[np.argmax(yg[up])])
    j = int(np.flatnonzero(low)[np.argmin(yg[low])])
    return float(yg[i] - yg[j]), i, j


def smo(Q, p, y, C, alpha, tol=1e-3, max_iter=10**6, track_objective=False):
    """Sequential pairwise optimisation of the dual from a feasible ``alpha``.

    Each step picks the maximal violating pair (lowest index on ties) and
    minimises the objective exactly along the feasible segment, so the
    objective never increases. Stops once the violation drops below ``tol``.
    """
    alpha = np.array(alpha, dtype=float)
    y = np.asarray(y, dtype=float)
    C = np.asarray(C, dtype=float)
    grad = Q @ alpha + p
    history = [_objective(alpha, grad, p)] if track_objective else []
    it = 0
    while True:
        viol, i, j = _violation(alpha, grad, y, C)
        if viol < tol or it >= max_iter:
            break
        it += 1
        ai, aj = alpha[i], alpha[j]
        ci, cj = C[i], C[j]
        if y[i] != y[j]:
            quad = Q[i, i] + Q[j, j] + 2 * Q[i, j]
            quad = quad if quad > 0 else 1e-12
            delta = (-grad[i] - grad[j]) / quad
            diff = ai - aj
            ni, nj = ai + delta, aj + delta
            if diff > 0:
                if nj < 0:
                    nj, ni = 0.0, diff
            elif ni < 0:
                ni, nj = 0.0, -diff
            if diff > ci - cj:
                if ni > ci:
                    ni, nj = ci, ci - diff
            elif nj > cj:
                nj, ni = cj, cj + diff
        else:
            quad = Q[i, i] + Q[j, j] - 2 * Q[i, j]
            quad = quad if quad > 0 else 1e-12
            delta = (grad[i] - grad[j]) / quad
            total = ai + aj
            ni, nj = ai - delta, aj + delta
            if total > ci:
                if ni > ci:
                    ni, nj = ci, total - ci
            elif nj < 0:
                nj, ni = 0.0, total
            if total > cj:
                if nj > cj:
                    nj, ni = cj, total - cj
            elif ni < 0:
                ni, nj = 0.0, total
        alpha[i], alpha[j] = ni, nj
        grad += Q[:, i] * (ni - ai) + Q[:, j] * (nj - aj)
        if track_objective:
            history.append(_objective(alpha, grad, p))
    return SolverResult(alpha, grad, it, viol, history)


def _polish(Q, p, y, C, alpha, delta):
    """Re-solve the free variables exactly with the bounded ones held fixed.

    Returns the improved point, or ``alpha`` itself when the exact solution
    leaves the box or does not lower the objective.
    """
    free = (alpha > 0) & (alpha < C)
    if not free.any():
        return alpha
    f = np.flatnonzero(free)
    b = np.flatnonzero(~free)
    kkt = np.zeros((f.size + 1, f.size + 1))
    kkt[: f.size, : f.size] = Q[np.ix_(f, f)]
    kkt[: f.size, f.size] = y[f]
    kkt[f.size, : f.size] = y[f]
    rhs = np.empty(f.size + 1)
    rhs[: f.size] = -(p[f] + Q[np.ix_(f, b)] @ alpha[b])
    rhs[f.size] = delta - y[b] @ alpha[b]
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0][: f.size]
    if np.any(sol < -1e-12) or np.any(sol > C[f] + 1e-12):
        return alpha
    cand = alpha.copy()
    cand[f] = np.clip(sol, 0.0, C[f])
    if abs(y @ cand - delta) > 1e-10:
        return alpha
    old = 0.5 * alpha @ Q @ alpha + p @ alpha
    new = 0.5 * cand @ Q @ cand + p @ cand
    return cand if new <= old else alpha


def solve_dual(Q, p, y, C, alpha0, delta, tol=1e-3, max_iter=10**6, polish=True,
               track_objective=False, fine_tol=1e-9):
    """SMO to ``tol``, then refinement towards the exact optimum.

    Refinement alternates an exact free-set solve with further SMO passes at
    tightening tolerances until the KKT violation is below ``fine_tol``. This
    pins margin vectors to ``f = 0`` instead of somewhere inside ``+-tol``.
    """
    res = smo(Q, p, y, C, alpha0, tol, max_iter, track_objective)
    if res.iterations >= max_iter and res.violation >= tol:
        warnings.warn(f"SMO hit max_iter={max_iter} with KKT violation {res.violation:.2e}")
    if not polish:
        return res
    pass_tol = tol
    while res.violation > fine_tol and res.iterations < max_iter:
        cand = _polish(Q, p, y, C, res.alpha, delta)
        if cand is not res.alpha:
            grad = Q @ cand + p
            hist = res.objective_history + ([_objective(cand, grad, p)] if track_objective else [])
            res = SolverResult(cand, grad, res.iterations, _violation(cand, grad, y, C)[0], hist)
            if res.violation <= fine_tol:
                break
        pass_tol = max(pass_tol * 0.1, fine_tol)
        more = smo(Q, p, y, C, res.alpha, pass_tol, max_iter - res.iterations, track_objective)
        res = SolverResult(more.alpha, more.gradient, res.iterations + more.iterations,
                           more.violation, res.objective_history + more.objective_history[1:])
        if more.iterations == 0 and pass_tol == fine_tol:
            break
    return res


def compute_rho(alpha, grad, y, C):
    """Offset from margin support vectors, or the midpoint of the feasible range."""
    yg = y * grad
    free = (alpha > 0) & (alpha < C)
    if free.any():
        return float(np.mean(yg[free]))
    upper = alpha >= C
    lower = alpha <= 0
    ub_mask = (upper & (y < 0)) | (lower & (y > 0))
    lb_mask = (upper & (y > 0)) | (lower & (y < 0))
    ub = float(np.min(yg[ub_mask])) if ub_mask.any() else np.inf
    lb = float(np.max(yg[lb_mask])) if lb_mask.any() else -np.inf
    if not np.isfinite(ub):
        return lb
    if not np.isfinite(lb):
        return ub
    return 0.5 * (ub + lb)


# ---------------------------------------------------------------- models


@dataclass
class SvmModel:
    alpha: np.ndarray
    labels: np.ndarray
    rho: float
    C: float
    class_weights: dict
    sample_ids: list = field(default_factory=list)
    objective: float = float("nan")
    iterations: int = 0
    objective_history: list = field(default_factory=list, repr=False)
    kind: str = "csvm"

    @property
    def dual_coef(self):
        return self.alpha * self.labels

    @property
    def support_indices(self):
        return np.flatnonzero(self.alpha > 0)

    @property
    def box(self):
        return self.C * np.array([self.class_weights[int(l)] for l in self.labels])


@dataclass
class OcsvmModel:
    alpha: np.ndarray
    rho: float
    nu: float
    sample_ids: list = field(default_factory=list)
    objective: float = float("nan")
    iterations: int = 0
    objective_history: list = field(default_factory=list, repr=False)
    kind: str = "ocsvm"

    @property
    def dual_coef(self):
        return self.alpha

    @property
    def support_indices(self):
        return np.flatnonzero(self.alpha > 0)

    @property
    def box(self):
        return np.full(self.alpha.size, 1.0 / (self.nu * self.alpha.size))


@dataclass
class ScoreReport:
    scores: np.ndarray
    labels: np.ndarray
    sample_ids: list = field(default_factory=list)


def _as_square(gram):
    k = np.asarray(gram, dtype=float)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise DataError(f"Gram matrix must be square, got shape {k.shape}")
    if not np.all(np.isfinite(k)):
        raise NumericalError("Gram matrix contains non-finite values")
    return k


def _warn_if_not_psd(k, tol=1e-8):
    sym = 0.5 * (k + k.T)
    lam = float(np.linalg.eigvalsh(sym).min())
    if lam < -tol:
        warnings.warn(f"Gram matrix is not positive semidefinite (min eigenvalue {lam:.3e}); proceeding")


def normalize_class_weights(class_weights):
    if not class_weights:
        return {-1: 1.0, 1: 1.0}
    w = {int(k): float(v) for k, v in dict(class_weights).items()}
    if set(w) - {-1, 1}:
        raise ConfigError(f"class weights must be keyed by -1 and +1, got {sorted(w)}")
    if any(v <= 0 for v in w.values()):
        raise ConfigError("class weights must be positive")
    return {-1: w.get(-1, 1.0), 1: w.get(1, 1.0)}


def _check_labels(labels, n):
    y = np.asarray(labels)
    if y.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {y.shape}")
    if not np.all(np.isin(y, (-1, 1))):
        raise DataError("labels must be -1 or +1")
    return y.astype(float)


def csvm_problem(gram, labels, C=1.0, class_weights=None):
    """``(Q, p, y, box)`` of the weighted soft-margin dual."""
    k = _as_square(gram)
    y = _check_labels(labels, k.shape[0])
    if C <= 0:
        raise ConfigError("C must be positive")
    w = normalize_class_weights(class_weights)
    box = C * np.where(y > 0, w[1], w[-1])
    return np.outer(y, y) * k, -np.ones_like(y), y, box


def ocsvm_problem(gram, nu):
    k = _as_square(gram)
    n = k.shape[0]
    if not 0 < nu <= 1:
        raise ConfigError(f"nu must lie in (0, 1], got {nu}")
    return k, np.zeros(n), np.ones(n), np.full(n, 1.0 / (nu * n))


def fit_csvm(gram, labels, C=1.0, class_weights=None, tol=1e-3, max_iter=10**6,
             sample_ids=None, track_objective=False):
    """Class-weighted soft-margin SVM on a precomputed kernel."""
    Q, p, y, box = csvm_problem(gram, labels, C, class_weights)
    if np.unique(y).size < 2:
        raise DataError("fit_csvm needs both classes; for single-class training data use fit_ocsvm")
    _warn_if_not_psd(np.asarray(gram, dtype=float))
    res = solve_dual(Q, p, y, box, np.zeros_like(y), 0.0, tol, max_iter,
                     track_objective=track_objective)
    rho = compute_rho(res.alpha, res.gradient, y, box)
    model = SvmModel(
        alpha=res.alpha, labels=y.astype(int), rho=rho, C=float(C),
        class_weights=normalize_class_weights(class_weights),
        sample_ids=list(sample_ids) if sample_ids is not None else list(range(y.size)),
        objective=_objective(res.alpha, res.gradient, p), iterations=res.iterations,
        objective_history=res.objective_history,
    )
    return model


def _ocsvm_start(n, ub):
    alpha = np.zeros(n)
    remaining = 1.0
    for i in range(n):
        if remaining <= 0:
            break
        alpha[i] = min(ub, remaining)
        remaining -= alpha[i]
    return alpha


def fit_ocsvm(gram, nu, tol=1e-3, max_iter=10**6, sample_ids=None, track_objective=False):
    """nu-one-class SVM with coefficients summing to one."""
    Q, p, y, box = ocsvm_problem(gram, nu)
    _warn_if_not_psd(Q)
    n = y.size
    res = solve_dual(Q, p, y, box, _ocsvm_start(n, box[0]), 1.0, tol, max_iter,
                     track_objective=track_objective)
    rho = compute_rho(res.alpha, Q @ res.alpha, y, box)
    model = OcsvmModel(
        alpha=res.alpha, rho=rho, nu=float(nu),
        sample_ids=list(sample_ids) if sample_ids is not None else list(range(n)),
        objective=_objective(res.alpha, res.gradient, p), iterations=res.iterations,
        objective_history=res.objective_history,
    )
    return model


def decision_function(model, cross_gram):
    k = np.atleast_2d(np.asarray(cross_gram, dtype=float))
    if k.shape[1] != model.alpha.size:
        raise DataError(
            f"cross-Gram has {k.shape[1]} columns but the model was trained on {model.alpha.size} samples"
        )
    kc = k @ model.dual_coef
    f = kc - model.rho
    # margin vectors sit at f = 0 up to cancellation error; keep them on the boundary
    return np.where(np.abs(f) <= SNAP_RTOL * (np.abs(kc) + abs(model.rho)), 0.0, f)


def score_and_predict(model, cross_gram, sample_ids=None):
    """Decision scores for test rows and their labels (``score >= 0`` is +1)."""
    scores = decision_function(model, cross_gram)
    labels = np.where(scores >= 0, 1, -1)
    ids = list(sample_ids) if sample_ids is not None else list(range(scores.size))
    if sample_ids is None and hasattr(cross_gram, "row_ids"):
        ids = list(cross_gram.row_ids)
    return ScoreReport(scores, labels, ids)


def dual_objective(model, gram):
    """Minimisation-form dual objective of a fitted model on its training Gram."""
    k = _as_square(gram)
    if isinstance(model, SvmModel):
        a = model.alpha * model.labels
        return float(0.5 * a @ k @ a - model.alpha.sum())
    return float(0.5 * model.alpha @ k @ model.alpha)


# ---------------------------------------------------------------- oracle


def qp_oracle(gram, labels=None, nu=None, C=1.0, class_weights=None, feas_tol=1e-10):
    """Global optimum of the dual by enumerating active sets (n <= 8).

    Every variable is assigned to its lower bound, upper bound or the free
    set; the free block is solved from the equality-constrained KKT system
    and the best feasible candidate wins. Returns ``(objective, alpha)``.
    """
    k = _as_square(gram)
    n = k.shape[0]
    if n > 8:
        raise ConfigError(f"qp_oracle enumerates 3**n active sets and refuses n={n} > 8")
    if (labels is None) == (nu is None):
        raise ConfigError("pass labels (two-class) or nu (one-class), not both")
    if nu is None:
        Q, p, y, box = csvm_problem(k, labels, C, class_weights)
        delta = 0.0
    else:
        Q, p, y, box = ocsvm_problem(k, nu)
        delta = 1.0
    best_obj, best = np.inf, None
    for pattern in itertools.product((0, 1, 2), repeat=n):
        pat = np.array(pattern)
        alpha = np.where(pat == 1, box, 0.0)
        f = np.flatnonzero(pat == 2)
        fixed = np.flatnonzero(pat != 2)
        if f.size:
            m = f.size
            kkt = np.zeros((m + 1, m + 1))
            kkt[:m, :m] = Q[np.ix_(f, f)]
            kkt[:m, m] = y[f]
            kkt[m, :m] = y[f]
            rhs = np.empty(m + 1)
            rhs[:m] = -(p[f] + Q[np.ix_(f, fixed)] @ alpha[fixed])
            rhs[m] = delta - y[fixed] @ alpha[fixed]
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
            alpha[f] = sol[:m]
        if np.any(alpha < -feas_tol) or np.any(alpha > box + feas_tol):
            continue
        alpha = np.clip(alpha, 0.0, box)
        if abs(y @ alpha - delta) > 1e-9:
            continue
        obj = 0.5 * alpha @ Q @ alpha + p @ alpha
        if obj < best_obj - 1e-15:
            best_obj, best = obj, alpha
    return float(best_obj), best


# ---------------------------------------------------------- classical RBF


def default_rbf_gamma(x):
    """``1 / (d * mean per-feature variance)`` of the training features."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    spread = float(np.mean(np.var(x, axis=0)))
    return 1.0 / (x.shape[1] * spread) if spread > 0 else 1.0


def rbf_gram(a, b=None, gamma=None):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b_arr = a if b is None else np.atleast_2d(np.asarray(b, dtype=float))
    gamma = default_rbf_gamma(a) if gamma is None else float(gamma)
    sq = (np.sum(a * a, axis=1)[:, None] + np.sum(b_arr * b_arr, axis=1)[None, :]
          - 2.0 * a @ b_arr.T)
    k = np.exp(-gamma * np.maximum(sq, 0.0))
    if b is None:
        k = 0.5 * (k + k.T)
        np.fill_diagonal(k, 1.0)
    return k


# ------------------------------------------------------------ persistence


def model_to_dict(model):
    d = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "kind": model.kind,
        "sample_ids": list(model.sample_ids),
        "alpha": [float(a) for a in model.alpha],
        "rho": float(model.rho),
        "objective": float(model.objective),
        "iterations": int(model.iterations),
    }
    if isinstance(model, SvmModel):
        d["labels"] = [int(v) for v in model.labels]
        d["C"] = model.C
        d["class_weights"] = {str(k): v for k, v in model.class_weights.items()}
    else:
        d["nu"] = model.nu
    return d


def model_from_dict(d):
    if d.get("format") != MODEL_FORMAT:
        raise FormatError(f"not a {MODEL_FORMAT} model file")
    if d.get("version") != MODEL_VERSION:
        raise FormatError(f"unsupported model version {d.get('version')}")
    common = dict(alpha=np.array(d["alpha"], dtype=float), rho=float(d["rho"]),
                  sample_ids=list(d["sample_ids"]), objective=float(d.get("objective", "nan")),
                  iterations=int(d.get("iterations", 0)))
    if d["kind"] == "csvm":
        return SvmModel(labels=np.array(d["labels"], dtype=int), C=float(d["C"]),
                        class_weights=normalize_class_weights(d["class_weights"]), **common)
    if d["kind"] == "ocsvm":
        return OcsvmModel(nu=float(d["nu"]), **common)
    raise FormatError(f"unknown model kind {d['kind']!r}")


def save_model(model, path):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=1)
        fh.write("\n")


def load_model(path):
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from None
    return model_from_dict(d)
