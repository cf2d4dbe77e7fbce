"""Central finite-difference check of a layer's analytic gradients."""

from __future__ import annotations

import numpy as np


def _rel_error(analytic, numeric, floor):
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), floor, 1e-300)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def finite_diff_check(layer, x, h=1e-5, training=False, seed=0, max_entries=None):
    """Max relative error between analytic and central-difference gradients.

    The scalar probed is ``sum(r * layer(x))`` for a fixed random ``r``, so
    every output element contributes. Both the input gradient and every
    parameter gradient are checked; the worst of them is returned. The error
    of one gradient array is ``max|a - n| / max(max|a|, max|n|)``.

    ``max_entries`` caps how many coordinates per array are perturbed
    (chosen at random), which keeps wide layers affordable.

    Batch-norm running statistics are restored after every evaluation so
    train-mode probing stays a pure function of the parameters.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError("finite-difference step must lie in [1e-6, 1e-4]")
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=float)
    saved_state = _snapshot_state(layer)

    def loss(inp):
        out = layer.forward(inp, training=training)
        _restore_state(layer, saved_state)
        return float(np.sum(r * out))

    out = layer.forward(x, training=training)
    _restore_state(layer, saved_state)
    r = rng.standard_normal(out.shape)
    layer.forward(x, training=training)
    _restore_state(layer, saved_state)
    dx = layer.backward(r)
    grads = {k: v.copy() for k, v in layer.grads.items()}

    pairs = [(dx, _numeric(loss, x, h, rng, max_entries, dx))]
    for name, theta in layer.params.items():
        def loss_p(v, name=name, theta=theta):
            saved = theta.copy()
            theta[...] = v
            try:
                return loss(x)
            finally:
                theta[...] = saved
        pairs.append((grads[name], _numeric(loss_p, theta.copy(), h, rng, max_entries, grads[name])))
    floor = 1e-3 * max(float(np.max(np.abs(a))) for a, _ in pairs)
    worst = max(_rel_error(a, n, floor) for a, n in pairs)
    return worst


def _numeric(fn, x0, h, rng, max_entries, analytic):
    """Central differences; unprobed coordinates copy the analytic value."""
    numeric = analytic.astype(float).copy()
    flat_idx = np.arange(x0.size)
    if max_entries is not None and x0.size > max_entries:
        flat_idx = rng.choice(x0.size, size=max_entries, replace=False)
    x = x0.copy()
    flat = x.reshape(-1)
    for i in flat_idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
    return numeric


def _layers(layer):
    return getattr(layer, "layers", [layer])


def _snapshot_state(layer):
    return [dict(l.state) for l in _layers(layer)]


def _restore_state(layer, snapshot):
    for l, s in zip(_layers(layer), snapshot):
        l.state = dict(s)
