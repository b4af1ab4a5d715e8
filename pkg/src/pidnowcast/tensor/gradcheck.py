"""Finite-difference validation of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from . import autograd as ag


def _setup(f, x, freeze_stop_gradient):
    single = not isinstance(x, (list, tuple))
    xs = [x] if single else list(x)

    def call():
        return f(xs[0]) if single else f()

    replay = ag._Replay() if freeze_stop_gradient else None
    return xs, call, replay


def _record(call, replay):
    if replay is None:
        return call()
    with ag.frozen_constants(replay):
        return call()


def _sweep(xs, call, replay, eps, oracle_dtype):
    numeric = []
    originals = [t.data for t in xs]
    try:
        for t in xs:
            t.data = t.data.astype(oracle_dtype)
        for t in xs:
            g = np.zeros(t.shape, dtype=np.float64)
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = _evaluate(call, replay, oracle_dtype)
                flat[i] = orig - eps
                lo = _evaluate(call, replay, oracle_dtype)
                flat[i] = orig
                g.reshape(-1)[i] = (hi - lo) / (2.0 * eps)
            numeric.append(g)
    finally:
        for t, arr in zip(xs, originals):
            t.data = arr
    return numeric


def numeric_gradient(f, x, eps: float = 1e-3, *, freeze_stop_gradient: bool = False,
                     oracle_dtype=np.float64):
    """Central-difference gradient of ``f`` (same calling convention as ``grad_check``)."""
    xs, call, replay = _setup(f, x, freeze_stop_gradient)
    _record(call, replay)
    return _sweep(xs, call, replay, eps, oracle_dtype)


def grad_check(f, x, eps: float = 1e-3, tol: float | None = None, *,
               freeze_stop_gradient: bool = False, floor: float = 1e-2,
               oracle_dtype=np.float64):
    """Max component-wise relative deviation between autodiff and central differences.

    Parameters
    ----------
    f : callable
        Takes no arguments (when ``x`` is a list of parameters it closes over)
        or the single tensor ``x``; returns a scalar tensor.
    x : Tensor or list of Tensor
        Points of differentiation. Must have ``requires_grad`` set.
    eps : float
        Central-difference half step.
    tol : float, optional
        If given, raise ``AssertionError`` when the deviation exceeds it.
    freeze_stop_gradient : bool
        Hold stop-gradient outputs (and ``nondiff`` values) at their base-point
        values during the finite-difference sweeps, so the comparison targets the
        straight-through derivative reverse mode actually computes.
    floor : float
        Denominators are at least ``floor`` times the largest gradient
        magnitude, which keeps near-zero components from dominating.
    oracle_dtype : dtype
        Precision of the finite-difference evaluations. The reverse-mode
        gradient under test always runs at the engine's float32; a float64
        oracle keeps f32 rounding of intermediates out of the reference.
    """
    xs, call, replay = _setup(f, x, freeze_stop_gradient)
    analytic = ag.grad(_record(call, replay), xs)
    numeric = _sweep(xs, call, replay, eps, oracle_dtype)
    dev = relative_deviation(analytic, numeric, floor)
    if tol is not None and dev > tol:
        raise AssertionError(f"gradient check failed: max relative deviation {dev:.3g} > {tol}")
    return dev


def relative_deviation(a_list, b_list, floor: float = 1e-2) -> float:
    a = np.concatenate([np.asarray(v, dtype=np.float64).reshape(-1) for v in a_list])
    n = np.concatenate([np.asarray(v, dtype=np.float64).reshape(-1) for v in b_list])
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), max(floor * scale, 1e-12))
    return float(np.max(np.abs(a - n) / denom, initial=0.0))


def _evaluate(call, replay, dtype):
    with ag.no_grad(), ag.compute_dtype(dtype):
        if replay is None:
            return float(call().data)
        with ag.frozen_constants(replay):
            return float(call().data)
