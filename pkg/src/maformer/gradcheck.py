"""Central finite differences, the oracle for every backward rule."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor


def finite_diff_grad(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by ``(f(x+he) - f(x-he)) / 2h`` per coordinate."""
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(np.asarray(_value(f(Tensor(base.copy(), checked=False)))))
        flat[i] = orig - step
        fm = float(np.asarray(_value(f(Tensor(base.copy(), checked=False)))))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def _value(y):
    return y.data if isinstance(y, Tensor) else y


def rel_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Max-norm relative error ``max|a-n| / max(max|a|, max|n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def finite_diff_params(loss_fn: Callable[[], float], arrays: Mapping[str, np.ndarray],
                       step: float = 1e-5) -> dict[str, np.ndarray]:
    """Finite-difference gradients for every scalar of every named array.

    ``loss_fn`` reads the arrays by reference, so each coordinate is perturbed
    in place and restored bit-exactly afterwards.
    """
    out = {}
    for name, arr in arrays.items():
        g = np.zeros(arr.shape, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = loss_fn()
            flat[i] = orig - step
            fm = loss_fn()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
        out[name] = g
    return out


def generic_point(store, seed: int = 0, scale: float = 0.5):
    """Copy of ``store`` moved to a generic evaluation point in float64.

    Fresh uniform noise in ``[-scale, scale]`` is added to every scalar so
    that zero biases, unit gains and the small initialisation scale do not
    leave gradients structurally tiny.
    """
    rng = np.random.default_rng(seed)
    out = store.astype(np.float64)
    for arr in out.arrays.values():
        arr += rng.uniform(-scale, scale, size=arr.shape)
    return out


def compare_grads(analytic: Mapping[str, np.ndarray], numeric: Mapping[str, np.ndarray],
                  rel_floor: float = 1e-6) -> dict[str, float]:
    """Per-tensor relative errors.

    The denominator floor is ``rel_floor`` times the largest gradient over all
    tensors, so tensors whose true gradient is identically zero (e.g. key
    biases under softmax shift invariance) are judged against finite-difference
    noise at the global scale rather than against zero.
    """
    top = max((np.abs(v).max(initial=0.0) for v in numeric.values()), default=0.0)
    floor = max(rel_floor * top, 1e-12)
    return {k: rel_error(analytic[k], numeric[k], floor) for k in numeric}


def check_model(config, seed: int = 0, batch: int = 2, step: float = 1e-5) -> dict:
    """Full forward + cross-entropy gradcheck over every parameter, in float64.

    Returns ``{"errors": {name: rel_err}, "max_error": float, "worst": name}``.
    """
    from .model import forward, init_params
    from .tensor import Tape, cross_entropy

    rng = np.random.default_rng(seed + 7)
    store = generic_point(init_params(config, seed, np.float64), seed)
    x = rng.standard_normal((batch, config.in_channels, *config.img_size))
    y = rng.integers(0, config.num_classes, size=batch)

    tape = Tape()
    scope = store.bind(tape)
    loss = cross_entropy(forward(x, config, scope), y)
    tape.backward(loss)
    analytic = scope.grads()

    def loss_fn():
        return float(cross_entropy(forward(x, config, store), y).data)

    numeric = finite_diff_params(loss_fn, store.arrays, step)
    errors = compare_grads(analytic, numeric)
    worst = max(errors, key=errors.get)
    return {"errors": errors, "max_error": errors[worst], "worst": worst}
