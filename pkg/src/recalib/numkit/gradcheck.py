"""Central-difference gradient checking."""
from __future__ import annotations

import numpy as np

from ..errors import EvaluationError, ParameterError
from .ops import held_stops
from .tape import Tape, Tensor


def _scalar(f):
    out = f()
    val = float(np.asarray(out.value if isinstance(out, Tensor) else out).reshape(()))
    if not np.isfinite(val):
        raise EvaluationError(f"objective is not finite: {val}")
    return out, val


def grad_check(f, params, eps=1e-5, hold_stops=False):
    """Max relative error between tape gradients and central differences.

    ``f`` is a zero-argument callable returning a scalar Tensor built from the
    Tensors in ``params``; the check perturbs ``params`` in place and restores
    them. The error per entry is ``|analytic - fd| / max(1, |fd|)``.

    With ``hold_stops`` the stop points of ``f`` (``stop_gradient``,
    ``grad_reverse``) are pinned to their unperturbed values, see
    :class:`~recalib.numkit.ops.held_stops`. Without it, objectives that
    contain them disagree with finite differences by design.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ParameterError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    if hold_stops:
        with held_stops() as held:
            return _check(f, list(params), eps, held.rewind)
    return _check(f, list(params), eps, lambda: None)


def _check(f, params, eps, rewind):
    with Tape() as tape:
        out, _ = _scalar(f)
    analytic = tape.gradient(out, params)

    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            rewind()
            _, fp = _scalar(f)
            flat[i] = orig - eps
            rewind()
            _, fm = _scalar(f)
            flat[i] = orig
            fd = (fp - fm) / (2 * eps)
            err = abs(gflat[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst
