"""
Finite-difference verification of reverse-mode gradients.

Piecewise-linear operations (abs, relu, soft thresholding) are not
differentiable at their kinks. A coordinate whose ``±eps`` probes take a
different branch anywhere in the function than the unperturbed input does is
excluded from the comparison.
"""

from typing import Callable, Dict, Mapping, Optional, Tuple

import numpy as np

from shrinknet.tensor import KinkMonitor, Tape, Tensor, backward, monitoring_kinks
from shrinknet.util import debug


def relative_error(analytic: float, numeric: float) -> float:
    """
    Relative disagreement between two derivative estimates.

    >>> relative_error(2.0, 2.0)
    0.0
    >>> relative_error(float("nan"), 1.0)
    inf
    """
    if not (np.isfinite(analytic) and np.isfinite(numeric)):
        return float("inf")
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def kink_mask(x: np.ndarray, tau: np.ndarray, eps: float) -> np.ndarray:
    """
    True where ``x`` is safely away from the soft-threshold kinks at ``±tau``.

    Probes ``x ± eps`` stay on one branch when ``||x| - tau| > 10 * eps``.
    """
    return np.abs(np.abs(x) - tau) > 10 * eps


def _probe(f: Callable[[], Tensor]) -> Tuple[float, KinkMonitor]:
    with monitoring_kinks() as monitor:
        value = f().item()
    return value, monitor


def _numeric_errors(
    target: Tensor,
    analytic: np.ndarray,
    f: Callable[[], Tensor],
    base_kinks: KinkMonitor,
    eps: float,
    mask: Optional[np.ndarray],
    skip_kinks: bool,
) -> Tuple[float, int]:
    # `target` must be a trainable leaf that f reads; it is restored on exit.
    original = target.values
    worst = 0.0
    checked = 0
    try:
        for idx in np.ndindex(original.shape):
            if mask is not None and not mask[idx]:
                continue
            probe = np.array(original)
            probe[idx] = original[idx] + eps
            target.assign(probe)
            f_plus, kinks_plus = _probe(f)
            probe[idx] = original[idx] - eps
            target.assign(probe)
            f_minus, kinks_minus = _probe(f)
            if skip_kinks and not (
                base_kinks.same_branches(kinks_plus)
                and base_kinks.same_branches(kinks_minus)
            ):
                continue
            numeric = (f_plus - f_minus) / (2 * eps)
            worst = max(worst, relative_error(float(analytic[idx]), numeric))
            checked += 1
    finally:
        target.assign(original)
    return worst, checked


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    mask: Optional[np.ndarray] = None,
    skip_kinks: bool = True,
) -> float:
    """
    Worst relative error between the analytic and central-difference gradient.

    ``f`` maps a tensor shaped like ``x`` to a scalar tensor. Coordinates where
    ``mask`` is False, or whose probes cross a kink, are not compared. NaN in
    either gradient is reported as an error of ``inf``.

    pre: f is deterministic and x is finite
    post: _ >= 0
    """
    leaf = Tensor(x.values, requires_grad=True, name="x")
    tape = Tape()
    with tape.recording(), monitoring_kinks() as base_kinks:
        out = f(leaf)
    backward(out, tape)
    analytic = leaf.grad
    assert analytic is not None
    worst, checked = _numeric_errors(
        leaf, analytic, lambda: f(leaf), base_kinks, eps, mask, skip_kinks
    )
    debug("compared", checked, "of", x.size, "coordinates; worst error", worst)
    return worst


def check_parameter_gradients(
    parameters: Mapping[str, Tensor],
    loss_fn: Callable[[], Tensor],
    eps: float = 1e-5,
    skip_kinks: bool = True,
) -> Dict[str, float]:
    """
    Run the gradient check against every named parameter of a loss.

    Returns the worst relative error per parameter name. ``loss_fn`` must read
    the parameters at call time (model layers do).
    """
    tape = Tape()
    with tape.recording(), monitoring_kinks() as base_kinks:
        loss = loss_fn()
    backward(loss, tape)
    analytic = {
        name: np.zeros_like(p.values) if p.grad is None else np.array(p.grad)
        for name, p in parameters.items()
    }
    errors: Dict[str, float] = {}
    for name, param in parameters.items():
        worst, checked = _numeric_errors(
            param, analytic[name], loss_fn, base_kinks, eps, None, skip_kinks
        )
        debug(name, "compared", checked, "of", param.size, "worst error", worst)
        errors[name] = worst
    return errors
