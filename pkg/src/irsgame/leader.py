"""Pricing of reflection modules by the IRS operator.

The leader anticipates the follower's group soft-thresholding: with shrinkage
inputs ``x_s`` frozen, module ``s`` stays on iff ``||x_s|| > t * r`` and then
contributes ``||theta_s|| = (||x_s|| - t * r) / c``, where ``t`` is the
follower's threshold per unit price.  The leader's revenue is

    V(r) = scale * r * sum_s kappa_s (||x_s|| - t * r) / c

which for ``t = scale = 1`` is ``sum_s kappa_s (-r^2 + ||x_s|| r) / c``.
"""

from __future__ import annotations

import numpy as np


class NoReflectionDemand(ValueError):
    """Every shrinkage input is zero, so no price sells any module."""


def active_modules(price: float, x_norms, threshold_per_price: float = 1.0) -> np.ndarray:
    return np.asarray(x_norms, dtype=float) > threshold_per_price * price


def leader_utility(price: float, x_norms, c: float, threshold_per_price: float = 1.0,
                   revenue_scale: float = 1.0) -> float:
    if price <= 0 or c <= 0:
        raise ValueError("price and c must be > 0")
    norms = np.asarray(x_norms, dtype=float)
    kappa = active_modules(price, norms, threshold_per_price)
    per_module = price * (norms[kappa] - threshold_per_price * price) / c
    return float(revenue_scale * per_module.sum())


def price_candidates(x_norms, threshold_per_price: float = 1.0) -> np.ndarray:
    """Vertex of every prefix subset (largest norms first) plus every breakpoint."""
    norms = np.sort(np.asarray(x_norms, dtype=float))[::-1]
    norms = norms[norms > 0.0]
    sizes = np.arange(1, norms.size + 1)
    vertices = np.cumsum(norms) / (2.0 * threshold_per_price * sizes)
    breakpoints = norms / threshold_per_price
    return np.concatenate([vertices, breakpoints])


def optimal_price(x_norms, c: float, threshold_per_price: float = 1.0) -> float:
    """Revenue-maximizing price for frozen shrinkage inputs.

    ``V`` is continuous and piecewise quadratic in the price, with breakpoints at
    ``||x_s|| / t``.  On the piece where the retained set is ``T`` the maximizer is
    ``sum_{s in T} ||x_s|| / (2 t |T|)``; the retained sets are always prefixes of the
    norms sorted in descending order.  Every prefix vertex and every breakpoint is
    scored with the true indicator, and the best is returned (smallest price on ties).
    """
    norms = np.asarray(x_norms, dtype=float)
    if c <= 0 or threshold_per_price <= 0:
        raise ValueError("c and threshold_per_price must be > 0")
    if norms.size == 0 or not np.any(norms > 0.0):
        raise NoReflectionDemand("no reflection demand: all shrinkage inputs are zero")
    cands = np.unique(price_candidates(norms, threshold_per_price))
    values = [leader_utility(r, norms, c, threshold_per_price) for r in cands]
    return float(cands[int(np.argmax(values))])


def random_price(rng: np.random.Generator, r_max: float) -> float:
    """Uniform price on ``(0, r_max]``."""
    if r_max <= 0:
        raise ValueError("r_max must be > 0")
    return float(r_max * (1.0 - rng.random()))
