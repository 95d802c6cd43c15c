"""The base station's best response to a module price.

The BS maximizes ``sum_k log2(1 + gamma_k) - price * alpha * sum_s ||phi_s||``
by alternating closed-form block updates:

    alpha  (Lagrangian dual transform of the log)
    beta   (quadratic transform for W)
    W      (power-constrained closed form, multiplier by bisection)
    eps    (quadratic transform for phi)
    phi    (ADMM primal step, then projection onto |phi_i| <= 1)
    theta  (group soft-thresholding of the ADMM copy)
    Lambda (ADMM multiplier ascent)

All surrogate objectives are written in nats, i.e. ``ln 2`` times the utility
in bits, so the dual-transform auxiliaries are exact maximizers and the
group-lasso weight of the price term becomes ``price * alpha * ln 2``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import List, NamedTuple, Optional

import numpy as np
from scipy.optimize import brentq

from .scenario import (LN2, ChannelSet, ScenarioConfig, combined_channels, link_gains,
                       module_blocks, module_norms, sinr_from_gains, utilities)

log = logging.getLogger(__name__)

# W-only cycles (direct link, final polish) are cheap, so run them tighter
BEAMFORMER_TOL = 1e-9
BEAMFORMER_MAX_ITER = 2000


class FollowerError(RuntimeError):
    """Raised when the follower iteration produces non-finite values."""


@dataclass
class FollowerState:
    W: np.ndarray
    phi: np.ndarray
    theta: np.ndarray
    lam: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    eps: np.ndarray
    mu: np.ndarray
    lambda0: float = 0.0
    c: float = 1.0

    def copy(self) -> "FollowerState":
        return replace(self, **{k: np.array(v, copy=True) for k, v in vars(self).items()
                                if isinstance(v, np.ndarray)})

    @property
    def alpha_bar(self) -> np.ndarray:
        return 1.0 + self.alpha


class ShrinkageInputs(NamedTuple):
    x: np.ndarray      # (S, N) blocks of c * phi - Lambda
    norms: np.ndarray  # (S,)


class TraceRecord(NamedTuple):
    iteration: int
    objective: float
    residual: float


@dataclass
class FollowerResult:
    state: FollowerState
    W: np.ndarray
    reflection: np.ndarray
    trace: List[TraceRecord] = field(default_factory=list)
    converged: bool = False
    admm_converged: bool = False
    # the IRS-free fallback beat the ADMM solution
    used_direct_link: bool = False

    @property
    def iterations(self) -> int:
        return len(self.trace)


def price_weight(price: float, balance_alpha: float) -> float:
    """Group-lasso weight of the price term in the nat-scaled surrogate."""
    return price * balance_alpha * LN2


def matched_filter(ch: ChannelSet, phi: np.ndarray, p_max: float) -> np.ndarray:
    """Beamformers along each combined channel with ``p_max`` split equally."""
    hc = combined_channels(ch, phi)
    norms = np.linalg.norm(hc, axis=1)
    norms[norms == 0.0] = 1.0
    return (hc / norms[:, None]).T * np.sqrt(p_max / ch.num_users)


def initial_state(ch: ChannelSet, cfg: ScenarioConfig) -> FollowerState:
    sn, k = ch.num_elements, ch.num_users
    phi = np.ones(sn, dtype=complex)
    return FollowerState(
        W=matched_filter(ch, phi, cfg.max_power),
        phi=phi,
        theta=phi.copy(),
        lam=np.zeros(sn, dtype=complex),
        alpha=np.zeros(k),
        beta=np.zeros(k, dtype=complex),
        eps=np.zeros(k, dtype=complex),
        mu=np.zeros(sn),
        lambda0=0.0,
        c=float(cfg.admm_penalty),
    )


# ---------------------------------------------------------------------------
# objectives

def dual_transform_objective(gamma, alpha_aux, reg: float = 0.0) -> float:
    """Lagrangian dual transform of ``sum_k log2(1 + gamma_k) - reg`` at auxiliaries ``alpha_aux``.

    Equals the utility in bits when ``alpha_aux == gamma`` and is smaller otherwise.
    """
    gamma = np.asarray(gamma, dtype=float)
    a = np.asarray(alpha_aux, dtype=float)
    nats = np.log1p(a) - a + (1.0 + a) * gamma / (1.0 + gamma)
    return float(nats.sum() / LN2 - reg)


def follower_objective(ch: ChannelSet, W, phi, alpha_aux, price: float,
                       cfg: ScenarioConfig) -> float:
    gamma = sinr_from_gains(link_gains(ch, W, phi), cfg.noise_power)
    reg = price * cfg.balance_alpha * float(module_norms(phi, ch.elements_per_module).sum())
    return dual_transform_objective(gamma, alpha_aux, reg)


def beamformer_surrogate(ch: ChannelSet, W, phi, beta, alpha_bar, noise_power) -> float:
    """Quadratic-transform objective in ``(W, beta)`` for fixed ``phi``."""
    Z = link_gains(ch, W, phi)
    sig = np.diag(Z)
    total = (np.abs(Z) ** 2).sum(axis=1) + noise_power
    return float(np.sum(2.0 * np.sqrt(alpha_bar) * np.real(np.conj(beta) * sig)
                        - np.abs(beta) ** 2 * total))


def reflection_surrogate(eps, phi, A, B, alpha_bar, noise_power) -> float:
    """Quadratic-transform objective in ``(phi, eps)`` for fixed ``W`` (price term excluded)."""
    Z = reflection_gains(phi, A, B)  # Z[j, k] = b_jk + phi^H a_jk
    sig = np.diag(Z)
    total = (np.abs(Z) ** 2).sum(axis=0) + noise_power
    return float(np.sum(2.0 * np.sqrt(alpha_bar) * np.real(np.conj(eps) * sig)
                        - np.abs(eps) ** 2 * total))


# ---------------------------------------------------------------------------
# block updates

def update_alpha(state: FollowerState, ch: ChannelSet, noise_power: float) -> np.ndarray:
    return sinr_from_gains(link_gains(ch, state.W, state.phi), noise_power)


def update_beta(state: FollowerState, ch: ChannelSet, noise_power: float) -> np.ndarray:
    Z = link_gains(ch, state.W, state.phi)
    total = (np.abs(Z) ** 2).sum(axis=1) + noise_power
    return np.sqrt(state.alpha_bar) * np.diag(Z) / total


def _power_profile(energy: np.ndarray, d: np.ndarray, lam: float) -> float:
    with np.errstate(divide="ignore"):      # zero eigenvalue at lam = 0 means infinite power
        return float(energy @ (1.0 / (lam + d) ** 2))


def update_w(state: FollowerState, ch: ChannelSet, p_max: float,
             power_tol: float = 1e-12, max_iter: int = 100):
    """Closed-form beamformers for fixed ``beta`` and the power multiplier.

    ``w_k = sqrt(abar_k) beta_k (lam I + sum_j |beta_j|^2 h_j h_j^H)^{-1} h_k``,
    with ``lam = 0`` if that is feasible and otherwise the root of
    ``sum_k ||w_k(lam)||^2 = p_max`` (power is strictly decreasing in ``lam``),
    bracketed on ``[0, sqrt(E / p_max)]`` and located with Brent's method.  The
    returned multiplier is on the feasible side of the root.

    Returns
    -------
    (W, lambda0)
    """
    hc = combined_channels(ch, state.phi)            # rows h_k
    weights = np.abs(state.beta) ** 2
    R = (hc.T * weights) @ hc.conj()                # sum_j |beta_j|^2 h_j h_j^H
    R = 0.5 * (R + R.conj().T)
    d, U = np.linalg.eigh(R)
    d = np.clip(d, 0.0, None)
    coef = np.sqrt(state.alpha_bar) * state.beta
    Q = U.conj().T @ (hc.T * coef)                  # rotated right-hand sides
    energy = (np.abs(Q) ** 2).sum(axis=1)           # per eigen-direction

    dmax = d.max() if d.size else 0.0
    if dmax <= 0.0 or not np.any(energy > 0.0):
        return np.zeros((ch.num_antennas, ch.num_users), dtype=complex), 0.0

    # lam = 0: pseudo-inverse solution on the range of R
    live = d > 1e-12 * dmax
    inv0 = np.where(live, 1.0 / np.where(live, d, 1.0), 0.0)
    if energy @ inv0 ** 2 <= p_max:
        return U @ (Q * inv0[:, None]), 0.0

    # at hi the power is at most E / hi^2 = p_max
    hi = float(np.sqrt(energy.sum() / p_max))
    lam = brentq(lambda x: _power_profile(energy, d, x) / p_max - 1.0, 0.0, hi,
                 xtol=1e-300, rtol=power_tol, maxiter=max_iter)
    step = max(lam, 1e-300) * power_tol
    while lam < hi and _power_profile(energy, d, lam) > p_max:
        lam = min(hi, lam + step)
        step *= 2.0
    return U @ (Q / (lam + d)[:, None]), lam


def reflection_terms(ch: ChannelSet, W: np.ndarray):
    """``A[j, k] = diag(g_k^H) H w_j`` and ``B[j, k] = h_{d,k}^H w_j``."""
    HW = ch.H @ W                                     # (SN, K), column j is H w_j
    A = ch.G.conj()[None, :, :] * HW.T[:, None, :]    # (K_j, K_k, SN)
    B = (ch.Hd.conj() @ W).T                          # (K_j, K_k)
    return A, B


def reflection_gains(phi, A, B) -> np.ndarray:
    """``Z[j, k] = b_jk + phi^H a_jk``, i.e. ``h_k^H w_j``."""
    return B + A @ np.conj(phi)


def update_epsilon(state: FollowerState, ch: ChannelSet, noise_power: float,
                   terms=None) -> np.ndarray:
    A, B = terms if terms is not None else reflection_terms(ch, state.W)
    Z = reflection_gains(state.phi, A, B)
    total = (np.abs(Z) ** 2).sum(axis=0) + noise_power
    return np.sqrt(state.alpha_bar) * np.diag(Z) / total


def phi_stationary_point(eps, alpha_bar, A, B, theta, lam, c, mu=None) -> np.ndarray:
    """Maximizer over ``phi`` of the augmented Lagrangian, without the modulus constraints.

    Solves ``(2 sum_k |eps_k|^2 sum_j a_jk a_jk^H + 2 diag(mu) + c I) phi = v`` with
    ``v = 2 sum_k sqrt(abar_k) conj(eps_k) a_kk + Lambda + c theta
    - 2 sum_k |eps_k|^2 sum_j conj(b_jk) a_jk``.
    """
    sn = A.shape[2]
    X = (A * np.abs(eps)[None, :, None]).reshape(-1, sn)
    mat = 2.0 * (X.T @ X.conj())
    mat[np.diag_indices(sn)] += c
    if mu is not None:
        mat[np.diag_indices(sn)] += 2.0 * np.asarray(mu)
    rhs = _surrogate_gradient_at_zero(eps, alpha_bar, A, B) + lam + c * theta
    return np.linalg.solve(mat, rhs)


def _surrogate_gradient_at_zero(eps, alpha_bar, A, B) -> np.ndarray:
    # twice the Wirtinger derivative of the phi-surrogate w.r.t. conj(phi), at phi = 0
    k = A.shape[0]
    diag_a = A[np.arange(k), np.arange(k)]               # a_kk, (K, SN)
    g = 2.0 * (np.sqrt(alpha_bar) * np.conj(eps)) @ diag_a
    return g - 2.0 * np.einsum("k,jk,jki->i", np.abs(eps) ** 2, np.conj(B), A)


def project_unit_modulus(phi: np.ndarray) -> np.ndarray:
    """Per-element projection onto ``|phi_i| <= 1`` (phase kept)."""
    mag = np.abs(phi)
    return phi / np.maximum(mag, 1.0)


def update_phi(state: FollowerState, ch: ChannelSet, terms=None) -> np.ndarray:
    if ch.num_elements == 0:
        return state.phi.copy()
    A, B = terms if terms is not None else reflection_terms(ch, state.W)
    phi = phi_stationary_point(state.eps, state.alpha_bar, A, B, state.theta,
                               state.lam, state.c)
    return project_unit_modulus(phi)


def group_shrink(x_blocks: np.ndarray, threshold: float, c: float) -> np.ndarray:
    """Block soft-thresholding: argmin_t threshold*||t|| + (c/2)||t - x/c||^2 per row of ``x_blocks``."""
    x_blocks = np.asarray(x_blocks)
    norms = np.linalg.norm(x_blocks, axis=-1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)
    gain = np.where(norms > threshold, (norms - threshold) / (c * safe), 0.0)
    return gain * x_blocks


def shrinkage_inputs(state: FollowerState, elements_per_module: int) -> ShrinkageInputs:
    x = module_blocks(state.c * state.phi - state.lam, elements_per_module)
    return ShrinkageInputs(x, np.linalg.norm(x, axis=1))


def update_theta(state: FollowerState, elements_per_module: int, threshold: float) -> np.ndarray:
    x, _ = shrinkage_inputs(state, elements_per_module)
    return group_shrink(x, threshold, state.c).reshape(-1)


def update_lambda(state: FollowerState) -> np.ndarray:
    return state.lam + state.c * (state.theta - state.phi)


# ---------------------------------------------------------------------------
# solvers

def _rel_change(new: float, old: float) -> float:
    return abs(new - old) / max(abs(old), 1e-300)


def optimize_beamformer(ch: ChannelSet, phi: np.ndarray, W0: np.ndarray,
                        cfg: ScenarioConfig, tol: float = BEAMFORMER_TOL,
                        max_iter: int = BEAMFORMER_MAX_ITER):
    """Run the (alpha, beta, W) cycle with ``phi`` held fixed.

    Each step is an exact block maximizer, so the sum rate never decreases.
    Returns the beamformer and the number of cycles used.
    """
    st = FollowerState(W=np.array(W0, dtype=complex), phi=np.asarray(phi), theta=phi, lam=phi,
                       alpha=np.zeros(ch.num_users), beta=np.zeros(ch.num_users, dtype=complex),
                       eps=np.zeros(ch.num_users, dtype=complex), mu=np.zeros(0))
    prev = None
    it = 0
    for it in range(1, max_iter + 1):
        st.alpha = update_alpha(st, ch, cfg.noise_power)
        st.beta = update_beta(st, ch, cfg.noise_power)
        st.W, st.lambda0 = update_w(st, ch, cfg.max_power)
        rate = float(np.log2(1.0 + update_alpha(st, ch, cfg.noise_power)).sum())
        if prev is not None and _rel_change(rate, prev) < tol:
            break
        prev = rate
    return st.W, it


def direct_link_beamformer(ch: ChannelSet, cfg: ScenarioConfig) -> np.ndarray:
    """Beamformer optimized with every module switched off (price independent)."""
    phi = np.zeros(ch.num_elements, dtype=complex)
    W, _ = optimize_beamformer(ch, phi, matched_filter(ch, phi, cfg.max_power), cfg)
    return W


def direct_link_state(ch: ChannelSet, cfg: ScenarioConfig,
                      W: Optional[np.ndarray] = None) -> FollowerState:
    """ADMM fixed point of the IRS-free strategy ``(W, phi = theta = 0)``.

    With ``phi = theta = 0`` the phi-update is stationary iff the multiplier
    cancels the surrogate gradient at zero, so ``Lambda = -grad``.  The resulting
    shrinkage inputs are the module demands.
    """
    sn = ch.num_elements
    if W is None:
        W = direct_link_beamformer(ch, cfg)
    zero = np.zeros(sn, dtype=complex)
    st = FollowerState(W=np.array(W, dtype=complex), phi=zero, theta=zero.copy(), lam=zero.copy(),
                       alpha=np.zeros(ch.num_users), beta=np.zeros(ch.num_users, dtype=complex),
                       eps=np.zeros(ch.num_users, dtype=complex), mu=np.zeros(sn),
                       c=float(cfg.admm_penalty))
    st.alpha = update_alpha(st, ch, cfg.noise_power)
    st.beta = update_beta(st, ch, cfg.noise_power)
    if sn:
        terms = reflection_terms(ch, st.W)
        st.eps = update_epsilon(st, ch, cfg.noise_power, terms)
        st.lam = -_surrogate_gradient_at_zero(st.eps, st.alpha_bar, *terms)
    return st


def marginal_demand(ch: ChannelSet, cfg: ScenarioConfig,
                    W: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-module marginal value of reflection at the IRS-free operating point.

    This is the gradient norm of the nat-scaled surrogate with respect to each
    block of ``phi`` at ``phi = 0`` (auxiliaries at their optimal values), which
    is what the shrinkage-input norms settle to once the ADMM has switched every
    module off.  A module stays off for any price whose group-lasso weight
    exceeds its demand.
    """
    if ch.num_elements == 0:
        return np.zeros(0)
    st = direct_link_state(ch, cfg, W)
    return shrinkage_inputs(st, ch.elements_per_module).norms


def solve_follower(ch: ChannelSet, price: float, cfg: ScenarioConfig,
                   init: Optional[FollowerState] = None,
                   direct_W: Optional[np.ndarray] = None) -> FollowerResult:
    """Best response of the BS to ``price``.

    Iterates the block updates until the relative change of the utility is below
    ``cfg.tol_inner`` and the ADMM residual ``||theta - phi|| / max(1, ||phi||)`` is
    below ``cfg.tol_admm``, or ``cfg.max_inner`` cycles have run.  The reported
    reflection is the (sparse) ADMM copy ``theta`` projected onto the unit-modulus
    box, and the reported beamformer is re-optimized for it.  If switching every
    module off (with ``direct_W``, computed when not given) yields a higher
    utility, that strategy is reported instead, together with its ADMM fixed
    point as the returned state.
    """
    if price < 0:
        raise ValueError("price must be >= 0")
    st = init.copy() if init is not None else initial_state(ch, cfg)
    st.c = float(cfg.admm_penalty)
    n = ch.elements_per_module
    weight = price_weight(price, cfg.balance_alpha)
    has_irs = ch.num_elements > 0
    sigma2 = cfg.noise_power

    trace: List[TraceRecord] = []
    prev = None
    converged = admm_ok = False
    for t in range(1, cfg.max_inner + 1):
        st.alpha = update_alpha(st, ch, sigma2)
        st.beta = update_beta(st, ch, sigma2)
        st.W, st.lambda0 = update_w(st, ch, cfg.max_power)
        if has_irs:
            terms = reflection_terms(ch, st.W)
            st.eps = update_epsilon(st, ch, sigma2, terms)
            st.phi = update_phi(st, ch, terms)
            st.theta = update_theta(st, n, weight)
            st.lam = update_lambda(st)
        obj, _, _ = utilities(ch, st.W, st.phi, price, cfg)
        residual = float(np.linalg.norm(st.theta - st.phi) / max(1.0, np.linalg.norm(st.phi)))
        trace.append(TraceRecord(t, obj, residual))
        if not np.isfinite(obj) or not np.all(np.isfinite(st.phi)) or not np.all(np.isfinite(st.W)):
            raise FollowerError(
                f"non-finite follower iterate at t={t}: objective={obj}, price={price}, "
                f"|W|={np.linalg.norm(st.W)}, |phi|={np.linalg.norm(st.phi)}, "
                f"|Lambda|={np.linalg.norm(st.lam)}, lambda0={st.lambda0}")
        admm_ok = residual < cfg.tol_admm
        if prev is not None and _rel_change(obj, prev) < cfg.tol_inner and admm_ok:
            converged = True
            break
        prev = obj

    if not admm_ok:
        log.warning("ADMM residual %.3g above tolerance after %d iterations (price %.4g)",
                    trace[-1].residual, len(trace), price)
    reflection = project_unit_modulus(st.theta) if has_irs else st.phi.copy()
    W, _ = optimize_beamformer(ch, reflection, st.W, cfg)
    st.W = W
    fallback = False
    if has_irs:
        if direct_W is None:
            direct_W = direct_link_beamformer(ch, cfg)
        off = np.zeros_like(reflection)
        if utilities(ch, direct_W, off, price, cfg)[0] > utilities(ch, W, reflection, price, cfg)[0]:
            W, reflection, fallback = np.array(direct_W), off, True
            st = direct_link_state(ch, cfg, direct_W)
    return FollowerResult(st, W, reflection, trace, converged, admm_ok, fallback)
