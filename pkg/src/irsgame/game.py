"""Outer price loop, baseline schemes and equilibrium diagnostics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
from scipy.optimize import minimize_scalar

from .follower import (FollowerResult, FollowerState, direct_link_beamformer, marginal_demand,
                       matched_filter, optimize_beamformer, shrinkage_inputs, solve_follower)
from .leader import NoReflectionDemand, leader_utility, optimal_price, random_price
from .scenario import (LN2, ChannelSet, ScenarioConfig, module_norms, user_rates,
                       utilities)

log = logging.getLogger(__name__)

STACKELBERG = "stackelberg"
RANDOM_PRICING = "random-pricing"
DIRECT_LINK = "direct-link"
SCHEMES = (STACKELBERG, RANDOM_PRICING, DIRECT_LINK)


@dataclass(frozen=True)
class EquilibriumReport:
    """Numerical check of the two equilibrium conditions at a returned outcome.

    ``leader_gap`` is the best grid revenue minus the revenue at the returned
    price (follower reaction recomputed at every grid price); ``follower_gap``
    is the best perturbed follower utility minus the returned one.  A check
    passes when its gap does not exceed its tolerance.
    """
    leader_ok: bool
    follower_ok: bool
    leader_gap: float
    follower_gap: float
    best_grid_price: float
    best_grid_V: float
    leader_tol: float
    follower_tol: float
    grid_points: int
    perturbations: int

    @property
    def ok(self) -> bool:
        return self.leader_ok and self.follower_ok


@dataclass(frozen=True)
class GameOutcome:
    scheme: str
    price: float
    W: np.ndarray = field(repr=False)
    phi: np.ndarray = field(repr=False)
    U: float
    V: float
    rates: np.ndarray
    triggered: tuple
    inner_iterations: int
    outer_iterations: int
    converged: bool
    admm_converged: bool = True
    history: tuple = field(default=(), repr=False, compare=False)
    equilibrium: Optional[EquilibriumReport] = field(default=None, compare=False)

    @property
    def sum_rate(self) -> float:
        return float(np.sum(self.rates))

    @property
    def num_triggered(self) -> int:
        return len(self.triggered)


def _outcome(scheme, ch, cfg, W, phi, price, inner, outer, converged, admm_ok=True,
             history=()) -> GameOutcome:
    # always recomputed from the final decision variables
    U, V, trig = utilities(ch, W, phi, price, cfg)
    rates = user_rates(ch, W, phi, cfg.noise_power)
    return GameOutcome(scheme, float(price), np.array(W), np.array(phi), U, V, rates, trig,
                       int(inner), int(outer), bool(converged), bool(admm_ok), tuple(history))


def threshold_per_price(cfg: ScenarioConfig) -> float:
    return cfg.balance_alpha * LN2


def leader_price(result: FollowerResult, cfg: ScenarioConfig, elements_per_module: int) -> float:
    """Price update of the leader from the follower's current shrinkage inputs."""
    norms = shrinkage_inputs(result.state, elements_per_module).norms
    return optimal_price(norms, cfg.admm_penalty, threshold_per_price(cfg))


def run_direct_link(ch: ChannelSet, cfg: ScenarioConfig, scheme: str = DIRECT_LINK) -> GameOutcome:
    phi = np.zeros(ch.num_elements, dtype=complex)
    W0 = matched_filter(ch, phi, cfg.max_power)
    W, it = optimize_beamformer(ch, phi, W0, cfg)
    return _outcome(scheme, ch, cfg, W, phi, 0.0, it, 0, True)


def _direct_W(ch, cfg, direct_W):
    return direct_link_beamformer(ch, cfg) if direct_W is None else direct_W


@dataclass
class _Iterate:
    price: float
    result: FollowerResult
    V: float


def run_stackelberg(ch: ChannelSet, cfg: ScenarioConfig,
                    init: Optional[FollowerState] = None,
                    direct_W: Optional[np.ndarray] = None,
                    check: bool = False, grid_points: int = 1000,
                    perturbations: int = 100) -> GameOutcome:
    """Alternate follower best responses and leader price updates.

    Stops when the IRS utility changes by less than ``tol_outer`` (relative to
    ``max(1, |V|)``) between outer iterations, when the posted prices start to
    repeat, or after ``max_outer`` iterations.  A converged run returns its final
    iterate; otherwise the iterate with the largest realized IRS utility is
    returned and ``converged`` is False.

    With ``check`` the outcome carries an :class:`EquilibriumReport` (costly:
    one follower solve per grid price).
    """
    out = _stackelberg(ch, cfg, init, direct_W)
    if check:
        report = check_equilibrium(ch, cfg, out, grid_points, perturbations, direct_W=direct_W)
        out = replace(out, equilibrium=report)
    return out


def _stackelberg(ch, cfg, init, direct_W) -> GameOutcome:
    if ch.num_elements == 0:
        return run_direct_link(ch, cfg, scheme=STACKELBERG)
    n = ch.elements_per_module
    direct_W = _direct_W(ch, cfg, direct_W)
    price = cfg.initial_price
    state = init
    iterates: List[_Iterate] = []
    inner = 0
    converged = False
    for tau in range(1, cfg.max_outer + 1):
        res = solve_follower(ch, price, cfg, init=state, direct_W=direct_W)
        # the IRS-free fixed point is a poor start: phi grows slowly out of zero
        # and the inner stop rule fires early, so restart cold after it
        warm = cfg.warm_start and not res.used_direct_link and np.any(res.reflection)
        state = res.state if warm else None
        inner += res.iterations
        _, V, _ = utilities(ch, res.W, res.reflection, price, cfg)
        iterates.append(_Iterate(price, res, V))
        try:
            new_price = leader_price(res, cfg, n)
        except NoReflectionDemand:
            log.info("no reflection demand at outer iteration %d; falling back to direct link", tau)
            out = run_direct_link(ch, cfg, scheme=STACKELBERG)
            return replace(out, outer_iterations=tau)
        if tau > 1 and V > 0.0:
            # a plateau at V = 0 (everything priced out) is not an equilibrium
            prev = iterates[-2].V
            if abs(V - prev) / max(1.0, abs(prev)) < cfg.tol_outer:
                converged = True
                break
        if _revisits(new_price, iterates):
            break
        price = new_price

    outer = len(iterates)
    best = iterates[-1] if converged else max(iterates, key=lambda it: it.V)
    if cfg.leader_search:
        searched = search_price(ch, cfg, direct_W, best)
        inner += sum(it.result.iterations for it in searched)
        iterates.extend(searched)
        best = max([best] + searched, key=lambda it: it.V)
    res = best.result
    history = tuple((it.price, it.V) for it in iterates)
    return _outcome(STACKELBERG, ch, cfg, res.W, res.reflection, best.price, inner,
                    outer, converged, res.admm_converged, history)


def _price_range(ch, cfg, direct_W, price, V) -> float:
    # twice the price that switches every module off at the IRS-free point,
    # stretched to cover a price that actually sold reflection
    demand = marginal_demand(ch, cfg, direct_W)
    top = float(demand.max()) / threshold_per_price(cfg) if demand.size else 0.0
    return 2.0 * max(top, price if V > 0 else 0.0)


def _realized(ch, cfg, price, direct_W) -> _Iterate:
    res = solve_follower(ch, price, cfg, direct_W=direct_W)
    return _Iterate(float(price), res, utilities(ch, res.W, res.reflection, price, cfg)[1])


def search_price(ch: ChannelSet, cfg: ScenarioConfig, direct_W: np.ndarray,
                 incumbent: _Iterate) -> List[_Iterate]:
    """Revenue search over the follower's actual (cold-start) reaction.

    Scores ``cfg.leader_search_points`` evenly spaced prices on ``(0, r_hi]``
    (the range of :func:`check_equilibrium`), then refines around the best
    one with a bounded scalar search.  Returns every evaluated iterate.
    """
    r_hi = _price_range(ch, cfg, direct_W, incumbent.price, incumbent.V)
    n = cfg.leader_search_points
    grid = np.linspace(r_hi / n, r_hi, n)
    evaluated = {float(r): _realized(ch, cfg, r, direct_W) for r in grid}
    i = int(np.argmax([evaluated[float(r)].V for r in grid]))
    if evaluated[float(grid[i])].V > 0.0:
        lo = grid[i - 1] if i > 0 else 0.0
        hi = grid[i + 1] if i + 1 < n else r_hi

        def neg_revenue(r):
            r = float(r)
            if r not in evaluated:
                evaluated[r] = _realized(ch, cfg, r, direct_W)
            return -evaluated[r].V

        minimize_scalar(neg_revenue, bounds=(lo, hi), method="bounded",
                        options={"xatol": 1e-3 * (hi - lo)})
    return list(evaluated.values())


def _revisits(price: float, iterates: List[_Iterate], rel: float = 1e-3) -> bool:
    # a price already posted (other than the current one) means the loop is cycling
    return any(abs(price - it.price) <= rel * it.price for it in iterates[:-1])


def default_random_price_max(ch: ChannelSet, cfg: ScenarioConfig,
                             direct_W: Optional[np.ndarray] = None) -> float:
    """Twice the price that would keep the most valuable module switched off.

    Uses the shrinkage-input norms of the IRS-free operating point (the module
    demands) converted to price units.
    """
    demand = marginal_demand(ch, cfg, direct_W)
    return 2.0 * float(demand.max()) / threshold_per_price(cfg)


def run_random_pricing(ch: ChannelSet, cfg: ScenarioConfig, rng: np.random.Generator,
                       r_max: Optional[float] = None,
                       direct_W: Optional[np.ndarray] = None) -> GameOutcome:
    if ch.num_elements == 0:
        return run_direct_link(ch, cfg, scheme=RANDOM_PRICING)
    direct_W = _direct_W(ch, cfg, direct_W)
    if r_max is None:
        r_max = cfg.random_price_max or default_random_price_max(ch, cfg, direct_W)
    price = random_price(rng, r_max)
    res = solve_follower(ch, price, cfg, direct_W=direct_W)
    return _outcome(RANDOM_PRICING, ch, cfg, res.W, res.reflection, price, res.iterations, 1,
                    res.converged, res.admm_converged)


def _unit_direction(rng: np.random.Generator, shape) -> np.ndarray:
    z = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    return z / np.linalg.norm(z)


def check_equilibrium(ch: ChannelSet, cfg: ScenarioConfig, outcome: GameOutcome,
                      grid_points: int = 1000, perturbations: int = 100,
                      rel_step: float = 1e-2, seed: int = 0,
                      direct_W: Optional[np.ndarray] = None) -> EquilibriumReport:
    """Leader grid test and follower perturbation test at ``outcome``.

    Leader side: the follower's best response is recomputed (cold start) at
    ``grid_points`` prices evenly spaced on ``(0, r_hi]``, where ``r_hi`` is
    twice the price that switches every module off at the IRS-free point (or
    twice the returned price, if larger and it sold reflection).  Follower side: ``perturbations`` random
    feasible moves of ``(W, phi)`` of relative size ``rel_step``.  Tolerances
    are ``tol_outer`` and ``tol_inner`` relative to ``max(1, |V|)`` and
    ``max(1, |U|)``.
    """
    price = outcome.price
    leader_tol = cfg.tol_outer * max(1.0, abs(outcome.V))
    follower_tol = cfg.tol_inner * max(1.0, abs(outcome.U))
    best_r, best_V = price, outcome.V
    if ch.num_elements > 0:
        direct_W = _direct_W(ch, cfg, direct_W)
        r_hi = _price_range(ch, cfg, direct_W, price, outcome.V)
        if r_hi > 0:
            for r in np.linspace(r_hi / grid_points, r_hi, grid_points):
                res = solve_follower(ch, r, cfg, direct_W=direct_W)
                V = utilities(ch, res.W, res.reflection, r, cfg)[1]
                if V > best_V:
                    best_r, best_V = float(r), V

    rng = np.random.default_rng(seed)
    W0, phi0 = outcome.W, outcome.phi
    w_step = rel_step * max(np.linalg.norm(W0), 1e-300)
    phi_step = rel_step * max(np.linalg.norm(phi0), 1.0)
    best_U = outcome.U
    for _ in range(perturbations):
        W = W0 + w_step * _unit_direction(rng, W0.shape)
        power = np.sum(np.abs(W) ** 2)
        if power > cfg.max_power:
            W *= np.sqrt(cfg.max_power / power)
        phi = phi0
        if phi0.size:
            phi = phi0 + phi_step * _unit_direction(rng, phi0.shape)
            phi = phi / np.maximum(1.0, np.abs(phi))
        best_U = max(best_U, utilities(ch, W, phi, price, cfg)[0])

    leader_gap = best_V - outcome.V
    follower_gap = best_U - outcome.U
    return EquilibriumReport(leader_gap <= leader_tol, follower_gap <= follower_tol,
                             float(leader_gap), float(follower_gap), best_r, float(best_V),
                             leader_tol, follower_tol, grid_points, perturbations)
