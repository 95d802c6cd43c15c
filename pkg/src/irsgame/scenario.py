"""System dimensions, geometry, channel generation and the composite-channel algebra.

Conventions used throughout the package:

* ``H`` has shape ``(S*N, M)``; row block ``s`` is the BS -> module ``s`` channel.
* ``G`` has shape ``(K, S*N)``; row ``k`` is the stacked IRS -> user ``k`` channel.
* ``Hd`` has shape ``(K, M)``; row ``k`` is the direct BS -> user ``k`` channel.
* ``phi`` is the stacked reflection vector of length ``S*N``. It holds the
  *conjugates* of the diagonal of the reflection matrix, so
  ``Phi = diag(phi.conj())`` and ``g_k^H Phi H w = phi^H (conj(g_k) * (H w))``.
* ``W`` has shape ``(M, K)``; column ``k`` is the beamformer of user ``k``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

LN2 = np.log(2.0)

# relative to max_s ||phi_s||
TRIGGER_TOL = 1e-6


def dbm_to_watt(p_dbm: float) -> float:
    return 10.0 ** ((p_dbm - 30.0) / 10.0)


def watt_to_dbm(p_watt: float) -> float:
    return 10.0 * np.log10(p_watt) + 30.0


def path_gain(distance, exponent: float, reference_loss_db: float = 30.0):
    """Log-distance path gain (linear power) at ``distance`` metres.

    ``gain_dB = -(reference_loss_db + 10 * exponent * log10(d / 1 m))``.
    """
    d = np.asarray(distance, dtype=float)
    loss_db = reference_loss_db + 10.0 * exponent * np.log10(d)
    return 10.0 ** (-loss_db / 10.0)


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to draw channels and run the game on them.

    Powers are in watts, positions and radii in metres.  The solver settings
    (ADMM penalty, tolerances, iteration caps, initial price) live here too so
    a single object reproduces a run.
    """

    num_antennas: int = 4
    num_users: int = 4
    num_modules: int = 6
    elements_per_module: int = 8
    balance_alpha: float = 0.1
    # ~110 dB direct-path loss at 200 m: a few dB of direct-link SNR at 0 dBm,
    # so the reflected paths matter
    noise_power: float = dbm_to_watt(-110.0)
    max_power: float = dbm_to_watt(0.0)
    bs_position: Tuple[float, float] = (0.0, 0.0)
    irs_position: Tuple[float, float] = (200.0, 50.0)
    cell_center: Tuple[float, float] = (200.0, 0.0)
    cell_radius: float = 10.0
    # (bs_user, bs_irs, irs_user)
    path_loss_exponents: Tuple[float, float, float] = (3.5, 2.2, 2.2)
    reference_loss_db: float = 30.0
    rng_seed: int = 2020

    admm_penalty: float = 1.0
    tol_inner: float = 1e-4
    max_inner: int = 500
    tol_admm: float = 1e-3
    tol_outer: float = 1e-3
    max_outer: int = 50
    initial_price: float = 1.0
    warm_start: bool = True
    # refine the outer loop's price against the follower's actual reaction
    leader_search: bool = False
    leader_search_points: int = 16
    random_price_max: float | None = None

    def __post_init__(self):
        for name in ("num_antennas", "num_users", "elements_per_module"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.num_modules < 0:
            raise ValueError("num_modules must be >= 0")
        for name in ("noise_power", "max_power", "balance_alpha", "cell_radius", "admm_penalty"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if len(self.path_loss_exponents) != 3 or min(self.path_loss_exponents) <= 0:
            raise ValueError("path_loss_exponents must be three positive numbers")
        if self.initial_price <= 0:
            raise ValueError("initial_price must be > 0")
        if self.random_price_max is not None and self.random_price_max <= 0:
            raise ValueError("random_price_max must be > 0")
        if self.leader_search_points < 2:
            raise ValueError("leader_search_points must be >= 2")
        if self.max_inner < 1 or self.max_outer < 1:
            raise ValueError("iteration caps must be >= 1")
        # normalise sequences coming from config files
        object.__setattr__(self, "bs_position", tuple(float(v) for v in self.bs_position))
        object.__setattr__(self, "irs_position", tuple(float(v) for v in self.irs_position))
        object.__setattr__(self, "cell_center", tuple(float(v) for v in self.cell_center))
        object.__setattr__(self, "path_loss_exponents",
                           tuple(float(v) for v in self.path_loss_exponents))

    @property
    def num_elements(self) -> int:
        return self.num_modules * self.elements_per_module

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class ChannelSet:
    """One channel realization.  Arrays are treated as read-only."""

    H: np.ndarray
    G: np.ndarray
    Hd: np.ndarray
    elements_per_module: int
    user_positions: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        sn, m = self.H.shape
        k = self.Hd.shape[0]
        if self.Hd.shape != (k, m) or self.G.shape != (k, sn):
            raise ValueError(
                f"inconsistent channel shapes H{self.H.shape} G{self.G.shape} Hd{self.Hd.shape}")
        if sn % self.elements_per_module:
            raise ValueError("rows of H must be a multiple of elements_per_module")
        for arr in (self.H, self.G, self.Hd):
            arr.setflags(write=False)

    @property
    def num_antennas(self) -> int:
        return self.H.shape[1]

    @property
    def num_users(self) -> int:
        return self.Hd.shape[0]

    @property
    def num_elements(self) -> int:
        return self.H.shape[0]

    @property
    def num_modules(self) -> int:
        return self.num_elements // self.elements_per_module

    def module_block(self, s: int) -> Tuple[np.ndarray, np.ndarray]:
        """Return ``(H_{0,s}, [g_{s,k}]_k)`` for module ``s`` (0-based)."""
        n = self.elements_per_module
        rows = slice(s * n, (s + 1) * n)
        return self.H[rows], self.G[:, rows]

    def scaled(self, t: float) -> "ChannelSet":
        # the cascaded link picks up t from each hop, so split it evenly
        root = np.sqrt(t)
        return ChannelSet(self.H * root, self.G * root, self.Hd * t,
                          self.elements_per_module, self.user_positions)


def channel_rng(seed: int, draw_index: int = 0) -> np.random.Generator:
    """Independent random stream for realization ``draw_index`` of ``seed``."""
    return np.random.default_rng([int(seed) & (2**64 - 1), int(draw_index)])


def _cn(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def place_users(cfg: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    """Uniform positions over the cell disk (sqrt-radius polar sampling)."""
    radius = cfg.cell_radius * np.sqrt(rng.random(cfg.num_users))
    angle = 2.0 * np.pi * rng.random(cfg.num_users)
    center = np.asarray(cfg.cell_center)
    return center + np.column_stack([radius * np.cos(angle), radius * np.sin(angle)])


def generate_channels(cfg: ScenarioConfig, rng: np.random.Generator) -> ChannelSet:
    """Draw one quasi-static realization: Rayleigh fading times log-distance path gain.

    The draw order is fixed (user positions, H, G, Hd) so a given stream
    always yields the same realization.
    """
    m, k, sn = cfg.num_antennas, cfg.num_users, cfg.num_elements
    n_bu, n_bi, n_iu = cfg.path_loss_exponents
    pos = place_users(cfg, rng)
    bs = np.asarray(cfg.bs_position)
    irs = np.asarray(cfg.irs_position)

    d_bi = max(float(np.linalg.norm(irs - bs)), 1.0)
    d_bu = np.maximum(np.linalg.norm(pos - bs, axis=1), 1.0)
    d_iu = np.maximum(np.linalg.norm(pos - irs, axis=1), 1.0)

    H = np.sqrt(path_gain(d_bi, n_bi, cfg.reference_loss_db)) * _cn(rng, (sn, m))
    G = np.sqrt(path_gain(d_iu, n_iu, cfg.reference_loss_db))[:, None] * _cn(rng, (k, sn))
    Hd = np.sqrt(path_gain(d_bu, n_bu, cfg.reference_loss_db))[:, None] * _cn(rng, (k, m))
    return ChannelSet(H, G, Hd, cfg.elements_per_module, pos)


def module_blocks(phi: np.ndarray, elements_per_module: int) -> np.ndarray:
    """View ``phi`` as an ``(S, N)`` array of module blocks."""
    return np.asarray(phi).reshape(-1, elements_per_module)


def module_norms(phi: np.ndarray, elements_per_module: int) -> np.ndarray:
    return np.linalg.norm(module_blocks(phi, elements_per_module), axis=1)


def reflection_matrix(phi: np.ndarray) -> np.ndarray:
    """The diagonal reflection matrix ``Phi`` whose diagonal is ``conj(phi)``."""
    return np.diag(np.conj(phi))


def mixed_norm(Phi: np.ndarray, elements_per_module: int) -> float:
    """l_{1,2} norm of a block-diagonal ``Phi``: sum of Frobenius norms of its diagonal blocks."""
    n = elements_per_module
    total = 0.0
    for s in range(Phi.shape[0] // n):
        total += np.linalg.norm(Phi[s * n:(s + 1) * n, s * n:(s + 1) * n])
    return float(total)


def triggered_modules(phi: np.ndarray, elements_per_module: int,
                      rel_tol: float = TRIGGER_TOL) -> Tuple[int, ...]:
    norms = module_norms(phi, elements_per_module)
    if norms.size == 0 or norms.max() == 0.0:
        return ()
    return tuple(int(s) for s in np.flatnonzero(norms > rel_tol * norms.max()))


def combined_channels(ch: ChannelSet, phi: np.ndarray) -> np.ndarray:
    """All combined channels as rows: ``h_k = h_{d,k} + H^H (phi * g_k)``."""
    phi = np.asarray(phi)
    if phi.shape != (ch.num_elements,):
        raise ValueError(f"phi must have length {ch.num_elements}, got shape {phi.shape}")
    if ch.num_elements == 0:
        return np.array(ch.Hd, dtype=complex)
    return ch.Hd + (ch.G * phi) @ ch.H.conj()


def combined_channel(ch: ChannelSet, phi: np.ndarray, k: int) -> np.ndarray:
    """Combined channel of user ``k``, defined by ``h_k^H = h_{d,k}^H + g_k^H Phi H``."""
    return combined_channels(ch, phi)[k]


def link_gains(ch: ChannelSet, W: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """``Z[k, j] = h_k^H w_j`` for all user/beam pairs."""
    W = np.asarray(W)
    if W.shape != (ch.num_antennas, ch.num_users):
        raise ValueError(f"W must be {ch.num_antennas}x{ch.num_users}, got {W.shape}")
    return combined_channels(ch, phi).conj() @ W


def sinr_from_gains(Z: np.ndarray, noise_power: float) -> np.ndarray:
    power = np.abs(Z) ** 2
    signal = np.diag(power)
    interference = power.sum(axis=1) - signal
    return signal / (interference + noise_power)


def sinr(ch: ChannelSet, W: np.ndarray, phi: np.ndarray, noise_power: float,
         k: int | None = None):
    """SINR of user ``k``, or of all users when ``k`` is None."""
    if noise_power <= 0:
        raise ValueError("noise_power must be > 0")
    gamma = sinr_from_gains(link_gains(ch, W, phi), noise_power)
    return gamma if k is None else float(gamma[k])


def user_rates(ch: ChannelSet, W, phi, noise_power: float) -> np.ndarray:
    return np.log2(1.0 + sinr(ch, W, phi, noise_power))


def utilities(ch: ChannelSet, W, phi, price: float, cfg: ScenarioConfig):
    """BS utility ``U``, IRS revenue ``V`` and the set of triggered modules.

    ``U = sum_k log2(1 + gamma_k) - price * alpha * sum_s ||phi_s||``,
    ``V = price * alpha * sum_s ||phi_s||``.
    """
    if price < 0:
        raise ValueError("price must be >= 0")
    rates = user_rates(ch, W, phi, cfg.noise_power)
    v = price * cfg.balance_alpha * float(module_norms(phi, ch.elements_per_module).sum())
    return float(rates.sum()) - v, v, triggered_modules(phi, ch.elements_per_module)
