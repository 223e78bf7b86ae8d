"""Downlink/uplink signal models, per-subcarrier log-det rate and effective SE.

Plain numpy versions serve evaluation and oracles; the `*_tape` versions build
the same quantities on a ParamTape for differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Complex
from .channel import ChannelSet

LN2 = np.log(2.0)


@dataclass(frozen=True)
class LinkBudget:
    P_t: float
    sigma_sq: float

    def __post_init__(self):
        if self.P_t <= 0 or self.sigma_sq <= 0:
            raise ValueError("powers must be positive")

    @property
    def snr_t_db(self) -> float:
        return float(10 * np.log10(self.P_t / self.sigma_sq))

    @classmethod
    def from_snr_db(cls, snr_t_db: float, P_t: float = 1.0) -> "LinkBudget":
        return cls(P_t, P_t / 10 ** (snr_t_db / 10))


def db2lin(x):
    return 10 ** (np.asarray(x, float) / 10)


# downlink -----------------------------------------------------------------------------

def effective_channel(H_b, ris_matrix, G_b, D_b) -> np.ndarray:
    """Z_b = H_b Theta_b G_b + D_b. `ris_matrix` may be an (N, N) matrix or its diagonal."""
    ris_matrix = np.asarray(ris_matrix)
    if ris_matrix.ndim == H_b.ndim - 1:  # diagonal given
        return (H_b * ris_matrix[..., None, :]) @ G_b + D_b
    return H_b @ ris_matrix @ G_b + D_b


def _log2det_hpd(gram: np.ndarray) -> np.ndarray:
    L = np.linalg.cholesky(gram)
    return 2 * np.sum(np.log(np.real(np.diagonal(L, axis1=-2, axis2=-1))), axis=-1) / LN2


def subcarrier_rate(Z_b, A_b, P_t: float, sigma_sq: float, N_s: int) -> np.ndarray:
    """log2 det(I + P_t/(N_s sigma^2) Z A A^H Z^H); batched over leading axes."""
    if sigma_sq <= 0:
        raise ValueError("sigma_sq must be positive")
    Z_b, A_b = np.asarray(Z_b), np.asarray(A_b)
    if not (np.all(np.isfinite(Z_b)) and np.all(np.isfinite(A_b))):
        raise ValueError("non-finite channel or precoder")
    ZA = Z_b @ A_b
    U = ZA.shape[-2]
    gram = np.eye(U) + (P_t / (N_s * sigma_sq)) * (ZA @ np.conj(np.swapaxes(ZA, -1, -2)))
    gram = 0.5 * (gram + np.conj(np.swapaxes(gram, -1, -2)))
    return np.maximum(_log2det_hpd(gram), 0.0)


def se_prefactor(Q: int, Q_tr: int, L_CP: int, B: int) -> float:
    if Q_tr > Q:
        raise ValueError("Q_tr cannot exceed Q")
    return (Q - Q_tr) / (Q * (L_CP + B))


def effective_se(rates, Q: int, Q_tr: int, L_CP: int, B: int):
    """(Q - Q_tr) / (Q (L_CP + B)) * sum_b R_b, summing over the last axis."""
    return se_prefactor(Q, Q_tr, L_CP, B) * np.sum(rates, axis=-1)


def downlink_receive(Z_b, A_b, s_b, noise, P_t: float) -> np.ndarray:
    return np.sqrt(P_t) * (Z_b @ A_b @ s_b) + noise


def realized_rates(channels: ChannelSet, A: np.ndarray, ris_coeffs: np.ndarray,
                   P_t: float, sigma_sq: float, N_s: int) -> np.ndarray:
    """Per-subcarrier rates (B,) from precoders A (B, M, N_s) and RIS diagonals (B, N)."""
    Z = effective_channel(channels.H, ris_coeffs, channels.G, channels.D)
    return subcarrier_rate(Z, A, P_t, sigma_sq, N_s)


# uplink ---------------------------------------------------------------------------------

def uplink_combined(channels: ChannelSet, ris_schedule, combiners) -> np.ndarray:
    """W_{q,b} Z_{q,b}^T for all slots, shape (Q_tr, B, M_RF, U).

    ris_schedule: (Q_tr, B, N) reflection coefficients; combiners: (Q_tr, B, M_RF, M).
    """
    ris_schedule = np.asarray(ris_schedule)
    Z = effective_channel(channels.H[None], ris_schedule, channels.G[None], channels.D[None])
    return np.asarray(combiners) @ np.swapaxes(Z, -1, -2)


def uplink_noise_sigma(channels: ChannelSet, combiners, ris_schedule, target_snr_db: float) -> float:
    """Noise power making mean_{q,b} ||W Z^T||_F^2 / sigma^2 equal the target SNR."""
    C = uplink_combined(channels, ris_schedule, combiners)
    energy = float(np.mean(np.sum(np.abs(C) ** 2, axis=(-2, -1))))
    if energy <= 0:
        raise ValueError("zero channel energy; uplink SNR undefined")
    return energy / db2lin(target_snr_db)


def uplink_pilot_observe(channels: ChannelSet, ris_schedule, combiners, pilots, sigma_sq: float,
                         rng: np.random.Generator | None = None, noise=None) -> np.ndarray:
    """Received pilots Y (B, M_RF, Q_tr) under TDD reciprocity (uplink channel Z^T).

    pilots: (Q_tr, B, U). Noise is CN(0, sigma_sq); pass `noise` (standard CN, shape
    (Q_tr, B, M_RF)) to freeze it.
    """
    C = uplink_combined(channels, ris_schedule, combiners)
    y = np.einsum("qbru,qbu->qbr", C, np.asarray(pilots))
    if noise is None:
        noise = standard_cn(rng, y.shape) if rng is not None else np.zeros(y.shape)
    y = y + np.sqrt(sigma_sq) * noise
    return np.transpose(y, (1, 2, 0))


def standard_cn(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def complex_to_real_stack(obs: np.ndarray, axis: int = -2) -> np.ndarray:
    """Real parts then imaginary parts, concatenated along the antenna axis."""
    obs = np.asarray(obs)
    return np.concatenate([obs.real, obs.imag], axis=axis)


def real_to_complex_stack(stacked: np.ndarray, axis: int = -2) -> np.ndarray:
    re, im = np.split(np.asarray(stacked), 2, axis=axis)
    return re + 1j * im


# tape versions --------------------------------------------------------------------------

def effective_channel_tape(H, coeffs: Complex, G, D) -> Complex:
    """Batched Z = H diag(theta) G + D; H (..., B, U, N), coeffs (..., B|1, N)."""
    HT = coeffs.reshape(coeffs.shape[:-1] + (1, coeffs.shape[-1])) * H
    return HT @ G + D


def rates_tape(Z: Complex, A: Complex, P_t: float, sigma_sq, N_s: int):
    """Per-subcarrier log2-det rates, Tensor of shape (..., B)."""
    ZA = Z @ A
    U = ZA.shape[-2]
    c = P_t / (N_s * np.asarray(sigma_sq, float))
    if np.ndim(c):
        c = c.reshape(c.shape + (1, 1, 1))
    gram = (ZA @ ZA.H) * c + np.eye(U)
    return ad.logdet_hpd(gram) / LN2


def uplink_tape(H, G, D, coeffs: Complex, combiners: Complex, pilots=None):
    """W Z^T per slot for scenario-stacked channels: (S, Q_tr, B, M_RF, U)."""
    sw = lambda x: np.swapaxes(x, -1, -2)[:, None]
    WG = combiners @ sw(G)                                                  # (S, Q, B, M_RF, N)
    WGT = WG * coeffs.reshape(coeffs.shape[:-1] + (1, coeffs.shape[-1]))
    C = WGT @ sw(H) + combiners @ sw(D)
    if pilots is None:
        return C, C.sum(axis=-1)
    return C, (C * pilots[..., None, :]).sum(axis=-1)
