"""Near/far-field array responses and wideband D[b], G[b], H[b] synthesis."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import read_container, write_container
from .scenario import (C_LIGHT, ConfigError, Geometry, ScattererMap, SystemConfig, centered_index,
                       far_ula_angle, ula_angle, upa_angles)


# array responses --------------------------------------------------------------

def ula_near_response(f, phi, r, count: int, spacing: float) -> np.ndarray:
    """Spherical-wave ULA response with centered element indices.

    `f`, `phi`, `r` broadcast against each other; the element axis is appended last.
    """
    f, phi, r = (np.asarray(x, float)[..., None] for x in (f, phi, r))
    m = centered_index(count)
    k = 2 * np.pi * f / C_LIGHT
    path = -m * spacing * np.cos(phi) + (m * spacing) ** 2 * np.sin(phi) ** 2 / (2 * r)
    return np.exp(-1j * k * path)


def ula_far_response(f, theta, count: int, spacing: float) -> np.ndarray:
    """Planar-wave ULA response, 0-based indices (first entry is exactly 1)."""
    f, theta = (np.asarray(x, float)[..., None] for x in (f, theta))
    u = np.arange(count)
    return np.exp(-1j * 2 * np.pi * f / C_LIGHT * u * spacing * np.sin(theta))


def upa_factors(f, phi, varphi, r, N1: int, N2: int, spacing: float):
    f, phi, varphi, r = (np.asarray(x, float)[..., None] for x in (f, phi, varphi, r))
    k = 2 * np.pi * f / C_LIGHT
    n1 = centered_index(N1)
    n2 = centered_index(N2)
    zeta = np.cos(phi) * np.sin(varphi)
    bx = np.exp(-1j * k * (-n1 * spacing * zeta + (n1 * spacing) ** 2 * (1 - zeta ** 2) / (2 * r)))
    bz = np.exp(-1j * k * (-n2 * spacing * np.cos(varphi)
                           + (n2 * spacing) ** 2 * np.sin(varphi) ** 2 / (2 * r)))
    return bx, bz


def upa_near_response(f, phi, varphi, r, N1: int, N2: int, spacing: float) -> np.ndarray:
    """b_x (x) b_z for the xz-plane UPA; element n = n1*N2 + n2."""
    bx, bz = upa_factors(f, phi, varphi, r, N1, N2, spacing)
    return (bx[..., :, None] * bz[..., None, :]).reshape(bx.shape[:-1] + (N1 * N2,))


def los_coupling_term(f, r, varphi, zeta, N1: int, N2: int, M: int, spacing: float) -> np.ndarray:
    """Coupled near-field LOS factor, shape (..., N1*N2, M).

    Row n = n1*N2 + n2 carries Gx[n2] * Gz[n1, m] (same ordering as the UPA response).
    """
    f, r, varphi, zeta = (np.asarray(x, float)[..., None, None] for x in (f, r, varphi, zeta))
    k = 2 * np.pi * f / (C_LIGHT * r)
    n1 = centered_index(N1)
    n2 = centered_index(N2)
    m = centered_index(M)
    gx = np.exp(-1j * k * n2[:, None] * spacing ** 2 * (1 - zeta ** 2))            # (.., N2, 1)
    gz = np.exp(-1j * k * n1[:, None] * m[None, :] * spacing ** 2 * np.sin(varphi) ** 2)  # (.., N1, M)
    out = gz[..., :, None, :] * gx[..., None, :, :]                                 # (.., N1, N2, M)
    return out.reshape(out.shape[:-3] + (N1 * N2, M))


def path_loss(f: float, total_dist, bounces: int = 0, reflection_loss_db: float = 0.0):
    """Free-space loss times a fixed per-bounce reflection loss (linear power gain)."""
    total_dist = np.asarray(total_dist, float)
    if np.any(total_dist <= 0):
        raise ValueError("path length must be positive")
    return (C_LIGHT / (4 * np.pi * f * total_dist)) ** 2 * 10 ** (-bounces * reflection_loss_db / 10)


def db_to_lin(x):
    return 10 ** (np.asarray(x, float) / 10)


# channel set ------------------------------------------------------------------

@dataclass(frozen=True)
class ChannelSet:
    D: np.ndarray  # (B, U, M)
    G: np.ndarray  # (B, N, M)
    H: np.ndarray  # (B, U, N)
    meta: dict = field(default_factory=dict)

    @property
    def B(self) -> int:
        return self.D.shape[0]

    def save(self, path: str | Path) -> None:
        write_container(path, {"kind": "channelset", **self.meta},
                        {"D": self.D, "G": self.G, "H": self.H})

    @classmethod
    def load(cls, path: str | Path) -> "ChannelSet":
        header, arrays = read_container(path)
        if header.pop("kind", None) != "channelset":
            raise ValueError(f"{path}: not a channel set")
        return cls(arrays["D"], arrays["G"], arrays["H"], header)

    def export_csv(self, directory: str | Path) -> None:
        """Debug dump: one CSV per link with columns b, row, col, re, im (b is 1-based)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in ("D", "G", "H"):
            mat = getattr(self, name)
            with open(directory / f"{name}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["b", "row", "col", "re", "im"])
                for (b, i, j), z in np.ndenumerate(mat):
                    w.writerow([b + 1, i, j, repr(float(z.real)), repr(float(z.imag))])


def stack_channels(channels: list[ChannelSet]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (np.stack([c.D for c in channels]), np.stack([c.G for c in channels]),
            np.stack([c.H for c in channels]))


def delay_phase(config: SystemConfig, tau) -> np.ndarray:
    """exp(-j 2 pi b W tau / B) for b = 1..B; shape (B,) + tau.shape."""
    b = np.arange(1, config.B + 1).reshape((-1,) + (1,) * np.ndim(tau))
    return np.exp(-2j * np.pi * b * config.W * np.asarray(tau) / config.B)


def synthesize_channels(geometry: Geometry, scatterers: ScattererMap, config: SystemConfig,
                        los: bool = True, nlos: bool = True, normalize: bool = True,
                        meta: dict | None = None) -> ChannelSet:
    """Per-subcarrier frequency-domain channels for one scenario realization."""
    cfg = config
    d = cfg.d
    fb = cfg.subcarrier_freqs()
    f_ = fb[:, None, None]  # broadcast over (C_s, S_c)
    gB, gU, gR = db_to_lin(cfg.G_B), db_to_lin(cfg.G_U), db_to_lin(cfg.G_R)
    gamma = np.sqrt(1.0 / (cfg.C_s * cfg.S_c))
    B, M, U, N = cfg.B, cfg.M, cfg.U, cfg.N

    D = np.zeros((B, U, M), complex)
    G = np.zeros((B, N, M), complex)
    H = np.zeros((B, U, N), complex)

    if nlos:
        # BS -> scatterer -> UE
        p = scatterers.bu
        amp = p.gain * np.sqrt(gB * gU * path_loss(cfg.f_c, p.tx_dist + p.rx_dist, 1, cfg.reflection_loss_db))
        a = ula_near_response(f_, ula_angle(p.tx_dir), p.tx_dist, M, d)       # (B, C, S, M)
        u = ula_far_response(f_, far_ula_angle(p.rx_dir), U, d)               # (B, C, S, U)
        w = amp * delay_phase(cfg, p.delay)                                    # (B, C, S)
        D += gamma * np.einsum("bcs,bcsu,bcsm->bum", w, u, a)

        # BS -> scatterer -> RIS
        p = scatterers.br
        amp = p.gain * np.sqrt(gB * gR * path_loss(cfg.f_c, p.tx_dist + p.rx_dist, 1, cfg.reflection_loss_db))
        a = ula_near_response(f_, ula_angle(p.tx_dir), p.tx_dist, M, d)
        az, el = upa_angles(p.rx_dir)
        bvec = upa_near_response(f_, az, el, p.rx_dist, cfg.N1, cfg.N2, d)    # (B, C, S, N)
        w = amp * delay_phase(cfg, p.delay)
        G += gamma * np.einsum("bcs,bcsn,bcsm->bnm", w, bvec, a)

        # RIS -> scatterer -> UE
        p = scatterers.ru
        amp = p.gain * np.sqrt(gR * gU * path_loss(cfg.f_c, p.tx_dist + p.rx_dist, 1, cfg.reflection_loss_db))
        az, el = upa_angles(p.tx_dir)
        bvec = upa_near_response(f_, az, el, p.tx_dist, cfg.N1, cfg.N2, d)
        u = ula_far_response(f_, far_ula_angle(p.rx_dir), U, d)
        w = amp * delay_phase(cfg, p.delay)
        H += gamma * np.einsum("bcs,bcsu,bcsn->bun", w, u, bvec)

    if los:
        G += los_bs_ris(geometry, cfg, fb)
        H += los_ris_ue(geometry, cfg, fb)

    meta = dict(meta or {})
    meta.update(config_hash=cfg.hash(), dims=[B, U, M, N])
    if normalize and cfg.channel_normalization == "cascade":
        D, G, H, scales = _normalize_links(D, G, H)
        meta["scales"] = scales
    for name, mat in (("D", D), ("G", G), ("H", H)):
        if not np.all(np.isfinite(mat)):
            raise ConfigError(f"non-finite entries in {name}")
    return ChannelSet(D, G, H, meta)


def _rms(x):
    return float(np.sqrt(np.mean(np.abs(x) ** 2)))


def _normalize_links(D, G, H):
    """Scale each link to a fixed per-entry power.

    G and D get unit mean entry power; H gets 1/N so that a random-phase RIS
    produces a cascaded channel with unit mean entry power, matching D.
    """
    N = G.shape[1]
    s = {}
    for name, x, target in (("D", D, 1.0), ("G", G, 1.0), ("H", H, 1.0 / np.sqrt(N))):
        r = _rms(x)
        s[name] = target / r if r > 0 else 1.0
    return D * s["D"], G * s["G"], H * s["H"], s


def _direction(frm, to):
    v = np.asarray(to, float) - np.asarray(frm, float)
    r = float(np.linalg.norm(v))
    if r == 0:
        raise ConfigError("degenerate geometry: coincident endpoints")
    return v / r, r


def los_bs_ris(geometry: Geometry, cfg: SystemConfig, fb: np.ndarray) -> np.ndarray:
    d = cfg.d
    e_bs, r = _direction(geometry.bs_center, geometry.ris_center)   # BS -> RIS
    e_ris = -e_bs                                                   # RIS -> BS (arrival)
    az, el = upa_angles(e_ris)
    zeta = np.cos(az) * np.sin(el)
    amp = np.sqrt(db_to_lin(cfg.G_B) * db_to_lin(cfg.G_R) * path_loss(cfg.f_c, r))
    a = ula_near_response(fb, ula_angle(e_bs), r, cfg.M, d)                  # (B, M)
    bvec = upa_near_response(fb, az, el, r, cfg.N1, cfg.N2, d)               # (B, N)
    coup = los_coupling_term(fb, r, el, zeta, cfg.N1, cfg.N2, cfg.M, d)      # (B, N, M)
    ph = delay_phase(cfg, r / C_LIGHT)                                       # (B,)
    return amp * bvec[:, :, None] * a[:, None, :] * coup * ph[:, None, None]


def los_ris_ue(geometry: Geometry, cfg: SystemConfig, fb: np.ndarray) -> np.ndarray:
    d = cfg.d
    e_ris, r = _direction(geometry.ris_center, geometry.ue_center)   # RIS -> UE (departure)
    e_ue = -e_ris                                                    # UE -> RIS
    az, el = upa_angles(e_ris)
    zeta = np.cos(az) * np.sin(el)
    amp = np.sqrt(db_to_lin(cfg.G_R) * db_to_lin(cfg.G_U) * path_loss(cfg.f_c, r))
    u = ula_near_response(fb, ula_angle(e_ue), r, cfg.U, d)                  # (B, U)
    bvec = upa_near_response(fb, az, el, r, cfg.N1, cfg.N2, d)               # (B, N)
    coup = los_coupling_term(fb, r, el, zeta, cfg.N1, cfg.N2, cfg.U, d)      # (B, N, U)
    ph = delay_phase(cfg, r / C_LIGHT)
    return amp * u[:, :, None] * bvec[:, None, :] * np.swapaxes(coup, -1, -2) * ph[:, None, None]


def scenario_channels(config: SystemConfig, index: int, seed: int | None = None,
                      **kw) -> ChannelSet:
    """Sample scenario `index` under `seed` and synthesize its channels."""
    from .scenario import sample_scenario

    sc = sample_scenario(config, index, seed)
    return synthesize_channels(sc.geometry, sc.scatterers, config,
                               meta={"scenario": index, "seed": sc.seed,
                                     "ue_center": sc.geometry.ue_center.tolist()}, **kw)
