"""System configuration, array geometry, scatterer/UE sampling and near-field boundaries."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

C_LIGHT = 299_792_458.0


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass(frozen=True)
class SystemConfig:
    # arrays
    M: int = 16
    U: int = 2
    N1: int = 8
    N2: int = 8
    M_RF: int = 2
    N_s: int = 2
    K: int = 4
    S1: int = 2
    S2: int = 2
    # OFDM / block
    B: int = 4
    W: float = 1e9
    f_c: float = 73e9
    t_max: float = 2.5e-10
    L_CP: int = 4
    Q: int = 2048
    Q_tr: int = 32
    # power, noise, gains
    P_t: float = 1.0
    sigma0_sq: float = 0.01
    G_B: float = 25.0
    G_U: float = 20.0
    G_R: float = 5.0
    rho: float | None = None  # per-subcarrier precoder power; None -> N_s
    channel_normalization: str = "cascade"  # "cascade" | "none"
    # geometry
    bs_center: tuple = (0.0, 0.0, 5.0)
    ris_center: tuple = (0.0, 20.0, 5.0)
    ue_center: tuple = (0.0, 20.0)
    ue_radius: float = 5.0
    ue_height: float = 1.0
    # scatterers
    C_s: int = 3
    S_c: int = 4
    scatterer_sigma: float = 1.0
    cluster_box_lo: tuple = (-10.0, 2.0, 0.0)
    cluster_box_hi: tuple = (10.0, 25.0, 8.0)
    clearance: float = 1.0
    reflection_loss_db: float = 6.0
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("M", "U", "N1", "N2", "M_RF", "N_s", "K", "S1", "S2", "B", "Q", "C_s", "S_c"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.M % (self.K * self.M_RF):
            raise ConfigError(f"K*M_RF={self.K * self.M_RF} must divide M={self.M}")
        if self.N1 % self.S1 or self.N2 % self.S2:
            raise ConfigError("TTD-RIS subarray grid must divide the RIS grid")
        if self.N_s > self.M_RF:
            raise ConfigError("N_s cannot exceed M_RF")
        if not 0 <= self.Q_tr <= self.Q:
            raise ConfigError("need 0 <= Q_tr <= Q")
        if self.Q_tr % 2:
            raise ConfigError("Q_tr must be even")
        if self.t_max <= 0 or self.W <= 0:
            raise ConfigError("t_max and W must be positive")
        if self.f_c <= self.W / 2:
            raise ConfigError("f_c must exceed W/2")
        if self.L_CP < 0 or self.P_t <= 0 or self.sigma0_sq <= 0:
            raise ConfigError("L_CP >= 0, P_t > 0 and sigma0_sq > 0 required")
        if self.channel_normalization not in ("cascade", "none"):
            raise ConfigError(f"unknown channel_normalization {self.channel_normalization!r}")
        if self.ue_radius < 0 or self.scatterer_sigma < 0:
            raise ConfigError("ue_radius and scatterer_sigma must be non-negative")

    # derived quantities
    @property
    def N(self) -> int:
        return self.N1 * self.N2

    @property
    def S(self) -> int:
        return self.S1 * self.S2

    @property
    def P(self) -> int:
        """Antennas behind each TTD (sub-connected: one TTD group per RF chain slot)."""
        return self.M // (self.K * self.M_RF)

    @property
    def d(self) -> float:
        return C_LIGHT / (2 * self.f_c)

    @property
    def wavelength(self) -> float:
        return C_LIGHT / self.f_c

    @property
    def power(self) -> float:
        return float(self.N_s if self.rho is None else self.rho)

    @property
    def snr_t_db(self) -> float:
        return 10 * np.log10(self.P_t / self.sigma0_sq)

    def subcarrier_freqs(self) -> np.ndarray:
        b = np.arange(1, self.B + 1)
        return self.f_c + self.W * (2 * b - 1 - self.B) / (2 * self.B)

    def check_arch(self, arch: str) -> None:
        if arch == "sa-ris" and self.N % self.B:
            raise ConfigError(f"SA-RIS needs B={self.B} to divide N={self.N}")

    def replace(self, **kw) -> "SystemConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return {f.name: _jsonable(getattr(self, f.name)) for f in dataclasses.fields(self)}

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def desk_config(**overrides) -> SystemConfig:
    """Laptop-scale system used by the CLI defaults, demos and acceptance runs."""
    return SystemConfig(**{"Q": 512, **overrides})


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 20
    iters_per_epoch: int = 25
    snr_r_choices: tuple = (0.0, 5.0, 10.0, 15.0, 20.0)
    snr_r_fixed: float | None = None
    snr_t_db: float = 20.0
    val_snr_r_db: float = 10.0
    val_fraction: float = 0.25
    mlp_ratio: int = 2
    seed: int = 0


# config file -----------------------------------------------------------------

_SECTIONS = {
    "system": ("M", "U", "N1", "N2", "M_RF", "N_s", "K", "S1", "S2", "B", "W", "f_c", "t_max",
               "L_CP", "Q", "Q_tr", "P_t", "sigma0_sq", "G_B", "G_U", "G_R", "rho",
               "channel_normalization", "rng_seed"),
    "geometry": ("bs_center", "ris_center", "ue_center", "ue_radius", "ue_height"),
    "scatterers": ("C_s", "S_c", "scatterer_sigma", "cluster_box_lo", "cluster_box_hi",
                   "clearance", "reflection_loss_db"),
    "training": tuple(f.name for f in dataclasses.fields(TrainConfig)),
}


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, tuple):
        return tuple(float(x) for x in raw.split(",") if x.strip())
    if raw.lower() in ("none", ""):
        return None
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, str):
        return raw
    return float(raw)


def load_config(path: str | Path) -> tuple[SystemConfig, TrainConfig]:
    """Read an INI-style config with sections [system], [geometry], [scatterers], [training].

    Unknown sections or keys raise ConfigError.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(str(exc)) from exc
    sys_defaults = SystemConfig()
    train_defaults = TrainConfig()
    sys_kw, train_kw = {}, {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            target, dflt = (train_kw, train_defaults) if section == "training" else (sys_kw, sys_defaults)
            default = getattr(dflt, key)
            if default is None:  # optional floats
                default = 0.0
            try:
                target[key] = _parse_value(raw, default)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return SystemConfig(**sys_kw), TrainConfig(**train_kw)


def dump_config(config: SystemConfig, train: TrainConfig | None = None) -> str:
    def fmt(v):
        if isinstance(v, tuple):
            return ", ".join(repr(float(x)) for x in v)
        return "none" if v is None else str(v)

    lines = []
    for section, keys in _SECTIONS.items():
        src = train if section == "training" else config
        if src is None:
            continue
        lines.append(f"[{section}]")
        lines += [f"{k} = {fmt(getattr(src, k))}" for k in keys]
        lines.append("")
    return "\n".join(lines)


# geometry ---------------------------------------------------------------------

@dataclass(frozen=True)
class Geometry:
    bs: np.ndarray   # (M, 3)
    ue: np.ndarray   # (U, 3)
    ris: np.ndarray  # (N, 3), linear index n = n1*N2 + n2
    m_bar: np.ndarray
    u_bar: np.ndarray
    n1_bar: np.ndarray
    n2_bar: np.ndarray
    bs_center: np.ndarray
    ris_center: np.ndarray
    ue_center: np.ndarray


def centered_index(count: int) -> np.ndarray:
    return np.arange(1, count + 1) - (count + 1) / 2


def build_geometry(config: SystemConfig, ue_center=None, arch: str | None = None) -> Geometry:
    """Antenna and element coordinates for BS/UE ULAs (x-axis) and the RIS UPA (xz-plane)."""
    if arch is not None:
        config.check_arch(arch)
    d = config.d
    bs_c = np.asarray(config.bs_center, float)
    ris_c = np.asarray(config.ris_center, float)
    ue_c = ue_region_center(config) if ue_center is None else np.asarray(ue_center, float)
    m_bar = centered_index(config.M)
    u_bar = centered_index(config.U)
    n1_bar = centered_index(config.N1)
    n2_bar = centered_index(config.N2)
    bs = bs_c + np.outer(m_bar * d, [1.0, 0.0, 0.0])
    ue = ue_c + np.outer(u_bar * d, [1.0, 0.0, 0.0])
    n1g, n2g = np.meshgrid(n1_bar, n2_bar, indexing="ij")
    ris = ris_c + np.stack([n1g.ravel() * d, np.zeros(config.N), n2g.ravel() * d], axis=1)
    return Geometry(bs, ue, ris, m_bar, u_bar, n1_bar, n2_bar, bs_c, ris_c, ue_c)


def rayleigh_distance(aperture: float, wavelength: float) -> float:
    return 2.0 * aperture ** 2 / wavelength


def mimo_rayleigh_distance(aperture_bs: float, aperture_ue: float, wavelength: float) -> float:
    return rayleigh_distance(aperture_bs + aperture_ue, wavelength)


def ris_near_field_predicate(r1: float, r2: float, aperture: float, wavelength: float) -> bool:
    """True when the harmonic-mean distance of the cascaded link lies inside 2D^2/lambda."""
    if np.isinf(r1):
        harmonic = r2
    elif np.isinf(r2):
        harmonic = r1
    else:
        harmonic = r1 * r2 / (r1 + r2)
    return bool(harmonic < rayleigh_distance(aperture, wavelength))


def ris_aperture(config: SystemConfig) -> float:
    """Panel diagonal of the RIS element grid."""
    d = config.d
    return float(np.hypot((config.N1 - 1) * d, (config.N2 - 1) * d))


def bs_aperture(config: SystemConfig) -> float:
    return (config.M - 1) * config.d


# scatterers -------------------------------------------------------------------

@dataclass(frozen=True)
class LinkPaths:
    """Per-path quantities for one link; arrays are (C_s, S_c)."""

    tx_dist: np.ndarray     # transmit end -> scatterer
    rx_dist: np.ndarray     # scatterer -> receive end
    delay: np.ndarray       # total length / c
    gain: np.ndarray        # complex, unit circular Gaussian
    tx_dir: np.ndarray      # (C_s, S_c, 3) unit vector tx center -> scatterer
    rx_dir: np.ndarray      # (C_s, S_c, 3) unit vector rx center -> scatterer


@dataclass(frozen=True)
class ScattererMap:
    cluster_centers: np.ndarray  # (C_s, 3)
    scatterers: np.ndarray       # (C_s, S_c, 3)
    ue_center: np.ndarray
    bu: LinkPaths
    br: LinkPaths
    ru: LinkPaths


def _unit(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ConfigError("degenerate geometry: zero-length path")
    return v / n, n[..., 0]


def ula_angle(direction: np.ndarray) -> np.ndarray:
    """Angle phi between the x-axis array and `direction` (cos phi = e_x)."""
    return np.arccos(np.clip(direction[..., 0], -1.0, 1.0))


def far_ula_angle(direction: np.ndarray) -> np.ndarray:
    """AOA for the 0-based far-field ULA response, sin(theta) = -e_x toward the source."""
    return np.arcsin(np.clip(-direction[..., 0], -1.0, 1.0))


def upa_angles(direction: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(azimuth, elevation) with e = (cos az sin el, sin az sin el, cos el)."""
    el = np.arccos(np.clip(direction[..., 2], -1.0, 1.0))
    az = np.arctan2(direction[..., 1], direction[..., 0])
    return az, el


def _link(tx, rx, pts, rng) -> LinkPaths:
    tx_dir, tx_dist = _unit(pts - tx)
    rx_dir, rx_dist = _unit(pts - rx)
    shape = pts.shape[:-1]
    gain = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)
    return LinkPaths(tx_dist, rx_dist, (tx_dist + rx_dist) / C_LIGHT, gain, tx_dir, rx_dir)


def sample_scatterers(config: SystemConfig, geometry: Geometry, rng: np.random.Generator,
                      max_tries: int = 1000) -> ScattererMap:
    """Uniform cluster centers in the configured box, Gaussian scatterers around them.

    Points closer than `clearance` to the BS, RIS or UE centers are redrawn.
    """
    lo = np.asarray(config.cluster_box_lo, float)
    hi = np.asarray(config.cluster_box_hi, float)
    anchors = np.stack([geometry.bs_center, geometry.ris_center, geometry.ue_center])

    def ok(p):
        return np.min(np.linalg.norm(anchors - p, axis=1)) >= config.clearance

    def draw(sampler):
        for _ in range(max_tries):
            p = sampler()
            if ok(p):
                return p
        raise ConfigError("scatterer placement failed; check cluster box and clearance")

    centers = np.stack([draw(lambda: rng.uniform(lo, hi)) for _ in range(config.C_s)])
    pts = np.stack([
        np.stack([draw(lambda c=c: c + config.scatterer_sigma * rng.standard_normal(3))
                  for _ in range(config.S_c)])
        for c in centers
    ])
    bu = _link(geometry.bs_center, geometry.ue_center, pts, rng)
    br = _link(geometry.bs_center, geometry.ris_center, pts, rng)
    ru = _link(geometry.ris_center, geometry.ue_center, pts, rng)
    return ScattererMap(centers, pts, geometry.ue_center, bu, br, ru)


def ue_region_center(config: SystemConfig) -> np.ndarray:
    x, y = config.ue_center
    return np.array([x, y, config.ue_height])


def sample_ue_position(config: SystemConfig, rng: np.random.Generator) -> np.ndarray:
    """Uniform point on the horizontal disk around the RIS ground projection."""
    r = config.ue_radius * np.sqrt(rng.uniform())
    a = rng.uniform(0, 2 * np.pi)
    return ue_region_center(config) + np.array([r * np.cos(a), r * np.sin(a), 0.0])


def scenario_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


@dataclass(frozen=True)
class Scenario:
    geometry: Geometry
    scatterers: ScattererMap
    seed: int
    index: int
    meta: dict = field(default_factory=dict)


def sample_scenario(config: SystemConfig, index: int = 0, seed: int | None = None) -> Scenario:
    seed = config.rng_seed if seed is None else seed
    rng = scenario_rng(seed, index)
    ue = sample_ue_position(config, rng)
    geom = build_geometry(config, ue_center=ue)
    scat = sample_scatterers(config, geom, rng)
    return Scenario(geom, scat, seed, index)
