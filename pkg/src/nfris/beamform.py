"""TTD hybrid precoder, RIS reflection architectures and the constraint maps.

The differentiable builders (`realize_bs`, `realize_ris`) are the only place
raw parameters become physical ones. `project_constraints` runs them on a
throwaway tape, so evaluation and training share a single projection path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Complex, ParamTape
from .container import read_container, write_container
from .scenario import SystemConfig

ARCHS = ("classic", "ttd-ris", "sa-ris", "ideal")


# index maps ---------------------------------------------------------------------

def ttd_group_of_antenna(config: SystemConfig) -> np.ndarray:
    """Group g = r*K + k feeding antenna m (chain-major, contiguous)."""
    return np.arange(config.M) // config.P


def chain_of_antenna(config: SystemConfig) -> np.ndarray:
    return np.arange(config.M) // (config.M // config.M_RF)


def subarray_of_element(config: SystemConfig) -> np.ndarray:
    """TTD-RIS subarray index s(n) for element n = n1*N2 + n2."""
    n1, n2 = np.divmod(np.arange(config.N), config.N2)
    return (n1 // (config.N1 // config.S1)) * config.S2 + n2 // (config.N2 // config.S2)


def sa_group_of_element(config: SystemConfig) -> np.ndarray:
    """SA-RIS virtual subarray (0-based subcarrier) of each element: contiguous N/B blocks."""
    config.check_arch("sa-ris")
    return np.arange(config.N) // (config.N // config.B)


def _onehot(idx, width):
    out = np.zeros((len(idx), width))
    out[np.arange(len(idx)), idx] = 1.0
    return out


# realized state -------------------------------------------------------------------

@dataclass
class BsPrecoder:
    ps_phases: np.ndarray   # (M,) rad
    ttd_delays: np.ndarray  # (M_RF, K) s
    digital: np.ndarray     # (B, M_RF, N_s) complex


@dataclass
class RisState:
    kind: str
    theta: np.ndarray | None = None   # classic / sa-ris: (N,); ideal: (B, N)
    theta1: np.ndarray | None = None
    theta2: np.ndarray | None = None
    nu: np.ndarray | None = None      # (S,) s


@dataclass
class BeamformerState:
    precoder: BsPrecoder
    ris: RisState

    def save(self, path, config: SystemConfig) -> None:
        arrays = {"ps_phases": self.precoder.ps_phases, "ttd_delays": self.precoder.ttd_delays,
                  "digital": self.precoder.digital}
        for name in ("theta", "theta1", "theta2", "nu"):
            val = getattr(self.ris, name)
            if val is not None:
                arrays[name] = val
        write_container(path, {"kind": "beamformer", "ris_kind": self.ris.kind,
                               "config_hash": config.hash()}, arrays)

    @classmethod
    def load(cls, path) -> "BeamformerState":
        header, arr = read_container(path)
        if header.get("kind") != "beamformer":
            raise ValueError(f"{path}: not a beamformer state")
        pre = BsPrecoder(arr["ps_phases"], arr["ttd_delays"], arr["digital"])
        ris = RisState(header["ris_kind"], **{k: arr.get(k) for k in ("theta", "theta1", "theta2", "nu")})
        return cls(pre, ris)

    def text_dump(self) -> str:
        p = self.precoder
        lines = ["# ps_phases (rad)", " ".join(f"{x:.6f}" for x in p.ps_phases),
                 "# ttd_delays (ns)"]
        lines += [" ".join(f"{x * 1e9:.6f}" for x in row) for row in p.ttd_delays]
        for b, mat in enumerate(p.digital):
            lines.append(f"# digital b={b + 1}")
            lines += [" ".join(f"{z.real:+.6e}{z.imag:+.6e}j" for z in row) for row in mat]
        r = self.ris
        lines.append(f"# ris {r.kind}")
        for name in ("theta", "theta1", "theta2"):
            val = getattr(r, name)
            if val is not None:
                lines.append(f"# {name} (rad)")
                lines += [" ".join(f"{x:.6f}" for x in np.atleast_2d(val)[i]) for i in range(np.atleast_2d(val).shape[0])]
        if r.nu is not None:
            lines += ["# nu (ns)", " ".join(f"{x * 1e9:.6f}" for x in r.nu)]
        return "\n".join(lines) + "\n"


# explicit matrices (numpy) -------------------------------------------------------

def ttd_analog_matrix(delays: np.ndarray, f_b: float, t_max: float | None = None) -> np.ndarray:
    """Block-diagonal (K*M_RF, M_RF): block r holds exp(-j 2 pi f_b t_r)."""
    delays = np.asarray(delays, float)
    if t_max is not None and (np.any(delays < 0) or np.any(delays > t_max)):
        raise ValueError("TTD delay outside [0, t_max]")
    M_RF, K = delays.shape
    T = np.zeros((K * M_RF, M_RF), complex)
    for r in range(M_RF):
        T[r * K:(r + 1) * K, r] = np.exp(-2j * np.pi * f_b * delays[r])
    return T


def ps_analog_matrix(ps_phases: np.ndarray, config: SystemConfig) -> np.ndarray:
    """(M, K*M_RF) sub-connected phase-shifter network, one unit-modulus entry per row."""
    ps_phases = np.asarray(ps_phases, float)
    if ps_phases.shape != (config.M,):
        raise ValueError(f"expected {config.M} phases, got {ps_phases.shape}")
    F = np.zeros((config.M, config.K * config.M_RF), complex)
    F[np.arange(config.M), ttd_group_of_antenna(config)] = np.exp(1j * ps_phases)
    return F


def bs_effective_precoder(precoder: BsPrecoder, b: int, config: SystemConfig) -> np.ndarray:
    """A_b = F_PS T_b F_BB,b for 0-based subcarrier b."""
    f_b = config.subcarrier_freqs()[b]
    return (ps_analog_matrix(precoder.ps_phases, config)
            @ ttd_analog_matrix(precoder.ttd_delays, f_b) @ precoder.digital[b])


def ris_coefficients(state: RisState, config: SystemConfig) -> np.ndarray:
    """Diagonal reflection coefficients per subcarrier, shape (B, N)."""
    fb = config.subcarrier_freqs()
    if state.kind in ("classic", "sa-ris"):
        return np.broadcast_to(np.exp(1j * state.theta), (config.B, config.N)).copy()
    if state.kind == "ttd-ris":
        nu = state.nu[subarray_of_element(config)]
        return (np.exp(1j * state.theta1) * np.exp(-2j * np.pi * fb[:, None] * nu)
                * np.exp(1j * state.theta2))
    if state.kind == "ideal":
        return np.exp(1j * np.asarray(state.theta))
    raise ValueError(f"unknown RIS kind {state.kind!r}")


def ris_phase_matrix(state: RisState, b: int, config: SystemConfig) -> np.ndarray:
    return np.diag(ris_coefficients(state, config)[b])


# differentiable maps ---------------------------------------------------------------

def bb_offset(config: SystemConfig) -> np.ndarray:
    """Fixed reference added to raw digital outputs so zero raw maps to a valid precoder."""
    return np.eye(config.M_RF, config.N_s)


def realize_bs(ps, ttd_logits, bb_re, bb_im, config: SystemConfig) -> dict:
    """Map raw BS tensors to A_b (Complex, (..., B, M, N_s)) with ||A_b||_F^2 = rho.

    ps: (..., M) phases; ttd_logits: (..., M_RF, K); bb_re/bb_im: (..., B, M_RF, N_s).
    """
    fb = config.subcarrier_freqs()
    delays = config.t_max * ad.sigmoid(ttd_logits)
    lead = delays.shape[:-2]
    t_group = delays.reshape(lead + (config.M_RF * config.K,))
    t_ant = t_group @ _onehot(ttd_group_of_antenna(config), config.M_RF * config.K).T   # (..., M)
    t_ant = t_ant.reshape(lead + (1, config.M))
    # per-antenna phase: PS phase minus TTD phase at each subcarrier, (..., B, M)
    phase = ps.reshape(ps.shape[:-1] + (1, config.M)) - t_ant * (2 * np.pi * fb[:, None])
    analog = ad.expj(phase)
    X = Complex(bb_re + bb_offset(config), bb_im)
    X_ant = _onehot(chain_of_antenna(config), config.M_RF) @ X                          # (..., B, M, N_s)
    A = X_ant * analog.reshape(analog.shape + (1,))
    norm = ad.frobenius_norm(ad.concat([A.re, A.im], axis=-1), axis=(-2, -1), keepdims=True)
    scale = np.sqrt(config.power) / norm
    return {"A": A * scale, "F_BB": X * scale, "delays": delays, "ps": ps}


def realize_ris(raw: dict, arch: str, config: SystemConfig) -> Complex:
    """Reflection coefficients (Complex) of shape (..., B, N) or (..., 1, N)."""
    if arch in ("classic", "sa-ris"):
        th = raw["theta"]
        return ad.expj(th.reshape(th.shape[:-1] + (1, config.N)))
    if arch == "ttd-ris":
        fb = config.subcarrier_freqs()
        nu = config.t_max * ad.sigmoid(raw["nu"])                                         # (..., S)
        nu_el = nu @ _onehot(subarray_of_element(config), config.S).T                      # (..., N)
        lead = nu_el.shape[:-1]
        base = (raw["theta1"] + raw["theta2"]).reshape(lead + (1, config.N))
        return ad.expj(base - nu_el.reshape(lead + (1, config.N)) * (2 * np.pi * fb[:, None]))
    if arch == "ideal":
        return ad.expj(raw["theta"])
    raise ValueError(f"unknown architecture {arch!r}")


def raw_shapes(arch: str, config: SystemConfig) -> dict[str, tuple]:
    shapes = {"ps": (config.M,), "ttd": (config.M_RF, config.K),
              "bb_re": (config.B, config.M_RF, config.N_s), "bb_im": (config.B, config.M_RF, config.N_s)}
    if arch in ("classic", "sa-ris"):
        shapes["theta"] = (config.N,)
    elif arch == "ttd-ris":
        shapes.update(theta1=(config.N,), theta2=(config.N,), nu=(config.S,))
    elif arch == "ideal":
        shapes["theta"] = (config.B, config.N)
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    return shapes


def random_raw(arch: str, config: SystemConfig, rng: np.random.Generator, batch: tuple = ()) -> dict:
    """Raw parameters whose realizations are uniformly random phases and delays."""
    raw = {}
    for name, shape in raw_shapes(arch, config).items():
        shape = batch + shape
        if name in ("ttd", "nu"):
            u = rng.uniform(1e-6, 1 - 1e-6, shape)
            raw[name] = np.log(u / (1 - u))
        elif name.startswith("bb"):
            raw[name] = rng.standard_normal(shape)
        else:
            raw[name] = rng.uniform(-np.pi, np.pi, shape)
    return raw


def project_constraints(raw: dict, arch: str, config: SystemConfig) -> tuple[BsPrecoder, RisState]:
    """Realize unconstrained raw arrays into a feasible (BsPrecoder, RisState)."""
    tape = ParamTape()
    t = {k: tape.const(v) for k, v in raw.items()}
    bs = realize_bs(t["ps"], t["ttd"], t["bb_re"], t["bb_im"], config)
    pre = BsPrecoder(np.array(t["ps"].value), bs["delays"].value.copy(), bs["F_BB"].value)
    if arch in ("classic", "sa-ris", "ideal"):
        ris = RisState(arch, theta=np.array(raw["theta"], float))
    else:
        nu = config.t_max * ad.sigmoid(t["nu"]).value
        ris = RisState(arch, theta1=np.array(raw["theta1"], float),
                       theta2=np.array(raw["theta2"], float), nu=nu)
    return pre, ris


def unproject(precoder: BsPrecoder, ris: RisState, config: SystemConfig) -> dict:
    """Raw arrays that re-project to the given realized state (delays strictly inside the box)."""
    def logit(t):
        u = np.clip(np.asarray(t) / config.t_max, 1e-15, 1 - 1e-15)
        return np.log(u) - np.log1p(-u)

    X = precoder.digital - bb_offset(config)
    raw = {"ps": np.array(precoder.ps_phases), "ttd": logit(precoder.ttd_delays),
           "bb_re": X.real.copy(), "bb_im": X.imag.copy()}
    if ris.kind == "ttd-ris":
        raw.update(theta1=np.array(ris.theta1), theta2=np.array(ris.theta2), nu=logit(ris.nu))
    else:
        raw["theta"] = np.array(ris.theta)
    return raw
