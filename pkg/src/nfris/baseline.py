"""Perfect-CSI projected-gradient benchmark, random-parameter baseline, beam-split diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import beamform as bf
from . import rate as rt
from .autodiff import NumericalError
from .channel import ChannelSet, stack_channels
from .scenario import C_LIGHT, Geometry, SystemConfig


# projected gradient ------------------------------------------------------------------

def _objective(raw: dict, arch, config, batch, sigma_sq, need_grad: bool):
    """Sum-rate sum_b R_b per scenario and, optionally, its gradient w.r.t. the raw tensors."""
    D, G, H = batch
    tape = ad.ParamTape()
    R = {k: (tape.param(k, v) if need_grad else tape.const(v)) for k, v in raw.items()}
    bs = bf.realize_bs(R["ps"], R["ttd"], R["bb_re"], R["bb_im"], config)
    Z = rt.effective_channel_tape(H, bf.realize_ris(R, arch, config), G, D)
    obj = rt.rates_tape(Z, bs["A"], config.P_t, sigma_sq, config.N_s).sum(axis=-1)   # (S,)
    val = obj.value
    if not np.all(np.isfinite(val)):
        raise NumericalError("non-finite PGD objective")
    return val, (tape.backward(obj.sum()) if need_grad else None)


@dataclass
class PgdResult:
    states: list
    se: np.ndarray
    objective: np.ndarray          # (iterations + 1, S) accepted objective values
    raw: dict = field(repr=False, default_factory=dict)


def pgd_perfect_csi(channels, arch: str, config: SystemConfig, steps: int = 500,
                    step_size: float = 1e-2, rng: np.random.Generator | None = None,
                    init: dict | None = None, sigma_sq: float | None = None,
                    max_halvings: int = 20, tol: float = 1e-10) -> PgdResult:
    """Gradient ascent on sum_b R_b over raw parameters, one backtracking step per scenario.

    channels: a ChannelSet or a list of them (batched, each with its own step size).
    A trial step is accepted when the objective does not decrease; the step then
    doubles, otherwise it halves (at most `max_halvings` times per iteration).
    """
    config.check_arch(arch)
    chans = [channels] if isinstance(channels, ChannelSet) else list(channels)
    S = len(chans)
    batch = stack_channels(chans)
    sigma_sq = config.sigma0_sq if sigma_sq is None else sigma_sq
    if init is None:
        rng = np.random.default_rng(0) if rng is None else rng
        init = bf.random_raw(arch, config, rng, batch=(S,))
    raw = {k: np.array(v, float) for k, v in init.items()}
    obj, grads = _objective(raw, arch, config, batch, sigma_sq, True)
    step = np.full(S, float(step_size))
    history = [obj.copy()]
    active = np.ones(S, bool)
    for _ in range(steps):
        if not active.any():
            break
        pending = active.copy()
        new_obj = obj.copy()
        accepted = {k: v.copy() for k, v in raw.items()}
        for _ in range(max_halvings + 1):
            trial = {k: np.where(_bshape(pending, v), raw[k] + _bshape(step, v) * grads[k], accepted[k])
                     for k, v in raw.items()}
            t_obj, _ = _objective(trial, arch, config, batch, sigma_sq, False)
            ok = pending & (t_obj >= obj)
            for k in raw:
                accepted[k] = np.where(_bshape(ok, raw[k]), trial[k], accepted[k])
            new_obj = np.where(ok, t_obj, new_obj)
            step = np.where(ok, step * 2, np.where(pending, step / 2, step))
            pending &= ~ok
            if not pending.any():
                break
        # scenarios that failed every halving, or stalled, are converged
        gain = new_obj - obj
        active &= ~pending & (gain > tol * np.maximum(1.0, np.abs(obj)))
        raw, obj = accepted, new_obj
        history.append(obj.copy())
        obj, grads = _objective(raw, arch, config, batch, sigma_sq, True)
    se = obj * rt.se_prefactor(config.Q, config.Q_tr, config.L_CP, config.B)
    states = []
    for s in range(S):
        pre, ris = bf.project_constraints({k: v[s] for k, v in raw.items()}, arch, config)
        states.append(bf.BeamformerState(pre, ris))
    return PgdResult(states, se, np.array(history), raw)


def _bshape(mask, like):
    return np.reshape(mask, mask.shape + (1,) * (np.ndim(like) - 1))


def warm_start(result: PgdResult, src_arch: str, dst_arch: str, config: SystemConfig) -> dict:
    """Raw parameters for `dst_arch` reproducing (or approximating) a `src_arch` solution."""
    raw = {k: result.raw[k].copy() for k in ("ps", "ttd", "bb_re", "bb_im")}
    S = raw["ps"].shape[0]
    if dst_arch == "ideal":
        coeffs = np.stack([bf.ris_coefficients(st.ris, config) for st in result.states])
        raw["theta"] = np.angle(coeffs)
    elif dst_arch == "ttd-ris" and src_arch in ("classic", "sa-ris"):
        # near-zero delays: the TTD-RIS realizes the flat panel up to a negligible phase
        raw["theta1"] = result.raw["theta"].copy()
        raw["theta2"] = np.zeros((S, config.N))
        raw["nu"] = np.full((S, config.S), -30.0)
    elif dst_arch == src_arch:
        raw = {k: v.copy() for k, v in result.raw.items()}
    else:
        raise ValueError(f"no warm start from {src_arch} to {dst_arch}")
    return raw


def pgd_suite(channels: list[ChannelSet], config: SystemConfig, rng: np.random.Generator,
              archs=("classic", "sa-ris", "ttd-ris", "ideal"), **kw) -> dict[str, PgdResult]:
    """Architectures in order of generality, each relaxed one warm-started from the last.

    TTD-RIS keeps the best of its own random start and warm starts from the classic
    and SA-RIS solutions; the ideal relaxation starts from the TTD-RIS solution, so
    ideal >= TTD-RIS >= {classic, SA-RIS} holds per scenario.
    """
    out: dict[str, PgdResult] = {}
    seeds = {a: rng.integers(2**32) for a in archs}
    for arch in archs:
        sub = np.random.default_rng(seeds[arch])
        res = pgd_perfect_csi(channels, arch, config, rng=sub, **kw)
        if arch == "ttd-ris":
            for src in ("classic", "sa-ris"):
                if src in out:
                    alt = pgd_perfect_csi(channels, arch, config,
                                          init=warm_start(out[src], src, arch, config), **kw)
                    res = _pick_best(res, alt, arch, config)
        if arch == "ideal" and "ttd-ris" in out:
            alt = pgd_perfect_csi(channels, arch, config,
                                  init=warm_start(out["ttd-ris"], "ttd-ris", arch, config), **kw)
            res = _pick_best(res, alt, arch, config)
        out[arch] = res
    return out


def _pick_best(a: PgdResult, b: PgdResult, arch, config) -> PgdResult:
    take_b = b.se > a.se
    raw = {k: np.where(_bshape(take_b, a.raw[k]), b.raw[k], a.raw[k]) for k in a.raw}
    states = [sb if t else sa for sa, sb, t in zip(a.states, b.states, take_b)]
    hist = np.where(take_b, b.objective[-1], a.objective[-1])[None]
    return PgdResult(states, np.where(take_b, b.se, a.se), hist, raw)


# random baseline -----------------------------------------------------------------------

def random_baseline(channels: ChannelSet, arch: str, config: SystemConfig,
                    rng: np.random.Generator, trials: int = 100,
                    sigma_sq: float | None = None) -> dict:
    """SE of uniformly random realized parameters; trial i consumes the i-th rng draw block."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    sigma_sq = config.sigma0_sq if sigma_sq is None else sigma_sq
    samples = np.empty(trials)
    for i in range(trials):
        raw = bf.random_raw(arch, config, rng)
        pre, ris = bf.project_constraints(raw, arch, config)
        samples[i] = state_se(bf.BeamformerState(pre, ris), channels, config, sigma_sq)
    return {"samples": samples, "mean": float(samples.mean()), "median": float(np.median(samples)),
            "max": float(samples.max()), "std": float(samples.std())}


def state_se(state: bf.BeamformerState, channels: ChannelSet, config: SystemConfig,
             sigma_sq: float | None = None) -> float:
    """Effective SE of a realized design on known channels."""
    sigma_sq = config.sigma0_sq if sigma_sq is None else sigma_sq
    A = np.stack([bf.bs_effective_precoder(state.precoder, b, config) for b in range(config.B)])
    rates = rt.realized_rates(channels, A, bf.ris_coefficients(state.ris, config),
                              config.P_t, sigma_sq, config.N_s)
    return float(rt.effective_se(rates, config.Q, config.Q_tr, config.L_CP, config.B))


# beam split diagnostics ------------------------------------------------------------------

@dataclass
class GainProfile:
    values: np.ndarray         # (B,) normalized gains in [0, 1]
    arch: str
    focal: np.ndarray
    side: str = "bs"

    def rows(self, freqs: np.ndarray):
        return [(b + 1, float(freqs[b]), float(v)) for b, v in enumerate(self.values)]


def path_lengths(points: np.ndarray, target) -> np.ndarray:
    return np.linalg.norm(np.asarray(points) - np.asarray(target, float), axis=-1)


def spherical_response(f, lengths) -> np.ndarray:
    """Exact-distance response exp(-j 2 pi f L / c); f (B,), lengths (n,) -> (B, n)."""
    return np.exp(-2j * np.pi * np.outer(np.atleast_1d(f), lengths) / C_LIGHT)


def bs_analog_weights(precoder: bf.BsPrecoder, config: SystemConfig) -> np.ndarray:
    """Per-antenna analog coefficient at every subcarrier, (B, M), all chains driven equally."""
    fb = config.subcarrier_freqs()
    groups = bf.ttd_group_of_antenna(config)
    t = np.asarray(precoder.ttd_delays, float).reshape(-1)[groups]
    return np.exp(1j * (np.asarray(precoder.ps_phases)[None] - 2 * np.pi * fb[:, None] * t[None]))


def beam_gain_profile(state: bf.BeamformerState, geometry: Geometry, focal_point, config: SystemConfig,
                      side: str = "bs", source=None, arch: str = "") -> GainProfile:
    """|a_focal(f_b)^T w_b|^2 / (n ||w_b||^2) per subcarrier.

    BS side: w_b are the per-antenna analog weights. RIS side: w_b is Theta_b applied
    to the wave impinging from `source` (default: BS array center).
    """
    fb = config.subcarrier_freqs()
    focal = np.asarray(focal_point, float)
    if side == "bs":
        pts = geometry.bs
        w = bs_analog_weights(state.precoder, config)
        a = spherical_response(fb, path_lengths(pts, focal))
    elif side == "ris":
        pts = geometry.ris
        src = geometry.bs_center if source is None else np.asarray(source, float)
        w = bf.ris_coefficients(state.ris, config) * spherical_response(fb, path_lengths(pts, src))
        a = spherical_response(fb, path_lengths(pts, focal))
    else:
        raise ValueError("side must be 'bs' or 'ris'")
    if np.min(path_lengths(pts, focal)) <= 0:
        raise ValueError("focal point lies on the array")
    n = pts.shape[0]
    g = np.abs(np.sum(a * w, axis=-1)) ** 2 / (n * np.sum(np.abs(w) ** 2, axis=-1))
    return GainProfile(g, arch or state.ris.kind, focal, side)


def _ttd_design(lengths: np.ndarray, groups: np.ndarray, n_groups: int, f_c: float):
    """Phases and per-group delays aligning path lengths at every frequency.

    Group delay t_k = (L_max - L_k)/c with L_k the group's mean length; the
    residual in-group spread is corrected by frequency-flat phases at f_c.
    """
    Lk = np.array([lengths[groups == k].mean() for k in range(n_groups)])
    delays = (Lk.max() - Lk) / C_LIGHT
    phases = 2 * np.pi * f_c * (lengths - Lk[groups]) / C_LIGHT
    return np.angle(np.exp(1j * phases)), delays


def focused_ps_precoder(geometry: Geometry, focal_point, config: SystemConfig) -> bf.BsPrecoder:
    """Phase-shifter-only beamfocusing matched at the carrier; all TTDs at zero delay."""
    L = path_lengths(geometry.bs, focal_point)
    ps = np.angle(np.exp(2j * np.pi * config.f_c * L / C_LIGHT))
    return bf.BsPrecoder(ps, np.zeros((config.M_RF, config.K)), _flat_digital(config))


def ttd_focused_precoder(geometry: Geometry, focal_point, config: SystemConfig) -> bf.BsPrecoder:
    """TTD-compensated beamfocusing: group delays track the wideband phase slope."""
    L = path_lengths(geometry.bs, focal_point)
    ps, delays = _ttd_design(L, bf.ttd_group_of_antenna(config), config.M_RF * config.K, config.f_c)
    if delays.max() > config.t_max:
        raise ValueError(f"required delay {delays.max():.3e}s exceeds t_max")
    return bf.BsPrecoder(ps, delays.reshape(config.M_RF, config.K), _flat_digital(config))


def _flat_digital(config: SystemConfig) -> np.ndarray:
    # identity mapping of streams to chains, scaled to the power budget
    X = np.broadcast_to(bf.bb_offset(config), (config.B, config.M_RF, config.N_s)).astype(complex)
    return X * np.sqrt(config.power * config.M_RF / (config.N_s * config.M))


def focused_ris_state(geometry: Geometry, focal_point, config: SystemConfig, arch: str = "classic",
                      source=None) -> bf.RisState:
    """Classic (carrier-matched) or TTD-RIS (delay-compensated) reflection toward a focal point."""
    src = geometry.bs_center if source is None else source
    L = path_lengths(geometry.ris, src) + path_lengths(geometry.ris, focal_point)
    if arch == "classic":
        return bf.RisState("classic", theta=np.angle(np.exp(2j * np.pi * config.f_c * L / C_LIGHT)))
    if arch == "ttd-ris":
        th1, nu = _ttd_design(L, bf.subarray_of_element(config), config.S, config.f_c)
        if nu.max() > config.t_max:
            raise ValueError(f"required delay {nu.max():.3e}s exceeds t_max")
        return bf.RisState("ttd-ris", theta1=th1, theta2=np.zeros(config.N), nu=nu)
    raise ValueError("focused RIS designs exist for 'classic' and 'ttd-ris'")
