"""End-to-end pipeline: trainable pilot stage, PSA, spectral shared network, heads, training.

All forward functions act on a scenario batch axis S in front of the per-scenario
shapes, and every learnable tensor lives on one ParamTape per step.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import beamform as bf
from . import rate as rt
from .autodiff import Complex, NumericalError
from .channel import ChannelSet, stack_channels
from .container import read_container, write_container
from .scenario import SystemConfig, TrainConfig

# "rms": rescale each scenario's stacked pilots to unit RMS after noise is added;
# "sigma": feed Y / sigma + noise unscaled.
INPUT_NORM = "rms"
HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "mean_SE", "snr_r_draw")


_TINY = np.finfo(float).tiny


def half_width(B: int) -> int:
    return max(1, B // 2)


# parameters ---------------------------------------------------------------------------

def ul_shapes(arch: str, config: SystemConfig) -> dict[str, tuple]:
    c = config
    shapes = {"ul_w": (c.Q_tr, c.B, c.M_RF, c.M)}
    if arch in ("classic", "sa-ris"):
        shapes["ul_theta"] = (c.Q_tr, c.N)
    elif arch == "ttd-ris":
        shapes.update(ul_theta1=(c.Q_tr, c.N), ul_theta2=(c.Q_tr, c.N), ul_nu=(c.Q_tr, c.S))
    elif arch == "ideal":
        shapes["ul_theta"] = (c.Q_tr, c.B, c.N)
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    return shapes


def _head_shapes(arch: str, config: SystemConfig) -> dict[str, tuple]:
    c = config
    BN = c.B * c.N
    shapes = {"ps_W": (BN, c.M), "ps_b": (c.M,),
              "ttd_W": (BN, c.M_RF * c.K), "ttd_b": (c.M_RF * c.K,),
              "bb_W": (c.B, c.N, 2 * c.M_RF * c.N_s), "bb_b": (c.B, 2 * c.M_RF * c.N_s)}
    if arch == "classic":
        shapes.update(th_W=(BN, c.N), th_b=(c.N,))
    elif arch == "sa-ris":
        shapes.update(th_W=(c.B, c.N, c.N // c.B), th_b=(c.B, c.N // c.B))
    elif arch == "ttd-ris":
        shapes.update(th1_W=(BN, c.N), th1_b=(c.N,), th2_W=(BN, c.N), th2_b=(c.N,),
                      nu_W=(BN, c.S), nu_b=(c.S,))
    elif arch == "ideal":
        shapes.update(th_W=(c.B, c.N, c.N), th_b=(c.B, c.N))
    return shapes


def param_shapes(arch: str, config: SystemConfig, mlp_ratio: int = 2) -> dict[str, tuple]:
    config.check_arch(arch)
    c = config
    B2 = half_width(c.B)
    C, T = 2 * c.M_RF, c.Q_tr
    L = C * T
    shapes = dict(ul_shapes(arch, c))
    shapes.update({
        "psa_wq_f": (1, c.B), "psa_wv_f": (B2, c.B), "psa_wz": (c.B, B2),
        "psa_wq_t": (B2, c.B), "psa_wv_t": (B2, c.B),
        "psi_re": (c.B, C, T // 2 + 1), "psi_im": (c.B, C, T // 2 + 1),
        "mlp_w1": (c.B, mlp_ratio * c.B), "mlp_b1": (mlp_ratio * c.B,),
        "mlp_w2": (mlp_ratio * c.B, c.B), "mlp_b2": (c.B,),
        "proj_W": (L, c.N), "proj_b": (c.N,),
    })
    shapes.update(_head_shapes(arch, c))
    return shapes


_PHASE_BIASES = ("ps_b", "th_b", "th1_b", "th2_b")


def init_params(arch: str, config: SystemConfig, rng: np.random.Generator, mlp_ratio: int = 2) -> dict:
    """Phases uniform in (-pi, pi); weights uniform(+-1/sqrt(fan_in)); Psi = 1; other biases 0."""
    params = {}
    for name, shape in param_shapes(arch, config, mlp_ratio).items():
        if name.startswith("ul_") and name != "ul_nu":
            params[name] = rng.uniform(-np.pi, np.pi, shape)
        elif name in _PHASE_BIASES:
            params[name] = rng.uniform(-np.pi, np.pi, shape)
        elif name == "psi_re":
            params[name] = np.ones(shape)
        elif name.endswith("_b") or name.startswith("mlp_b") or name in ("psi_im", "ul_nu"):
            params[name] = np.zeros(shape)
        else:
            # psa kernels act as W @ Y (fan-in last); the rest as X @ W
            fan_in = shape[-1] if name.startswith("psa_") else shape[-2]
            params[name] = rng.uniform(-1, 1, shape) / np.sqrt(fan_in)
    return params


# stages ------------------------------------------------------------------------------

def ul_realize(P: dict, arch: str, config: SystemConfig):
    """Combiners (Q_tr, B, M_RF, M) and RIS schedule (Q_tr, B|1, N), both Complex."""
    W = ad.expj(P["ul_w"]) / np.sqrt(config.M)
    raw = {k[3:]: v for k, v in P.items() if k.startswith("ul_") and k != "ul_w"}
    return W, bf.realize_ris(raw, arch, config)


def observe(P: dict, arch: str, config: SystemConfig, H, G, D, noise, snr_r_db):
    """Noisy pilots normalized by the noise std, stacked real: (S, B, 2M_RF, Q_tr).

    `noise` is standard CN of shape (S, Q_tr, B, M_RF); sigma^2 follows the
    SNR_R definition averaged over slots and subcarriers.
    """
    W, sched = ul_realize(P, arch, config)
    C, y = rt.uplink_tape(H, G, D, sched, W)                          # y: (S, Q, B, M_RF)
    # the floor keeps all-zero channels finite (pure-noise observation)
    energy = C.abs2().sum(axis=(-2, -1)).mean(axis=(1, 2)) + _TINY    # (S,)
    sigma_sq = energy / rt.db2lin(np.asarray(snr_r_db, float))
    sigma = ad.sqrt(sigma_sq).reshape(-1, 1, 1, 1)
    ynorm = Complex(y.re / sigma + noise.real, y.im / sigma + noise.imag)
    ynorm = ynorm.transpose(0, 2, 3, 1)                               # (S, B, M_RF, Q)
    X = ad.concat([ynorm.re, ynorm.im], axis=-2)
    if INPUT_NORM == "rms":
        S = X.shape[0]
        rms = ad.sqrt((X * X).reshape(S, -1).mean(axis=-1)).reshape(S, 1, 1, 1)
        X = X / rms
    return X


def psa_forward(Y, P: dict):
    """Polarized self-attention over Y (S, B, C, T)."""
    S, B, C, T = Y.shape
    Yf = Y.reshape(S, B, C * T)
    # frequency branch: softmax-pooled token summary, then channel gate (S, B, 1, 1)
    q = ad.softmax(P["psa_wq_f"] @ Yf, axis=-1)                     # (S, 1, L)
    v = P["psa_wv_f"] @ Yf                                           # (S, B2, L)
    xf = ad.sigmoid(P["psa_wz"] @ (v @ q.mT)).reshape(S, B, 1, 1)
    # time-spatial branch: GAP over tokens, softmax over channels, spatial gate (S, 1, C, T)
    qt = ad.softmax((P["psa_wq_t"] @ Yf).mean(axis=-1, keepdims=True), axis=-2)   # (S, B2, 1)
    vt = P["psa_wv_t"] @ Yf
    xt = ad.sigmoid(qt.mT @ vt).reshape(S, 1, C, T)
    return xf * Y + xt * Y


def spectral_filter(X, P: dict):
    """Half-spectrum 2-D DFT over (C, T), complex filter Psi, inverse back to real."""
    T = X.shape[-1]
    spec = ad.dft2(X)                                                # (2, S, B, C, T/2+1)
    re, im = spec[0], spec[1]
    fre = re * P["psi_re"] - im * P["psi_im"]
    fim = re * P["psi_im"] + im * P["psi_re"]
    stacked = ad.concat([fre.reshape((1,) + fre.shape), fim.reshape((1,) + fim.shape)], axis=0)
    return ad.idft2(stacked, T)


def shared_net_forward(Om, P: dict, config: SystemConfig):
    """Spectral filter, frequency-mixing MLP with residual, projection to Phi (S, B, N)."""
    S, B, C, T = Om.shape
    F = spectral_filter(Om, P).reshape(S, B, C * T)
    Ft = F.mT                                                        # tokens x frequencies
    hid = ad.gelu(Ft @ P["mlp_w1"] + P["mlp_b1"])
    A = (hid @ P["mlp_w2"] + P["mlp_b2"] + Ft).mT                    # (S, B, L)
    return A @ P["proj_W"] + P["proj_b"]


def _per_subcarrier(Phi, W, b):
    # Phi (S, B, N) with W (B, N, k): independent map per subcarrier -> (S, B, k)
    return (Phi.transpose(1, 0, 2) @ W).transpose(1, 0, 2) + b


def subnets_forward(Phi, P: dict, arch: str, config: SystemConfig) -> dict:
    """Raw (unconstrained) tensors for the BS and RIS, keyed as in beamform.raw_shapes."""
    c = config
    S = Phi.shape[0]
    flat = Phi.reshape(S, c.B * c.N)
    raw = {"ps": flat @ P["ps_W"] + P["ps_b"],
           "ttd": (flat @ P["ttd_W"] + P["ttd_b"]).reshape(S, c.M_RF, c.K)}
    bb = _per_subcarrier(Phi, P["bb_W"], P["bb_b"])                  # (S, B, 2 M_RF N_s)
    half = c.M_RF * c.N_s
    raw["bb_re"] = bb[..., :half].reshape(S, c.B, c.M_RF, c.N_s)
    raw["bb_im"] = bb[..., half:].reshape(S, c.B, c.M_RF, c.N_s)
    if arch == "classic":
        raw["theta"] = flat @ P["th_W"] + P["th_b"]
    elif arch == "sa-ris":
        # neuron group b drives the contiguous element block b
        raw["theta"] = _per_subcarrier(Phi, P["th_W"], P["th_b"]).reshape(S, c.N)
    elif arch == "ttd-ris":
        raw["theta1"] = flat @ P["th1_W"] + P["th1_b"]
        raw["theta2"] = flat @ P["th2_W"] + P["th2_b"]
        raw["nu"] = flat @ P["nu_W"] + P["nu_b"]
    elif arch == "ideal":
        raw["theta"] = _per_subcarrier(Phi, P["th_W"], P["th_b"])
    return raw


def downlink_se(raw: dict, arch: str, config: SystemConfig, H, G, D, sigma_sq: float):
    """Effective SE per scenario (S,) from raw head outputs on perfect downlink channels."""
    bs = bf.realize_bs(raw["ps"], raw["ttd"], raw["bb_re"], raw["bb_im"], config)
    coeffs = bf.realize_ris(raw, arch, config)
    Z = rt.effective_channel_tape(H, coeffs, G, D)
    rates = rt.rates_tape(Z, bs["A"], config.P_t, sigma_sq, config.N_s)
    return rates.sum(axis=-1) * rt.se_prefactor(config.Q, config.Q_tr, config.L_CP, config.B)


def e2e_forward(P: dict, batch: tuple, arch: str, config: SystemConfig, snr_r_db, noise,
                sigma_sq: float | None = None) -> dict:
    """Full pipeline on one tape; returns SE (S,), loss and the raw head outputs."""
    D, G, H = batch
    sigma_sq = config.sigma0_sq if sigma_sq is None else sigma_sq
    Y = observe(P, arch, config, H, G, D, noise, snr_r_db)
    Phi = shared_net_forward(psa_forward(Y, P), P, config)
    raw = subnets_forward(Phi, P, arch, config)
    se = downlink_se(raw, arch, config, H, G, D, sigma_sq)
    loss = -se.mean()
    return {"se": se, "loss": loss, "raw": raw}


def noise_draw(rng: np.random.Generator, S: int, config: SystemConfig) -> np.ndarray:
    return rt.standard_cn(rng, (S, config.Q_tr, config.B, config.M_RF))


def loss_and_grads(params: dict, batch, arch, config, snr_r_db, noise, sigma_sq=None):
    tape = ad.ParamTape()
    P = {k: tape.param(k, v) for k, v in params.items()}
    out = e2e_forward(P, batch, arch, config, snr_r_db, noise, sigma_sq)
    loss = float(out["loss"].value)
    if not np.isfinite(loss):
        raise NumericalError("non-finite training loss")
    return loss, tape.backward(out["loss"]), out["se"].value


def evaluate(params: dict, channels: list[ChannelSet], arch: str, config: SystemConfig,
             snr_r_db: float, rng: np.random.Generator | None = None, sigma_sq: float | None = None,
             noise: np.ndarray | None = None, chunk: int = 16) -> np.ndarray:
    """Effective SE per scenario; pilot noise is `noise` (S, Q_tr, B, M_RF) or drawn from `rng`."""
    if noise is None:
        if rng is None:
            raise ValueError("evaluate needs either noise or an rng")
        noise = noise_draw(rng, len(channels), config)
    out = []
    for i in range(0, len(channels), chunk):
        part = channels[i:i + chunk]
        tape = ad.ParamTape()
        P = {k: tape.const(v) for k, v in params.items()}
        res = e2e_forward(P, stack_channels(part), arch, config, snr_r_db, noise[i:i + chunk], sigma_sq)
        out.append(res["se"].value)
    return np.concatenate(out) if out else np.zeros(0)


def predict(params: dict, channels: ChannelSet, arch: str, config: SystemConfig,
            snr_r_db: float, noise: np.ndarray | None = None) -> bf.BeamformerState:
    """Realized BS/RIS design for one scenario from its (noisy) pilots."""
    batch = stack_channels([channels])
    noise = np.zeros((1, config.Q_tr, config.B, config.M_RF)) if noise is None else noise
    tape = ad.ParamTape()
    P = {k: tape.const(v) for k, v in params.items()}
    res = e2e_forward(P, batch, arch, config, snr_r_db, noise)
    raw = {k: v.value[0] for k, v in res["raw"].items()}
    pre, ris = bf.project_constraints(raw, arch, config)
    return bf.BeamformerState(pre, ris)


# training -------------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict
    adam: ad.AdamState
    history: list = field(default_factory=list)
    iteration: int = 0

    def history_csv(self) -> str:
        return history_to_csv(self.history)


def history_to_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for row in history:
        w.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_COLUMNS[1:]])
    return buf.getvalue()


def parse_history_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and tuple(rows[0].keys()) != HISTORY_COLUMNS:
        raise ValueError("unexpected history columns")
    return [{k: (int(r[k]) if k == "epoch" else float(r[k])) for k in HISTORY_COLUMNS} for r in rows]


def split_dataset(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded train/validation split; a single scenario serves as both."""
    if n < 1:
        raise ValueError("empty dataset")
    if n == 1:
        return np.array([0]), np.array([0])
    perm = np.random.default_rng([seed, 1]).permutation(n)
    n_val = min(n - 1, max(1, int(round(fraction * n))))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train(dataset: list[ChannelSet], arch: str, config: SystemConfig, hyper: TrainConfig,
          params: dict | None = None, log=None) -> TrainResult:
    """Adam on -mean effective SE with SNR_R drawn per iteration."""
    config.check_arch(arch)
    rng = np.random.default_rng([hyper.seed, 2])
    if params is None:
        params = init_params(arch, config, np.random.default_rng([hyper.seed, 3]), hyper.mlp_ratio)
    tr_idx, va_idx = split_dataset(len(dataset), hyper.val_fraction, hyper.seed)
    val_batch = stack_channels([dataset[i] for i in va_idx])
    val_noise = noise_draw(np.random.default_rng([hyper.seed, 4]), len(va_idx), config)
    sigma_dl = config.P_t / rt.db2lin(hyper.snr_t_db)
    adam = ad.AdamState(lr=hyper.lr, beta1=hyper.beta1, beta2=hyper.beta2, eps=hyper.eps)
    result = TrainResult(params, adam)
    bs = min(hyper.batch_size, len(tr_idx))
    for epoch in range(1, hyper.epochs + 1):
        losses, draws = [], []
        for _ in range(hyper.iters_per_epoch):
            pick = np.sort(rng.choice(tr_idx, size=bs, replace=False))
            snr = hyper.snr_r_fixed if hyper.snr_r_fixed is not None else float(rng.choice(hyper.snr_r_choices))
            batch = stack_channels([dataset[i] for i in pick])
            loss, grads, _ = loss_and_grads(result.params, batch, arch, config, snr,
                                            noise_draw(rng, bs, config), sigma_dl)
            result.params = ad.adam_step(result.params, grads, adam)
            result.iteration += 1
            losses.append(loss)
            draws.append(snr)
        tape = ad.ParamTape()
        P = {k: tape.const(v) for k, v in result.params.items()}
        val = e2e_forward(P, val_batch, arch, config, hyper.val_snr_r_db, val_noise, sigma_dl)
        val_loss = float(val["loss"].value)
        if not np.isfinite(val_loss):
            raise NumericalError("non-finite validation loss")
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss,
               "mean_SE": -val_loss, "snr_r_draw": float(np.mean(draws))}
        result.history.append(row)
        if log is not None:
            log(row)
    return result


# checkpoint -----------------------------------------------------------------------------

def save_checkpoint(path, result: TrainResult, arch: str, config: SystemConfig,
                    hyper: TrainConfig | None = None) -> None:
    header = {"kind": "checkpoint", "arch": arch, "config_hash": config.hash(),
              "config": config.to_dict(), "iteration": result.iteration, "adam_t": result.adam.t,
              "adam": {"lr": result.adam.lr, "beta1": result.adam.beta1,
                       "beta2": result.adam.beta2, "eps": result.adam.eps}}
    if hyper is not None:
        header["mlp_ratio"] = hyper.mlp_ratio
    arrays = {}
    for k in sorted(result.params):
        arrays["p/" + k] = result.params[k]
        if k in result.adam.m:
            arrays["m/" + k] = result.adam.m[k]
            arrays["v/" + k] = result.adam.v[k]
    write_container(path, header, arrays)


def load_checkpoint(path) -> tuple[dict, TrainResult]:
    header, arrays = read_container(path)
    if header.get("kind") != "checkpoint":
        raise ValueError(f"{path}: not a checkpoint")
    params = {k[2:]: v for k, v in arrays.items() if k.startswith("p/")}
    adam = ad.AdamState(t=header["adam_t"], **header["adam"])
    adam.m = {k[2:]: v for k, v in arrays.items() if k.startswith("m/")}
    adam.v = {k[2:]: v for k, v in arrays.items() if k.startswith("v/")}
    return header, TrainResult(params, adam, [], header["iteration"])
