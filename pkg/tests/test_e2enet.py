import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nfris import autodiff as ad
from nfris import baseline as bl
from nfris import beamform as bf
from nfris import e2enet as E
from nfris import rate as rt
from nfris.autodiff import ParamTape
from nfris.channel import ChannelSet, scenario_channels, stack_channels
from nfris.cli import gradcheck, tiny_config
from nfris.scenario import TrainConfig


def consts(params, tape=None):
    tape = tape or ParamTape()
    return {k: tape.const(v) for k, v in params.items()}


def tiny_setup(arch="ttd-ris", n=2, seed=0):
    cfg = tiny_config()
    chans = [scenario_channels(cfg, i, seed) for i in range(n)]
    params = E.init_params(arch, cfg, np.random.default_rng(1))
    noise = E.noise_draw(np.random.default_rng(2), n, cfg)
    return cfg, chans, params, noise


# PSA -------------------------------------------------------------------------------

def psa_oracle(Y, P):
    """Straight-line loops over the same branch definitions."""
    B, C, T = Y.shape
    L = C * T
    Yf = Y.reshape(B, L)
    sig = lambda x: 1 / (1 + np.exp(-x))
    wq, wv, wz = P["psa_wq_f"], P["psa_wv_f"], P["psa_wz"]
    B2 = wv.shape[0]
    ql = [sum(wq[0, b] * Yf[b, l] for b in range(B)) for l in range(L)]
    e = [np.exp(x - max(ql)) for x in ql]
    q = [x / sum(e) for x in e]
    v = [[sum(wv[i, b] * Yf[b, l] for b in range(B)) for l in range(L)] for i in range(B2)]
    pooled = [sum(v[i][l] * q[l] for l in range(L)) for i in range(B2)]
    xf = [sig(sum(wz[b, i] * pooled[i] for i in range(B2))) for b in range(B)]
    wqt, wvt = P["psa_wq_t"], P["psa_wv_t"]
    gap = [sum(sum(wqt[i, b] * Yf[b, l] for b in range(B)) for l in range(L)) / L for i in range(B2)]
    e = [np.exp(x - max(gap)) for x in gap]
    qt = [x / sum(e) for x in e]
    vt = [[sum(wvt[i, b] * Yf[b, l] for b in range(B)) for l in range(L)] for i in range(B2)]
    xt = [sig(sum(qt[i] * vt[i][l] for i in range(B2))) for l in range(L)]
    out = np.zeros((B, L))
    for b in range(B):
        for l in range(L):
            out[b, l] = xf[b] * Yf[b, l] + xt[l] * Yf[b, l]
    return out.reshape(B, C, T)


def psa_params(rng, B=2):
    B2 = E.half_width(B)
    return {"psa_wq_f": rng.standard_normal((1, B)), "psa_wv_f": rng.standard_normal((B2, B)),
            "psa_wz": rng.standard_normal((B, B2)), "psa_wq_t": rng.standard_normal((B2, B)),
            "psa_wv_t": rng.standard_normal((B2, B))}


def test_psa_matches_scalar_oracle(rng):
    P = psa_params(rng)
    Y = rng.standard_normal((1, 2, 2, 2))  # B=2, 2*M_RF=2, Q_tr=2
    out = E.psa_forward((tp := ParamTape()).const(Y), consts(P, tp)).value
    assert np.max(np.abs(out[0] - psa_oracle(Y[0], P))) < 1e-12


def test_psa_neutral_gates(rng):
    P = psa_params(rng, B=4)
    P["psa_wz"][:] = 0
    P["psa_wv_t"][:] = 0
    Y = rng.standard_normal((3, 4, 2, 6))
    np.testing.assert_allclose(E.psa_forward((tp := ParamTape()).const(Y), consts(P, tp)).value, Y, atol=1e-15)


def test_gap_of_constant():
    t = ParamTape().const(np.full((2, 3, 4), 2.5))
    np.testing.assert_allclose(t.reshape(2, 12).mean(axis=-1).value, 2.5)


# shared network -----------------------------------------------------------------------

def shared_params(rng, B, C, T, N, neutral=False):
    P = {"psi_re": np.ones((B, C, T // 2 + 1)), "psi_im": np.zeros((B, C, T // 2 + 1)),
         "mlp_w1": np.zeros((B, 2 * B)), "mlp_b1": np.zeros(2 * B),
         "mlp_w2": np.zeros((2 * B, B)), "mlp_b2": np.zeros(B),
         "proj_W": np.eye(C * T, N), "proj_b": np.zeros(N)}
    if not neutral:
        P["psi_re"] = rng.standard_normal(P["psi_re"].shape)
        P["psi_im"] = rng.standard_normal(P["psi_im"].shape)
    return P


def test_shared_net_neutral_is_reshape(rng):
    cfg = tiny_config()
    B, C, T = cfg.B, 2 * cfg.M_RF, cfg.Q_tr
    P = shared_params(rng, B, C, T, C * T, neutral=True)
    Om = rng.standard_normal((2, B, C, T))
    out = E.shared_net_forward((tp := ParamTape()).const(Om), consts(P, tp), cfg).value
    np.testing.assert_allclose(out, Om.reshape(2, B, C * T), atol=1e-12)


def test_constant_input_ignores_non_dc_filter(rng):
    B, C, T = 2, 4, 6
    X = np.full((1, B, C, T), 1.7)
    P = shared_params(rng, B, C, T, C * T, neutral=True)
    P["psi_re"] = rng.standard_normal(P["psi_re"].shape)
    P["psi_im"] = rng.standard_normal(P["psi_im"].shape)
    P["psi_re"][..., 0, 0], P["psi_im"][..., 0, 0] = 1.0, 0.0
    out = E.spectral_filter((tp := ParamTape()).const(X), consts(P, tp)).value
    np.testing.assert_allclose(out, X, atol=1e-12)


@given(st.integers(0, 2 ** 31), st.sampled_from([2, 4, 6]), st.sampled_from([2, 3, 4]))
def test_half_spectrum_equals_full_spectrum(seed, T, C):
    rng = np.random.default_rng(seed)
    B = 2
    X = rng.standard_normal((1, B, C, T))
    P = shared_params(rng, B, C, T, C * T)
    got = E.spectral_filter((tp := ParamTape()).const(X), consts(P, tp)).value
    # full-spectrum reference: extend the filter by conjugate symmetry, filter, invert
    psi = P["psi_re"] + 1j * P["psi_im"]
    full = np.zeros((B, C, T), complex)
    full[..., : T // 2 + 1] = psi
    for k1 in range(C):
        for k2 in range(T // 2 + 1, T):
            full[:, k1, k2] = np.conj(psi[:, (-k1) % C, T - k2])
    # bins that are their own mirror only keep the Hermitian part of the filter
    Z = np.fft.fft2(X[0])
    want = np.real(np.fft.ifft2(Z * full))
    half = np.fft.irfft2(np.fft.rfft2(X[0]) * psi, s=(C, T))
    np.testing.assert_allclose(got[0], half, atol=1e-10)
    herm = np.zeros_like(full)
    for k1 in range(C):
        for k2 in range(T):
            herm[:, k1, k2] = 0.5 * (full[:, k1, k2] + np.conj(full[:, (-k1) % C, (-k2) % T]))
    np.testing.assert_allclose(got[0], np.real(np.fft.ifft2(Z * herm)), atol=1e-10)
    if np.allclose(full, herm):
        np.testing.assert_allclose(got[0], want, atol=1e-10)


# heads ------------------------------------------------------------------------------------

@pytest.mark.parametrize("arch", bf.ARCHS)
def test_zero_heads_give_reference_design(arch):
    cfg = tiny_config()
    tp = ParamTape()
    P = consts({k: np.zeros(v) for k, v in E._head_shapes(arch, cfg).items()}, tp)
    Phi = tp.const(np.random.default_rng(0).standard_normal((1, cfg.B, cfg.N)))
    raw = {k: v.value[0] for k, v in E.subnets_forward(Phi, P, arch, cfg).items()}
    pre, ris = bf.project_constraints(raw, arch, cfg)
    np.testing.assert_array_equal(pre.ps_phases, 0)
    np.testing.assert_allclose(pre.ttd_delays, cfg.t_max / 2)
    if arch == "ttd-ris":
        np.testing.assert_allclose(ris.nu, cfg.t_max / 2)
        np.testing.assert_array_equal(ris.theta1, 0)
        np.testing.assert_array_equal(ris.theta2, 0)
    else:
        np.testing.assert_array_equal(bf.ris_coefficients(ris, cfg), 1 + 0j)
    # F_BB is the same normalized constant on every subcarrier
    np.testing.assert_allclose(pre.digital[0], pre.digital[-1])
    for b in range(cfg.B):
        assert np.linalg.norm(bf.bs_effective_precoder(pre, b, cfg)) ** 2 == pytest.approx(cfg.power, rel=1e-10)


def test_sa_ris_group_bijection():
    cfg = tiny_config()
    shapes = E._head_shapes("sa-ris", cfg)
    n_per = cfg.N // cfg.B
    seen = []
    for b in range(cfg.B):
        for j in range(n_per):
            p = {k: np.zeros(v) for k, v in shapes.items()}
            p["th_b"][b, j] = 1.0
            tp = ParamTape()
            Phi = tp.const(np.zeros((1, cfg.B, cfg.N)))
            th = E.subnets_forward(Phi, consts(p, tp), "sa-ris", cfg)["theta"].value[0]
            (hit,) = np.nonzero(th)
            assert len(hit) == 1
            assert bf.sa_group_of_element(cfg)[hit[0]] == b
            seen.append(hit[0])
    assert sorted(seen) == list(range(cfg.N))


# forward / gradients ------------------------------------------------------------------------

@pytest.mark.parametrize("arch", bf.ARCHS)
def test_pilot_combiners_constant_modulus(arch):
    cfg, _, params, _ = tiny_setup(arch)
    W, sched = E.ul_realize(consts(params), arch, cfg)
    assert np.max(np.abs(np.abs(W.value) - 1 / np.sqrt(cfg.M))) < 1e-12
    assert np.max(np.abs(np.abs(sched.value) - 1)) < 1e-12


def test_e2e_matches_numpy_rate_path():
    cfg, chans, params, noise = tiny_setup("ttd-ris")
    out = E.e2e_forward(consts(params), stack_channels(chans), "ttd-ris", cfg, 10.0, noise)
    for s, c in enumerate(chans):
        raw = {k: v.value[s] for k, v in out["raw"].items()}
        pre, ris = bf.project_constraints(raw, "ttd-ris", cfg)
        A = np.stack([bf.bs_effective_precoder(pre, b, cfg) for b in range(cfg.B)])
        r = rt.realized_rates(c, A, bf.ris_coefficients(ris, cfg), cfg.P_t, cfg.sigma0_sq, cfg.N_s)
        want = rt.effective_se(r, cfg.Q, cfg.Q_tr, cfg.L_CP, cfg.B)
        assert out["se"].value[s] == pytest.approx(want, rel=1e-12)


def test_e2e_observation_matches_uplink_model():
    cfg, chans, params, noise = tiny_setup("classic")
    P = consts(params)
    W, sched = E.ul_realize(P, "classic", cfg)
    E_save = E.INPUT_NORM
    try:
        E.INPUT_NORM = "sigma"
        X = E.observe(P, "classic", cfg, *reversed(stack_channels(chans)), noise=noise, snr_r_db=5.0).value
    finally:
        E.INPUT_NORM = E_save
    for s, c in enumerate(chans):
        sch = np.broadcast_to(sched.value, (cfg.Q_tr, cfg.B, cfg.N))
        sig2 = rt.uplink_noise_sigma(c, W.value, sch, 5.0)
        Y = rt.uplink_pilot_observe(c, sch, W.value, np.ones((cfg.Q_tr, cfg.B, cfg.U)), sig2,
                                    noise=noise[s])
        np.testing.assert_allclose(X[s], rt.complex_to_real_stack(Y / np.sqrt(sig2)), atol=1e-10)


def test_zero_channels_give_zero_se():
    cfg, chans, params, noise = tiny_setup("classic")
    z = [ChannelSet(0 * c.D, 0 * c.G, 0 * c.H, {}) for c in chans]
    se = E.evaluate(params, z, "classic", cfg, 10.0, noise=noise)
    np.testing.assert_array_equal(se, 0.0)


def test_full_overhead_gives_zero_se():
    cfg = tiny_config().replace(Q=4, Q_tr=4)
    chans = [scenario_channels(cfg, 0, 0)]
    params = E.init_params("classic", cfg, np.random.default_rng(0))
    assert E.evaluate(params, chans, "classic", cfg, 10.0, rng=np.random.default_rng(0))[0] == 0.0


def test_forward_bitwise_reproducible():
    cfg, chans, params, noise = tiny_setup("ideal")
    a = E.evaluate(params, chans, "ideal", cfg, 10.0, noise=noise)
    b = E.evaluate(params, chans, "ideal", cfg, 10.0, noise=noise)
    assert a.tobytes() == b.tobytes()


def test_full_loss_gradient_check():
    t0 = time.perf_counter()
    errs = gradcheck()
    assert max(errs.values()) < 1e-5, {k: v for k, v in errs.items() if v >= 1e-5}
    groups = {k for _, k in errs}
    for g in ("ul_w", "ul_theta", "ul_nu", "psa_wz", "psi_re", "psi_im", "mlp_w1", "proj_W",
              "ps_W", "ttd_W", "bb_W", "th_W", "th1_W", "nu_W"):
        assert g in groups
    assert time.perf_counter() - t0 < 60


def test_frozen_batch_descent_is_monotone():
    cfg, chans, params, noise = tiny_setup("classic")
    batch = stack_channels(chans)
    state = ad.AdamState(lr=1e-5)
    prev = np.inf
    for _ in range(50):
        loss, grads, _ = E.loss_and_grads(params, batch, "classic", cfg, 10.0, noise)
        assert loss <= prev + 1e-9
        prev = loss
        params = ad.adam_step(params, grads, state)


# training -----------------------------------------------------------------------------------

def test_split_dataset():
    tr, va = E.split_dataset(20, 0.25, 0)
    assert len(va) == 5 and len(tr) == 15 and not set(tr) & set(va)
    np.testing.assert_array_equal(E.split_dataset(1, 0.25, 0)[0], [0])
    with pytest.raises(ValueError):
        E.split_dataset(0, 0.25, 0)


def test_zero_learning_rate_freezes_everything():
    cfg = tiny_config()
    data = [scenario_channels(cfg, i, 0) for i in range(4)]
    hyper = TrainConfig(lr=0.0, epochs=3, iters_per_epoch=2, batch_size=2)
    p0 = E.init_params("classic", cfg, np.random.default_rng([hyper.seed, 3]))
    res = E.train(data, "classic", cfg, hyper)
    for k in p0:
        np.testing.assert_array_equal(res.params[k], p0[k])
    vals = {row["val_loss"] for row in res.history}
    assert len(vals) == 1


def test_training_is_deterministic(tmp_path):
    cfg = tiny_config()
    data = [scenario_channels(cfg, i, 0) for i in range(4)]
    hyper = TrainConfig(epochs=2, iters_per_epoch=3, batch_size=2)
    a = E.train(data, "ttd-ris", cfg, hyper)
    b = E.train(data, "ttd-ris", cfg, hyper)
    assert a.history_csv() == b.history_csv()
    rows = E.parse_history_csv(a.history_csv())
    assert [r["epoch"] for r in rows] == [1, 2]
    assert a.history_csv().splitlines()[0] == ",".join(E.HISTORY_COLUMNS)
    E.save_checkpoint(tmp_path / "c.nfck", a, "ttd-ris", cfg, hyper)
    header, c = E.load_checkpoint(tmp_path / "c.nfck")
    assert header["arch"] == "ttd-ris" and header["config_hash"] == cfg.hash()
    assert c.iteration == a.iteration == 6 and c.adam.t == 6
    for k in a.params:
        assert c.params[k].tobytes() == a.params[k].tobytes()
        assert c.adam.m[k].tobytes() == a.adam.m[k].tobytes()


def test_single_scenario_overfit_beats_random():
    cfg = tiny_config()
    data = [scenario_channels(cfg, 0, 3)]
    hyper = TrainConfig(lr=1e-2, epochs=20, iters_per_epoch=25, batch_size=1, snr_r_fixed=10.0)
    res = E.train(data, "classic", cfg, hyper)
    se = E.evaluate(res.params, data, "classic", cfg, 10.0, rng=np.random.default_rng(0),
                    sigma_sq=cfg.P_t / rt.db2lin(hyper.snr_t_db))[0]
    rnd = bl.random_baseline(data[0], "classic", cfg, np.random.default_rng(1), trials=100,
                             sigma_sq=cfg.P_t / rt.db2lin(hyper.snr_t_db))
    assert se >= 1.2 * rnd["median"]


def test_non_finite_loss_aborts():
    cfg, chans, params, noise = tiny_setup("classic")
    params = dict(params, proj_b=np.full_like(params["proj_b"], np.nan))
    with pytest.raises(ad.NumericalError):
        E.loss_and_grads(params, stack_channels(chans), "classic", cfg, 10.0, noise)
