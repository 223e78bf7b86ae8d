import numpy as np
import pytest
from nfris.autodiff import ParamTape
from hypothesis import given, strategies as st

from nfris import beamform as bf
from nfris.beamform import BeamformerState, BsPrecoder, RisState
from nfris.scenario import SystemConfig

from conftest import small


def cfg_ris(**kw):
    base = dict(M=4, K=2, M_RF=2, N_s=1, B=2, N1=2, N2=2, S1=2, S2=1, U=1)
    base.update(kw)
    return SystemConfig(**base)


def test_ttd_examples():
    T = bf.ttd_analog_matrix(np.zeros((2, 3)), 73e9)
    assert T.shape == (6, 2)
    np.testing.assert_array_equal(T[T != 0], 1.0)
    T = bf.ttd_analog_matrix(np.array([[2e-9]]), 1e9)
    assert T[0, 0] == pytest.approx(1.0, abs=1e-12)
    T = bf.ttd_analog_matrix(np.array([[0.25e-9]]), 1e9)
    assert T[0, 0] == pytest.approx(-1j, abs=1e-15)
    with pytest.raises(ValueError):
        bf.ttd_analog_matrix(np.array([[2e-9]]), 1e9, t_max=1e-9)


def test_ttd_block_structure():
    d = np.random.default_rng(0).uniform(0, 1e-9, (3, 2))
    T = bf.ttd_analog_matrix(d, 5e9)
    mask = np.zeros((6, 3), bool)
    for r in range(3):
        mask[2 * r:2 * r + 2, r] = True
    np.testing.assert_array_equal(T != 0, mask)


def test_ps_examples():
    cfg = SystemConfig(M=4, K=2, M_RF=1, N_s=1)
    F = bf.ps_analog_matrix(np.random.default_rng(1).uniform(-3, 3, 4), cfg)
    want = np.array([[1, 0], [1, 0], [0, 1], [0, 1]], bool)
    np.testing.assert_array_equal(F != 0, want)
    np.testing.assert_allclose(np.abs(F[want]), 1.0, atol=1e-15)
    cfg = SystemConfig(M=4, K=2, M_RF=2, N_s=1)
    F = bf.ps_analog_matrix(np.zeros(4), cfg)
    np.testing.assert_array_equal(F, np.eye(4))
    with pytest.raises(ValueError):
        bf.ps_analog_matrix(np.zeros(3), cfg)


def _rand_precoder(cfg, rng):
    return BsPrecoder(rng.uniform(-np.pi, np.pi, cfg.M), rng.uniform(0, cfg.t_max, (cfg.M_RF, cfg.K)),
                      rng.standard_normal((cfg.B, cfg.M_RF, cfg.N_s))
                      + 1j * rng.standard_normal((cfg.B, cfg.M_RF, cfg.N_s)))


def test_effective_precoder_examples(rng):
    cfg = SystemConfig(M=1, K=1, M_RF=1, N_s=1, B=2)
    pre = BsPrecoder(np.array([0.4]), np.array([[1e-10]]), np.array([[[0.5 - 0.2j]], [[1.0]]]))
    f = cfg.subcarrier_freqs()[1]
    A = bf.bs_effective_precoder(pre, 1, cfg)
    assert A[0, 0] == pytest.approx(np.exp(0.4j) * np.exp(-2j * np.pi * f * 1e-10) * 1.0)
    cfg = SystemConfig(M=8, K=2, M_RF=2, N_s=2, B=3)
    pre = _rand_precoder(cfg, rng)
    zero = BsPrecoder(pre.ps_phases, pre.ttd_delays, 0 * pre.digital)
    assert not np.any(bf.bs_effective_precoder(zero, 0, cfg))
    F = bf.ps_analog_matrix(pre.ps_phases, cfg)
    for b in range(cfg.B):
        T = bf.ttd_analog_matrix(pre.ttd_delays, cfg.subcarrier_freqs()[b])
        X = pre.digital[b]
        naive = np.zeros((cfg.M, cfg.N_s), complex)
        for m in range(cfg.M):
            for s in range(cfg.N_s):
                for i in range(F.shape[1]):
                    for r in range(cfg.M_RF):
                        naive[m, s] += F[m, i] * T[i, r] * X[r, s]
        assert np.max(np.abs(bf.bs_effective_precoder(pre, b, cfg) - naive)) < 1e-13


def test_ris_examples():
    cfg = cfg_ris()
    rng = np.random.default_rng(2)
    t1, t2 = rng.uniform(-3, 3, 4), rng.uniform(-3, 3, 4)
    ttd = RisState("ttd-ris", theta1=t1, theta2=t2, nu=np.zeros(cfg.S))
    cl = RisState("classic", theta=t1 + t2)
    np.testing.assert_allclose(bf.ris_coefficients(ttd, cfg), bf.ris_coefficients(cl, cfg), atol=1e-15)

    one = cfg_ris(S1=1, S2=1)
    st_ = RisState("ttd-ris", theta1=np.zeros(4), theta2=np.zeros(4), nu=np.array([3e-11]))
    fb = one.subcarrier_freqs()
    np.testing.assert_allclose(bf.ris_coefficients(st_, one), np.exp(-2j * np.pi * fb[:, None] * 3e-11)
                               * np.ones((2, 4)), atol=1e-15)

    nu = np.array([1e-11, 4e-11])
    st_ = RisState("ttd-ris", theta1=t1, theta2=t2, nu=nu)
    got = bf.ris_coefficients(st_, cfg)
    fb = cfg.subcarrier_freqs()
    for b in range(2):
        for n in range(4):
            s = (n // 2)  # N1=2 rows, S1=2 -> one row per subarray
            want = np.exp(1j * t1[n]) * np.exp(-2j * np.pi * fb[b] * nu[s]) * np.exp(1j * t2[n])
            assert abs(got[b, n] - want) < 1e-15


def test_ris_phase_matrix_is_diagonal():
    cfg = cfg_ris()
    st_ = RisState("classic", theta=np.arange(4.0))
    D = bf.ris_phase_matrix(st_, 1, cfg)
    assert not np.any(D - np.diag(np.diag(D)))
    np.testing.assert_allclose(np.diag(D), np.exp(1j * np.arange(4.0)))


def test_sa_ris_full_panel_each_subcarrier():
    cfg = cfg_ris()
    th = np.array([0.1, 0.2, 0.3, 0.4])
    c = bf.ris_coefficients(RisState("sa-ris", theta=th), cfg)
    np.testing.assert_allclose(c, np.exp(1j * th)[None].repeat(2, 0))
    np.testing.assert_array_equal(bf.sa_group_of_element(cfg), [0, 0, 1, 1])


def test_subarray_map_is_rectangular_tiling():
    cfg = SystemConfig(N1=4, N2=6, S1=2, S2=3)
    s = bf.subarray_of_element(cfg).reshape(4, 6)
    want = np.repeat(np.repeat(np.arange(6).reshape(2, 3), 2, 0), 2, 1)
    np.testing.assert_array_equal(s, want)


def test_project_examples():
    cfg = cfg_ris()
    raw = {k: np.zeros(v) for k, v in bf.raw_shapes("ttd-ris", cfg).items()}
    pre, ris = bf.project_constraints(raw, "ttd-ris", cfg)
    np.testing.assert_allclose(pre.ttd_delays, cfg.t_max / 2)
    np.testing.assert_allclose(ris.nu, cfg.t_max / 2)
    raw = {k: np.zeros(v) for k, v in bf.raw_shapes("classic", cfg).items()}
    pre, ris = bf.project_constraints(raw, "classic", cfg)
    np.testing.assert_array_equal(bf.ris_coefficients(ris, cfg), 1 + 0j)


@pytest.mark.parametrize("arch", bf.ARCHS)
def test_project_power_and_unit_modulus(arch):
    cfg = cfg_ris()
    raw = bf.random_raw(arch, cfg, np.random.default_rng(4))
    pre, ris = bf.project_constraints(raw, arch, cfg)
    for b in range(cfg.B):
        A = bf.bs_effective_precoder(pre, b, cfg)
        assert np.linalg.norm(A) ** 2 == pytest.approx(cfg.power, rel=1e-10)
    assert np.max(np.abs(np.abs(bf.ris_coefficients(ris, cfg)) - 1)) < 1e-12
    F = bf.ps_analog_matrix(pre.ps_phases, cfg)
    assert np.max(np.abs(np.abs(F[F != 0]) - 1)) < 1e-12
    assert np.all((pre.ttd_delays > 0) & (pre.ttd_delays < cfg.t_max))


@given(st.integers(0, 2 ** 31), st.sampled_from(bf.ARCHS))
def test_projection_idempotent(seed, arch):
    cfg = cfg_ris()
    raw = bf.random_raw(arch, cfg, np.random.default_rng(seed))
    pre, ris = bf.project_constraints(raw, arch, cfg)
    pre2, ris2 = bf.project_constraints(bf.unproject(pre, ris, cfg), arch, cfg)
    for b in range(cfg.B):
        np.testing.assert_allclose(bf.bs_effective_precoder(pre2, b, cfg), bf.bs_effective_precoder(pre, b, cfg),
                                   atol=1e-9)
    np.testing.assert_allclose(bf.ris_coefficients(ris2, cfg), bf.ris_coefficients(ris, cfg), atol=1e-9)


@given(st.floats(-40, 40))
def test_delay_box(logit):
    cfg = cfg_ris()
    raw = {k: np.zeros(v) for k, v in bf.raw_shapes("ttd-ris", cfg).items()}
    raw["ttd"][:] = logit
    raw["nu"][:] = logit
    pre, ris = bf.project_constraints(raw, "ttd-ris", cfg)
    assert np.all((pre.ttd_delays >= 0) & (pre.ttd_delays <= cfg.t_max))
    assert np.all((ris.nu >= 0) & (ris.nu <= cfg.t_max))
    if abs(logit) < 30:
        assert np.all((ris.nu > 0) & (ris.nu < cfg.t_max))


def test_frequency_consistency_at_carrier():
    cfg = cfg_ris(B=1, W=1e6)
    fc = cfg.f_c
    assert cfg.subcarrier_freqs()[0] == fc
    t1, t2 = np.full(4, 0.3), np.full(4, -0.1)
    ttd = RisState("ttd-ris", theta1=t1, theta2=t2, nu=np.array([1 / fc, 2 / fc]))
    np.testing.assert_allclose(bf.ris_coefficients(ttd, cfg),
                               bf.ris_coefficients(RisState("classic", theta=t1 + t2), cfg), atol=1e-12)


def test_realize_matches_numpy_builders():
    cfg = SystemConfig(M=8, K=2, M_RF=2, N_s=2, B=3, N1=2, N2=2, S1=2, S2=1)
    raw = bf.random_raw("ttd-ris", cfg, np.random.default_rng(8))
    tape = ParamTape()
    t = {k: tape.const(v) for k, v in raw.items()}
    A = bf.realize_bs(t["ps"], t["ttd"], t["bb_re"], t["bb_im"], cfg)["A"].value
    pre, ris = bf.project_constraints(raw, "ttd-ris", cfg)
    for b in range(cfg.B):
        np.testing.assert_allclose(A[b], bf.bs_effective_precoder(pre, b, cfg), atol=1e-13)
    c = bf.realize_ris(t, "ttd-ris", cfg).value
    np.testing.assert_allclose(c, bf.ris_coefficients(ris, cfg), atol=1e-13)


def test_batched_random_raw_shapes():
    cfg = cfg_ris()
    raw = bf.random_raw("ideal", cfg, np.random.default_rng(0), batch=(5,))
    assert raw["theta"].shape == (5, cfg.B, cfg.N)
    assert raw["bb_re"].shape == (5, cfg.B, cfg.M_RF, cfg.N_s)


def test_state_container_and_text(tmp_path):
    cfg = cfg_ris()
    pre, ris = bf.project_constraints(bf.random_raw("ttd-ris", cfg, np.random.default_rng(0)), "ttd-ris", cfg)
    s = BeamformerState(pre, ris)
    s.save(tmp_path / "s.nfc", cfg)
    t = BeamformerState.load(tmp_path / "s.nfc")
    np.testing.assert_array_equal(t.precoder.digital, pre.digital)
    np.testing.assert_array_equal(t.ris.nu, ris.nu)
    assert t.ris.kind == "ttd-ris" and t.ris.theta is None
    txt = s.text_dump()
    assert "# ttd_delays (ns)" in txt and "# nu (ns)" in txt and "# digital b=2" in txt


def test_unknown_arch():
    with pytest.raises(ValueError):
        bf.raw_shapes("bogus", small())
