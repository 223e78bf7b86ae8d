"""Beam split at the BS and at the RIS, and how true-time delays undo it.

A phase-shifter-only design is exact at the carrier and drifts off the focal point
at the band edges. A TTD design follows the frequency and stays flat. The bandwidth
to carrier ratio is 7/73.
"""

import numpy as np

from nfris import baseline as bl
from nfris import beamform as bf
from nfris.scenario import SystemConfig, build_geometry


def bar(x: float, width: int = 40) -> str:
    return "#" * int(round(x * width))


def show(title, freqs, values) -> None:
    print(title)
    for f, v in zip(freqs, values):
        print(f"  {f / 1e9:6.2f} GHz  {v:.3f} {bar(v)}")


def main() -> None:
    cfg = SystemConfig(M=64, K=8, M_RF=2, N_s=1, B=9, W=7e9, f_c=73e9, t_max=1e-9,
                       N1=32, N2=32, S1=16, S2=16)
    geo = build_geometry(cfg)
    freqs = cfg.subcarrier_freqs()
    focal = geo.bs_center + 3.0 * np.array([np.sin(np.radians(30)), np.cos(np.radians(30)), 0.0])
    flat = bf.RisState("classic", theta=np.zeros(cfg.N))
    for name, pre in (("BS, phase shifters only", bl.focused_ps_precoder(geo, focal, cfg)),
                      ("BS, with TTDs", bl.ttd_focused_precoder(geo, focal, cfg))):
        show(name, freqs, bl.beam_gain_profile(bf.BeamformerState(pre, flat), geo, focal, cfg).values)

    pre = bl.focused_ps_precoder(geo, geo.ris_center, cfg)
    for arch in ("classic", "ttd-ris"):
        ris = bl.focused_ris_state(geo, geo.ue_center, cfg, arch)
        prof = bl.beam_gain_profile(bf.BeamformerState(pre, ris), geo, geo.ue_center, cfg, side="ris")
        show(f"RIS, {arch}", freqs, prof.values)


if __name__ == "__main__":
    main()
