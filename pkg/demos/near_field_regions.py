"""Where does the near field end? Rayleigh distances for the BS array and the RIS.

Prints the boundary for the full-scale and desk-scale systems, then checks a few
BS-to-RIS-to-UE distance pairs against the RIS near-field predicate.
"""

from pathlib import Path

import numpy as np

from nfris import scenario as sc

ROOT = Path(__file__).resolve().parents[1]


def describe(name: str, cfg: sc.SystemConfig) -> None:
    lam = cfg.wavelength
    bs = sc.bs_aperture(cfg)
    ris = sc.ris_aperture(cfg)
    print(f"{name}: f_c={cfg.f_c / 1e9:.0f} GHz, d={cfg.d * 1e3:.4f} mm")
    print(f"  BS aperture {bs:.4f} m -> Rayleigh distance {sc.rayleigh_distance(bs, lam):8.2f} m")
    print(f"  RIS aperture {ris:.4f} m -> Rayleigh distance {sc.rayleigh_distance(ris, lam):8.2f} m")
    link = float(np.linalg.norm(np.subtract(cfg.ris_center, cfg.bs_center)))
    inside = link < sc.rayleigh_distance(bs, lam)
    print(f"  RIS at {link:.1f} m from the BS is in the BS {'near' if inside else 'far'} field")
    for r1, r2 in ((0.5, 1.0), (2.0, 3.0), (20.0, 5.0)):
        near = sc.ris_near_field_predicate(r1, r2, ris, lam)
        print(f"  r_BS-RIS={r1:6.1f} m, r_RIS-UE={r2:6.1f} m: {'near' if near else 'far'} field")


def main() -> None:
    full, _ = sc.load_config(ROOT / "configs" / "full.ini")
    describe("full scale", full)
    describe("desk scale", sc.desk_config())
    geo = sc.build_geometry(sc.desk_config())
    print("desk BS antenna x-coordinates (mm):", np.round(geo.bs[:, 0] * 1e3, 3))


if __name__ == "__main__":
    main()
