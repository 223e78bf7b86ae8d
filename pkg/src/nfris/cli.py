"""Batch entry point: gen, train, eval, baseline, beamsplit, gradcheck, report.

Every command writes into a fresh output directory (built in a temporary sibling
and renamed into place) together with a manifest.json that records the config
hash, seed and package versions. No timestamps are written, so reruns with the
same config and seed are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import platform
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import autodiff as ad
from . import baseline as bl
from . import beamform as bf
from . import e2enet as E
from .autodiff import NumericalError
from .channel import ChannelSet, scenario_channels, stack_channels
from .scenario import (ConfigError, SystemConfig, TrainConfig, build_geometry, desk_config, dump_config,
                       load_config)

RESULT_COLUMNS = ("arch", "snr_t_db", "snr_r_db", "bandwidth_hz", "se_mean", "se_std", "n_scenarios", "seed")
PROFILE_COLUMNS = ("design", "side", "b", "freq_hz", "gain")
SWEEP_AXES = ("snr_t_db", "snr_r_db", "bandwidth_hz")
EVAL_OFFSET = 1_000_000   # evaluation scenarios never overlap generated training indices


# helpers ----------------------------------------------------------------------------------

def parse_sweep(text: str | None) -> tuple[str, list[float]] | None:
    """'axis=start:step:stop' (inclusive stop); start > stop gives an empty sweep."""
    if text is None:
        return None
    try:
        axis, rng = text.split("=", 1)
        start, step, stop = (float(x) for x in rng.split(":"))
    except ValueError as exc:
        raise ConfigError(f"bad --sweep {text!r}; expected axis=start:step:stop") from exc
    axis = axis.strip()
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}")
    if step <= 0:
        raise ConfigError("sweep step must be positive")
    n = int(np.floor((stop - start) / step + 1e-9)) + 1 if stop >= start else 0
    return axis, [start + i * step for i in range(n)]


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def read_results_csv(path) -> list[dict]:
    """Parse a results CSV, checking its schema."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
        fh.seek(0)
        header = next(csv.reader(fh), None)
    if header is None or tuple(header) != RESULT_COLUMNS:
        raise ValueError(f"{path}: unexpected columns {header}")
    out = []
    for r in rows:
        d = {k: float(r[k]) for k in ("snr_t_db", "snr_r_db", "bandwidth_hz", "se_mean", "se_std")}
        d.update(arch=r["arch"], n_scenarios=int(r["n_scenarios"]), seed=int(r["seed"]))
        out.append(d)
    return out


def manifest(command: str, config: SystemConfig, seed: int, extra: dict | None = None) -> dict:
    m = {"command": command, "config_hash": config.hash(), "seed": seed,
         "versions": {"nfris": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                      "python": platform.python_version()}}
    if extra:
        m.update(extra)
    return m


class OutDir:
    """Builds the output in a temporary sibling and renames it into place on success."""

    def __init__(self, path: str | Path):
        self.final = Path(path)
        self.final.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.final.name}.", dir=self.final.parent))

    def __enter__(self) -> Path:
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if self.final.exists():
            shutil.rmtree(self.final)
        os.replace(self.tmp, self.final)
        return False


def write_manifest(out: Path, m: dict) -> None:
    (out / "manifest.json").write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")


def _gen_one(args):
    config, index, seed = args
    return scenario_channels(config, index, seed)


def pmap(fn, items, workers: int):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def synth(config: SystemConfig, count: int, seed: int, workers: int, offset: int = 0) -> list[ChannelSet]:
    return pmap(_gen_one, [(config, offset + i, seed) for i in range(count)], workers)


def load_dataset(path: str | Path, config: SystemConfig) -> list[ChannelSet]:
    root = Path(path)
    index = root / "index.csv"
    if not index.exists():
        raise ConfigError(f"{root}: no dataset index")
    m = json.loads((root / "manifest.json").read_text())
    if m["config_hash"] != config.hash():
        raise ConfigError(f"{root}: dataset was generated with a different config")
    with open(index, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [ChannelSet.load(root / r["file"]) for r in rows]


def _configs(args) -> tuple[SystemConfig, TrainConfig]:
    if args.config is None:
        return desk_config(), TrainConfig()
    return load_config(args.config)


def _archs(text: str, config: SystemConfig, allow_ideal=True) -> list[str]:
    archs = list(bf.ARCHS) if text == "all" else [a.strip() for a in text.split(",")]
    for a in archs:
        if a not in bf.ARCHS:
            raise ConfigError(f"unknown architecture {a!r}")
        if a == "ideal" and not allow_ideal:
            raise ConfigError("the ideal relaxation is a PGD-only benchmark")
        config.check_arch(a)
    return archs


# commands -------------------------------------------------------------------------------

def cmd_gen(args) -> None:
    config, train = _configs(args)
    chans = synth(config, args.count, args.seed, args.workers)
    tr, va = E.split_dataset(args.count, train.val_fraction, args.seed) if args.count else ([], [])
    split = {int(i): "train" for i in tr}
    split.update({int(i): "val" for i in va})
    with OutDir(args.out) as out:
        rows = []
        for i, c in enumerate(chans):
            name = f"scenario_{i:05d}.nfc"
            c.save(out / name)
            ue = c.meta.get("ue_center", [np.nan] * 3)
            rows.append((i, name, split.get(i, "train"), float(ue[0]), float(ue[1]), float(ue[2])))
        write_csv(out / "index.csv", ("index", "file", "split", "ue_x", "ue_y", "ue_z"), rows)
        (out / "config.ini").write_text(dump_config(config, train))
        write_manifest(out, manifest("gen", config, args.seed, {"count": args.count}))
    print(f"wrote {len(chans)} scenarios to {args.out}")


def cmd_train(args) -> None:
    config, train = _configs(args)
    arch = _archs(args.arch, config, allow_ideal=True)
    if len(arch) != 1:
        raise ConfigError("train takes exactly one architecture")
    arch = arch[0]
    train = _replace(train, seed=args.seed)
    if args.epochs is not None:
        train = _replace(train, epochs=args.epochs)
    data = load_dataset(args.data, config) if args.data else synth(config, args.count, args.seed, args.workers)
    log = (lambda r: print(f"epoch {r['epoch']:4d}  train {r['train_loss']:.4f}  val {r['val_loss']:.4f}",
                           flush=True)) if args.verbose else None
    result = E.train(data, arch, config, train, log=log)
    with OutDir(args.out) as out:
        E.save_checkpoint(out / "checkpoint.nfck", result, arch, config, train)
        (out / "history.csv").write_text(result.history_csv())
        (out / "config.ini").write_text(dump_config(config, train))
        write_manifest(out, manifest("train", config, args.seed,
                                     {"arch": arch, "iterations": result.iteration, "n_scenarios": len(data)}))
    print(f"trained {arch}: final validation SE {result.history[-1]['mean_SE']:.4f}" if result.history
          else f"trained {arch}: no epochs")


def _replace(cfg, **kw):
    return dataclasses.replace(cfg, **kw)


def _eval_point(job):
    params, arch, config, snr_t, snr_r, indices, seed, data = job
    chans = ([data[i] for i in indices] if data is not None
             else [scenario_channels(config, EVAL_OFFSET + i, seed) for i in indices])
    # pilot noise keyed by (seed, SNR_R, scenario) so the worker split is irrelevant
    key = int(round(snr_r * 1000)) % (2**31)
    noise = np.concatenate([E.noise_draw(np.random.default_rng([seed, key, 5, i]), 1, config)
                            for i in indices]) if indices else None
    sigma_sq = config.P_t / 10 ** (snr_t / 10)
    return E.evaluate(params, chans, arch, config, snr_r, noise=noise, sigma_sq=sigma_sq)


def _sweep_points(args, train: TrainConfig, config: SystemConfig):
    base = {"snr_t_db": train.snr_t_db, "snr_r_db": train.val_snr_r_db, "bandwidth_hz": config.W}
    sweep = parse_sweep(args.sweep)
    if sweep is None:
        return [base]
    axis, values = sweep
    return [dict(base, **{axis: v}) for v in values]


def cmd_eval(args) -> None:
    config, train = _configs(args)
    header, result = E.load_checkpoint(args.checkpoint)
    arch = header["arch"]
    if header["config_hash"] != config.hash():
        raise ConfigError("checkpoint was trained with a different config")
    data = load_dataset(args.data, config) if args.data else None
    rows = []
    for pt in _sweep_points(args, train, config):
        cfg = config.replace(W=pt["bandwidth_hz"]) if pt["bandwidth_hz"] != config.W else config
        d = data if cfg is config else None
        if data is not None and d is None:
            raise ConfigError("bandwidth sweeps synthesize their own scenarios; omit --data")
        jobs = _eval_chunks(result.params, arch, cfg, pt, args, d)
        se = np.concatenate(pmap(_eval_point, jobs, args.workers)) if jobs else np.zeros(0)
        rows.append((arch, pt["snr_t_db"], pt["snr_r_db"], pt["bandwidth_hz"], float(se.mean()),
                     float(se.std()), int(se.size), args.seed))
    with OutDir(args.out) as out:
        write_csv(out / "results.csv", RESULT_COLUMNS, rows)
        write_manifest(out, manifest("eval", config, args.seed, {"arch": arch, "sweep": args.sweep}))
    for r in rows:
        print(f"{r[0]:8s} snr_t={r[1]:6.2f} snr_r={r[2]:6.2f} W={r[3]:.3e}  SE={r[4]:.4f}")


def _eval_chunks(params, arch, cfg, pt, args, data):
    n = len(data) if data is not None else args.count
    parts = [list(c) for c in np.array_split(np.arange(n), max(1, args.workers)) if len(c)]
    return [(params, arch, cfg, pt["snr_t_db"], pt["snr_r_db"], [int(i) for i in c], args.seed, data)
            for c in parts]


def _baseline_rows(method, archs, config, chans, pt, args):
    rows = []
    sigma_sq = config.P_t / 10 ** (pt["snr_t_db"] / 10)
    if method in ("pgd", "both"):
        suite = bl.pgd_suite(chans, config, np.random.default_rng([args.seed, 11]), archs=tuple(archs),
                             steps=args.steps, sigma_sq=sigma_sq)
        for a in archs:
            se = suite[a].se
            rows.append((f"pgd:{a}", pt["snr_t_db"], float("nan"), pt["bandwidth_hz"],
                         float(se.mean()), float(se.std()), int(se.size), args.seed))
    if method in ("random", "both"):
        for a in archs:
            se = np.array([bl.random_baseline(c, a, config, np.random.default_rng([args.seed, 13, i]),
                                              trials=args.trials, sigma_sq=sigma_sq)["median"]
                           for i, c in enumerate(chans)])
            rows.append((f"random:{a}", pt["snr_t_db"], float("nan"), pt["bandwidth_hz"],
                         float(se.mean()), float(se.std()), int(se.size), args.seed))
    return rows


def cmd_baseline(args) -> None:
    config, train = _configs(args)
    archs = _archs(args.arch, config)
    data = load_dataset(args.data, config) if args.data else None
    rows = []
    for pt in _sweep_points(args, train, config):
        if pt["snr_r_db"] != train.val_snr_r_db and args.sweep and args.sweep.startswith("snr_r_db"):
            raise ConfigError("perfect-CSI baselines do not depend on snr_r_db")
        cfg = config.replace(W=pt["bandwidth_hz"]) if pt["bandwidth_hz"] != config.W else config
        chans = data if (data is not None and cfg is config) else synth(cfg, args.count, args.seed,
                                                                         args.workers, EVAL_OFFSET)
        rows.extend(_baseline_rows(args.method, archs, cfg, chans, pt, args))
    with OutDir(args.out) as out:
        write_csv(out / "results.csv", RESULT_COLUMNS, rows)
        write_manifest(out, manifest("baseline", config, args.seed,
                                     {"method": args.method, "archs": archs, "steps": args.steps}))
    for r in rows:
        print(f"{r[0]:16s} snr_t={r[1]:6.2f} W={r[3]:.3e}  SE={r[4]:.4f}")


def _parse_point(text, default):
    if text is None:
        return np.asarray(default, float)
    try:
        p = np.array([float(x) for x in text.split(",")])
    except ValueError as exc:
        raise ConfigError(f"bad point {text!r}") from exc
    if p.shape != (3,):
        raise ConfigError("points need three coordinates x,y,z")
    return p


def cmd_beamsplit(args) -> None:
    config, _ = _configs(args)
    geo = build_geometry(config)
    focal = _parse_point(args.focal, geo.ue_center)
    bs_focal = _parse_point(args.bs_focal, geo.ris_center)
    fb = config.subcarrier_freqs()
    rows = []
    flat_ris = bf.RisState("classic", theta=np.zeros(config.N))
    designs = [("ps-only", "bs", bl.focused_ps_precoder(geo, bs_focal, config), flat_ris),
               ("ttd", "bs", bl.ttd_focused_precoder(geo, bs_focal, config), flat_ris)]
    ps = designs[0][2]
    designs += [("classic", "ris", ps, bl.focused_ris_state(geo, focal, config, "classic")),
                ("ttd-ris", "ris", ps, bl.focused_ris_state(geo, focal, config, "ttd-ris"))]
    for name, side, pre, ris in designs:
        target = bs_focal if side == "bs" else focal
        prof = bl.beam_gain_profile(bf.BeamformerState(pre, ris), geo, target, config, side=side, arch=name)
        rows += [(name, side, b, f, g) for b, f, g in prof.rows(fb)]
    with OutDir(args.out) as out:
        write_csv(out / "profile.csv", PROFILE_COLUMNS, rows)
        write_manifest(out, manifest("beamsplit", config, args.seed, {"focal": focal.tolist(), "bs_focal": bs_focal.tolist()}))
    for name in dict.fromkeys(r[0] for r in rows):
        g = [r[4] for r in rows if r[0] == name]
        print(f"{name:8s} min {min(g):.4f}  max {max(g):.4f}")


def tiny_config() -> SystemConfig:
    """The small configuration the gradient checks run at."""
    return SystemConfig(B=2, M=4, N1=2, N2=2, U=1, M_RF=2, K=2, S1=2, S2=1, Q_tr=4, N_s=1, Q=64,
                        t_max=5e-11)


def gradcheck(archs=bf.ARCHS, eps: float = 1e-6, seed: int = 0, dump: io.TextIOBase | None = None) -> dict:
    """Tape gradient of -effective SE vs central differences at the tiny config.

    Returns the worst relative error per (arch, parameter group).
    """
    config = tiny_config()
    chans = [scenario_channels(config, i, seed) for i in range(2)]
    batch = stack_channels(chans)
    errors = {}
    for arch in archs:
        rng = np.random.default_rng([seed, 21])
        params = E.init_params(arch, config, rng)
        params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in params.items()}
        noise = E.noise_draw(rng, len(chans), config)
        _, grads, _ = E.loss_and_grads(params, batch, arch, config, 10.0, noise)

        def loss(p):
            tape = ad.ParamTape()
            P = {k: tape.const(v) for k, v in p.items()}
            return float(E.e2e_forward(P, batch, arch, config, 10.0, noise)["loss"].value)

        num = ad.finite_diff_grad(loss, params, eps=eps)
        for k in params:
            errors[(arch, k)] = ad.grad_rel_error(grads[k], num[k])
            if dump is not None:
                scale = max(np.abs(grads[k]).max(), np.abs(num[k]).max(), 1e-12)
                for idx in np.ndindex(params[k].shape):
                    a, n = grads[k][idx], num[k][idx]
                    dump.write(f"{arch}\t{k}\t{list(idx)}\t{a:.12e}\t{n:.12e}\t{abs(a - n) / scale:.3e}\n")
    return errors


def cmd_gradcheck(args) -> None:
    archs = _archs(args.arch, tiny_config())
    buf = io.StringIO() if args.dump else None
    errors = gradcheck(archs, eps=args.eps, seed=args.seed, dump=buf)
    worst = max(errors.values())
    with OutDir(args.out) as out:
        lines = [f"{a}\t{k}\t{e:.3e}" for (a, k), e in sorted(errors.items())]
        (out / "gradcheck.txt").write_text("arch\tparam\tmax_rel_err\n" + "\n".join(lines) + "\n")
        if buf is not None:
            (out / "gradient_dump.tsv").write_text("arch\tparam\tindex\tanalytic\tnumeric\trel_err\n"
                                                   + buf.getvalue())
        write_manifest(out, manifest("gradcheck", tiny_config(), args.seed, {"max_rel_err": worst}))
    print(f"max relative gradient error {worst:.3e} over {len(errors)} parameter groups")
    if worst >= args.tol:
        raise NumericalError(f"gradient check failed: {worst:.3e} >= {args.tol:g}")


def cmd_report(args) -> None:
    paths = sorted(Path(p) for p in args.inputs)
    lines = ["# Results", ""]
    for p in paths:
        files = sorted(p.rglob("results.csv")) if p.is_dir() else [p]
        for f in files:
            rows = read_results_csv(f)
            lines += [f"## {f}", "", "| arch | SNR_T (dB) | SNR_R (dB) | W (GHz) | SE mean | SE std | n |",
                      "|---|---|---|---|---|---|---|"]
            lines += [f"| {r['arch']} | {r['snr_t_db']:g} | {r['snr_r_db']:g} | {r['bandwidth_hz'] / 1e9:g} | "
                      f"{r['se_mean']:.4f} | {r['se_std']:.4f} | {r['n_scenarios']} |" for r in rows]
            lines.append("")
        for f in (sorted(p.rglob("history.csv")) if p.is_dir() else []):
            hist = E.parse_history_csv(f.read_text())
            if hist:
                lines += [f"## {f}", "", f"epochs: {len(hist)}, final validation SE: {hist[-1]['mean_SE']:.4f}", ""]
    text = "\n".join(lines) + "\n"
    with OutDir(args.out) as out:
        (out / "report.md").write_text(text)
    print(text)


# parser ---------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nfris", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, arch_default="classic"):
        sp.add_argument("--config", help="INI config file (defaults: desk scale)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=True, help="output directory (replaced atomically)")
        sp.add_argument("--arch", default=arch_default, help="classic | ttd-ris | sa-ris | ideal, comma list or 'all'")
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--sweep", help="axis=start:step:stop with axis in " + ", ".join(SWEEP_AXES))
        return sp

    sp = common(sub.add_parser("gen", help="generate a channel dataset"))
    sp.add_argument("--count", type=int, default=64)
    sp.set_defaults(func=cmd_gen)

    sp = common(sub.add_parser("train", help="train an end-to-end model"))
    sp.add_argument("--data", help="dataset directory from 'gen' (default: synthesize --count scenarios)")
    sp.add_argument("--count", type=int, default=200)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--verbose", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("eval", help="evaluate a checkpoint over a sweep"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", help="dataset directory (default: synthesize held-out scenarios)")
    sp.add_argument("--count", type=int, default=30)
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("baseline", help="perfect-CSI PGD and random baselines"), "all")
    sp.add_argument("--method", choices=("pgd", "random", "both"), default="both")
    sp.add_argument("--data")
    sp.add_argument("--count", type=int, default=30)
    sp.add_argument("--steps", type=int, default=500)
    sp.add_argument("--trials", type=int, default=20)
    sp.set_defaults(func=cmd_baseline)

    sp = common(sub.add_parser("beamsplit", help="per-subcarrier beam gain profiles"))
    sp.add_argument("--focal", help="RIS-side focal point x,y,z in metres (default: UE region center)")
    sp.add_argument("--bs-focal", help="BS-side focal point x,y,z in metres (default: RIS center)")
    sp.set_defaults(func=cmd_beamsplit)

    sp = common(sub.add_parser("gradcheck", help="finite-difference check of the end-to-end gradient"), "all")
    sp.add_argument("--eps", type=float, default=1e-6)
    sp.add_argument("--tol", type=float, default=1e-5)
    sp.add_argument("--dump", action="store_true", help="also write the per-coordinate gradient dump")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("report", help="summarize results.csv / history.csv files as markdown")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    return 0
