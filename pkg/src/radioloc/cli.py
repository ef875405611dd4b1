"""Command-line front end.

Every subcommand reads a YAML config, writes CSV/JSON outputs into ``--out``
together with ``manifest.json`` and exits with 0 on success, 1 on config or
validation errors, 2 on numerical failures and 3 on infeasible designs.
Outputs are written only after the whole job has finished.
"""
from __future__ import annotations

import argparse
import hashlib
import io
import json
import os
import sys
import traceback
from pathlib import Path
from typing import Callable

import numpy as np
import yaml

from . import __version__
from .bounds import default_signal, localization_report, table1_sweep, write_table1_csv
from .channel import ImpairmentSpec, synthesize, synthesize_impaired
from .design import (PowerAllocation, PriorRegion, delay_peb, fig4_reproduction, first_sidelobe_db,
                     main_lobe_width, range_profile, write_allocation_csv)
from .errors import ConfigError, InfeasibleDesignError, RadiolocError, ValidationError
from .estimation import (estimate_paths, measurements_from_estimates, multipath_fix, read_measurements_csv,
                         write_measurements_csv)
from .precoding import make_precoder, response_map, write_map_csv
from .presets import PRESETS, fig3_reproduction, split_config
from .scenario import SPEED_OF_LIGHT, ModelFlags, angles_of, geometric_path_params
from .tracking import (MotionModel, TrackRun, TrackState, nees, read_fixes_csv, run_cv_trial,
                       track_position_fixes)

THREADS_ENV = "RADIOLOC_THREADS"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INFEASIBLE = 0, 1, 2, 3
SUBCOMMANDS = ("synth", "response-map", "fim", "table1", "design", "profile", "estimate", "fix", "track",
               "repro")
JOB_SECTIONS = ("precoder", "impairments", "fim", "design", "estimation", "fix", "track", "figure")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


class Job:
    """Outputs collected in memory, flushed atomically at the end."""

    def __init__(self, args, cfg: dict, config_bytes: bytes, config_path: str):
        self.args = args
        self.cfg = cfg
        self.config_bytes = config_bytes
        self.config_path = config_path
        self.files: dict[str, bytes] = {}
        self.inputs: dict[str, str] = {}

    @property
    def seed(self) -> int:
        return self.args.seed

    @property
    def threads(self) -> int:
        return self.args.threads

    def csv(self, name: str, writer: Callable[[io.StringIO], None]) -> None:
        buf = io.StringIO(newline="")
        writer(buf)
        self.files[name] = buf.getvalue().encode()

    def json(self, name: str, obj) -> None:
        self.files[name] = (json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n").encode()

    def manifest(self) -> dict:
        cmd = self.args.command + (f" {self.args.target}" if self.args.command == "repro" else "")
        return {
            "subcommand": cmd,
            "config_path": self.config_path,
            "config_sha256": hashlib.sha256(self.config_bytes).hexdigest(),
            "seed": self.seed,
            "output_directory": str(self.args.out),
            "version": __version__,
            "argv": list(self.args.argv),
            "inputs_sha256": self.inputs,
            "outputs": sorted(self.files),
        }

    def flush(self) -> None:
        out = Path(self.args.out)
        out.mkdir(parents=True, exist_ok=True)
        self.json("manifest.json", self.manifest())
        tmp = []
        try:
            for name, data in sorted(self.files.items()):
                t = out / f".{name}.tmp"
                t.write_bytes(data)
                tmp.append((t, out / name))
            for t, final in tmp:
                os.replace(t, final)
        finally:
            for t, _ in tmp:
                if t.exists():
                    t.unlink()


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer, int)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if np.isfinite(v) else str(v)
    if isinstance(x, complex):
        return {"re": x.real, "im": x.imag}
    return x


def _section(job: Job, name: str) -> dict:
    d = job.cfg.get(name, {})
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ConfigError(name, "expected a mapping")
    return d


def _scenario(job: Job):
    s, _ = split_config(job.cfg, JOB_SECTIONS)
    if s is None:
        raise ConfigError("grid", "missing required key")
    return s


def _get(d: dict, key: str, where: str, default=None, kind=float):
    if key not in d:
        if default is None:
            raise ConfigError(f"{where}.{key}", "missing required key")
        return default
    v = d[key]
    if isinstance(v, bool) and kind is not bool:
        raise ConfigError(f"{where}.{key}", "expected a number")
    try:
        return kind(v)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}.{key}", f"expected {kind.__name__}, got {v!r}") from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(job: Job) -> None:
    s = _scenario(job)
    imp = _section(job, "impairments")
    if imp:
        allowed = {"element_displacement_sigma", "phase_noise", "cfo", "timing_offset"}
        unknown = set(imp) - allowed
        if unknown:
            raise ConfigError(f"impairments.{sorted(unknown)[0]}", "unknown key")
        spec = ImpairmentSpec(**{k: _get(imp, k, "impairments") for k in imp}, seed=job.seed)
        h = synthesize_impaired(s, spec)
    else:
        h = synthesize(s)
    job.files["channel.bin"] = h.to_bytes()
    if h.entries.size <= 4096:
        job.csv("channel.csv", h.write_csv)
    paths = []
    for l in range(s.n_paths):
        pp = geometric_path_params(s, l)
        paths.append({"kind": s.paths[l].kind, "tau_s": pp.tau, "length_m": pp.length, "doppler_hz": pp.nu,
                      "aoa": pp.aoa, "aod": pp.aod, "alpha": complex(pp.alpha)})
    job.json("paths.json", {"shape": h.shape, "paths": paths})


def _angle_grid(d: dict, where: str) -> np.ndarray:
    return np.linspace(_get(d, "min", where, -np.pi / 2), _get(d, "max", where, np.pi / 2),
                       _get(d, "n", where, 721, int))


def cmd_response_map(job: Job) -> None:
    s = _scenario(job)
    p = _section(job, "precoder")
    side = p.get("side", "rx")
    if side not in ("tx", "rx"):
        raise ConfigError("precoder.side", "expected tx or rx")
    arr, other = (s.rx, s.tx) if side == "rx" else (s.tx, s.rx)
    if "target" in p:
        try:
            target = tuple(float(v) for v in p["target"])
        except (TypeError, ValueError):
            raise ConfigError("precoder.target", "expected [az, el]") from None
        if len(target) != 2:
            raise ConfigError("precoder.target", "expected [az, el]")
    else:
        target = angles_of(arr.to_local(other.center - arr.center))
    focus = p.get("focus_distance")
    if focus is None and p.get("kind") == "near_field_focus":
        focus = float(np.linalg.norm(other.center - arr.center))
    kind = p.get("kind", "phase")
    try:
        prec = make_precoder(arr, kind, target, s.grid, focus)
    except ValueError as exc:
        raise ConfigError("precoder.kind", str(exc)) from None
    angles = _angle_grid(p.get("angles", {}), "precoder.angles")
    dd = p.get("distances", {})
    dists = np.geomspace(_get(dd, "min", "precoder.distances", 0.5), _get(dd, "max", "precoder.distances", 100.0),
                         _get(dd, "n", "precoder.distances", 200, int))
    subs = s.grid.subcarrier_indices
    full = 10 * np.log10(arr.n_elements)
    sub_map = response_map(arr, prec, s.grid, angles, subcarriers=subs, flags=ModelFlags(beam_squint=s.flags.beam_squint),
                           elevation=target[1], normalize=False)[:, 0] - full
    dist_map = response_map(arr, prec, s.grid, angles, dists, flags=ModelFlags(near_field=s.flags.near_field),
                            elevation=target[1], normalize=False)[:, :, 0] - full
    job.csv("map_subcarrier.csv", lambda fh: write_map_csv(fh, angles, subs, sub_map, "n"))
    job.csv("map_distance.csv", lambda fh: write_map_csv(fh, angles, dists, dist_map, "d_m"))


def cmd_fim(job: Job) -> None:
    s = _scenario(job)
    f = _section(job, "fim")
    rep = localization_report(s, default_signal(s, _get(f, "total_power", "fim", 1.0), job.seed),
                              include_doppler=_get(f, "include_doppler", "fim", False, bool),
                              resolvable=_get(f, "resolvable", "fim", False, bool))
    crb = rep.crb() if rep.identifiable else None
    job.json("fim.json", {
        "labels": rep.labels, "peb_m": rep.peb, "oeb_rad": rep.oeb, "identifiable": rep.identifiable,
        "null_space_dim": rep.null_space_dim, "fim_state": rep.fim_state,
        "crb_diagonal": None if crb is None else np.diag(crb),
    })


def cmd_table1(job: Job) -> None:
    draws = job.args.draws if job.args.draws is not None else _get(job.cfg, "draws", "config", 10, int)
    cells = table1_sweep(draws, job.seed, job.threads)
    job.csv("table1.csv", lambda fh: write_table1_csv(fh, cells))
    job.json("table1.json", {"cells": [{"row": c.row, "column": c.column, "expected": c.expected, "found": c.found,
                                        "agree": c.agrees, "per_draw": c.per_draw,
                                        "offending_geometry": c.offending_geometry} for c in cells],
                             "disagreements": sum(not c.agrees for c in cells)})


def _prior(d: dict, grid) -> PriorRegion:
    pr = d.get("prior", "full")
    if pr == "full":
        return PriorRegion.full_range(grid)
    if not isinstance(pr, dict):
        raise ConfigError("design.prior", "expected 'full' or {distance, half_width}")
    return PriorRegion.around_distance(_get(pr, "distance", "design.prior"), _get(pr, "half_width", "design.prior"))


def cmd_design(job: Job) -> None:
    s = _scenario(job)
    d = _section(job, "design")
    res = fig4_reproduction(s.grid, _get(d, "true_distance", "design"), _prior(d, s.grid),
                            _get(d, "sidelobe_margin_db", "design"), _get(d, "snr", "design", 1.0), job.threads)
    job.csv("allocation.csv", lambda fh: write_allocation_csv(fh, s.grid, {"uniform": res.uniform,
                                                                         "optimized": res.optimized}))
    job.csv("profile_uniform.csv", res.uniform_profile.write_csv)
    job.csv("profile_optimized.csv", res.optimized_profile.write_csv)
    job.json("metrics.json", {**res.metrics, "optimized_group_weights": res.optimized.group_weights})


def cmd_profile(job: Job) -> None:
    s = _scenario(job)
    d = _section(job, "design")
    kind = d.get("allocation", "uniform")
    if kind == "uniform":
        p = PowerAllocation.uniform(s.grid)
    elif kind == "edge_pair":
        p = PowerAllocation.edge_pair(s.grid)
    elif kind == "groups":
        try:
            p = PowerAllocation.from_groups(s.grid, [float(w) for w in d["weights"]])
        except KeyError:
            raise ConfigError("design.weights", "missing required key") from None
    else:
        raise ConfigError("design.allocation", f"unknown allocation {kind!r}")
    dist = _get(d, "true_distance", "design")
    prof = range_profile(p, s.grid, dist / SPEED_OF_LIGHT)
    job.csv("profile.csv", prof.write_csv)
    job.json("metrics.json", {"width_m": main_lobe_width(prof), "first_sidelobe_db": first_sidelobe_db(prof),
                              "peb_m": delay_peb(p, s.grid, _get(d, "snr", "design", 1.0))})


def cmd_estimate(job: Job) -> None:
    s = _scenario(job)
    e = _section(job, "estimation")
    noise_var = s.noise_psd * s.grid.delta_f
    if not noise_var > 0:
        raise ConfigError("noise.psd", "estimation needs a positive noise level")
    h = synthesize(s).entries.mean(axis=1)
    rng = np.random.default_rng(job.seed)
    h = h + np.sqrt(noise_var / 2) * (rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape))
    ests = estimate_paths(h, s.tx, s.rx, s.grid, _get(e, "max_paths", "estimation", 3, int))
    meas = measurements_from_estimates(ests, s.tx, s.rx, s.grid, noise_var, s.has_los)
    job.csv("measurements.csv", lambda fh: write_measurements_csv(fh, meas))
    job.json("estimates.json", [{"tau_s": x.tau_hat, "aoa": x.aoa_hat, "aod": x.aod_hat, "alpha": complex(x.alpha_hat),
                                 "quality": x.quality, "low_confidence": x.low_confidence, "flags": list(x.flags)}
                                for x in ests])


def cmd_fix(job: Job) -> None:
    s = _scenario(job)
    if job.args.measurements is None:
        raise ConfigError("--measurements", "fix needs a measurement CSV")
    data = Path(job.args.measurements).read_bytes()
    job.inputs["measurements"] = hashlib.sha256(data).hexdigest()
    meas = read_measurements_csv(io.StringIO(data.decode()))
    f = _section(job, "fix")
    known = _get(f, "known_orientation", "fix", False, bool)
    res = multipath_fix(meas, s.tx, s.rx.orientation if known else None, seed=job.seed,
                        n_starts=_get(f, "n_starts", "fix", 6, int))
    job.files["fix.json"] = (res.to_json() + "\n").encode()


def cmd_track(job: Job) -> None:
    t = _section(job, "track")
    model = MotionModel(_get(t, "process_noise_psd", "track", 0.5), _get(t, "clock_drift_variance", "track", 0.01))
    sigma = _get(t, "fix_sigma", "track", 1.0)
    if job.args.fixes is not None:
        data = Path(job.args.fixes).read_bytes()
        job.inputs["fixes"] = hashlib.sha256(data).hexdigest()
        times, z = read_fixes_csv(io.StringIO(data.decode()))
        p0 = np.diag([_get(t, "initial_position_variance", "track", 25.0)] * 3 +
                     [_get(t, "initial_velocity_variance", "track", 4.0)] * 3 + [1.0])
        x0 = np.concatenate([z[0], np.zeros(4)])
        states = track_position_fixes(times, z, sigma**2 * np.eye(3), model, TrackState(x0, p0, times[0]))
        run = TrackRun(times, None, z, states)
        job.csv("trajectory.csv", run.write_csv)
        job.json("metrics.json", {"mean_nis": float(np.mean([st.nis for st in states]))})
        return
    runs = _get(t, "runs", "track", 1, int)
    n_steps = _get(t, "n_steps", "track", 100, int)
    dt = _get(t, "dt", "track", 0.1)
    rng = np.random.default_rng(job.seed)
    rmse_f, rmse_z, nees_all = [], [], []
    first = None
    for _ in range(runs):
        run = run_cv_trial(n_steps, dt, model, sigma, rng)
        if first is None:
            first = run
        est = run.estimates()
        rmse_f.append(np.sqrt(np.mean(np.sum((est[:, :3] - run.truth[:, :3]) ** 2, axis=1))))
        rmse_z.append(np.sqrt(np.mean(np.sum((run.fixes - run.truth[:, :3]) ** 2, axis=1))))
        nees_all.append([nees(st, tr) for st, tr in zip(run.states, run.truth)])
    job.csv("trajectory.csv", first.write_csv)
    job.json("metrics.json", {"runs": runs, "ekf_rmse_m": float(np.mean(rmse_f)), "fix_rmse_m": float(np.mean(rmse_z)),
                              "time_averaged_nees": float(np.mean(nees_all))})


def cmd_repro(job: Job) -> None:
    target = job.args.target
    if target == "fig3":
        r = fig3_reproduction(job.cfg)
        job.csv("fig3_phase_map.csv", lambda fh: write_map_csv(fh, r.angles, r.subcarriers, r.phase_map, "n"))
        job.csv("fig3_time_delay_map.csv",
                lambda fh: write_map_csv(fh, r.angles, r.subcarriers, r.time_delay_map, "n"))
        job.csv("fig3_far_field_map.csv", lambda fh: write_map_csv(fh, r.angles, r.distances, r.far_field_map, "d_m"))
        job.csv("fig3_near_field_map.csv",
                lambda fh: write_map_csv(fh, r.angles, r.distances, r.near_field_map, "d_m"))
        job.csv("fig3_impaired_map.csv", lambda fh: write_map_csv(fh, r.angles, [0], r.impaired_map, "n"))
        job.json("metrics.json", r.metrics)
    elif target == "fig4":
        cmd_design(job)
    else:
        cmd_table1(job)


COMMANDS = {"synth": cmd_synth, "response-map": cmd_response_map, "fim": cmd_fim, "table1": cmd_table1,
            "design": cmd_design, "profile": cmd_profile, "estimate": cmd_estimate, "fix": cmd_fix,
            "track": cmd_track, "repro": cmd_repro}


# ---------------------------------------------------------------------------
# entry point


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("thread count must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=_u64, default=0, help="RNG seed (u64)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--threads", type=_positive, default=None,
                        help=f"worker threads (default: ${THREADS_ENV}, else 1)")
    p = _Parser(prog="radioloc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"radioloc {__version__}")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}", parser_class=_Parser)
    sub.required = True
    helps = {
        "synth": "synthesize the channel tensor", "response-map": "beamformer response maps",
        "fim": "channel and state Fisher information, PEB/OEB", "table1": "minimal identifiable configurations",
        "design": "optimize the pilot power allocation", "profile": "range profile of an allocation",
        "estimate": "extract per-path delay and angles from a noisy channel",
        "fix": "position fix from a measurement CSV", "track": "EKF over position fixes",
        "repro": "regenerate a pinned reproduction",
    }
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "repro":
            sp.add_argument("target", choices=sorted(PRESETS))
        if name == "fix":
            sp.add_argument("--measurements", help="per-path measurement CSV")
        if name in ("table1", "repro"):
            sp.add_argument("--draws", type=_positive, default=None, help="random geometries per identifiability table cell")
        if name == "track":
            sp.add_argument("--fixes", help="CSV of position fixes (t, x, y, z); default: simulate")
    return p


def _threads(flag: int | None) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(THREADS_ENV)
    if env is None or env == "":
        return 1
    try:
        v = int(env)
    except ValueError:
        raise ConfigError(THREADS_ENV, f"expected a positive integer, got {env!r}") from None
    if v < 1:
        raise ConfigError(THREADS_ENV, "expected a positive integer")
    return v


def _load_config(args) -> tuple[dict, bytes, str]:
    if args.command == "repro":
        if args.config is not None:
            raise ConfigError("--config", "repro runs a pinned preset and takes no config")
        cfg = PRESETS[args.target]
        data = (json.dumps(_plain(cfg), indent=2, sort_keys=True) + "\n").encode()
        return json.loads(data), data, f"preset:{args.target}"
    if args.config is None:
        if args.command in ("table1", "track"):
            return {}, b"", ""
        raise ConfigError("--config", "this subcommand needs a config file")
    try:
        data = Path(args.config).read_bytes()
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {args.config}: {exc.strerror}") from None
    try:
        cfg = yaml.safe_load(data.decode("utf-8"))
    except (yaml.YAMLError, UnicodeDecodeError) as exc:
        raise ConfigError("config", f"not valid YAML: {exc}") from None
    if cfg is None:
        cfg = {}
    if not isinstance(cfg, dict):
        raise ConfigError("config", "top level must be a mapping")
    return cfg, data, args.config


def _origin(exc: BaseException) -> str:
    """Innermost package module in the traceback."""
    mod = "cli"
    tb = exc.__traceback__
    while tb is not None:
        name = tb.tb_frame.f_globals.get("__name__", "")
        if name.startswith("radioloc."):
            mod = name.split(".", 1)[1]
        tb = tb.tb_next
    return mod


def _fail(exc: BaseException, code: int, kind: str) -> int:
    print(f"radioloc: {kind} in {_origin(exc)}: {exc}", file=sys.stderr)
    return code


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:        # --help / --version
        return int(exc.code or 0)
    args.argv = argv
    try:
        args.threads = _threads(args.threads)
        cfg, data, path = _load_config(args)
        job = Job(args, cfg, data, path)
        COMMANDS[args.command](job)
        job.flush()
    except InfeasibleDesignError as exc:
        print(f"radioloc: infeasible design in {_origin(exc)}: {exc} "
              f"(binding offset {exc.binding_offset:.3f} m, worst sidelobe {exc.worst_sidelobe_db:.2f} dB)",
              file=sys.stderr)
        return EXIT_INFEASIBLE
    except ConfigError as exc:
        return _fail(exc, EXIT_CONFIG, "config error")
    except ValidationError as exc:
        return _fail(exc, EXIT_CONFIG, "invariant violated")
    except (RadiolocError, np.linalg.LinAlgError, FloatingPointError, ArithmeticError) as exc:
        return _fail(exc, EXIT_NUMERIC, f"numerical failure [{type(exc).__name__}]")
    except ValueError as exc:
        return _fail(exc, EXIT_CONFIG, "invalid input")
    except OSError as exc:
        return _fail(exc, EXIT_CONFIG, "i/o error")
    except Exception as exc:  # pragma: no cover
        traceback.print_exc()
        return _fail(exc, EXIT_NUMERIC, "unexpected failure")
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
