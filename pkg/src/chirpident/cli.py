"""``chirp-ident`` command line: simulate, identify, sweep, denoise-eval.

One configuration document (YAML or JSON) with sections ``scene``,
``timing``, ``schedule``, ``noise`` and ``sweep`` drives every subcommand.
Each run writes ``manifest.json`` next to its outputs.

Exit codes: 0 success, 2 validation error, 3 unresolved ambiguity,
4 solver non-convergence.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .denoise import ASTConfig, ast_denoise, ast_mse_bound, default_eta
from .harness import (DEFAULT_TRIALS, REPRODUCTION_TRIALS, SWEEP_N, SceneSampler, TrialConfig,
                      paired_improvement, run_sweep)
from .model import (ChirpSchedule, Scene, TargetParams, TimingPlan, ValidationError, min_sampling_rate,
                    plan_timing, scene_from_dict, scene_to_dict, schedule_from_list, schedule_to_list,
                    timing_from_dict, timing_to_dict)
from .pipeline import IdentifyOptions, identify
from .specest import EstimationError
from .synth import (NoiseSpec, PulseSamples, load_pulse_dir, pulse_filename, synth_dechirped, synth_pulses,
                    write_samples_txt)

log = logging.getLogger("chirpident")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_AMBIGUOUS = 3
EXIT_NONCONVERGENCE = 4

SECTIONS = ("scene", "timing", "schedule", "noise", "sweep")
NOISE_KEYS = ("sigma2", "snr_db", "seed")
SWEEP_KEYS = ("K", "snr_db", "trials", "divisor", "denoise", "sweep_id", "seed")
MANIFEST = "manifest.json"

# five-target noiseless scene (two close pairs) and the four-pulse plan used by --reproduce fig6
FIVE_TARGET_SCENE = (
    (0.001, -80.0, 1.0, 0.1),
    (0.0045, 10.0, 0.8, 0.35),
    (0.0015, 85.0, 1.2, 0.6),
    (0.0095, -10.0, 0.9, 0.85),
    (0.004, 90.0, 1.1, 0.2),
)


class AmbiguityExit(Exception):
    pass


class NonConvergenceExit(Exception):
    pass


# --- configuration -------------------------------------------------------------

@dataclass
class RunConfig:
    """Parsed configuration; absent sections stay ``None``."""

    scene: Scene | None = None
    timing: TimingPlan | None = None
    schedule: ChirpSchedule | None = None
    noise: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ValidationError("configuration must be a mapping", "config")
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ValidationError(f"unknown config sections {sorted(unknown)}", sorted(unknown)[0])
        cfg = cls(
            scene=scene_from_dict(d["scene"]) if d.get("scene") is not None else None,
            timing=timing_from_dict(d["timing"]) if d.get("timing") is not None else None,
            schedule=schedule_from_list(d["schedule"]) if d.get("schedule") is not None else None,
            noise=dict(d.get("noise") or {}),
            sweep=dict(d.get("sweep") or {}),
        )
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        out: dict = {}
        if self.scene is not None:
            out["scene"] = scene_to_dict(self.scene)
        if self.timing is not None:
            out["timing"] = timing_to_dict(self.timing)
        if self.schedule is not None:
            out["schedule"] = schedule_to_list(self.schedule)
        if self.noise:
            out["noise"] = dict(self.noise)
        if self.sweep:
            out["sweep"] = dict(self.sweep)
        return out

    def validate(self) -> None:
        if self.scene is not None:
            self.scene.validate(allow_empty=True)
        if self.timing is not None:
            K = self.scene.K if self.scene is not None and self.scene.K else None
            self.timing.validate(self.schedule, K)
            if self.schedule is not None and self.timing.M != self.schedule.M:
                raise ValidationError(f"timing.M={self.timing.M} but schedule has {self.schedule.M} pulses", "M")
        for name, allowed in (("noise", NOISE_KEYS), ("sweep", SWEEP_KEYS)):
            extra = sorted(set(getattr(self, name)) - set(allowed))
            if extra:
                raise ValidationError(f"{name}: unknown keys {extra} (allowed: {', '.join(allowed)})", extra[0])
        noise = self.noise
        if "sigma2" in noise and "snr_db" in noise:
            raise ValidationError("noise: give sigma2 or snr_db, not both", "sigma2")
        if "sigma2" in noise and not float(noise["sigma2"]) >= 0:
            raise ValidationError("noise.sigma2 must be nonnegative", "sigma2")

    def sigma2(self) -> float:
        if "sigma2" in self.noise:
            return float(self.noise["sigma2"])
        if "snr_db" in self.noise:
            snr = float(self.noise["snr_db"])
            amp = max((t.amp for t in self.scene.targets), default=1.0) if self.scene else 1.0
            amp = min((t.amp for t in self.scene.targets), default=amp) if self.scene else amp
            return 0.0 if math.isinf(snr) else amp**2 / 10.0 ** (snr / 10.0)
        return 0.0


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc.strerror}", "config") from None
    try:
        data = yaml.safe_load(text)  # JSON is a YAML subset
    except yaml.YAMLError as exc:
        raise ValidationError(f"cannot parse {path}: {exc}", "config") from None
    return RunConfig.from_dict(data or {})


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def config_hash(resolved: dict) -> str:
    canon = json.dumps(resolved, sort_keys=True, separators=(",", ":"), default=float)
    return hashlib.sha256(canon.encode()).hexdigest()


def fig6_config() -> RunConfig:
    scene = Scene(tuple(TargetParams(*t) for t in FIVE_TARGET_SCENE), 0.01, 100.0)
    schedule = ChirpSchedule.four_pulse_plan()
    timing = plan_timing(len(FIVE_TARGET_SCENE), 440.0, 0.01, f_max=100.0, M=4, N=64)
    return RunConfig(scene, timing, schedule, {"sigma2": 0.0, "seed": 0})


def sweep_preset(fig: str) -> RunConfig:
    """Sweep configs for the threshold, denoising and restricted-range figures."""
    schedule = ChirpSchedule.four_pulse_plan()
    timing = plan_timing(3, 440.0, 0.01, f_max=100.0, M=4, N=SWEEP_N)
    sweep = {"K": 3, "snr_db": [float(s) for s in range(0, 45, 5)], "trials": REPRODUCTION_TRIALS,
             "divisor": 10.0 if fig == "fig10" else 1.0, "denoise": fig == "fig9", "sweep_id": 0}
    return RunConfig(None, timing, schedule, {"seed": 0}, sweep)


# --- manifest ------------------------------------------------------------------

def write_manifest(out: Path, config_path, resolved: dict, seed, outputs, started: float, command: str) -> Path:
    manifest = {
        "command": command,
        "config_path": str(config_path) if config_path else None,
        "config_hash": config_hash(resolved),
        "config": resolved,
        "seed": seed,
        "version": __version__,
        "outputs": sorted(str(p) for p in outputs),
        "wall_clock_s": time.perf_counter() - started,
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, default=float))
    return path


# --- subcommands ----------------------------------------------------------------

def _require(cfg: RunConfig, *names: str) -> None:
    for n in names:
        if getattr(cfg, n) is None:
            raise ValidationError(f"config section '{n}' is required", n)


def _noise_spec(cfg: RunConfig, seed: int) -> NoiseSpec | None:
    s2 = cfg.sigma2()
    return NoiseSpec(s2, seed) if s2 > 0 else None


def cmd_simulate(cfg: RunConfig, out: Path, seed: int) -> list[Path]:
    """Write one ``n re im`` table per pulse plus a JSON copy of all pulses."""
    _require(cfg, "scene", "timing", "schedule")
    pulses = synth_pulses(cfg.scene, cfg.schedule, cfg.timing, _noise_spec(cfg, seed))
    paths = []
    for p in pulses:
        path = out / pulse_filename(p.m)
        write_samples_txt(path, p)
        paths.append(path)
    doc = out / "pulses.json"
    doc.write_text(json.dumps({"pulses": [p.to_dict() for p in pulses]}))
    return paths + [doc]


def _identify_options(cfg: RunConfig, denoise: bool) -> IdentifyOptions:
    return IdentifyOptions(denoise=denoise)


def cmd_identify(cfg: RunConfig, out: Path, seed: int, denoise: bool, samples_dir=None,
                 K: int | None = None) -> tuple[list[Path], dict]:
    """Identify targets from sample files (or a fresh simulation) and write ``match.json``."""
    _require(cfg, "schedule")
    if samples_dir is not None:
        pulses = load_pulse_dir(samples_dir)
        if not pulses:
            raise ValidationError(f"no pulse_*.txt files in {samples_dir}", "samples")
    else:
        _require(cfg, "scene", "timing")
        pulses = synth_pulses(cfg.scene, cfg.schedule, cfg.timing, _noise_spec(cfg, seed))
    if len(pulses) != cfg.schedule.M:
        raise ValidationError(f"{len(pulses)} pulses but the schedule has {cfg.schedule.M}", "M")
    if len({p.N for p in pulses}) != 1:
        raise ValidationError("pulses have different lengths", "N")
    bounds = cfg.scene or cfg.timing
    if bounds is None:
        raise ValidationError("need a scene or timing section for tau_max and f_max", "tau_max")
    if K is None and cfg.scene is not None and cfg.scene.K:
        K = cfg.scene.K
    result = identify(pulses, cfg.schedule, bounds.tau_max, bounds.f_max, K, _identify_options(cfg, denoise))
    doc = result.to_dict()
    path = out / "match.json"
    path.write_text(json.dumps(doc, indent=2))
    return [path], doc


def _sweep_template(cfg: RunConfig, seed: int, denoise: bool) -> tuple[TrialConfig, dict]:
    sw = dict(cfg.sweep)
    K = int(sw.get("K", cfg.scene.K if cfg.scene is not None and cfg.scene.K else 3))
    schedule = cfg.schedule or ChirpSchedule.four_pulse_plan()
    if cfg.timing is not None:
        timing = cfg.timing
    else:
        tau_max = cfg.scene.tau_max if cfg.scene else 0.01
        f_max = cfg.scene.f_max if cfg.scene else 100.0
        fs = max(min_sampling_rate(f_max, fc, tau_max) for fc in schedule.rates)
        timing = plan_timing(K, fs, tau_max, f_max=f_max, M=schedule.M, N=max(SWEEP_N, 2 * K))
    timing.validate(schedule, K)
    sampler = SceneSampler(K, timing.tau_max, timing.f_max, float(sw.get("divisor", 1.0)))
    return TrialConfig(sampler, timing, schedule, math.inf, denoise, seed), sw


def _snr_grid(sw: dict) -> list[float]:
    grid = sw.get("snr_db", [float(s) for s in range(0, 45, 5)])
    if isinstance(grid, dict):
        start, stop, step = float(grid["start"]), float(grid["stop"]), float(grid["step"])
        if step <= 0:
            raise ValidationError("sweep.snr_db.step must be positive", "snr_db")
        grid = list(np.arange(start, stop + step / 2, step))
    grid = [float(s) for s in (grid if isinstance(grid, (list, tuple)) else [grid])]
    if not grid:
        raise ValidationError("sweep.snr_db is empty", "snr_db")
    return grid


def cmd_sweep(cfg: RunConfig, out: Path, seed: int, denoise: bool, trials: int) -> list[Path]:
    template, sw = _sweep_template(cfg, seed, denoise)
    res = run_sweep(template, _snr_grid(sw), trials, int(sw.get("sweep_id", 0)))
    path = out / "sweep.csv"
    res.to_csv(path)
    return [path]


def cmd_denoise_eval(cfg: RunConfig, out: Path, seed: int, trials: int) -> list[Path]:
    """Paired AST on/off comparison: sample-domain MSE against the bound, and RMSE(f) wins."""
    template, sw = _sweep_template(cfg, seed, False)
    grid = _snr_grid(sw) if "snr_db" in sw else [float(cfg.noise.get("snr_db", 5.0))]
    sweep_id = int(sw.get("sweep_id", 0))
    raw = run_sweep(template, grid, trials, sweep_id)
    den = run_sweep(replace(template, denoise=True), grid, trials, sweep_id)
    report = []
    for j, snr in enumerate(grid):
        wins, compared = paired_improvement(raw.outcomes[j], den.outcomes[j])
        mse_rows = _sample_mse(template, snr, min(trials, 20), sweep_id, j)
        report.append({"snr_db": snr, "rmse_f_raw": raw.rows[j].rmse_f_hz, "rmse_f_denoised": den.rows[j].rmse_f_hz,
                       "failures_raw": raw.rows[j].failures, "failures_denoised": den.rows[j].failures,
                       "paired_wins": wins, "paired_compared": compared, **mse_rows})
    path = out / "denoise_eval.json"
    path.write_text(json.dumps({"rows": report}, indent=2, default=float))
    csv_raw, csv_den = out / "sweep_raw.csv", out / "sweep_denoised.csv"
    raw.to_csv(csv_raw)
    den.to_csv(csv_den)
    return [path, csv_raw, csv_den]


def _sample_mse(template: TrialConfig, snr: float, trials: int, sweep_id: int, j: int) -> dict:
    """Per-sample AST error on the first pulse of a few trials, against the asymptotic bound."""
    below, mse = 0, []
    for i in range(trials):
        cfg = replace(template, snr_db=snr, stream=(sweep_id, j, i))
        scene = cfg.sampler.sample(cfg.scene_rng())
        chirp = cfg.schedule[0]
        clean = synth_dechirped(scene, chirp, cfg.timing)
        noisy = synth_dechirped(scene, chirp, cfg.timing, cfg.noise())
        sigma = math.sqrt(cfg.sigma2)
        if sigma == 0:
            continue
        res = ast_denoise(noisy, ASTConfig(eta=default_eta(sigma, clean.N)))
        e = float(np.mean(np.abs(res.denoised - clean.samples) ** 2))
        mse.append(e)
        below += int(e < ast_mse_bound(sigma, clean.N, sum(t.amp for t in scene.targets)))
    return {"ast_mse_mean": float(np.mean(mse)) if mse else 0.0, "ast_below_bound": below,
            "ast_trials": len(mse)}


# --- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML or JSON configuration document")
    common.add_argument("--seed", type=int, help="noise / trial seed (overrides noise.seed)")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--denoise", choices=("on", "off"), help="AST denoising before estimation")
    common.add_argument("--trials", type=int, help="Monte Carlo trials per SNR point")
    common.add_argument("--reproduce", choices=("fig6", "fig8", "fig9", "fig10"),
                        help="use a built-in figure configuration")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="chirp-ident", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="synthesize dechirped pulses")
    ident = sub.add_parser("identify", parents=[common], help="recover target triplets")
    ident.add_argument("--samples", type=Path, help="directory of pulse_*.txt files")
    ident.add_argument("--K", type=int, help="number of targets (default: scene size or model-order estimate)")
    sub.add_parser("sweep", parents=[common], help="Monte Carlo SNR sweep")
    sub.add_parser("denoise-eval", parents=[common], help="paired denoising on/off evaluation")
    return p


def _resolve(args) -> tuple[RunConfig, int]:
    if args.reproduce:
        cfg = fig6_config() if args.reproduce == "fig6" else sweep_preset(args.reproduce)
        if args.config:
            log.warning("--reproduce given; ignoring --config %s", args.config)
    elif args.config:
        cfg = load_config(args.config)
    else:
        raise ValidationError("either --config or --reproduce is required", "config")
    seed = args.seed if args.seed is not None else int(cfg.noise.get("seed", cfg.sweep.get("seed", 0)))
    if seed < 0 or seed >= 2**64:
        raise ValidationError("--seed must be an unsigned 64-bit integer", "seed")
    return cfg, seed


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    started = time.perf_counter()
    try:
        cfg, seed = _resolve(args)
        if args.trials is not None and args.trials < 1:
            raise ValidationError("--trials must be positive", "trials")
        denoise = (args.denoise == "on") if args.denoise else bool(cfg.sweep.get("denoise", False))
        trials = args.trials or int(cfg.sweep.get("trials", DEFAULT_TRIALS))
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        resolved = {"config": cfg.to_dict(), "seed": seed, "command": args.command}
        code = EXIT_OK
        if args.command == "simulate":
            outputs = cmd_simulate(cfg, out, seed)
        elif args.command == "identify":
            resolved.update(denoise=denoise, samples=str(args.samples) if args.samples else None, K=args.K)
            outputs, doc = cmd_identify(cfg, out, seed, denoise, args.samples, args.K)
            kinds = {f["kind"] for f in doc["flags"]}
            if kinds & {"ambiguous", "unresolved", "incomplete"}:
                code = EXIT_AMBIGUOUS
            elif "nonconvergence" in kinds:
                code = EXIT_NONCONVERGENCE
        elif args.command == "sweep":
            resolved.update(denoise=denoise, trials=trials)
            outputs = cmd_sweep(cfg, out, seed, denoise, trials)
        else:
            resolved.update(trials=trials)
            outputs = cmd_denoise_eval(cfg, out, seed, trials)
        cfg_path = out / "config.yaml"
        dump_config(cfg, cfg_path)
        write_manifest(out, args.config if not args.reproduce else f"reproduce:{args.reproduce}", resolved,
                       seed, [*outputs, cfg_path], started, args.command)
        return code
    except ValidationError as exc:
        where = f" [{exc.field}]" if getattr(exc, "field", None) else ""
        print(f"error{where}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except EstimationError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
