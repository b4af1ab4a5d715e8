"""Command-line entry point: ``pidnowcast <command> [options]``.

Every command writes into a run directory (``--out``): its outputs, a
``checkpoints/`` and/or ``metrics/`` subdirectory where relevant, and a
``manifest.json`` recording the command, its arguments, the fully resolved
configuration, the seed, the code version and SHA-256 digests of all inputs
and outputs. ``pidnowcast rerun RUN/manifest.json --out NEW`` repeats a run
and checks that every output is byte-identical.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .grid import GridShape, PrecipSequence, read_grid_file, read_station_csv, write_grid_file
from .ingest import KrigingConfig, VariogramModel, build_meteo_stack, group_observations
from .physics import ConsistencyConfig, ResidualConfig, frame_residuals, sequence_scores
from .pid import (ABLATIONS, AblationFlags, PidConfig, predict_ensemble, prepare_pid_data, save_temporal_disc,
                  train_pid)
from .synth import SynthConfig, generate, read_dataset, write_dataset
from .transformer import TransformerConfig, load_transformer, save_transformer, train_transformer
from .verify import (NoExtremesError, VerificationConfig, catchment_reduce, extreme_pr_curve, read_masks,
                     verification_metrics, write_metrics_csv, write_pr_csv)
from .vqgan import VqGanConfig, encode_tokens, load_vqgan, save_vqgan, train_vqgan

THREADS_ENV = "PIDNOWCAST_THREADS"
MANIFEST = "manifest.json"


class ConfigError(ValueError):
    pass


class UsageError(ValueError):
    pass


def _section(obj, drop=()):
    d = obj.to_dict() if hasattr(obj, "to_dict") else asdict(obj)
    return {k: v for k, v in d.items() if k not in drop}


def default_config() -> dict:
    """Every configurable value with its default.

    ``physics.residual`` grid spacing and time step default to ``null``,
    meaning they are taken from the data (pixel size and frame step).
    ``transformer`` vocabulary, context length and tokens per frame are
    always derived from the VQ-GAN checkpoint and the data.
    """
    residual = _section(ResidualConfig())
    residual.update(dx_km=None, dy_km=None, dt_minutes=None)
    pid = _section(PidConfig(), drop=("residual", "consistency"))
    pid["ablation"] = "full"
    return {
        "seed": 0,
        "synth": _section(SynthConfig(), drop=("seed",)),
        "ingest": {"height": 32, "width": 32, "pixel_size_km": 1.0, "times": None,
                   "variogram": "auto-fit", "max_neighbors": 16, "fit_bins": 12, "fit_kind": "spherical"},
        "vqgan": {**_section(VqGanConfig(codebook_size=64, code_dim=16, max_intensity=50.0)), "steps": 500},
        "transformer": {**_section(TransformerConfig(layers=2, heads=2, model_dim=32),
                                   drop=("vocab", "context_len", "frame_tokens")), "steps": 500},
        "pid": pid,
        "predict": {"n_samples": 5, "temperature": 1.0, "top_k": 64},
        "physics": {"residual": residual, "consistency": _section(ConsistencyConfig())},
        "verify": {**_section(VerificationConfig()), "write_pr_curve": True},
    }


def _merge(base: dict, override: dict, where: str = "config"):
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown key {where}.{key}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where}.{key} must be an object")
            _merge(base[key], val, f"{where}.{key}")
        else:
            base[key] = val


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the JSON file at ``path``, then ``overrides``; unknown keys are rejected."""
    cfg = default_config()
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        _merge(cfg, user)
    if overrides:
        _merge(cfg, overrides)
    return cfg


# -- digests and manifests -----------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _files(path: Path):
    if path.is_dir():
        return sorted(p for p in path.rglob("*") if p.is_file() and p.name != MANIFEST)
    return [path]


def digest_paths(paths) -> dict:
    out = {}
    for p in paths:
        for f in _files(Path(p)):
            out[str(f)] = sha256_file(f)
    return out


def source_digest() -> str:
    root = Path(__file__).resolve().parent
    h = hashlib.sha256()
    for f in sorted(root.rglob("*.py")):
        h.update(str(f.relative_to(root)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def output_digests(out_dir: Path) -> dict:
    return {str(f.relative_to(out_dir)): sha256_file(f) for f in _files(out_dir)}


def write_manifest(out_dir: Path, command: str, args: dict, cfg: dict, inputs: list):
    manifest = {
        "command": command,
        "args": args,
        "config": cfg,
        "seed": cfg["seed"],
        "code_version": {"version": __version__, "source_sha256": source_digest()},
        "inputs": digest_paths(inputs),
        "outputs": output_digests(out_dir),
    }
    with open(out_dir / MANIFEST, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


# -- helpers -------------------------------------------------------------------------

def _run_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _subdir(out: Path, name: str) -> Path:
    d = out / name
    d.mkdir(exist_ok=True)
    return d


def _require(path, what):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _load_data(path):
    samples, masks = read_dataset(_require(path, "data directory"))
    if not samples:
        raise ValueError(f"{path}: no seq_XXXX_precip.pnwg files")
    return samples, masks


def _residual_config(cfg, seq: PrecipSequence) -> ResidualConfig:
    r = dict(cfg["physics"]["residual"])
    r["dx_km"] = r["dx_km"] if r["dx_km"] is not None else seq.pixel_size_km
    r["dy_km"] = r["dy_km"] if r["dy_km"] is not None else seq.pixel_size_km
    r["dt_minutes"] = r["dt_minutes"] if r["dt_minutes"] is not None else seq.step_minutes
    return ResidualConfig(**r)


def _pid_config(cfg, seq) -> PidConfig:
    p = {k: v for k, v in cfg["pid"].items() if k != "ablation"}
    return PidConfig(**p, residual=_residual_config(cfg, seq),
                     consistency=ConsistencyConfig(**cfg["physics"]["consistency"]))


def _vq_config(cfg) -> VqGanConfig:
    return VqGanConfig(**{k: v for k, v in cfg["vqgan"].items() if k != "steps"})


def _verify_config(cfg) -> VerificationConfig:
    return VerificationConfig(**{k: v for k, v in cfg["verify"].items() if k != "write_pr_curve"})


def _pred_files(pred_dir: Path):
    pred_dir = _require(pred_dir, "prediction directory")
    if (pred_dir / "predictions").is_dir():
        pred_dir = pred_dir / "predictions"
    files = sorted(pred_dir.glob("seq_*_pred.pnwg")) or sorted(pred_dir.glob("seq_*_precip.pnwg"))
    if not files:
        raise ValueError(f"{pred_dir}: no seq_XXXX_pred.pnwg files")
    return files


def _seq_index(path: Path) -> int:
    return int(path.name.split("_")[1])


def _observed(sample, pred: PrecipSequence) -> np.ndarray:
    lookup = {f.timestamp: f.values for f in sample.precip.frames}
    missing = [t for t in pred.timestamps if t not in lookup]
    if missing:
        raise ValueError(f"no observed frame at t={missing[0]} min")
    return np.stack([lookup[t] for t in pred.timestamps])


# -- commands ------------------------------------------------------------------------

def cmd_synth(args, cfg):
    out = _run_dir(args["out"])
    ds = generate(SynthConfig(**cfg["synth"], seed=cfg["seed"]))
    write_dataset(ds, out)
    return []


def _parse_times(spec):
    if spec is None:
        return None
    if isinstance(spec, list):
        return [int(t) for t in spec]
    if ":" in spec:
        start, stop, step = (int(v) for v in spec.split(":"))
        return list(range(start, stop + 1, step))
    return [int(t) for t in spec.split(",")]


def cmd_ingest(args, cfg):
    stations = _require(args["stations"], "station file")
    icfg = cfg["ingest"]
    obs = read_station_csv(stations)
    if not obs:
        raise ValueError(f"{stations}: no observations")
    times = _parse_times(icfg["times"])
    if times is None:
        t0 = min(o.timestamp for o in obs)
        t1 = max(o.timestamp for o in obs)
        times = list(range(t0, t1 + 1, 30))
    vg = icfg["variogram"]
    if isinstance(vg, dict):
        vg = VariogramModel(**vg)
    kcfg = KrigingConfig(variogram=vg, max_neighbors=icfg["max_neighbors"], fit_bins=icfg["fit_bins"],
                         fit_kind=icfg["fit_kind"])
    stacks = build_meteo_stack(group_observations(obs), times, GridShape(icfg["height"], icfg["width"]), kcfg,
                               icfg["pixel_size_km"])
    out = _run_dir(args["out"])
    write_grid_file(stacks, out / "meteo.pnwg")
    return [stations]


def cmd_train_vqgan(args, cfg):
    samples, _ = _load_data(args["data"])
    out = _run_dir(args["out"])
    frames = np.concatenate([s.precip.array for s in samples])
    res = train_vqgan(frames, _vq_config(cfg), cfg["vqgan"]["steps"], cfg["seed"],
                      loss_csv=_subdir(out, "metrics") / "vqgan_loss.csv")
    save_vqgan(_subdir(out, "checkpoints") / "vqgan.ckpt", res.model)
    return [args["data"]]


def _streams(samples, vq):
    return np.stack([encode_tokens(vq, s.precip.array) for s in samples])


def cmd_train_transformer(args, cfg):
    samples, _ = _load_data(args["data"])
    vq = load_vqgan(_require(args["vqgan"], "vqgan checkpoint"))
    out = _run_dir(args["out"])
    tokens = _streams(samples, vq)
    s, t, h, w = tokens.shape
    sec = {k: v for k, v in cfg["transformer"].items() if k != "steps"}
    tcfg = TransformerConfig(vocab=vq.cfg.codebook_size, context_len=t * h * w, frame_tokens=h * w, **sec)
    model, _ = train_transformer(tokens.reshape(s, -1), tcfg, cfg["transformer"]["steps"], cfg["seed"],
                                 log_csv=_subdir(out, "metrics") / "transformer_loss.csv")
    save_transformer(_subdir(out, "checkpoints") / "transformer.ckpt", model)
    return [args["data"], args["vqgan"]]


def cmd_train_pid(args, cfg):
    samples, _ = _load_data(args["data"])
    vq = load_vqgan(_require(args["vqgan"], "vqgan checkpoint"))
    model = load_transformer(_require(args["transformer"], "transformer checkpoint"))
    flags = AblationFlags.from_name(cfg["pid"]["ablation"])
    pcfg = _pid_config(cfg, samples[0].precip)
    out = _run_dir(args["out"])
    data = prepare_pid_data(samples, vq, pcfg)
    res = train_pid(data, vq, model, flags, pcfg, cfg["seed"],
                    report_csv=_subdir(out, "metrics") / "pid_report.csv")
    ckpt = _subdir(out, "checkpoints")
    save_transformer(ckpt / "transformer.ckpt", res.transformer)
    if res.disc is not None:
        save_temporal_disc(ckpt / "temporal_disc.ckpt", res.disc)
    return [args["data"], args["vqgan"], args["transformer"]]


def member_seeds(seed: int, index: int, n: int):
    return [int(v) for v in np.random.default_rng([seed, index]).integers(2 ** 31, size=n)]


def cmd_predict(args, cfg):
    samples, _ = _load_data(args["data"])
    vq = load_vqgan(_require(args["vqgan"], "vqgan checkpoint"))
    model = load_transformer(_require(args["transformer"], "transformer checkpoint")).eval()
    n_cond, m_pred = cfg["pid"]["n_cond"], cfg["pid"]["m_pred"]
    pc = cfg["predict"]
    out = _subdir(_run_dir(args["out"]), "predictions")
    for i, s in enumerate(samples):
        if len(s.precip) < n_cond:
            raise ValueError(f"sequence {i} has {len(s.precip)} frames, need {n_cond} conditioning frames")
        cond = PrecipSequence(s.precip.frames[:n_cond], s.precip.step_minutes, s.precip.pixel_size_km)
        ens = predict_ensemble(cond, vq, model, m_pred, pc["n_samples"], member_seeds(cfg["seed"], i, pc["n_samples"]),
                               pc["temperature"], pc["top_k"])
        write_grid_file(ens.mean, out / f"seq_{i:04d}_pred.pnwg")
        for k, mem in enumerate(ens.members):
            write_grid_file(mem, out / f"seq_{i:04d}_member_{k}.pnwg")
    return [args["data"], args["vqgan"], args["transformer"]]


def cmd_physics_score(args, cfg):
    samples, _ = _load_data(args["data"])
    files = _pred_files(Path(args["pred"]))
    out = _run_dir(args["out"])
    ccfg = ConsistencyConfig(**cfg["physics"]["consistency"])
    with open(_subdir(out, "metrics") / "physics.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["sequence", "timestamp", "mean_abs_residual", "eta"])
        for f in files:
            i = _seq_index(f)
            if i >= len(samples):
                raise ValueError(f"{f.name}: no sequence {i} in the data directory")
            pred = read_grid_file(f)
            rcfg = _residual_config(cfg, pred)
            res = frame_residuals(pred, samples[i].meteo, rcfg)
            eta = sequence_scores(pred, samples[i].meteo, rcfg, ccfg)
            for fr, r, e in zip(pred.frames, res, eta):
                wr.writerow([i, fr.timestamp, repr(float(np.mean(np.abs(r.values)))), repr(float(e))])
    return [args["data"], args["pred"]]


def _paired(args):
    samples, masks = _load_data(args["data"])
    if args.get("masks"):
        masks = read_masks(_require(args["masks"], "mask file"))
    preds, obs = [], []
    for f in _pred_files(Path(args["pred"])):
        i = _seq_index(f)
        if i >= len(samples):
            raise ValueError(f"{f.name}: no sequence {i} in the data directory")
        p = read_grid_file(f)
        preds.append(p)
        obs.append(_observed(samples[i], p))
    return preds, obs, masks


def _pr_curve(preds, obs, masks, vcfg):
    if not masks:
        raise ValueError("catchment masks are required for the PR curve (masks.pnwg or --masks)")
    pm = np.array([catchment_reduce(p, masks) for p in preds])
    om = np.array([catchment_reduce(o, masks, p.step_minutes) for p, o in zip(preds, obs)])
    return extreme_pr_curve(pm, om, vcfg)


def cmd_evaluate(args, cfg):
    preds, obs, masks = _paired(args)
    vcfg = _verify_config(cfg)
    out = _run_dir(args["out"])
    metrics = _subdir(out, "metrics")
    pred_all = np.concatenate([p.array for p in preds])
    obs_all = np.concatenate(obs)
    write_metrics_csv(verification_metrics(pred_all, obs_all, vcfg, preds[0].pixel_size_km),
                      metrics / "metrics.csv")
    if cfg["verify"]["write_pr_curve"]:
        try:
            write_pr_csv(_pr_curve(preds, obs, masks, vcfg), metrics / "pr_curve.csv")
        except (NoExtremesError, ValueError) as exc:
            print(f"warning: pr_curve.csv not written: {exc}", file=sys.stderr)
    return [args["data"], args["pred"]] + ([args["masks"]] if args.get("masks") else [])


def cmd_pr_curve(args, cfg):
    preds, obs, masks = _paired(args)
    curve = _pr_curve(preds, obs, masks, _verify_config(cfg))
    out = _run_dir(args["out"])
    write_pr_csv(curve, _subdir(out, "metrics") / "pr_curve.csv")
    return [args["data"], args["pred"]] + ([args["masks"]] if args.get("masks") else [])


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train-vqgan": cmd_train_vqgan,
    "train-transformer": cmd_train_transformer,
    "train-pid": cmd_train_pid,
    "predict": cmd_predict,
    "physics-score": cmd_physics_score,
    "evaluate": cmd_evaluate,
    "pr-curve": cmd_pr_curve,
}


def run_command(command: str, args: dict, cfg: dict):
    """Run one command with a resolved config and write its manifest; returns the manifest."""
    inputs = COMMANDS[command](args, cfg)
    return write_manifest(Path(args["out"]), command, args, cfg, inputs)


def rerun(manifest_path, out):
    """Repeat a recorded run into ``out``; raises RuntimeError if any output differs."""
    with open(_require(manifest_path, "manifest"), encoding="utf-8") as fh:
        old = json.load(fh)
    for path, digest in old["inputs"].items():
        if not Path(path).exists():
            raise FileNotFoundError(f"recorded input missing: {path}")
        if sha256_file(path) != digest:
            raise ValueError(f"recorded input changed since the run: {path}")
    args = dict(old["args"], out=str(out))
    new = run_command(old["command"], args, old["config"])
    if new["outputs"] != old["outputs"]:
        diff = sorted(set(old["outputs"].items()) ^ set(new["outputs"].items()))
        raise RuntimeError(f"rerun outputs differ: {sorted({k for k, _ in diff})}")
    return new


# -- argument parsing ----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser():
    ap = _Parser(prog="pidnowcast", description="Physics-informed precipitation nowcasting at desk scale.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--seed", type=int)
        return p

    p = command("synth", "generate a synthetic dataset with closed moisture budgets")
    p.add_argument("--n-sequences", type=int)
    p.add_argument("--extreme-fraction", type=float)
    p.add_argument("--mode", choices=("exact", "noisy"))

    p = command("ingest", "krige hourly station observations to half-hourly meteorological grids")
    p.add_argument("--stations", required=True, help="station CSV")
    p.add_argument("--times", help="timestamps in minutes: 'a,b,c' or 'start:stop:step'")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--pixel-size", type=float)

    p = command("train-vqgan", "train the frame tokenizer")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int)

    p = command("train-transformer", "train the token transformer")
    p.add_argument("--data", required=True)
    p.add_argument("--vqgan", required=True, help="vqgan checkpoint")
    p.add_argument("--steps", type=int)

    p = command("train-pid", "fine-tune the transformer against the physics-informed temporal discriminator")
    p.add_argument("--data", required=True)
    p.add_argument("--vqgan", required=True)
    p.add_argument("--transformer", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--ablation", choices=ABLATIONS, help="full, -P or -PT (write as --ablation=-P)")

    p = command("predict", "ensemble forecasts from the conditioning frames of each sequence")
    p.add_argument("--data", required=True)
    p.add_argument("--vqgan", required=True)
    p.add_argument("--transformer", required=True)
    p.add_argument("--n-samples", type=int)

    p = command("physics-score", "moisture-budget residuals and consistency scores of forecasts")
    p.add_argument("--pred", required=True, help="predict run directory, or a data directory")
    p.add_argument("--data", required=True)

    for name, text in (("evaluate", "pixel, contingency, FSS metrics and the extreme-event PR curve"),
                       ("pr-curve", "extreme-event precision/recall curve only")):
        p = command(name, text)
        p.add_argument("--pred", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--masks", help="catchment mask file (default: masks.pnwg in --data)")

    p = sub.add_parser("rerun", help="repeat a run from its manifest and check outputs are identical")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    return ap


_FLAG_KEYS = {
    "synth": {"n_sequences": ("synth", "n_sequences"), "extreme_fraction": ("synth", "extreme_fraction"),
              "mode": ("synth", "conservation_mode")},
    "ingest": {"height": ("ingest", "height"), "width": ("ingest", "width"),
               "pixel_size": ("ingest", "pixel_size_km"), "times": ("ingest", "times")},
    "train-vqgan": {"steps": ("vqgan", "steps")},
    "train-transformer": {"steps": ("transformer", "steps")},
    "train-pid": {"steps": ("pid", "steps"), "ablation": ("pid", "ablation")},
    "predict": {"n_samples": ("predict", "n_samples")},
}
_PATH_ARGS = ("out", "data", "vqgan", "transformer", "pred", "masks", "stations")


def resolve(ns) -> tuple:
    """(args dict, resolved config) for a parsed command line."""
    overrides = {}
    if ns.seed is not None:
        overrides["seed"] = ns.seed
    for flag, (section, key) in _FLAG_KEYS.get(ns.command, {}).items():
        val = getattr(ns, flag)
        if val is not None:
            overrides.setdefault(section, {})[key] = val
    cfg = load_config(ns.config, overrides)
    args = {k: getattr(ns, k) for k in _PATH_ARGS if getattr(ns, k, None) is not None}
    return args, cfg


def _thread_limit():
    val = os.environ.get(THREADS_ENV)
    if val is None or val == "":
        return None
    try:
        n = int(val)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {val!r}")
    return n


def _message(exc):
    if isinstance(exc, KeyError) and exc.args:
        return str(exc.args[0])
    return str(exc) or type(exc).__name__


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        ns = build_parser().parse_args(argv)
        limit = _thread_limit()
        if limit is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=limit):
                _dispatch(ns)
        else:
            _dispatch(ns)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {_message(exc)}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {_message(exc)}", file=sys.stderr)
        return 2
    return 0


def _dispatch(ns):
    if ns.command == "rerun":
        rerun(ns.manifest, ns.out)
        print(f"rerun outputs identical: {ns.out}")
        return
    args, cfg = resolve(ns)
    run_command(ns.command, args, copy.deepcopy(cfg))


if __name__ == "__main__":
    sys.exit(main())
