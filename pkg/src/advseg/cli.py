"""Command-line entry point.

    advseg {synth|train|segment|evaluate|gradcheck|report} [--config FILE] [--key value ...]

The config file is flat ``key = value`` text with ``#`` comments; command
line ``--key value`` pairs override it.  Unknown keys are rejected.

Exit codes: 0 success, 1 verification failure, 2 usage/config error,
3 runtime abort (non-finite loss).  Log level comes from ``ADVSEG_LOG_LEVEL``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_ABORT = 0, 1, 2, 3
COMMANDS = ("synth", "train", "segment", "evaluate", "gradcheck", "report")

log = logging.getLogger("advseg")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config


def read_config_file(path) -> dict[str, str]:
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def parse_overrides(tokens: list[str]) -> dict[str, str]:
    values, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise ConfigError(f"unexpected argument {tok!r}; use --key value")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"missing value for --{key}")
            value = tokens[i + 1]
            i += 2
        values[key.replace("-", "_")] = value
    return values


def _coerce(key: str, value: str, default):
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {value!r} (expected {type(default).__name__})") from None
    return value


def resolve(schema: dict, supplied: dict[str, str]) -> dict:
    """Merge supplied string values into ``schema`` defaults.

    A default of ``None`` marks a required string key.
    """
    unknown = sorted(set(supplied) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    out = {}
    for key, default in schema.items():
        if key in supplied:
            out[key] = _coerce(key, supplied[key], default) if default is not None else supplied[key]
        elif default is None:
            raise ConfigError(f"missing required key: {key}")
        else:
            out[key] = default
    return out


def _dataclass_defaults(cls) -> dict:
    return {f.name: f.default for f in fields(cls)}


def schema_for(command: str) -> dict:
    from .data import SynthConfig
    from .trainer import TrainConfig

    if command == "synth":
        return {"out_dir": None, "n": 10, "seed": 0, **_dataclass_defaults(SynthConfig)}
    if command == "train":
        return {"manifest": None, "out_dir": None, "resume": "", **_dataclass_defaults(TrainConfig)}
    if command == "segment":
        return {"checkpoint": None, "input": None, "out_dir": None, "save_proba": True}
    if command == "evaluate":
        return {"pred_dir": None, "gt_dir": None, "out_dir": None}
    if command == "gradcheck":
        return {"seed": 0, "per_tensor": 6}
    if command == "report":
        return {"loss_csv": None, "metrics_csv": None, "out_dir": None}
    raise ConfigError(f"unknown command {command!r}")


# -------------------------------------------------------------- commands


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def cmd_synth(cfg: dict) -> int:
    from .data import SynthConfig, save_image, save_label, synth_generate, write_manifest

    synth_cfg = SynthConfig(**{k: cfg[k] for k in SynthConfig.keys()})
    if cfg["n"] < 0:
        raise ConfigError(f"n must be non-negative, got {cfg['n']}")
    out = Path(cfg["out_dir"])
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(cfg["n"]):
        sample = synth_generate(synth_cfg, sample_seed(cfg["seed"], i))
        name = f"frame_{i:04d}.png"
        save_image(out / "images" / name, sample.image)
        save_label(out / "labels" / name, sample.label)
        entries.append((f"images/{name}", f"labels/{name}"))
    write_manifest(out / "manifest.tsv", entries)
    log.info("wrote %d samples to %s", len(entries), out)
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    from .data import load_dataset
    from .trainer import (TrainConfig, TrainingDiverged, checkpoint_load, checkpoint_save, init_state,
                          prepare_samples, train, write_loss_csv)

    train_cfg = TrainConfig(**{k: cfg[k] for k in TrainConfig.keys()})
    samples = load_dataset(cfg["manifest"])
    if len(samples) < train_cfg.n_train:
        raise ConfigError(f"manifest {cfg['manifest']} has {len(samples)} samples, fewer than n_train={train_cfg.n_train}")
    samples = prepare_samples(samples[:train_cfg.n_train])
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    if cfg["resume"]:
        state = checkpoint_load(cfg["resume"])
        if state.config.mode != train_cfg.mode:
            raise ConfigError(f"checkpoint was trained in {state.config.mode!r} mode, not {train_cfg.mode!r}")
        state.config = train_cfg
    else:
        state = init_state(train_cfg)

    def progress(st, rec):
        if rec.step % 50 == 0:
            log.info("step %d loss_d=%.4f loss_e=%.4f d_real=%.3f d_fake=%.3f",
                     rec.step, rec.loss_d, rec.loss_e, rec.d_real_mean, rec.d_fake_mean)

    try:
        train(state, samples, checkpoint_dir=out, callback=progress)
    except TrainingDiverged as exc:
        (out / "divergence_dump.json").write_text(json.dumps(exc.dump, indent=2, sort_keys=True))
        write_loss_csv(out / "loss.csv", state.history)
        log.error("%s (dump written to %s)", exc, out / "divergence_dump.json")
        return EXIT_ABORT
    checkpoint_save(state, out / "final.ckpt")
    write_loss_csv(out / "loss.csv", state.history)
    log.info("trained %d steps; checkpoint %s", state.step, out / "final.ckpt")
    return EXIT_OK


def _input_images(spec: str) -> list[Path]:
    path = Path(spec)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
    elif path.suffix == ".tsv":
        from .data import read_manifest
        files = [img for img, _ in read_manifest(path)]
    else:
        files = [path]
    missing = [str(p) for p in files if not p.is_file()]
    if missing:
        raise ConfigError(f"input images not found: {', '.join(missing)}")
    return files


def cmd_segment(cfg: dict) -> int:
    from .data import load_image, save_label
    from .evaluation import probmap_to_classes
    from .trainer import checkpoint_load, predict_proba

    state = checkpoint_load(cfg["checkpoint"])
    missing = [n for n, rs in state.estimator.named_running().items() if not rs.ready]
    if missing:
        raise ConfigError(f"checkpoint has no running batch-norm statistics for {', '.join(missing)}")
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    for path in _input_images(cfg["input"]):
        image = load_image(path)
        try:
            prob = predict_proba(state.estimator, image, momentum=state.config.bn_momentum)
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        save_label(out / f"{path.stem}.png", probmap_to_classes(prob))
        if cfg["save_proba"]:
            np.save(out / f"{path.stem}_proba.npy", prob)
        log.info("segmented %s", path)
    return EXIT_OK


def cmd_evaluate(cfg: dict) -> int:
    from .data import load_label
    from .evaluation import aggregate, compute_metrics, evaluate_labels, summary_json, write_metrics_csv

    pred_dir, gt_dir = Path(cfg["pred_dir"]), Path(cfg["gt_dir"])
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise ConfigError(f"not a directory: {d}")
    pred = {p.name for p in pred_dir.glob("*.png")}
    gt = {p.name for p in gt_dir.glob("*.png")}
    if pred != gt:
        problems = []
        if gt - pred:
            problems.append(f"missing predictions: {', '.join(sorted(gt - pred))}")
        if pred - gt:
            problems.append(f"missing ground truth: {', '.join(sorted(pred - gt))}")
        raise ConfigError("; ".join(problems))
    rows, matches = [], []
    for name in sorted(gt):
        m = evaluate_labels(load_label(pred_dir / name), load_label(gt_dir / name))
        matches.append(m)
        rows.append((Path(name).stem, compute_metrics(m)))
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", rows)
    total = aggregate(matches)
    (out / "summary.json").write_text(summary_json(total, len(rows)) + "\n")
    print(f"frames={len(rows)} TP={total.tp} FP={total.fp} FN={total.fn} "
          f"P={total.precision:.4f} R={total.recall:.4f} F={total.f_measure:.4f} J={total.mean_jaccard:.4f}")
    return EXIT_OK


def cmd_gradcheck(cfg: dict) -> int:
    from .verify import run_suite

    def show(r):
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<40} max_rel_err={r.error:.3e}  tol={r.tolerance:.0e}  "
              f"({r.seconds:.1f}s)", flush=True)

    results = run_suite(seed=cfg["seed"], per_tensor=cfg["per_tensor"], report=show)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_report(cfg: dict) -> int:
    from .report import write_report

    write_report(cfg["loss_csv"], cfg["metrics_csv"], cfg["out_dir"])
    return EXIT_OK


HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "segment": cmd_segment,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advseg", description="Adversarial microscopy cell segmentation.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="flat key = value config file")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("ADVSEG_LOG_LEVEL", "WARNING").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        supplied = read_config_file(args.config) if args.config else {}
        supplied.update(parse_overrides(rest))
        cfg = resolve(schema_for(args.command), supplied)
        return HANDLERS[args.command](cfg)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"advseg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - checkpoint and other runtime failures
        from .trainer import CheckpointError

        if isinstance(exc, CheckpointError):
            print(f"advseg {args.command}: error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        raise


if __name__ == "__main__":
    sys.exit(main())
