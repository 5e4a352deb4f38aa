"""Command-line entry point: ``adaptor synth | pretrain | eval | inspect``.

Exit codes: 0 success, 2 validation or parse failure, 3 numeric failure.
Setting ``ADAPTOR_DETERMINISTIC=1`` pins BLAS to one thread and zeroes the
wall-clock field of the metrics log, so reruns produce identical files.
"""

from __future__ import annotations

import argparse
import json
import shutil
import struct
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from .data import (
    CACHE_MAGIC,
    SynthSpec,
    decode_cache,
    gen_synthetic,
    parse_cache_header,
    read_cache,
    split_cache,
    write_cache,
)
from .errors import AdaptorError, ConfigError, FormatError, NumericError, TrainingAborted
from .evaluate import ProbeConfig, evaluate
from .network import param_count
from .trainer import (
    CKPT_MAGIC,
    TrainConfig,
    decode_checkpoint,
    deterministic_from_env,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3

CHECKPOINT_NAME = "checkpoint.adpk"
METRICS_NAME = "metrics.jsonl"
CONFIG_ECHO_NAME = "config.json"


@dataclass
class RunConfigFile:
    """One JSON document for a run.

    ``{"train": {..., "adaptor": {...}}, "probe": {...}, "paths": {...}}``;
    every section is optional and falls back to the dataclass defaults.
    ``paths`` may name ``cache``, ``val_cache`` and ``out``; flags win.
    """

    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    paths: dict = field(default_factory=dict)

    PATH_KEYS = ("cache", "val_cache", "out")

    @classmethod
    def from_json(cls, text: str) -> "RunConfigFile":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - {"train", "probe", "paths"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        paths = d.get("paths", {})
        if not isinstance(paths, dict) or set(paths) - set(cls.PATH_KEYS):
            raise ConfigError(f"paths may only contain {list(cls.PATH_KEYS)}")
        try:
            train = TrainConfig.from_dict(d.get("train", {}))
            probe = ProbeConfig.from_dict(d.get("probe", {}))
        except (TypeError, AttributeError) as exc:
            raise ConfigError(f"malformed config section: {exc}") from None
        return cls(train, probe, dict(paths))


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INVALID):
        super().__init__(message)
        self.code = code


def _load_json(path: str | None) -> tuple[dict, str]:
    if path is None:
        return {}, "{}"
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {path}")
    text = p.read_text()
    try:
        return json.loads(text), text
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON: {exc}") from None


def _read_cache_arg(path: str, want_split: str | None = None):
    p = Path(path)
    if p.is_dir():
        if want_split is None:
            raise CliError(f"{path} is a directory; name a cache file")
        p = p / f"{want_split}.adpc"
    if not p.is_file():
        raise CliError(f"cache not found: {p}")
    return read_cache(p)


def _prepare_out(out: Path, force: bool, resuming: bool) -> None:
    if out.exists() and not out.is_dir():
        raise CliError(f"output path {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not resuming:
        if not force:
            raise CliError(f"output directory {out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


# -- commands ------------------------------------------------------------------
def cmd_synth(args) -> int:
    d, _ = _load_json(args.spec)
    if not isinstance(d, dict):
        raise CliError("spec must be a JSON object")
    spec = SynthSpec.benchmark(**d) if args.preset == "benchmark" else SynthSpec.from_dict(d)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    out = Path(args.out)
    _prepare_out(out, args.force, resuming=False)
    splits = split_cache(gen_synthetic(spec))
    manifest = {"spec": spec.to_dict(), "preset": args.preset, "files": {}}
    for name, cache in splits.items():
        write_cache(cache, out / f"{name}.adpc")
        manifest["files"][name] = {"path": f"{name}.adpc", "n_samples": cache.n_samples}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {', '.join(f'{k}={v.n_samples}' for k, v in splits.items())} to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    _, raw = _load_json(args.config)
    run = RunConfigFile.from_json(raw)
    config = run.train
    if deterministic_from_env():
        config = replace(config, deterministic=True)
    cache_path = args.cache or run.paths.get("cache")
    out_path = args.out or run.paths.get("out")
    if not cache_path or not out_path:
        raise CliError("both a cache and an output directory are required")
    train_cache = _read_cache_arg(cache_path, "train")
    val_cache = None
    val_path = run.paths.get("val_cache")
    if val_path:
        val_cache = _read_cache_arg(val_path, "val")
    elif Path(cache_path).is_dir() and (Path(cache_path) / "val.adpc").is_file():
        val_cache = read_cache(Path(cache_path) / "val.adpc")

    state = None
    if args.resume:
        if not Path(args.resume).is_file():
            raise CliError(f"checkpoint not found: {args.resume}")
        state, saved = load_checkpoint(args.resume)
        if saved.adaptor != config.adaptor:
            raise CliError("resume checkpoint adaptor config differs from --config")
    out = Path(out_path)
    _prepare_out(out, args.force, resuming=bool(args.resume))
    echo = CONFIG_ECHO_NAME if state is None else f"config.resume-{state.epoch}.json"
    (out / echo).write_text(raw)
    metrics = out / METRICS_NAME
    if not args.resume:
        metrics.write_text("")

    def log_epoch(record: dict) -> None:
        with metrics.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        print(f"epoch {record['epoch']:>3}  loss {record['loss']:.4f}  tau {record['tau']:.4f}", flush=True)

    state, _ = pretrain(config, train_cache, state, val_cache, on_epoch=log_epoch)
    save_checkpoint(state, config, out / CHECKPOINT_NAME)
    print(f"checkpoint: {out / CHECKPOINT_NAME} (step {state.step}, epoch {state.epoch})")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    state, _ = load_checkpoint(args.checkpoint)
    cache = _read_cache_arg(args.cache, "test")
    train_cache = _read_cache_arg(args.train_cache, "train") if args.train_cache else None
    probe = ProbeConfig()
    if args.config:
        _, raw = _load_json(args.config)
        probe = RunConfigFile.from_json(raw).probe
    if args.fraction is not None:
        probe = replace(probe, data_fraction=args.fraction)
    probe.validate()
    for c in (cache, train_cache):
        if c is not None and (c.d_img, c.d_txt) != (state.params.config.d_img, state.params.config.d_txt):
            raise CliError(
                f"cache dims ({c.d_img}, {c.d_txt}) do not match checkpoint "
                f"({state.params.config.d_img}, {state.params.config.d_txt})"
            )
    report = evaluate(state.params, cache, probe, train_cache=train_cache)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    if not report.frozen:
        raise CliError("adaptor parameters changed during evaluation", EXIT_NUMERIC)
    return EXIT_OK


def _inspect_cache(blob: bytes) -> tuple[dict, bool]:
    info: dict = {"kind": "cache", "magic": "ADPC"}
    try:
        info.update(parse_cache_header(blob).__dict__)
        decode_cache(blob)
        return info, True
    except FormatError as exc:
        info["error"] = str(exc)
        return info, False


def _inspect_checkpoint(blob: bytes) -> tuple[dict, bool]:
    info: dict = {"kind": "checkpoint", "magic": "ADPK"}
    if len(blob) >= 20:
        _, version, meta_len, payload_len = struct.unpack_from("<4sIIQ", blob)
        info.update(version=version, meta_len=meta_len, payload_len=payload_len)
    try:
        state, config = decode_checkpoint(blob)
    except FormatError as exc:
        info["error"] = str(exc)
        return info, False
    info.update(
        step=state.step,
        epoch=state.epoch,
        n_tensors=len(state.params),
        n_parameters=state.params.n_scalars(),
        param_count=param_count(config.adaptor),
        tau=state.params.tau,
        adaptor=config.adaptor.to_dict(),
    )
    return info, True


def cmd_inspect(args) -> int:
    p = Path(args.path)
    if not p.is_file():
        raise CliError(f"file not found: {args.path}")
    blob = p.read_bytes()
    if blob[:4] == CACHE_MAGIC:
        info, ok = _inspect_cache(blob)
    elif blob[:4] == CKPT_MAGIC:
        info, ok = _inspect_checkpoint(blob)
    else:
        raise CliError(f"{args.path}: unknown magic {blob[:4]!r}")
    for key, value in info.items():
        print(f"{key}: {json.dumps(value) if isinstance(value, dict) else value}")
    print(f"checksum: {'OK' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_INVALID


# -- parser ----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="adaptor", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate train/val/test synthetic caches")
    p.add_argument("--spec", help="SynthSpec JSON file (defaults if omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--preset", choices=["plain", "benchmark"], default="plain")
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="pre-train an adaptor on a cache")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--cache", help="train cache file or a directory written by synth")
    p.add_argument("--out", help="output directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="evaluate a frozen checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cache", required=True, help="evaluation cache (or synth directory: uses test)")
    p.add_argument("--train-cache", help="probe training cache; defaults to half of --cache")
    p.add_argument("--fraction", type=float, help="labelled fraction for the probe, e.g. 0.01, 0.1, 1.0")
    p.add_argument("--config", help="run config JSON (probe section is used)")
    p.add_argument("--out", help="also write the report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="print header fields of a cache or checkpoint")
    p.add_argument("--path", required=True)
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (AdaptorError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
