"""Command-line driver: gen-data, pretrain, probe, eval, ttt-eval, sweep.

Every command reads one INI-style config file. Relative paths resolve
against the config file's directory. Artifacts live in fixed places::

    <corpus_dir>/manifest.csv
    <checkpoint_dir>/pretrain.ckpt, probe.ckpt
    <report_dir>/*.csv
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import io
import logging
import sys
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path

from .audio import AudioFormatError, FrontendConfig
from .harness import (
    ProtocolError,
    ShiftSpec,
    SynthConfig,
    generate_synthetic_corpus,
    read_manifest,
    reports_csv,
)
from .model import CheckpointError, PatchConfig, atomic_write_bytes, load_checkpoint, save_checkpoint
from .pipeline import evaluate, pretrain_stage, probe_stage, sweep, validation_report
from .training import PretrainConfig, TrainConfig, write_loss_csv
from .ttt import TttConfig

log = logging.getLogger("mae_ttt")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_PREREQ = 0, 2, 3, 4

PRETRAIN_CKPT = "pretrain.ckpt"
PROBE_CKPT = "probe.ckpt"
MANIFEST = "manifest.csv"


class ConfigError(ValueError):
    pass


class MissingPrerequisite(RuntimeError):
    def __init__(self, stage: str, path: Path):
        super().__init__(f"missing prerequisite: run '{stage}' first ({path} not found)")
        self.stage = stage


# -------------------------------------------------------------------- config

SECTIONS = {
    "frontend": FrontendConfig,
    "patch": PatchConfig,
    "pretrain": PretrainConfig,
    "train": TrainConfig,
    "ttt": TttConfig,
    "synth": SynthConfig,
}
# produced by pretraining, never configured
_NOT_CONFIGURABLE = {"frontend": {"norm_mean", "norm_std"}}


@dataclass(frozen=True)
class Paths:
    corpus_dir: Path = Path("corpus")
    checkpoint_dir: Path = Path("checkpoints")
    report_dir: Path = Path("reports")


@dataclass(frozen=True)
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    seed: int = 0
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    patch: PatchConfig = field(default_factory=PatchConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ttt: TttConfig = field(default_factory=TttConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    @property
    def manifest(self) -> Path:
        return self.paths.corpus_dir / MANIFEST

    @property
    def pretrain_ckpt(self) -> Path:
        return self.paths.checkpoint_dir / PRETRAIN_CKPT

    @property
    def probe_ckpt(self) -> Path:
        return self.paths.checkpoint_dir / PROBE_CKPT


def _convert(raw: str, typ, where: str):
    origin = typing.get_origin(typ)
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw.strip()
        if origin is tuple:
            args = typing.get_args(typ)
            items = [x.strip() for x in raw.split(",") if x.strip()]
            return tuple(_convert(x, args[0], where) for x in items)
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from exc
    raise ConfigError(f"{where}: unsupported field type {typ}")


def _section(cls, items: dict[str, str], name: str, seed: int):
    hints = typing.get_type_hints(cls)
    allowed = {f.name for f in dataclasses.fields(cls)} - _NOT_CONFIGURABLE.get(name, set())
    unknown = sorted(set(items) - allowed)
    if unknown:
        raise ConfigError(f"[{name}]: unknown key(s) {', '.join(unknown)}; allowed: {', '.join(sorted(allowed))}")
    kwargs = {k: _convert(v, hints[k], f"[{name}] {k}") for k, v in items.items()}
    if "seed" in allowed and "seed" not in kwargs:
        kwargs["seed"] = seed
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def parse_config(text: str, base_dir: Path = Path(".")) -> RunConfig:
    """Parse a sectioned key=value config; unknown sections or keys are errors."""
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep key case so typos are not silently folded
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    known = {"run", "paths", *SECTIONS}
    unknown = sorted(set(cp.sections()) - known)
    if unknown:
        raise ConfigError(f"unknown section(s) {', '.join(unknown)}; allowed: {', '.join(sorted(known))}")
    run = dict(cp["run"]) if cp.has_section("run") else {}
    if set(run) - {"seed"}:
        raise ConfigError(f"[run]: unknown key(s) {', '.join(sorted(set(run) - {'seed'}))}; allowed: seed")
    seed = _convert(run.get("seed", "0"), int, "[run] seed")
    raw_paths = dict(cp["paths"]) if cp.has_section("paths") else {}
    allowed_paths = {f.name for f in dataclasses.fields(Paths)}
    if set(raw_paths) - allowed_paths:
        bad = ", ".join(sorted(set(raw_paths) - allowed_paths))
        raise ConfigError(f"[paths]: unknown key(s) {bad}; allowed: {', '.join(sorted(allowed_paths))}")
    paths = Paths(**{k: base_dir / Path(getattr(Paths(), k) if k not in raw_paths else raw_paths[k].strip())
                     for k in allowed_paths})
    sections = {name: _section(cls, dict(cp[name]) if cp.has_section(name) else {}, name, seed)
                for name, cls in SECTIONS.items()}
    return RunConfig(paths=paths, seed=seed, **sections)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, path.resolve().parent)


def default_config_text() -> str:
    """A complete config with every key at its default value."""
    out = ["[run]", "seed = 0", "", "[paths]"]
    for f in dataclasses.fields(Paths):
        out.append(f"{f.name} = {getattr(Paths(), f.name)}")
    for name, cls in SECTIONS.items():
        out += ["", f"[{name}]"]
        inst = cls()
        for f in dataclasses.fields(cls):
            if f.name in _NOT_CONFIGURABLE.get(name, set()) or f.name == "seed":
                continue
            v = getattr(inst, f.name)
            out.append(f"{f.name} = {', '.join(map(str, v)) if isinstance(v, tuple) else v}")
    return "\n".join(out) + "\n"


# ----------------------------------------------------------------- commands


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingPrerequisite(stage, path)
    return path


def _report_path(cfg: RunConfig, name: str) -> Path:
    cfg.paths.report_dir.mkdir(parents=True, exist_ok=True)
    return cfg.paths.report_dir / name


def _slug(spec: ShiftSpec) -> str:
    return "".join(c if c.isalnum() or c in "._-" else "_" for c in spec.label)


def _load(cfg: RunConfig, path: Path):
    return load_checkpoint(path, expect_patch=cfg.patch, expect_frontend=cfg.frontend)


def cmd_gen_data(cfg: RunConfig, args) -> str:
    manifest = generate_synthetic_corpus(cfg.synth, cfg.paths.corpus_dir)
    entries = read_manifest(manifest)
    counts = {s: sum(e.split == s for e in entries) for s in ("train", "validation", "test")}
    return f"gen-data: {manifest} train={counts['train']} validation={counts['validation']} test={counts['test']}"


def cmd_pretrain(cfg: RunConfig, args) -> str:
    entries = read_manifest(_require(cfg.manifest, "gen-data"))
    pre = pretrain_stage(entries, cfg.paths.corpus_dir, cfg.frontend, cfg.patch, cfg.pretrain, init_seed=cfg.seed)
    cfg.paths.checkpoint_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(cfg.pretrain_ckpt, pre.params, pre.frontend, ["pretrain"])
    write_loss_csv(_report_path(cfg, "pretrain_loss.csv"), pre.losses)
    last = pre.losses[-1] if pre.losses else float("nan")
    return f"pretrain: {cfg.pretrain_ckpt} steps={len(pre.losses)} final_loss={last:.4f}"


def cmd_probe(cfg: RunConfig, args) -> str:
    entries = read_manifest(_require(cfg.manifest, "gen-data"))
    ck = _load(cfg, _require(cfg.pretrain_ckpt, "pretrain"))
    result = probe_stage(entries, cfg.paths.corpus_dir, ck.params, ck.frontend, cfg.train,
                         finetune_encoder=args.finetune_encoder)
    stage = "probe-ft" if args.finetune_encoder else "probe"
    save_checkpoint(cfg.probe_ckpt, ck.params, ck.frontend, [*ck.stages, stage])
    write_loss_csv(_report_path(cfg, "probe_loss.csv"), result.step_losses)
    val = validation_report(entries, cfg.paths.corpus_dir, ck.params, ck.frontend, seed=cfg.seed)
    return (f"probe: {cfg.probe_ckpt} epochs={len(result.epoch_losses)} "
            f"final_loss={result.epoch_losses[-1]:.4f} validation macro-F={val.macro_f:.2f}")


def _eval(cfg: RunConfig, args, mode: str) -> str:
    entries = read_manifest(_require(cfg.manifest, "gen-data"))
    ck = _load(cfg, _require(cfg.probe_ckpt, "probe"))
    spec = ShiftSpec.parse(args.shift)
    res = evaluate(entries, cfg.paths.corpus_dir, ck.params, ck.frontend, spec, mode,
                   ttt_cfg=cfg.ttt if mode == "ttt" else None, train_cfg=cfg.train, seed=cfg.seed)
    name = "eval" if mode == "frozen" else "ttt_eval"
    out = _report_path(cfg, f"{name}_{_slug(spec)}.csv")
    atomic_write_bytes(out, reports_csv([res.report]).encode())
    if mode == "ttt":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "step", "loss"])
        for sid in sorted(res.traces):
            for step, loss in enumerate(res.traces[sid], start=1):
                w.writerow([sid, step, repr(float(loss))])
        atomic_write_bytes(_report_path(cfg, f"ttt_trace_{_slug(spec)}.csv"), buf.getvalue().encode())
    r = res.report
    return (f"{name.replace('_', '-')}: {spec.label} macro-F={r.macro_f:.2f} "
            f"(CI {r.ci_low:.2f}-{r.ci_high:.2f}, n={r.n_recordings}) -> {out}")


def cmd_eval(cfg: RunConfig, args) -> str:
    return _eval(cfg, args, "frozen")


def cmd_ttt_eval(cfg: RunConfig, args) -> str:
    return _eval(cfg, args, "ttt")


def parse_checkpoints(text: str) -> list[int]:
    try:
        steps = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"--checkpoints must be comma-separated integers, got {text!r}") from exc
    if not steps:
        raise ConfigError("--checkpoints is empty")
    return steps


def cmd_sweep(cfg: RunConfig, args) -> str:
    entries = read_manifest(_require(cfg.manifest, "gen-data"))
    ck = _load(cfg, _require(cfg.probe_ckpt, "probe"))
    spec = ShiftSpec.parse(args.shift)
    steps = parse_checkpoints(args.checkpoints)
    ttt_cfg = replace(cfg.ttt, steps=max(cfg.ttt.steps, max(steps)))
    rows = sweep(entries, cfg.paths.corpus_dir, ck.params, ck.frontend, spec, ttt_cfg, steps, seed=cfg.seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["steps", "macro_f", "f1_healthy", "f1_depressed"])
    for r in rows:
        w.writerow([r.steps, f"{r.macro_f:.4f}", f"{r.f1_healthy:.4f}", f"{r.f1_depressed:.4f}"])
    out = _report_path(cfg, f"sweep_{_slug(spec)}.csv")
    atomic_write_bytes(out, buf.getvalue().encode())
    summary = " ".join(f"{r.steps}:{r.macro_f:.2f}" for r in rows)
    return f"sweep: {spec.label} macro-F by steps {summary} -> {out}"


COMMANDS = {
    "gen-data": (cmd_gen_data, "write the synthetic corpus and manifest"),
    "pretrain": (cmd_pretrain, "masked-reconstruction pretraining -> pretrain.ckpt"),
    "probe": (cmd_probe, "train the classification head -> probe.ckpt"),
    "eval": (cmd_eval, "frozen evaluation under one shift"),
    "ttt-eval": (cmd_ttt_eval, "test-time-training evaluation under one shift"),
    "sweep": (cmd_sweep, "macro-F at several TTT step counts"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mae-ttt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    init = sub.add_parser("init-config", help="print a config with every key at its default")
    init.set_defaults(func=None)
    for name, (func, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="path to the run config")
        if name == "probe":
            p.add_argument("--finetune-encoder", action="store_true",
                           help="update the encoder together with the head")
        if name in ("eval", "ttt-eval", "sweep"):
            p.add_argument("--shift", default="clean",
                           help="clean | noise:TYPE[:SNR] | gender_cross:G[:G] | dataset_cross:TAG[:TAG]")
        if name == "sweep":
            p.add_argument("--checkpoints", default="0,5,10,20", help="comma-separated step counts")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "init-config":
        sys.stdout.write(default_config_text())
        return EXIT_OK
    try:
        cfg = load_config(args.config)
        print(args.func(cfg, args))
    except MissingPrerequisite as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except (ConfigError, CheckpointError, ProtocolError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, AudioFormatError) as exc:
        where = getattr(exc, "filename", None)
        msg = f"{exc.strerror}: {where}" if where and getattr(exc, "strerror", None) else str(exc)
        print(f"i/o error: {msg}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # bad --shift text and other argument values
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
