"""Command line entry point: ``biref <subcommand> [options]``.

Configuration comes from code defaults, then an optional TOML file with
``[data] [model] [loss] [train] [metrics]`` sections, then ``--set
section.key=value`` overrides. The merged configuration is written to
``config.toml`` in every run's output directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import toml

from .datasets import FAMILIES, ConfigError, Corpus, CorpusError, SyntheticSpec, generate_synthetic_corpus, load_corpus, save_corpus
from .losses import LossConfig
from .metrics import MetricConfig, evaluate_corpus
from .model import ModelConfig
from .trainer import TrainConfig, TrainingDiverged, ablate, finetune, infer, parse_grid, train

logger = logging.getLogger("biref")

OUT_ENV = "BIREF_OUT"
SUBCOMMANDS = ("gen-data", "train", "finetune", "eval", "infer", "ablate", "plot")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


class UsageError(Exception):
    """Bad input detected before or while running; maps to exit status 2."""


@dataclass
class DataConfig:
    # empty root -> generate a synthetic corpus in memory
    root: str = ""
    train_split: str = "train"
    val_split: str = "val"
    manifest: str = ""
    count: int = 200
    val_count: int = 64
    canvas: tuple[int, int] = (128, 128)
    mix: dict[str, float] = field(default_factory=lambda: {f: 0.25 for f in FAMILIES})
    stroke_widths: tuple[int, int] = (2, 4)
    seed: int = 0

    def spec(self, split: str) -> SyntheticSpec:
        count = self.count if split == self.train_split else self.val_count
        # the held-out split draws from a disjoint seed stream
        seed = self.seed if split == self.train_split else self.seed + 1_000_003
        return SyntheticSpec(count=count, canvas=tuple(self.canvas), mix=dict(self.mix), stroke_widths=tuple(self.stroke_widths), seed=seed)


SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "metrics": MetricConfig,
}


@dataclass
class RunConfig:
    data: DataConfig
    model: ModelConfig
    loss: LossConfig
    train: TrainConfig
    metrics: MetricConfig

    def to_toml(self) -> str:
        def clean(v):
            if isinstance(v, dict):
                return {str(k): clean(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            return v

        doc = {}
        for name in SECTIONS:
            d = dataclasses.asdict(getattr(self, name))
            # TOML has no null; unset optional values are left out
            doc[name] = {k: clean(v) for k, v in d.items() if v is not None}
        return toml.dumps(doc)


def _coerce(cls, values: dict, where: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ConfigError(f"[{where}] unknown key(s): {', '.join(unknown)}; valid: {', '.join(fields)}")
    defaults = cls()
    out = {}
    for k, v in values.items():
        ref = getattr(defaults, k)
        if isinstance(ref, tuple) and isinstance(v, list):
            v = tuple(v)
        elif isinstance(ref, bool) and not isinstance(v, bool):
            raise ConfigError(f"[{where}] {k}: expected true/false, got {v!r}")
        elif isinstance(ref, float) and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        elif ref is not None and not isinstance(v, type(ref)) and not isinstance(ref, (tuple, dict)):
            raise ConfigError(f"[{where}] {k}: expected {type(ref).__name__}, got {type(v).__name__} ({v!r})")
        if k == "stage_weights":
            v = {int(s): float(x) for s, x in v.items()}
        out[k] = v
    try:
        obj = dataclasses.replace(defaults, **out)
    except TypeError as e:
        raise ConfigError(f"[{where}] {e}") from e
    if hasattr(obj, "validate"):
        try:
            obj.validate()
        except ValueError as e:
            raise ConfigError(f"[{where}] {e}") from e
    return obj


def _parse_value(text: str):
    try:
        return toml.loads(f"v = {text}")["v"]
    except toml.TomlDecodeError:
        return text


def load_config(path: str | None, overrides: list[str]) -> RunConfig:
    raw: dict[str, dict] = {name: {} for name in SECTIONS}
    if path:
        try:
            doc = toml.loads(Path(path).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except toml.TomlDecodeError as e:
            raise ConfigError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from e
        for name, body in doc.items():
            if name not in SECTIONS:
                raise ConfigError(f"{path}: unknown section [{name}]; valid: {', '.join(SECTIONS)}")
            if not isinstance(body, dict):
                raise ConfigError(f"{path}: '{name}' must be a section")
            raw[name].update(body)
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        if section not in SECTIONS:
            raise ConfigError(f"--set {item!r}: unknown section {section!r}")
        parts = name.split(".")
        target = raw[section]
        for p in parts[:-1]:
            target = target.setdefault(p, {})
        target[parts[-1]] = _parse_value(value.strip())
    return RunConfig(**{name: _coerce(cls, raw[name], name) for name, cls in SECTIONS.items()})


def default_out(sub: str) -> Path:
    return Path(os.environ.get(OUT_ENV, "runs")) / sub


def prepare_out(path: Path, cfg: RunConfig | None) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    if cfg is not None:
        (path / "config.toml").write_text(cfg.to_toml())
    return path


def get_corpora(cfg: RunConfig) -> tuple[Corpus, Corpus]:
    d = cfg.data
    if d.root:
        manifest = d.manifest or None
        try:
            tr = load_corpus(d.root, d.train_split, manifest)
            va = load_corpus(d.root, d.val_split, manifest)
        except (FileNotFoundError, CorpusError) as e:
            raise UsageError(str(e)) from e
    else:
        tr = generate_synthetic_corpus(d.spec(d.train_split))
        va = generate_synthetic_corpus(d.spec(d.val_split))
    if len(tr) == 0 or len(va) == 0:
        raise UsageError("training and validation corpora must be nonempty")
    if len(tr.categories) != cfg.model.num_classes:
        raise UsageError(f"corpus has {len(tr.categories)} categories but model.num_classes = {cfg.model.num_classes}")
    return tr, va


def _gather_images(paths: list[str]) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES))
        elif p.exists():
            out.append(p)
        else:
            raise UsageError(f"no such file or directory: {p}")
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = prepare_out(args.out, cfg)
    d = cfg.data
    # data.root, when given, is where train/eval will look for the corpus
    dest = Path(d.root) if d.root else out
    for split in (d.train_split, d.val_split):
        corpus = generate_synthetic_corpus(d.spec(split))
        base = save_corpus(corpus, dest, split)
        print(f"{split}: {len(corpus)} samples -> {base}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    tr, va = get_corpora(cfg)
    out = prepare_out(args.out, cfg)
    try:
        result = train(tr, va, cfg.model, cfg.train, cfg.loss, out)
    except TrainingDiverged as e:
        print(f"training diverged: {e}; last good checkpoint: {e.checkpoint}", file=sys.stderr)
        return 1
    if result.history:
        last = result.history[-1]
        print(f"final epoch {last['epoch']}: fmax={last['fmax']:.4f} fw={last['fw']:.4f} mae={last['mae']:.4f}")
    print(f"checkpoint: {result.checkpoint}")
    return 0


def cmd_finetune(args, cfg: RunConfig) -> int:
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    tr, va = get_corpora(cfg)
    out = prepare_out(args.out, cfg)
    epochs = cfg.train.n_finetune if args.epochs is None else args.epochs
    result = finetune(args.checkpoint, tr, cfg.train, epochs, va, out)
    print(f"checkpoint: {result.checkpoint}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    for p in (args.pred, args.gt):
        if not Path(p).is_dir():
            raise UsageError(f"not a directory: {p}")
    out = prepare_out(args.out, cfg)
    report = evaluate_corpus(args.pred, args.gt, cfg.metrics, with_hce=not args.no_hce)
    jpath, cpath = report.write(out)
    print(json.dumps(report.summary, indent=2))
    print(f"report: {jpath} {cpath}")
    if not report.per_image:
        print("no matched prediction/gt pairs", file=sys.stderr)
        return 2
    if report.missing:
        print(f"unpaired or unreadable files excluded: {', '.join(report.missing)}", file=sys.stderr)
        return 2
    return 0


def cmd_infer(args, cfg: RunConfig) -> int:
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    images = _gather_images(args.images)
    if not images:
        raise UsageError("no input images")
    out = prepare_out(args.out, None)
    written, skipped = infer(args.checkpoint, images, out)
    print(f"wrote {len(written)} map(s) to {out}")
    for s in skipped:
        print(f"skipped unreadable image: {s}", file=sys.stderr)
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    try:
        grid = parse_grid(args.grid)
    except ValueError as e:
        raise UsageError(str(e)) from e
    if len(args.seeds) < 1:
        raise UsageError("need at least one seed")
    tr, va = get_corpora(cfg)
    out = prepare_out(args.out, cfg)
    result = ablate(grid, tr, va, cfg.model, cfg.train, args.seeds, cfg.loss)
    cpath, tpath = result.write(out)
    print(tpath.read_text(), end="")
    print(f"table: {cpath} {tpath}")
    return 0


def cmd_plot(args, cfg: RunConfig) -> int:
    from . import plots

    missing = [p for p in args.paths if not Path(p).is_file()]
    if missing:
        raise UsageError(f"no such file: {missing[0]}")
    out = prepare_out(args.out, None)
    try:
        written = plots.plot_paths([Path(p) for p in args.paths], out)
    except plots.PlotInputError as e:
        raise UsageError(str(e)) from e
    for w in written:
        print(w)
    return 0


# ---------------------------------------------------------------------------
# parser


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


def _defaults_epilog(sections) -> str:
    rc = RunConfig(**{name: cls() for name, cls in SECTIONS.items()})
    doc = toml.loads(rc.to_toml())
    text = toml.dumps({s: doc[s] for s in sections})
    return "config defaults (override with --config FILE or --set section.key=value):\n\n" + text


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="biref", description=__doc__, formatter_class=_HelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")

    def add(name, help, sections, func):
        p = sub.add_parser(name, help=help, description=help, formatter_class=_HelpFormatter, epilog=_defaults_epilog(sections) if sections else None)
        p.add_argument("--config", default=None, help="TOML config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config value (repeatable)")
        p.add_argument("--out", type=Path, default=None, help=f"output directory (default: ${OUT_ENV}/{name}, ${OUT_ENV} defaulting to ./runs)")
        p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")
        p.set_defaults(func=func)
        return p

    add("gen-data", "write a synthetic corpus in the root/split/{im,gt} layout", ["data"], cmd_gen_data)
    add("train", "train a model", ["data", "model", "loss", "train", "metrics"], cmd_train)
    p = add("finetune", "IoU-only fine-tuning of a checkpoint", ["data", "train"], cmd_finetune)
    p.add_argument("--checkpoint", required=True, help="checkpoint to resume")
    p.add_argument("--epochs", type=int, default=None, help="fine-tune epochs (default: the train config's fine-tune count)")
    p = add("eval", "score prediction maps against ground truth", ["metrics"], cmd_eval)
    p.add_argument("--pred", required=True, help="directory of predicted maps")
    p.add_argument("--gt", required=True, help="directory of ground-truth maps")
    p.add_argument("--no-hce", action="store_true", help="skip the (slow) HCE metric")
    p = add("infer", "predict maps for images", [], cmd_infer)
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("images", nargs="+", help="image files or directories")
    p = add("ablate", "train a grid of flag settings over several seeds", ["data", "model", "loss", "train"], cmd_ablate)
    p.add_argument("--grid", nargs="+", required=True, metavar="FLAG=on,off", help="flags: rm inref outref mss rlft cff ipt")
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2], help="seed set shared by all variants")
    p = add("plot", "plot run logs, metric reports or ablation tables", [], cmd_plot)
    p.add_argument("paths", nargs="+", help="runlog.jsonl, report.json or ablation.csv files")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)], format="%(levelname)s %(name)s: %(message)s")
    if args.out is None:
        args.out = default_out(args.command)
    try:
        cfg = load_config(args.config, args.overrides)
        return args.func(args, cfg)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - any other failure is a runtime failure
        logger.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
