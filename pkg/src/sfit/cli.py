"""Command-line driver: ``sfit <subcommand> [--config FILE] [overrides]``.

All stages share one run directory (``--out``). Unless a path is given in the
config or on the command line, a stage reads its inputs from, and writes its
outputs to, the standard layout::

    <out>/data/{source,target}_{train,test}-{images,labels}-idx*-ubyte
    <out>/source.ckpt  target.ckpt  generator_init.ckpt  generator.ckpt
    <out>/target_finetuned.ckpt  report.json  <stage>.log.csv ...
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import data as D
from . import pipelines as P
from .config import RunConfig, _coerce, _FIELDS, dump_config, load_config
from .errors import ConfigError, SfitError
from .eval import evaluate_branches, export_grid, export_gram_heatmap, translate
from .models import load_classifier, load_generator, save_checkpoint

SUBCOMMANDS = (
    "make-synthetic",
    "train-source",
    "adapt-target",
    "init-generator",
    "train-sfit",
    "finetune",
    "evaluate",
    "export-images",
    "export-heatmap",
    "selftest",
)

logger = logging.getLogger("sfit")


class Run:
    """Resolved paths for one invocation."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.data_dir = Path(cfg.data) if cfg.data else self.out / "data"

    def split(self, name: str, labeled: bool = True) -> D.ImageSet:
        images = self.data_dir / f"{name}-images-idx3-ubyte"
        labels = self.data_dir / f"{name}-labels-idx1-ubyte"
        _require(images)
        return D.load_idx(images, labels if labeled and labels.exists() else None)

    def ckpt(self, field: str, default: str) -> Path:
        value = getattr(self.cfg, field)
        return Path(value) if value else self.out / default


def _require(path: Path):
    if not Path(path).exists():
        raise SfitError(f"required file not found: {path}")


def _classifier(path: Path):
    _require(path)
    return load_classifier(path)


def _generator(path: Path):
    _require(path)
    return load_generator(path)


# ------------------------------------------------------------------ commands

def cmd_make_synthetic(run: Run):
    cfg = run.cfg
    if cfg.base_images:
        base = D.load_idx(cfg.base_images, cfg.base_labels or None)
        base_name = cfg.base_images
    else:
        base = D.load_bundled_mnist()
        base_name = "bundled:" + D.BUNDLED_IMAGES
    source_t = D.DomainTransform.parse(cfg.source_transform)
    target_t = D.DomainTransform.parse(cfg.target_transform)
    source, target = D.make_domain_pair(base, source_t, target_t, cfg.split_seed)
    run.data_dir.mkdir(parents=True, exist_ok=True)
    for domain, full in (("source", source), ("target", target)):
        train, test = D.split(full, cfg.train_fraction, cfg.split_seed + 1)
        for part, subset in (("train", train), ("test", test)):
            name = f"{domain}_{part}"
            D.save_idx(subset, run.data_dir / f"{name}-images-idx3-ubyte", run.data_dir / f"{name}-labels-idx1-ubyte")
            logger.info("%s: %d images", name, len(subset))
    D.write_manifest(
        run.data_dir / "manifest.txt",
        base=base_name,
        source_transform=source_t,
        target_transform=target_t,
        split_seed=cfg.split_seed,
        train_fraction=cfg.train_fraction,
    )


def cmd_train_source(run: Run):
    log = P.TrainLog("train_source", run.cfg.seed)
    model = P.train_source(run.cfg, run.split("source_train"), log)
    save_checkpoint(model, run.out / "source.ckpt")
    log.write(run.out)


def cmd_adapt_target(run: Run):
    cfg = run.cfg
    source = _classifier(run.ckpt("source_ckpt", "source.ckpt"))
    target_train = run.split("target_train", labeled=False)
    log = P.TrainLog("adapt_target", cfg.seed)
    if cfg.adapt_method == "im":
        model = P.adapt_target_im(cfg, source, target_train, log)
    else:
        model = P.adapt_target_mmd(cfg, source, run.split("source_train"), target_train, log)
    save_checkpoint(model, run.out / "target.ckpt")
    log.write(run.out)


def cmd_init_generator(run: Run):
    source = _classifier(run.ckpt("source_ckpt", "source.ckpt"))
    log = P.TrainLog("init_generator", run.cfg.seed)
    gen = P.init_generator(run.cfg, source, run.split("target_train", labeled=False), log)
    save_checkpoint(gen, run.out / "generator_init.ckpt")
    log.write(run.out)


def cmd_train_sfit(run: Run):
    source = _classifier(run.ckpt("source_ckpt", "source.ckpt"))
    target = _classifier(run.ckpt("target_ckpt", "target.ckpt"))
    gen = _generator(run.ckpt("generator_ckpt", "generator_init.ckpt"))
    log = P.TrainLog("train_sfit", run.cfg.seed)
    gen = P.train_sfit(run.cfg, source, target, gen, run.split("target_train", labeled=False), log)
    save_checkpoint(gen, run.out / "generator.ckpt")
    log.write(run.out)


def cmd_finetune(run: Run):
    source = _classifier(run.ckpt("source_ckpt", "source.ckpt"))
    target = _classifier(run.ckpt("target_ckpt", "target.ckpt"))
    gen = _generator(run.ckpt("generator_ckpt", "generator.ckpt"))
    log = P.TrainLog("finetune", run.cfg.seed)
    model = P.finetune_target(run.cfg, source, target, gen, run.split("target_train", labeled=False), log)
    save_checkpoint(model, run.out / "target_finetuned.ckpt")
    log.write(run.out)


def cmd_evaluate(run: Run, name: str = "report"):
    source = _classifier(run.ckpt("source_ckpt", "source.ckpt"))
    target = _classifier(run.ckpt("target_ckpt", "target.ckpt"))
    gen = _generator(run.ckpt("generator_ckpt", "generator.ckpt"))
    report = evaluate_branches(source, target, gen, run.split("target_test"))
    report.write(run.out, name)
    print(report.to_json(), end="")


def cmd_export_images(run: Run, count: int = 8):
    gen = _generator(run.ckpt("generator_ckpt", "generator.ckpt"))
    test = run.split("target_test", labeled=False)
    sample = test.subset(np.arange(min(count, len(test))))
    path = run.out / "grid.png"
    export_grid([sample, translate(gen, sample)], path)
    print(path)


def cmd_export_heatmap(run: Run, index: int = 0):
    source = _classifier(run.ckpt("source_ckpt", "source.ckpt"))
    target = _classifier(run.ckpt("target_ckpt", "target.ckpt"))
    gen = _generator(run.ckpt("generator_ckpt", "generator.ckpt"))
    test = run.split("target_test", labeled=False)
    x = torch.from_numpy(np.array(test.images[index:index + 1]))
    source.eval(), target.eval(), gen.eval()
    with torch.no_grad():
        f_t = target(x).feature_map[0].numpy()
        f_s = source(gen(x)).feature_map[0].numpy()
    for normalized in (True, False):
        path = run.out / f"heatmap_{'normalized' if normalized else 'raw'}.png"
        export_gram_heatmap(f_t, f_s, normalized, path)
        print(path)


COMMANDS = {
    "make-synthetic": cmd_make_synthetic,
    "train-source": cmd_train_source,
    "adapt-target": cmd_adapt_target,
    "init-generator": cmd_init_generator,
    "train-sfit": cmd_train_sfit,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "export-images": cmd_export_images,
    "export-heatmap": cmd_export_heatmap,
}

STAGE_OF = {
    "make-synthetic": "make_synthetic",
    "train-source": "train_source",
    "adapt-target": "adapt_target",
    "init-generator": "init_generator",
    "train-sfit": "train_sfit",
    "finetune": "finetune",
    "evaluate": "evaluate",
    "export-images": "evaluate",
    "export-heatmap": "evaluate",
}


# ------------------------------------------------------------------ parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfit", description="Source-free image translation laboratory.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("-v", "--verbose", action="count", default=0)
        if name == "selftest":
            continue
        p.add_argument("--config", help="TOML file with [stage.<name>] tables")
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--out", help="run directory (default: run)")
        p.add_argument("--data", help="directory holding the IDX splits")
        p.add_argument("--source-ckpt")
        p.add_argument("--target-ckpt")
        p.add_argument("--generator-ckpt")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config field, e.g. --set w_rp=0")
        if name == "evaluate":
            p.add_argument("--name", default="report", help="report file prefix")
    return parser


def _parse_value(key: str, text: str):
    kind = type(_FIELDS[key].default)
    try:
        value = kind(text)
    except ValueError:
        raise ConfigError(f"--set {key}: cannot parse {text!r} as {kind.__name__}") from None
    return _coerce(key, value)


def effective_config(args) -> RunConfig:
    stage = STAGE_OF[args.command]
    cfg = RunConfig(stage=stage)
    if args.config:
        cfg = load_config(args.config).get(stage, cfg)
    changes = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep or key not in _FIELDS:
            raise ConfigError(f"--set expects KEY=VALUE with a known key, got {item!r}")
        changes[key] = _parse_value(key, value)
    for flag, field in (("seed", "seed"), ("epochs", "epochs"), ("out", "out"), ("data", "data"),
                        ("source_ckpt", "source_ckpt"), ("target_ckpt", "target_ckpt"),
                        ("generator_ckpt", "generator_ckpt")):
        value = getattr(args, flag)
        if value is not None:
            changes[field] = value
    try:
        return cfg.replace(**changes) if changes else cfg
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "selftest":
        from . import selftest

        failures = selftest.run()
        print("selftest: " + ("all checks passed" if not failures else f"{failures} check(s) failed"))
        return 1 if failures else 0

    try:
        cfg = effective_config(args)
        run = Run(cfg)
        run.out.mkdir(parents=True, exist_ok=True)
        config_name = args.command.replace("-", "_") if cfg.stage == "evaluate" else cfg.stage
        (run.out / f"{config_name}.config.toml").write_text(dump_config(cfg))
        if args.command == "evaluate":
            cmd_evaluate(run, args.name)
        else:
            COMMANDS[args.command](run)
    except (SfitError, OSError) as exc:
        print(f"sfit {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def run(argv) -> int:
    """Invoke the CLI in-process and return its exit code (2 on usage errors)."""
    try:
        return main(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2


if __name__ == "__main__":
    sys.exit(main())
