"""Command-line entry point: ``fgmask <subcommand> ...``.

Results go to stdout, diagnostics to stderr. Exit status: 0 success,
1 operation failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
import tempfile
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__, datasetkit, diffnet, netpbm, segmenter, trainer
from .adversary import AttackConfig, pgd_attack

log = logging.getLogger("fgmask")


class UsageError(Exception):
    pass


def real(text: str) -> float:
    """Float flag that also accepts fractions such as ``8/255``."""
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def _add_attack_flags(p, random_start):
    p.add_argument("--eps", type=real, default=8 / 255, help="L-inf budget (default 8/255)")
    p.add_argument("--step-size", type=real, default=2 / 255, help="PGD step (default 2/255)")
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--random-start", action=argparse.BooleanOptionalAction, default=random_start)
    p.add_argument("--attack-seed", type=int, default=0)


def _attack_from(args) -> AttackConfig:
    return AttackConfig(args.eps, args.step_size, args.steps, args.random_start, args.attack_seed)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fgmask", description="Foreground-mask adversarial robustness toolkit.")
    parser.add_argument("--version", action="version",
                        version=f"fgmask {__version__} (checkpoint MBNET1, manifest MBMANIFEST 1, annotations MBANNOT 1)")
    parser.add_argument("--config", metavar="FILE", help="key=value defaults for the subcommand's flags")
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS threads (1 = sequential)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("segment", help="graph-cut foreground mask for a P6 image")
    p.add_argument("image")
    p.add_argument("out", help="output P5 mask")
    p.add_argument("--sigma", type=real, default=0.1)
    p.add_argument("--seeds", type=int, default=25, help="foreground seed count")
    p.add_argument("--radius", type=real, default=0.15, help="centre disk radius as a fraction of min(h, w)")
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=4)
    p.add_argument("--quant", type=int, default=10_000, help="capacity quantization scale")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("build-dataset", help="cut masked 32x32 samples from normalized annotations")
    p.add_argument("annotations")
    p.add_argument("out_dir")
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--exclude", default="person", help="comma-separated labels to drop")
    p.add_argument("--size", type=int, default=32)

    p = sub.add_parser("synth", help="generate the synthetic shapes dataset")
    p.add_argument("out_dir")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--amplitude", type=real, default=0.3)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("binarize", help="threshold a P5/P6 image")
    p.add_argument("image")
    p.add_argument("out")
    p.add_argument("--threshold", type=real, default=0.5)

    p = sub.add_parser("train", help="train SmallVGG on a manifest")
    p.add_argument("manifest")
    p.add_argument("out", help="checkpoint path")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=real, default=trainer.TrainConfig.lr)
    p.add_argument("--momentum", type=real, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=trainer.MODES, default="natural")
    p.add_argument("--input", choices=trainer.INPUT_MODES, default="raw")
    _add_attack_flags(p, random_start=True)

    p = sub.add_parser("attack", help="PGD-attack a manifest and write adversarial images")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("out_dir")
    p.add_argument("--input", choices=trainer.INPUT_MODES, default="raw")
    p.add_argument("--batch-size", type=int, default=100)
    _add_attack_flags(p, random_start=False)

    p = sub.add_parser("eval", help="natural and PGD accuracy, or --table over four reports")
    p.add_argument("checkpoint", nargs="?")
    p.add_argument("manifest", nargs="?")
    p.add_argument("--input", choices=trainer.INPUT_MODES, default="raw")
    p.add_argument("--no-attack", action="store_true")
    p.add_argument("--report", help="write the report (key=value) here as well")
    p.add_argument("--data", choices=("X", "X_FG"), help="row label recorded in the report")
    p.add_argument("--training", choices=("N", "A"), help="row label recorded in the report")
    p.add_argument("--batch-size", type=int, default=100)
    p.add_argument("--table", nargs=4, metavar="REPORT",
                   help="render the comparison table from four report files")
    _add_attack_flags(p, random_start=False)

    p = sub.add_parser("gradcheck", help="finite-difference check of a random small CNN")
    p.add_argument("--seed", type=int, default=3)
    p.add_argument("--h", type=real, default=1e-4)
    p.add_argument("--tol", type=real, default=1e-3)

    p = sub.add_parser("end2end", help="synth -> train x4 -> eval x4 -> comparison table")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--amplitude", type=real, default=0.3)
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--test-fraction", type=real, default=0.2)
    p.add_argument("--epochs-natural", type=int, default=trainer.DEFAULT_EPOCHS["natural"])
    p.add_argument("--epochs-adv", type=int, default=trainer.DEFAULT_EPOCHS["adversarial"])
    p.add_argument("--train-steps", type=int, default=10, help="PGD steps used during adversarial training")
    p.add_argument("--lr", type=real, default=trainer.TrainConfig.lr)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--workdir", help="keep data, checkpoints and reports here")
    return parser


# --------------------------------------------------------------------------
# Config files
# --------------------------------------------------------------------------

def read_config(path):
    values = {}
    for no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{no}: expected key=value")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _apply_config(parser, argv, path):
    args = parser.parse_args(argv)
    if args.command is None:
        return args
    sp = _subparser(parser, args.command)
    actions = {a.dest: a for a in sp._actions if a.option_strings}
    defaults = {}
    for key, value in read_config(path).items():
        if key not in actions:
            raise UsageError(f"{path}: unknown key {key!r} for {args.command}")
        action = actions[key]
        if action.nargs == 0 or isinstance(action, argparse.BooleanOptionalAction):
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"{path}: {key} expects a boolean")
            defaults[key] = value.lower() in ("true", "1", "yes")
        else:
            defaults[key] = value
    sp.set_defaults(**defaults)
    return parser.parse_args(argv)


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_segment(args, out):
    img = netpbm.read_image(args.image)
    params = segmenter.SegmenterParams(args.sigma, args.connectivity, args.radius, args.seeds, args.quant)
    mask = segmenter.segment(img, params, args.seed)
    netpbm.write_mask(args.out, mask)
    print(f"foreground_fraction={datasetkit.foreground_fraction(mask)!r}", file=out)


def cmd_build_dataset(args, out):
    exclude = [s for s in args.exclude.split(",") if s]
    manifest, report = datasetkit.build_dataset(args.annotations, args.out_dir, args.top_k, exclude, args.size)
    print(f"emitted={report.emitted} unreadable={report.unreadable} filtered={report.filtered} "
          f"empty_mask={report.empty_mask} mean_foreground={report.mean_foreground:.4f}", file=out)
    print("classes=" + ",".join(manifest.label_names), file=out)


def cmd_synth(args, out):
    cfg = datasetkit.SynthConfig(args.samples, args.side, args.classes, args.amplitude, args.seed)
    manifest = datasetkit.synth_generate(cfg, args.out_dir)
    fr = datasetkit.manifest_foreground_fractions(manifest)
    if len(fr):
        print(f"samples={len(manifest)} mean_foreground={fr.mean():.4f} "
              f"min_foreground={fr.min():.4f} max_foreground={fr.max():.4f}", file=out)
    else:
        print("samples=0", file=out)


def cmd_binarize(args, out):
    img = netpbm.read_image(args.image)
    netpbm.write_image(args.out, datasetkit.binarize(img, args.threshold))


def _train_config(args, mode, input_mode, epochs):
    attack = AttackConfig(args.eps, args.step_size, args.steps, args.random_start, args.attack_seed)
    return trainer.TrainConfig(epochs, args.batch_size, args.lr, args.momentum, args.seed, mode, input_mode, attack)


def cmd_train(args, out):
    manifest = datasetkit.read_manifest(args.manifest)
    cfg = _train_config(args, args.mode, args.input, args.epochs)
    model, history = trainer.train(manifest, cfg)
    diffnet.save_model(model, args.out)
    for h in history:
        print(f"epoch={h.epoch} loss={h.loss:.6f} acc={h.accuracy:.6f}", file=out)


def cmd_attack(args, out):
    model = diffnet.load_model(args.checkpoint)
    manifest = datasetkit.read_manifest(args.manifest)
    masked = args.input == "masked"
    ds = trainer.Dataset.from_manifest(manifest, need_masks=masked)
    x = ds.inputs(args.input)
    cfg = _attack_from(args)
    out_dir = Path(args.out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records, clean, robust = [], 0, 0
    for start in range(0, len(ds), args.batch_size):
        sl = slice(start, start + args.batch_size)
        res = pgd_attack(model, x[sl], ds.labels[sl], cfg, ds.masks[sl] if masked else None)
        clean += int((res.clean_pred == ds.labels[sl]).sum())
        robust += int((res.adv_pred == ds.labels[sl]).sum())
        for i, img in enumerate(res.x_adv, start=start):
            rel = f"images/{i:06d}.ppm" if img.shape[0] == 3 else f"images/{i:06d}.pgm"
            pix = img.transpose(1, 2, 0) if img.shape[0] == 3 else img[0]
            netpbm.write_image(out_dir / rel, pix)
            records.append(datasetkit.Record(rel, None, int(ds.labels[i])))
    datasetkit.write_manifest(datasetkit.DatasetManifest(records, manifest.label_names, out_dir),
                              out_dir / "manifest.txt")
    print(f"natural_acc={clean / len(ds):.4f} adv_acc={robust / len(ds):.4f}", file=out)


def cmd_eval(args, out):
    if args.table:
        return _eval_table(args.table, out)
    if not (args.checkpoint and args.manifest):
        raise UsageError("eval needs CHECKPOINT and MANIFEST (or --table)")
    model = diffnet.load_model(args.checkpoint)
    manifest = datasetkit.read_manifest(args.manifest)
    attack = None if args.no_attack else _attack_from(args)
    report = trainer.evaluate(model, manifest, attack, args.input, args.batch_size)
    if args.data:
        report.config["data"] = args.data
    if args.training:
        report.config["training"] = args.training
    text = trainer.format_report(report)
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    out.write(text)


def _eval_table(paths, out):
    reports = [trainer.read_report(p) for p in paths]
    keyed = {}
    for default, r in zip(trainer.ROWS, reports):
        key = (r.config.get("data", default[0]), r.config.get("training", default[1]))
        if key in keyed:
            raise ValueError(f"duplicate report for {key}")
        keyed[key] = r
    if len({r.samples for r in reports}) != 1:
        raise ValueError("reports were computed over different sample counts")
    out.write(trainer.compare_table(keyed))


def gradcheck_model(seed: int) -> diffnet.Model:
    """Random 2-conv + 1-dense CNN on 1x8x8 inputs (116 parameters)."""
    layers = [diffnet.Conv2D(3, 3, 1, 2, 1, 1), diffnet.ReLU(), diffnet.MaxPool(2, 2),
              diffnet.Conv2D(3, 3, 2, 3, 1, 0), diffnet.ReLU(), diffnet.Dense(12, 3)]
    model = diffnet.init_model(layers, (1, 8, 8), seed)
    rng = np.random.default_rng([seed, 2])
    # non-zero biases so ReLU kinks are not all at the origin
    params = [tuple(a if a.ndim > 1 else rng.uniform(-0.1, 0.1, a.shape) for a in p) for p in model.params]
    return model.with_params(params)


def cmd_gradcheck(args, out):
    model = gradcheck_model(args.seed)
    rng = np.random.default_rng([args.seed, 3])
    x = rng.uniform(0, 1, (4,) + model.input_shape)
    y = rng.integers(0, model.n_classes, 4)
    report = diffnet.grad_check(model, x, y, args.h, args.tol)
    print(f"max_rel_err={report.max_rel_err:.3e} checked={report.n_checked} "
          f"{'PASS' if report.passed else 'FAIL'}", file=out)
    return 0 if report.passed else 1


def run_end2end(args, workdir: Path, out):
    cfg = datasetkit.SynthConfig(args.samples, args.side, args.classes, args.amplitude, args.seed)
    manifest = datasetkit.synth_generate(cfg, workdir / "data")
    n_test = int(round(len(manifest) * args.test_fraction))
    if not 0 < n_test < len(manifest):
        raise ValueError("test fraction leaves an empty train or test split")
    full = trainer.Dataset.from_manifest(manifest, need_masks=True)
    split = len(manifest) - n_test
    train_ds = trainer.Dataset(full.x[:split], full.labels[:split], full.n_classes, full.masks[:split])
    test_ds = trainer.Dataset(full.x[split:], full.labels[split:], full.n_classes, full.masks[split:])
    train_attack = AttackConfig(steps=args.train_steps, random_start=True)
    reports = {}
    for data, input_mode in (("X", "raw"), ("X_FG", "masked")):
        for training, mode, epochs in (("N", "natural", args.epochs_natural), ("A", "adversarial", args.epochs_adv)):
            log.info("training %s/%s (%d epochs)", data, training, epochs)
            tcfg = trainer.TrainConfig(epochs, args.batch_size, args.lr, 0.9, args.seed, mode, input_mode,
                                       train_attack)
            model, _ = trainer.train(train_ds, tcfg)
            tag = f"{data}_{training}"
            diffnet.save_model(model, workdir / f"{tag}.mbnet")
            report = trainer.evaluate(model, test_ds, AttackConfig(), input_mode)
            report.config.update(data=data, training=training)
            trainer.write_report(report, workdir / f"{tag}.report")
            reports[(data, training)] = report
    table = trainer.compare_table(reports)
    (workdir / "table.txt").write_text(table, encoding="utf-8")
    out.write(table)
    return reports


def cmd_end2end(args, out):
    if args.workdir:
        workdir = Path(args.workdir)
        workdir.mkdir(parents=True, exist_ok=True)
        run_end2end(args, workdir, out)
    else:
        with tempfile.TemporaryDirectory(prefix="fgmask-") as tmp:
            run_end2end(args, Path(tmp), out)


COMMANDS = {
    "segment": cmd_segment,
    "build-dataset": cmd_build_dataset,
    "synth": cmd_synth,
    "binarize": cmd_binarize,
    "train": cmd_train,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "end2end": cmd_end2end,
}


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None, out=None, err=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    if not argv:
        parser.print_usage(err)
        return 2
    try:
        with contextlib.redirect_stderr(err):
            args = parser.parse_args(argv)
            if args.config:
                args = _apply_config(parser, argv, args.config)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (UsageError, OSError) as exc:
        parser.print_usage(err)
        print(f"fgmask: error: {exc}", file=err)
        return 2
    if args.command is None:
        parser.print_usage(err)
        return 2
    handler = logging.StreamHandler(err)
    handler.setFormatter(logging.Formatter("%(name)s: %(message)s"))
    root = logging.getLogger("fgmask")
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    try:
        with _thread_limit(args.threads):
            code = COMMANDS[args.command](args, out)
        return int(code or 0)
    except UsageError as exc:
        parser.print_usage(err)
        print(f"fgmask: error: {exc}", file=err)
        return 2
    except (ValueError, OSError, RuntimeError, FloatingPointError, KeyError) as exc:
        print(f"fgmask {args.command}: error: {exc}", file=err)
        return 1
    finally:
        root.removeHandler(handler)


if __name__ == "__main__":
    sys.exit(main())
