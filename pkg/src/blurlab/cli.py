"""Command-line interface.

Exit codes: 0 on success, 1 on usage errors (bad flags or arguments),
2 on runtime failures (bad files, failed stages, invalid configs).
"""

from __future__ import annotations

import argparse
import dataclasses
import difflib
import os
import re
import sys

import numpy as np

from . import __version__
from .dataset import (
    generate_shapeseg,
    generate_shapestex,
    save_shapeseg,
    save_shapestex,
)
from .errors import BlurLabError
from .harness import (
    Experiment,
    emit_plots,
    load_config,
    run_experiment,
    _write_csv,
)
from .imaging import degrade_eval, load_image, save_image
from .net import (
    blurnet_s,
    load_checkpoint,
    save_checkpoint,
)
from .psf import (
    box_kernel,
    camera_shake_kernel,
    delta_kernel,
    disk_kernel,
    gaussian_kernel,
    load_kernel,
    save_kernel,
)

__all__ = ["main"]


class _Parser(argparse.ArgumentParser):
    """argparse with exit code 1 for usage errors and did-you-mean hints."""

    def error(self, message: str) -> "argparse.NoReturn":  # type: ignore[name-defined]
        m = re.search(r"unrecognized arguments: (-[^\s]*)", message)
        if m:
            hint = _closest_option(self, m.group(1))
            if hint:
                message += f" (did you mean {hint}?)"
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _all_options(parser: argparse.ArgumentParser) -> set[str]:
    options: set[str] = set()
    for action in parser._actions:  # noqa: SLF001 - argparse has no public walk
        options.update(action.option_strings)
        if isinstance(action, argparse._SubParsersAction):  # noqa: SLF001
            for sub in action.choices.values():
                options.update(_all_options(sub))
    return options


def _closest_option(parser: argparse.ArgumentParser, flag: str) -> str | None:
    root = parser
    while getattr(root, "_blurlab_parent", None) is not None:
        root = root._blurlab_parent
    matches = difflib.get_close_matches(flag, sorted(_all_options(root)), n=1, cutoff=0.5)
    return matches[0] if matches else None


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="blurlab",
        description="Blur-robustness experiments: kernels, datasets, training, reports.",
    )
    parser.add_argument("--version", action="version", version=f"blurlab {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def command(name: str, help_text: str) -> _Parser:
        p = sub.add_parser(name, help=help_text, description=help_text)
        p._blurlab_parent = parser
        return p

    # kernel ----------------------------------------------------------------
    kernel = command("kernel", "create or inspect blur kernels")
    ksub = kernel.add_subparsers(dest="kernel_command", metavar="ACTION", parser_class=_Parser)

    kgen = ksub.add_parser("gen", help="generate a kernel and write it as PSF1")
    kgen._blurlab_parent = parser
    kgen.add_argument(
        "--kind",
        required=True,
        choices=["delta", "disk", "box", "gaussian", "shake"],
        help="kernel family",
    )
    kgen.add_argument("--radius", type=float, help="disk radius in pixels (disk only)")
    kgen.add_argument("--length", type=int, help="box length in pixels (box only)")
    kgen.add_argument(
        "--orientation",
        choices=["h", "v"],
        help="box orientation: h (horizontal) or v (vertical)",
    )
    kgen.add_argument("--sigma", type=float, help="Gaussian standard deviation (gaussian only)")
    kgen.add_argument("--seed", type=int, default=0, help="trajectory seed (shake only)")
    kgen.add_argument("--out", required=True, help="output PSF1 path")

    kshow = ksub.add_parser("show", help="print a kernel's shape, mass, and support")
    kshow._blurlab_parent = parser
    kshow.add_argument("--in", dest="path", required=True, help="PSF1 file to inspect")
    kshow.add_argument(
        "--values", action="store_true", help="also print the full weight grid"
    )

    # dataset ---------------------------------------------------------------
    dataset = command("dataset", "generate synthetic datasets")
    dsub = dataset.add_subparsers(dest="dataset_command", metavar="ACTION", parser_class=_Parser)
    dgen = dsub.add_parser("gen", help="render a dataset split to a directory")
    dgen._blurlab_parent = parser
    dgen.add_argument(
        "--kind",
        default="shapestex",
        choices=["shapestex", "shapeseg"],
        help="dataset family: classification (shapestex) or segmentation (shapeseg)",
    )
    dgen.add_argument("--count", type=int, required=True, help="number of examples")
    dgen.add_argument("--render-size", type=int, default=96, help="square render size in pixels")
    dgen.add_argument("--seed", type=int, default=0, help="dataset seed")
    dgen.add_argument("--split", default="train", help="split tag mixed into each item's seed")
    dgen.add_argument("--out", required=True, help="output directory")

    # degrade ---------------------------------------------------------------
    deg = command("degrade", "apply the evaluation degradation to one image")
    deg.add_argument("--in", dest="path", required=True, help="input PGM/PPM image")
    deg.add_argument("--kernel", required=True, help="PSF1 kernel file")
    deg.add_argument("--canonical", type=int, default=96, help="blur-scale min side")
    deg.add_argument("--scale", type=int, default=64, help="output min side")
    deg.add_argument("--out", required=True, help="output image path")

    # train / finetune ------------------------------------------------------
    tr = command("train", "pretrain the baseline classifier from a config")
    tr.add_argument("--config", required=True, help="experiment config file")
    tr.add_argument("--seed", type=int, help="override the config master seed")
    tr.add_argument("--out", required=True, help="output checkpoint path")

    ft = command("finetune", "fine-tune a checkpoint under a named blur setting")
    ft.add_argument("--config", required=True, help="experiment config file")
    ft.add_argument("--model", required=True, help="input checkpoint path")
    ft.add_argument("--setting", required=True, help="name of a [finetune NAME] section")
    ft.add_argument("--seed", type=int, help="override the config master seed")
    ft.add_argument("--out", required=True, help="output checkpoint path")

    # eval / invariance -----------------------------------------------------
    ev = command("eval", "evaluate a checkpoint over the config's condition grid")
    ev.add_argument("--config", required=True, help="experiment config file")
    ev.add_argument("--model", required=True, help="checkpoint to evaluate")
    ev.add_argument("--name", default="model", help="model name used in the CSV rows")
    ev.add_argument("--seed", type=int, help="override the config master seed")
    ev.add_argument("--out", help="output CSV path (default: stdout)")

    inv = command("invariance", "binary-activation invariance maps for a checkpoint")
    inv.add_argument("--config", required=True, help="experiment config file")
    inv.add_argument("--model", required=True, help="checkpoint to probe")
    inv.add_argument("--name", default="model", help="model name used in output files")
    inv.add_argument("--seed", type=int, help="override the config master seed")
    inv.add_argument("--out", required=True, help="output directory for CSV and PGM heatmaps")

    # report / run ----------------------------------------------------------
    rep = command("report", "re-render plots from an existing report directory")
    rep.add_argument("--in", dest="path", required=True, help="report directory")
    rep.add_argument("--out", help="plot output directory (default: REPORT/plots)")

    run = command("run", "run the full experiment and write a report directory")
    run.add_argument("--config", required=True, help="experiment config file")
    run.add_argument("--seed", type=int, help="override the config master seed")
    run.add_argument("--out", help="override the config output directory")

    return parser


def _load(config_path: str, seed: int | None):
    config = load_config(config_path)
    if seed is not None:
        config = dataclasses.replace(config, master_seed=seed)
    return config


def _cmd_kernel_gen(args) -> int:
    def need(flag: str, value) -> None:
        if value is None:
            raise BlurLabError(f"--kind {args.kind} requires {flag}")

    if args.kind == "delta":
        kernel = delta_kernel()
    elif args.kind == "disk":
        need("--radius", args.radius)
        kernel = disk_kernel(args.radius)
    elif args.kind == "box":
        need("--length", args.length)
        need("--orientation", args.orientation)
        kernel = box_kernel(args.length, args.orientation)
    elif args.kind == "gaussian":
        need("--sigma", args.sigma)
        kernel = gaussian_kernel(args.sigma)
    else:
        kernel = camera_shake_kernel(args.seed)
    save_kernel(kernel, args.out)
    print(f"wrote {kernel.kind} kernel {kernel.weights.shape[0]}x{kernel.weights.shape[1]} to {args.out}")
    return 0


def _cmd_kernel_show(args) -> int:
    kernel = load_kernel(args.path)
    w = kernel.weights
    ys, xs = np.nonzero(w)
    total = w.sum()
    cy = float((ys * w[ys, xs]).sum() / total)
    cx = float((xs * w[ys, xs]).sum() / total)
    print(f"kind: {kernel.kind}")
    for key, value in sorted(kernel.params.items()):
        print(f"param {key}: {value}")
    print(f"extent: {w.shape[0]}x{w.shape[1]}")
    print(f"nonzero taps: {len(ys)}")
    print(f"sum: {total:.12f}")
    print(f"center of mass: ({cy:.4f}, {cx:.4f})")
    if args.values:
        for row in w:
            print(" ".join(f"{v:.6f}" for v in row))
    return 0


def _cmd_dataset_gen(args) -> int:
    if args.kind == "shapestex":
        examples = generate_shapestex(args.count, args.render_size, args.seed, args.split)
        save_shapestex(examples, args.out)
    else:
        examples = generate_shapeseg(args.count, args.render_size, args.seed, args.split)
        save_shapeseg(examples, args.out)
    print(f"wrote {len(examples)} {args.kind} examples to {args.out}")
    return 0


def _cmd_degrade(args) -> int:
    image = load_image(args.path)
    kernel = load_kernel(args.kernel)
    out = degrade_eval(image, kernel, args.canonical, args.scale)
    save_image(out, args.out)
    print(f"wrote {out.height}x{out.width} image to {args.out}")
    return 0


def _cmd_train(args) -> int:
    config = _load(args.config, args.seed)
    exp = Experiment(config)
    exp.generate_data()
    exp.pretrain()
    save_checkpoint(exp.models["baseline"], args.out)
    print(f"wrote baseline checkpoint to {args.out}")
    return 0


def _cmd_finetune(args) -> int:
    config = _load(args.config, args.seed)
    setting = next((f for f in config.finetunes if f.name == args.setting), None)
    if setting is None:
        known = ", ".join(f.name for f in config.finetunes) or "none"
        raise BlurLabError(f"no [finetune {args.setting}] section (known: {known})")
    exp = Experiment(config)
    exp.generate_data()
    exp.models["baseline"] = load_checkpoint(args.model, blurnet_s(10))
    exp.run_finetune(setting)
    save_checkpoint(exp.models[setting.name], args.out)
    print(f"wrote {setting.name} checkpoint to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    config = _load(args.config, args.seed)
    config = dataclasses.replace(config, finetunes=())
    exp = Experiment(config)
    exp.generate_data()
    exp.models["baseline"] = load_checkpoint(args.model, blurnet_s(10))
    exp.evaluate_grid()
    rows = [[args.name] + row[1:] for row in exp.accuracy_rows()]
    header = ["model", "condition", "scale", "metric", "value"]
    if args.out:
        _write_csv(args.out, header, rows)
        print(f"wrote {len(rows)} rows to {args.out}")
    else:
        print(",".join(header))
        for row in rows:
            print(",".join(row))
    return 0


def _cmd_invariance(args) -> int:
    from .imaging import quantize8
    from .imaging import Image as _Image

    config = _load(args.config, args.seed)
    config = dataclasses.replace(
        config, finetunes=(), invariance_models=("baseline",)
    )
    exp = Experiment(config)
    exp.generate_data()
    exp.models["baseline"] = load_checkpoint(args.model, blurnet_s(10))
    rows, heatmaps = exp.invariance_outputs()
    os.makedirs(args.out, exist_ok=True)
    rows = [[args.name] + row[1:] for row in rows]
    _write_csv(os.path.join(args.out, "invariance.csv"), ["model", "tap", "value"], rows)
    for (_, tap), grid in heatmaps.items():
        save_image(quantize8(_Image(grid)), os.path.join(args.out, f"{args.name}_{tap}.pgm"))
    print(f"wrote invariance outputs for {len(heatmaps)} taps to {args.out}")
    return 0


def _cmd_report(args) -> int:
    files = emit_plots(args.path, args.out)
    if files:
        print(f"wrote {len(files)} plots")
    return 0


def _cmd_run(args) -> int:
    config = _load(args.config, args.seed)
    out = run_experiment(config, args.out)
    print(f"report written to {out}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("blurlab: error: a command is required", file=sys.stderr)
        return 1
    if args.command == "kernel" and args.kernel_command is None:
        print("blurlab kernel: error: an action (gen or show) is required", file=sys.stderr)
        return 1
    if args.command == "dataset" and args.dataset_command is None:
        print("blurlab dataset: error: an action (gen) is required", file=sys.stderr)
        return 1
    handlers = {
        ("kernel", "gen"): _cmd_kernel_gen,
        ("kernel", "show"): _cmd_kernel_show,
        ("dataset", "gen"): _cmd_dataset_gen,
    }
    simple = {
        "degrade": _cmd_degrade,
        "train": _cmd_train,
        "finetune": _cmd_finetune,
        "eval": _cmd_eval,
        "invariance": _cmd_invariance,
        "report": _cmd_report,
        "run": _cmd_run,
    }
    try:
        if args.command == "kernel":
            return handlers[("kernel", args.kernel_command)](args)
        if args.command == "dataset":
            return handlers[("dataset", args.dataset_command)](args)
        return simple[args.command](args)
    except BlurLabError as exc:
        print(f"blurlab: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"blurlab: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
