"""Command-line entry point.

Subcommands:
  generate   synthesize a dataset and write it as a dataset directory
  train      train a model; writes config.json, checkpoint/, history.csv/.png
  eval       evaluate a trained run under corruption settings; writes report.*
  gradcheck  finite-difference audit of every layer and fusion kind
  report     merge eval CSVs into one Table-style CSV/text/figure

A run directory is self-contained: `avfuse eval --config runs/x/config.json`
rebuilds the dataset and model from the echoed config and reads the
checkpoint next to it.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import ConfigError, RunConfig, echo_config, parse_config
from .data import DatasetError, generate, load_dataset, save_dataset, standardize
from .dropout import TEST_SETTINGS
from .fusion import FusionModel
from .gradcheck import check_parameter_gradients
from .report import (
    format_table,
    read_report_csv,
    render_history_figure,
    render_report_figure,
    report_rows,
    write_report_csv,
    write_table_csv,
)
from .train import (
    OptimConfig,
    TrainingDiverged,
    cross_entropy,
    evaluate,
    l1_loss,
    save_history,
    train,
)

GRADCHECK_TOL = 1e-4


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--set", dest="sets", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, default=None, help="override the run seed")
    p.add_argument("--out", default=None, help="override the output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avfuse", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (("generate", "synthesize and save a dataset"),
                            ("train", "train a model"),
                            ("gradcheck", "finite-difference gradient audit")):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)

    p = sub.add_parser("eval", help="evaluate a trained run")
    _add_common(p)
    p.add_argument("--settings", default="AV,A,V",
                   help="comma-separated corruption settings (AV,A,V,NA,NV)")

    p = sub.add_parser("report", help="merge eval CSVs into one table")
    p.add_argument("csvs", nargs="+", help="report.csv files to merge")
    p.add_argument("--out", default=".", help="directory for table.csv/.txt/.png")
    return parser


def _load_or_generate(cfg: RunConfig):
    if cfg.data_path is not None:
        return load_dataset(cfg.data_path)
    return generate(cfg.synth)


def cmd_generate(args) -> int:
    cfg = parse_config(args.config, args.sets, args.seed, args.out)
    out_dir = Path(cfg.data_path) if cfg.data_path is not None else cfg.out / "dataset"
    ds = generate(cfg.synth)
    save_dataset(ds, out_dir)
    echo_config(cfg, cfg.out)
    sizes = {name: len(samples) for name, samples in ds.splits.items()}
    print(f"wrote dataset to {out_dir} (splits: {sizes})")
    return 0


def cmd_train(args) -> int:
    cfg = parse_config(args.config, args.sets, args.seed, args.out)
    ds, _ = standardize(_load_or_generate(cfg))
    model = FusionModel(cfg.model, seed=cfg.seed)
    result = train(model, ds, cfg.policy, cfg.optim, seed=cfg.seed)
    echo_config(cfg, cfg.out)
    ckpt.save_arrays(result.best_state, cfg.out / "checkpoint")
    save_history(result.history, cfg.out / "history.csv")
    if result.history:
        render_history_figure(result.history, cfg.out / "history.png")
    print(f"trained {cfg.label} for {cfg.optim.epochs} epochs; "
          f"best val metric {result.best_metric:.4f}; run dir {cfg.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = parse_config(args.config, args.sets, args.seed, args.out)
    settings = tuple(s.strip().upper() for s in args.settings.split(",") if s.strip())
    unknown = [s for s in settings if s not in TEST_SETTINGS]
    if unknown:
        raise ConfigError(f"unknown settings {unknown}; choose from {TEST_SETTINGS}")
    ds, _ = standardize(_load_or_generate(cfg))
    model = FusionModel(cfg.model, seed=cfg.seed)
    model.load_state(ckpt.load_arrays(cfg.out / "checkpoint"))
    report = evaluate(model, ds.splits["test"], settings, seed=cfg.seed, label=cfg.label)
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_report_csv(report, cfg.out / "report.csv")
    rows = report_rows(report)
    text = format_table(rows)
    (cfg.out / "report.txt").write_text(text)
    render_report_figure(rows, cfg.out / "report.png", title=cfg.label)
    print(text, end="")
    return 0


def cmd_report(args) -> int:
    rows = []
    for path in args.csvs:
        if not Path(path).exists():
            print(f"report csv not found: {path}", file=sys.stderr)
            return 1
        rows.extend(read_report_csv(path))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_table_csv(rows, out_dir / "table.csv")
    text = format_table(rows)
    (out_dir / "table.txt").write_text(text)
    render_report_figure(rows, out_dir / "table.png", title="fusion comparison")
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def _gradcheck_model_cases():
    from .fusion import FusionKind, ModelConfig

    cases = []
    for kind in ("LT", "IT", "IA", "TAV", "TVA"):
        heads = (1, 4) if kind in ("LT", "IT", "IA") else (1,)
        for h in heads:
            cases.append((f"{kind}{h}", ModelConfig(
                fusion=FusionKind.parse(kind), heads=h, latent=8,
                task="classification", classes=3, d_audio=3, d_vision=4,
                audio_widths=[[2, 4], [6, 4]], vision_widths=[[3, 3], [4, 4]])))
    cases.append(("IA1/regression", ModelConfig(
        fusion=FusionKind.INTERMEDIATE_ATTENTION, heads=1, latent=8,
        task="regression", d_audio=3, d_vision=4,
        audio_widths=[[2, 4], [6, 4]], vision_widths=[[3, 3], [4, 4]])))
    return cases


def _layer_unit_checks() -> dict[str, float]:
    from .layers import BatchNorm1d, Conv1d, LayerNorm, Linear, max_pool1d
    from .rng import Rng
    from .tensor import Tensor, finite_diff_check, reduce_sum

    conv = Conv1d(3, 4, Rng(1), bias=True)
    bn = BatchNorm1d(3)
    ln = LayerNorm(4)
    lin = Linear(4, 2, Rng(2))
    x_seq = Tensor(Rng(3).gaussian((2, 6, 3)))
    checks = {
        "layer/conv1d": lambda: finite_diff_check(
            lambda t: reduce_sum(conv(t)), x_seq),
        "layer/batchnorm_train": lambda: finite_diff_check(
            lambda t: reduce_sum(bn(t, training=True)), x_seq),
        "layer/batchnorm_eval": lambda: finite_diff_check(
            lambda t: reduce_sum(bn(t, training=False)), x_seq),
        "layer/maxpool": lambda: finite_diff_check(
            lambda t: reduce_sum(max_pool1d(t)), Tensor(Rng(4).gaussian((2, 6, 3)))),
        "layer/layernorm": lambda: finite_diff_check(
            lambda t: reduce_sum(ln(t)), Tensor(Rng(5).gaussian((2, 3, 4)))),
        "layer/linear": lambda: finite_diff_check(
            lambda t: reduce_sum(lin(t)), Tensor(Rng(6).gaussian((3, 4)))),
    }
    return {name: fn() for name, fn in checks.items()}


def cmd_gradcheck(args) -> int:
    from .rng import Rng
    from .tensor import Tensor, finite_diff_check

    np.seterr(all="raise", under="ignore")
    try:
        failures = 0

        def report_line(name, err):
            nonlocal failures
            ok = err < GRADCHECK_TOL
            failures += 0 if ok else 1
            print(f"{name:<28s} max_rel_err={err:.3e}  {'OK' if ok else 'FAIL'}")

        for name, err in _layer_unit_checks().items():
            report_line(name, err)

        batch = 4
        audio = Rng(7).gaussian((batch, 16, 3))
        vision = Rng(8).gaussian((batch, 5, 4))
        labels = np.array([0, 1, 2, 1])
        targets = np.array([0.5, -1.0, 2.0, 0.0])

        for name, mcfg in _gradcheck_model_cases():
            model = FusionModel(mcfg, seed=11)

            def loss_fn():
                out = model.forward(audio, vision, training=True)
                if mcfg.task == "classification":
                    return cross_entropy(out, labels)
                return l1_loss(out, targets)

            param_errs = check_parameter_gradients(loss_fn, model.params())
            report_line(f"model/{name}/params", max(param_errs.values()))

            def loss_of_audio(t: Tensor):
                out = model.forward(t, Tensor(vision), training=True)
                return cross_entropy(out, labels) if mcfg.task == "classification" \
                    else l1_loss(out, targets)

            def loss_of_vision(t: Tensor):
                out = model.forward(Tensor(audio), t, training=True)
                return cross_entropy(out, labels) if mcfg.task == "classification" \
                    else l1_loss(out, targets)

            report_line(f"model/{name}/audio_in", finite_diff_check(loss_of_audio, Tensor(audio)))
            report_line(f"model/{name}/vision_in", finite_diff_check(loss_of_vision, Tensor(vision)))

        print(f"gradcheck {'passed' if failures == 0 else 'FAILED'} "
              f"(tolerance {GRADCHECK_TOL:g})")
        return 0 if failures == 0 else 1
    finally:
        np.seterr(all="warn")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "generate": cmd_generate,
        "train": cmd_train,
        "eval": cmd_eval,
        "gradcheck": cmd_gradcheck,
        "report": cmd_report,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, DatasetError, ckpt.CheckpointError, TrainingDiverged) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
