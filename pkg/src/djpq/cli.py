"""Command-line surface: train, report, audit, compare, make-data.

Exit codes separate who is at fault: 0 on success, 1 when the invocation
or its inputs fail validation (bad flags, config, file formats, contract
violations), 2 when a run fails at runtime (divergence, bad data values,
IO). The default output directory comes from $DJPQ_OUT when set.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from .checkpoint import (build_graph, checkpoint_from_graph,
                         load_checkpoint, save_checkpoint)
from .config import load_arch_text, load_config
from .datasets import load_dataset, make_synthetic_dataset
from .errors import (ConfigError, ContractError, FormatError,
                     WorkbenchError)
from .figures import render_figures
from .network import NetworkGraph, parse_architecture
from .report import (emit_report, gbops_str, gmacs_str, save_manifest,
                     start_manifest)
from .trainer import (eval_accuracy, export_compressed, matched_two_stage,
                      report_for_graph, run_mode)

REPORT_CHOICES = ("json", "csv", "both")


class _Parser(argparse.ArgumentParser):
    # usage text and exit 1 for any malformed invocation
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="djpq",
                     description="compression workbench: joint channel "
                                 "pruning and learned quantization")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    def common(p, data_required):
        p.add_argument("--data", required=data_required,
                       help="dataset directory (mnist-idx ubyte files or "
                            "cifar10 .bin batches; format is sniffed)")
        p.add_argument("--out", default=os.environ.get("DJPQ_OUT", "."),
                       help="output directory (default $DJPQ_OUT or .)")
        p.add_argument("--format", default="json", choices=REPORT_CHOICES,
                       help="report file format")

    p = sub.add_parser("train", help="run one training mode from a config")
    p.add_argument("--config", required=True, help="run config file")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    common(p, data_required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("report",
                       help="recompute metrics from a checkpoint")
    p.add_argument("checkpoint", help="checkpoint file")
    common(p, data_required=False)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("audit",
                       help="static MAC/BOP audit of an architecture")
    p.add_argument("arch", help="bundled architecture name or file path")
    p.add_argument("--out", default=None,
                   help="also write the audit as a report file here")
    p.add_argument("--format", default="json", choices=REPORT_CHOICES)
    p.set_defaults(func=_cmd_audit)

    p = sub.add_parser("compare",
                       help="joint run vs the two-stage baseline at "
                            "matched BOPs")
    p.add_argument("--config", required=True, help="run config file")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    common(p, data_required=True)
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("make-data",
                       help="write the synthetic glyph dataset")
    p.add_argument("--out", default=os.environ.get("DJPQ_OUT", "."),
                   help="output directory (default $DJPQ_OUT or .)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-n", type=int, default=3072)
    p.add_argument("--test-n", type=int, default=512)
    p.set_defaults(func=_cmd_make_data)

    return parser


def _load_cfg(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed).validate()
    return cfg


def _sniff_format(path) -> str:
    if os.path.exists(os.path.join(path, "train-images-idx3-ubyte")):
        return "mnist-idx"
    if os.path.exists(os.path.join(path, "data_batch_1.bin")) \
            or os.path.exists(os.path.join(path, "test_batch.bin")):
        return "cifar10-bin"
    raise ConfigError(
        f"no recognizable dataset under {path}: expected mnist-idx "
        f"*-ubyte files or cifar10 *.bin batches")


def _load_splits(data_dir, cfg):
    if not os.path.isdir(data_dir):
        raise ConfigError(f"dataset directory not found: {data_dir}")
    fmt = _sniff_format(data_dir)
    (c, h, w), _, _ = parse_architecture(load_arch_text(cfg.arch))
    train = load_dataset(data_dir, fmt, "train", pad_to=(h, w))
    test = load_dataset(data_dir, fmt, "test", pad_to=(h, w),
                        stats=train.stats)
    if train.images.shape[1] != c:
        raise ConfigError(
            f"dataset has {train.images.shape[1]} channels but "
            f"architecture {cfg.arch!r} expects {c}")
    return train, test


def _ensure_out(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _stem(cfg) -> str:
    arch = os.path.splitext(os.path.basename(cfg.arch))[0]
    safe = "".join(ch if ch.isalnum() else "-" for ch in arch)
    return f"{cfg.mode}-{safe}-s{cfg.seed}"


def _emit_report_files(report, out, stem, format) -> list:
    formats = ("json", "csv") if format == "both" else (format,)
    return [emit_report(report, f, os.path.join(out, f"{stem}.report.{f}"))
            for f in formats]


def _print_totals(report):
    print(f"accuracy {report.accuracy:.2%}  "
          f"{gmacs_str(report.total_macs)} GMACs  "
          f"{gbops_str(report.total_bops)} GBOPs  "
          f"compression {report.bop_ratio:.2f}x")


def _cmd_train(args) -> int:
    cfg = _load_cfg(args)
    train, test = _load_splits(args.data, cfg)
    out = _ensure_out(args.out)
    manifest = start_manifest(
        cfg, args.data, f"{train.fingerprint}+{test.fingerprint}")
    result = run_mode(cfg, train, test, log=print)
    stem = _stem(cfg)
    written = _emit_report_files(result.report, out, stem, args.format)
    ckpt = checkpoint_from_graph(result.exported, cfg,
                                 epoch=result.stats[-1].epoch + 1,
                                 manifest_id=manifest.run_id)
    ckpt_path = os.path.join(out, f"{stem}.ckpt")
    save_checkpoint(ckpt, ckpt_path)
    written.append(ckpt_path)
    written += render_figures(result.report, result.stats, out, stem)
    manifest.outputs = [os.path.basename(p) for p in written]
    written.append(save_manifest(
        manifest, os.path.join(out, f"{stem}.manifest.json")))
    _print_totals(result.report)
    for p in written:
        print(f"wrote {p}")
    return 0


def _cmd_report(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    graph = build_graph(ckpt)
    base = NetworkGraph(load_arch_text(cfg.arch),
                        rng=np.random.default_rng(0))
    baseline = base.layer_specs(float_baseline=True)
    images = labels = None
    if args.data:
        _, test = _load_splits(args.data, cfg)
        images, labels = test.images, test.labels
    if graph.is_gated:
        # training-time checkpoint: export before measuring
        _, report = export_compressed(
            graph, baseline, images, labels,
            restricted=cfg.mode == "djpq-restrict")
    else:
        report = report_for_graph(graph, baseline, images, labels)
    out = _ensure_out(args.out)
    stem = os.path.splitext(os.path.basename(args.checkpoint))[0]
    written = _emit_report_files(report, out, stem, args.format)
    written += render_figures(report, None, out, stem)
    _print_totals(report)
    for p in written:
        print(f"wrote {p}")
    return 0


def _cmd_audit(args) -> int:
    text = load_arch_text(args.arch)
    graph = NetworkGraph(text, rng=np.random.default_rng(0))
    specs = graph.layer_specs(float_baseline=True)
    report = report_for_graph(graph, specs)
    print(f"{'layer':<12}{'b_w':>6}{'b_a':>6}{'MACs(G)':>12}{'BOPs(G)':>12}")
    for r in report.rows:
        print(f"{r.layer_id:<12}{r.weight_bits:>6.0f}{r.act_bits:>6.0f}"
              f"{gmacs_str(r.macs):>12}{gbops_str(r.bops):>12}")
    print(f"{'total':<12}{'':>6}{'':>6}{gmacs_str(report.total_macs):>12}"
          f"{gbops_str(report.total_bops):>12}")
    if args.out is not None:
        out = _ensure_out(args.out)
        arch = os.path.splitext(os.path.basename(args.arch))[0]
        stem = "audit-" + "".join(ch if ch.isalnum() else "-"
                                  for ch in arch)
        for p in _emit_report_files(report, out, stem, args.format):
            print(f"wrote {p}")
    return 0


def _cmd_compare(args) -> int:
    cfg = _load_cfg(args)
    train, test = _load_splits(args.data, cfg)
    out = _ensure_out(args.out)
    joint = run_mode(replace(cfg, mode="djpq").validate(), train, test,
                     log=print)
    paired = matched_two_stage(replace(cfg, mode="two-stage").validate(),
                               train, test, joint.report.total_bops,
                               log=print)
    written = []
    for result in (joint, paired):
        stem = _stem(result.config)
        written += _emit_report_files(result.report, out, stem, args.format)
        written += render_figures(result.report, result.stats, out, stem)
    gap = joint.report.total_bops / paired.report.total_bops
    print("joint:     ", end="")
    _print_totals(joint.report)
    print("two-stage: ", end="")
    _print_totals(paired.report)
    print(f"accuracy delta {joint.report.accuracy - paired.report.accuracy:+.2%} "
          f"at BOP ratio {gap:.3f} (joint/two-stage)")
    for p in written:
        print(f"wrote {p}")
    return 0


def _cmd_make_data(args) -> int:
    if args.train_n <= 0 or args.test_n <= 0:
        raise ConfigError("train-n and test-n must be positive")
    out = _ensure_out(args.out)
    make_synthetic_dataset(out, train_n=args.train_n, test_n=args.test_n,
                           seed=args.seed)
    print(f"wrote synthetic glyph dataset ({args.train_n} train / "
          f"{args.test_n} test) under {out}")
    return 0


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except (ConfigError, FormatError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (WorkbenchError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
