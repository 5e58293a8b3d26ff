"""``cabp`` command line: train, memory-model, characterize, sensitivity.

Exit codes: 0 success, 1 usage/config error, 2 data or file-format error,
3 numerical failure.  Errors print one line ``error: <kind>: <message>``
to stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from cabp.analysis import first_step_similarity, one_epoch_similarity
from cabp.checkpoint import CheckpointError, save_checkpoint
from cabp.config import DATA_ENV, ConfigError, RunConfig, load_config, parse_resolution
from cabp.data import DataFormatError, iterate_batches
from cabp.ledger import MIB, MemoryLedger, footprint_report
from cabp.models import ARCHITECTURES, build_network
from cabp.static_model import PUBLISHED_LAYERS, parse_kernel, static_model
from cabp.tensor import DTYPES, AllocCategory
from cabp.train import SGD, NumericalError, track_parameters, train, train_step, write_metrics

__all__ = ["main", "build_parser", "EXIT_USAGE", "EXIT_DATA", "EXIT_NUMERICAL"]

log = logging.getLogger("cabp")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 1, 2, 3
CATEGORIES = [c.value for c in AllocCategory]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _kernel_arg(text: str) -> str:
    try:
        return _kernel_text(parse_kernel(text))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _kernel_list(text: str):
    try:
        ks = [parse_kernel(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    if not ks or any(k is None for k in ks):
        raise argparse.ArgumentTypeError("expected a comma list of KxK kernels")
    return ks


def _resolution_arg(text: str):
    try:
        res = parse_resolution(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    if res is None:
        raise argparse.ArgumentTypeError("expected HxW")
    return res


def _kernel_text(k) -> str:
    return "off" if k is None else f"{k[0]}x{k[1]}"


def _effective(args) -> RunConfig:
    """Config file, then command-line flags on top."""
    cfg = load_config(args.config)
    if getattr(args, "compress", None) is not None:
        cfg.set("compression", "k", args.compress)
    for flag, section, key in (("epochs", "train", "epochs"), ("seed", "train", "seed"),
                               ("batch_size", "train", "batch_size"), ("lr", "train", "lr"),
                               ("data", "data", "path"), ("kind", "data", "kind"), ("limit", "data", "limit"),
                               ("arch", "model", "arch")):
        value = getattr(args, flag, None)
        if value is not None:
            cfg.set(section, key, str(value))
    if getattr(args, "seed", None) is not None:
        cfg.set("model", "seed", str(args.seed))
    if getattr(args, "data", None) is not None and cfg.get("data", "kind") in ("synthetic", "gaussian"):
        raise UsageError("--data given but [data] kind is synthetic; set --kind cifar10 or mnist")
    return cfg


def _prepare_out(path) -> Path | None:
    if path is None:
        return None
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_effective(out: Path, cfg: RunConfig) -> None:
    with open(out / "effective_config", "w", encoding="utf-8") as fh:
        cfg.write(fh)


# -- commands ------------------------------------------------------------
def cmd_train(args) -> int:
    cfg = _effective(args)
    out = _prepare_out(args.out)
    ds = cfg.dataset(train=True)
    net = cfg.build_network(in_channels=ds.sample_shape[0])
    tcfg = cfg.train_config()
    _write_effective(out, cfg)
    ledger = MemoryLedger(record_events=True)

    def on_step(rec):
        # the event trace of one step repeats every step; keep only the first
        ledger.record_events = False
        if rec.split != "train":
            log.info("epoch %d %s loss %.5f acc %.4f", rec.epoch, rec.split, rec.loss, rec.acc)

    try:
        result = train(net, ds, tcfg, ledger=ledger, on_step=on_step)
    finally:
        if ledger.events:
            with open(out / "ledger.csv", "w", encoding="utf-8") as fh:
                ledger.write_trace(fh)
    with open(out / "metrics.csv", "w", encoding="utf-8") as fh:
        write_metrics(fh, result.metrics)
    with open(out / "points.csv", "w", encoding="utf-8") as fh:
        fh.write("epoch,point,total_bytes," + ",".join(CATEGORIES) + "\n")
        for epoch, pts in enumerate(result.points):
            for row in pts.rows():
                fh.write(",".join([str(epoch), row["point"], str(row["total_bytes"])]
                                  + [str(row[c]) for c in CATEGORIES]) + "\n")
    save_checkpoint(out / "checkpoint_final.cabp", net.state_dict())
    losses = result.epoch_losses()
    print(f"trained {len(losses)} epochs; final loss {losses[-1]:.6f}" if losses else "trained 0 epochs")
    return 0


def cmd_memory_model(args) -> int:
    if args.arch not in ARCHITECTURES:
        raise UsageError(f"unknown arch '{args.arch}'; choose from {', '.join(ARCHITECTURES)}")
    try:
        net = build_network(args.arch, resolution=args.res, materialize=False)
        report = static_model(net, batch=args.batch, dtype=args.dtype, ks=args.compress)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.arch == "resnet18" and not args.all_layers and args.res in (None, (224, 224)):
        report = report.subset(PUBLISHED_LAYERS)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            report.write_csv(fh, args.decimals)
    else:
        report.write_csv(sys.stdout, args.decimals)
    return 0


def characterize(cfg: RunConfig, batch_index: int = 0):
    """One mini-batch step on a fresh ledger; returns (ledger, points, layer rows)."""
    ds = cfg.dataset(train=True)
    net = cfg.build_network(in_channels=ds.sample_shape[0])
    tcfg = cfg.train_config()
    dt = DTYPES[tcfg.dtype].type
    batches = iterate_batches(ds, tcfg.batch_size, fixed_order=True, mean=tcfg.mean, std=tcfg.std, dtype=dt)
    for i, (x, y) in enumerate(batches):
        if i == batch_index:
            break
    ledger = MemoryLedger(record_events=True)
    track_parameters(net, ledger)
    opt = SGD(net.parameters(), tcfg.momentum, tcfg.weight_decay, ledger)
    loss, _, points = train_step(net, opt, x, y, tcfg.lr, ledger, dtype=tcfg.dtype)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss} at step 0")
    ks = sorted({c.policy.k for c in net.conv_layers() if not c.policy.is_full}) or [(1, 1)]
    static = static_model(net, batch=len(y), dtype=tcfg.dtype, ks=ks)
    saved = ledger.saved_bytes_by_label()
    layers = []
    for conv in net.conv_layers():
        row = static.row(conv.name)
        expect = row.x_bytes if conv.policy.is_full else row.z_bytes[conv.policy.k]
        layers.append((row.name, str(conv.policy), expect, saved.get(row.name, 0)))
    return ledger, points, layers


def cmd_characterize(args) -> int:
    cfg = _effective(args)
    out = _prepare_out(args.out)
    ledger, points, layers = characterize(cfg)
    report = footprint_report(ledger, args.capacities)
    print("point,total_bytes,total_mib")
    for snap in points:
        print(f"{snap.label},{snap.total},{snap.total / MIB:.4f}")
    print(f"activation_share_pct,{100 * report.activation_share:.2f}")
    mismatched = [name for name, _, s, d in layers if s != d]
    print(f"static_dynamic_agreement,{'exact' if not mismatched else 'MISMATCH ' + ' '.join(mismatched)}")
    if out is not None:
        _write_effective(out, cfg)
        with open(out / "points.csv", "w", encoding="utf-8") as fh:
            points.write_csv(fh)
        with open(out / "ledger.csv", "w", encoding="utf-8") as fh:
            ledger.write_trace(fh)
        with open(out / "layers.csv", "w", encoding="utf-8") as fh:
            fh.write("layer,policy,static_bytes,ledger_bytes\n")
            for name, pol, s, d in layers:
                fh.write(f"{name},{pol},{s},{d}\n")
        with open(out / "footprint.csv", "w", encoding="utf-8") as fh:
            fh.write("\n".join(report.lines()) + "\n")
    return 0 if not mismatched else EXIT_NUMERICAL


def cmd_sensitivity(args) -> int:
    cfg = _effective(args)
    out = _prepare_out(args.out)
    if cfg.policy().k is None:
        raise UsageError("sensitivity needs a compression kernel (--compress KxK)")
    ds = cfg.dataset(train=True)
    build = cfg.network_factory(in_channels=ds.sample_shape[0])
    tcfg = replace(cfg.train_config(), fixed_order=True)
    policy = cfg.policy()
    if args.mode == "first-step":
        dt = DTYPES[tcfg.dtype].type
        x, y = next(iterate_batches(ds, tcfg.batch_size, fixed_order=True, mean=tcfg.mean, std=tcfg.std, dtype=dt))
        report = first_step_similarity(build, x, y, policy, dtype=tcfg.dtype)
    else:
        report = one_epoch_similarity(build, ds, tcfg, policy, accumulate=args.accumulate)
    report.metadata.update({"arch": cfg.get("model", "arch"), "seed": tcfg.seed})
    if out is not None:
        _write_effective(out, cfg)
        with open(out / "similarity.csv", "w", encoding="utf-8") as fh:
            report.write_csv(fh)
    else:
        report.write_csv(sys.stdout)
    return 0


# -- parser --------------------------------------------------------------
def _add_run_flags(p, *, out_required: bool):
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--compress", type=_kernel_arg, help="KxK, KhxKw or off (overrides [compression] k)")
    p.add_argument("--data", help=f"dataset path (default ${DATA_ENV})")
    p.add_argument("--kind", help="dataset kind: synthetic, gaussian, cifar10, mnist")
    p.add_argument("--limit", type=int, help="use only the first N samples")
    p.add_argument("--arch", help="architecture: " + ", ".join(ARCHITECTURES))
    p.add_argument("--seed", type=int, help="seed for init and data order")
    p.add_argument("--batch-size", type=int, dest="batch_size")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cabp", description="CNN training with pooled saved activations")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", help="train a network and write metrics, trace and checkpoint")
    _add_run_flags(p, out_required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("memory-model", help="static per-layer W/X/Z table")
    p.add_argument("--arch", default="resnet18")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--res", type=_resolution_arg, default=None, help="input HxW (default: native)")
    p.add_argument("--compress", type=_kernel_list, default=[(2, 2), (4, 4)], help="comma list, e.g. 2x2,4x4")
    p.add_argument("--dtype", choices=sorted(DTYPES), default="f32")
    p.add_argument("--decimals", type=int, default=2)
    p.add_argument("--all-layers", action="store_true", help="resnet18: list all 20 convs, not the 17-row table")
    p.add_argument("--out", help="write CSV here instead of stdout")
    p.set_defaults(func=cmd_memory_model)

    p = sub.add_parser("characterize", help="five-point memory snapshot of one training step")
    _add_run_flags(p, out_required=False)
    p.add_argument("--capacities", type=lambda s: [float(v) for v in s.split(",")], default=[8, 12, 16, 24],
                   help="device capacities in GB for the fit verdicts")
    p.set_defaults(func=cmd_characterize)

    p = sub.add_parser("sensitivity", help="per-layer gradient cosine, baseline vs compressed")
    _add_run_flags(p, out_required=False)
    p.add_argument("--mode", choices=("first-step", "one-epoch"), default="first-step")
    p.add_argument("--accumulate", action="store_true", help="one-epoch: sum gradients over the epoch")
    p.set_defaults(func=cmd_sensitivity)
    return parser


def _fail(code: int, kind: str, exc) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"error: {kind}: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except ConfigError as exc:
        return _fail(EXIT_USAGE, "config", exc)
    except (DataFormatError, CheckpointError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    except (NumericalError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERICAL, "numerical", exc)


if __name__ == "__main__":
    sys.exit(main())
