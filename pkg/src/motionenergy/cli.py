"""``motionenergy`` command line: train, infer, eval, ablate, visualize, presets.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import checkpoint, data, flow_io, network, presets, training
from .network import NetworkConfig
from .training import TrainConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("motionenergy")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def load_config(path):
    """YAML mapping with optional ``seed``, ``network``, ``training`` and ``data`` sections."""
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise data.DataError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise UsageError(f"invalid config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must be a mapping")
    unknown = set(cfg) - {"seed", "network", "training", "data"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _configs(cfg, seed, preset=None):
    net_d = dict(cfg.get("network") or {})
    tr_d = dict(cfg.get("training") or {})
    if preset is not None:
        net_d, tr_d = presets.apply_preset(preset, net_d, tr_d)
    if seed is None:
        seed = cfg.get("seed", tr_d.get("seed", 0))
    tr_d["seed"] = int(seed)
    try:
        return NetworkConfig.from_dict(net_d), TrainConfig.from_dict(tr_d), int(seed)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def _datasets(cfg, data_path, frames, seed):
    """``(train, heldout)`` from a dataset directory or the config's synthetic section."""
    if data_path is not None:
        # the Middlebury half split when present, otherwise every sequence trains
        records = data.middlebury_records(data_path, frames)
        samples = [data.load_record(r) for r in records]
        train = [s for s in samples if s.split == "train"]
        held = [s for s in samples if s.split == "test"]
        return train, held
    dcfg = cfg.get("data") or {}
    if dcfg.get("kind", "synthetic") != "synthetic":
        raise UsageError("non-synthetic data needs --data")
    train = data.synthetic_from_config(dcfg.get("train", {}), frames, seed)
    held = data.synthetic_from_config(dcfg.get("heldout", {"n": 2, "seed": seed + 1}), frames, seed + 1)
    return train, held


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args):
    cfg = load_config(args.config)
    net_cfg, tr_cfg, seed = _configs(cfg, args.seed)
    train_set, held = _datasets(cfg, args.data, net_cfg.frames, seed)
    if args.resume:
        trainer = training.Trainer.resume(args.resume, train_set, held)
    else:
        trainer = training.Trainer(net_cfg, tr_cfg, train_set, held)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".csv")
    try:
        while not trainer.finished():
            if args.max_epochs is not None and trainer.epoch >= args.max_epochs:
                break
            rec = trainer.run_epoch()
            trainer.step_schedule()
            trainer.save(out)
            trainer.report.write_csv(log_path)
            print(f"epoch {rec.epoch} {rec.phase} loss {rec.loss:.6f} heldout_epe {rec.heldout_epe:.4f}", flush=True)
    except training.DivergenceError as exc:
        checkpoint.save(out, exc.net)
        trainer.report.write_csv(log_path)
        print(f"diverged: {exc}; last good weights saved to {out}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"status {trainer.report.status}; checkpoint {out}; log {log_path}")
    return EXIT_OK


def _read_frames(paths, expected):
    if len(paths) != expected:
        raise UsageError(f"the network takes {expected} frames, got {len(paths)}")
    return np.stack([data.read_image_gray(p) for p in paths], axis=-1)


def _scales(net_cfg, n):
    if n is None:
        return None
    if not 1 <= n <= net_cfg.num_scales:
        raise UsageError(f"--scales {n} outside 1..{net_cfg.num_scales} supported by the checkpoint")
    return list(range(n))


def cmd_infer(args):
    net = checkpoint.load_network(args.checkpoint)
    frames = _read_frames(args.frames, net.config.frames)
    if args.iters is not None and args.iters < 1:
        raise UsageError("--iters must be >= 1")
    flow, dist = network.estimate_flow(frames, net, iters=args.iters, scales=_scales(net.config, args.scales))
    out = Path(args.out)
    flow_io.write_flo_file(out, flow)
    png = Path(args.png) if args.png else out.with_suffix(".png")
    flow_io.save_png(png, flow_io.flow_to_color(flow, args.max_magnitude))
    if args.save_dist:
        flow_io.save_distribution(args.save_dist, dist, net.config.speeds, net.config.orientations, net.config.target_speeds)
    print(f"wrote {out} and {png}")
    return EXIT_OK


def _eval_records(args, frames):
    records = data.middlebury_records(args.data, frames)
    if args.split != "all":
        records = [r for r in records if r.split == args.split]
    if not records:
        raise data.DataError(f"no sequences in split {args.split!r} under {args.data}")
    return records


def cmd_eval(args):
    reports = []
    if args.flow_dir:
        frames = args.frames
        records = _eval_records(args, frames)
        for r in records:
            gt, mask = flow_io.read_flo_file(r.flow_path)
            est_path = Path(args.flow_dir) / f"{r.name}.flo"
            if not est_path.is_file():
                raise data.DataError(f"missing estimate {est_path}")
            est, _ = flow_io.read_flo_file(est_path)
            reports.append(flow_io.evaluate(est, gt, mask, r.name))
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --flow-dir")
        net = checkpoint.load_network(args.checkpoint)
        scales = _scales(net.config, args.scales)
        for r in _eval_records(args, net.config.frames):
            s = data.load_record(r)
            flow, _ = network.estimate_flow(s.frames, net, iters=args.iters, scales=scales)
            reports.append(flow_io.evaluate(flow, s.flow, s.mask, r.name))
    for rep in reports:
        print(f"{rep.name}: EPE {rep.epe:.4f} AAE {rep.aae:.3f}")
    print(f"mean: EPE {np.mean([r.epe for r in reports]):.4f} AAE {np.mean([r.aae for r in reports]):.3f}")
    if args.out:
        flow_io.write_metric_csv(args.out, reports)
    return EXIT_OK


def cmd_ablate(args):
    try:
        preset = presets.get_preset(args.preset)
    except KeyError as exc:
        raise UsageError(str(exc)) from exc
    cfg = load_config(args.config)
    net_cfg, tr_cfg, seed = _configs(cfg, args.seed, preset)
    train_set, held = _datasets(cfg, args.data, net_cfg.frames, seed)
    if not held:
        raise data.DataError("ablation needs a held-out split to report metrics")
    trainer = training.Trainer(net_cfg, tr_cfg, train_set, held)
    code = EXIT_OK
    try:
        net, report = trainer.train()
        status = report.status
    except training.DivergenceError:
        net, status, code = trainer.last_good, "N.C.", EXIT_DIVERGED
    if status == "N.C.":
        print(f"{preset.name}: N.C.")
    reports = [
        flow_io.evaluate(network.estimate_flow(s.frames, net)[0], s.flow, s.mask, s.name) for s in held
    ]
    e = float(np.mean([r.epe for r in reports]))
    a = float(np.mean([r.aae for r in reports]))
    print(f"{preset.name}: status {status} EPE {e:.4f} AAE {a:.3f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        flow_io.write_metric_csv(out / f"{preset.name}.csv", reports)
        trainer.report.write_csv(out / f"{preset.name}-log.csv")
        checkpoint.save(out / f"{preset.name}.ckpt", net)
    return code


def cmd_visualize(args):
    if args.kind == "color":
        flow, mask = flow_io.read_flo_file(args.input)
        img = flow_io.flow_to_color(flow, args.max_magnitude, mask)
    else:
        if args.pixel is None:
            raise UsageError("radial plots need --pixel ROW COL")
        dist, speeds, orientations = flow_io.load_distribution(args.input)
        img = flow_io.distribution_to_radial_plot(dist, tuple(args.pixel), speeds, orientations, size=args.size, vmax=args.vmax)
    flow_io.save_png(args.out, img)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_presets(args):
    for p in presets.PRESETS.values():
        print(f"{p.name:22s} {p.description}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="motionenergy", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a network")
    p.add_argument("--config", help="YAML config")
    p.add_argument("--data", help="dataset directory (default: synthetic data from the config)")
    p.add_argument("--out", required=True, help="checkpoint path, rewritten after every epoch")
    p.add_argument("--log", help="CSV training log (default: next to the checkpoint)")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-epochs", type=int, help="stop after this many epochs in total")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="estimate flow for one frame stack")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", nargs="+", required=True)
    p.add_argument("--out", required=True, help=".flo output")
    p.add_argument("--png", help="colour-coded flow image (default: next to --out)")
    p.add_argument("--scales", type=int, help="use the first N pyramid scales")
    p.add_argument("--iters", type=int, help="recurrent iterations")
    p.add_argument("--save-dist", help="dump the motion distribution (.npz)")
    p.add_argument("--max-magnitude", type=float)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="EPE/AAE over a dataset split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--flow-dir", help="score precomputed <sequence>.flo files instead of running a network")
    p.add_argument("--frames", type=int, default=3, help="frame count for locating sequences with --flow-dir")
    p.add_argument("--split", choices=("train", "test", "all"), default="all")
    p.add_argument("--scales", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--out", help="metric CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="retrain under an ablation preset and report metrics")
    p.add_argument("--preset", required=True)
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("visualize", help="render a flow field or a motion distribution")
    p.add_argument("kind", choices=("color", "radial"))
    p.add_argument("input", help=".flo file (color) or distribution dump (radial)")
    p.add_argument("--out", required=True)
    p.add_argument("--max-magnitude", type=float)
    p.add_argument("--pixel", type=int, nargs=2, metavar=("ROW", "COL"))
    p.add_argument("--size", type=int, default=129)
    p.add_argument("--vmax", type=float)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("presets", help="list ablation presets")
    p.set_defaults(func=cmd_presets)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (data.DataError, flow_io.FloFormatError, checkpoint.CheckpointError, training.TrainingError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except network.ContractViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
