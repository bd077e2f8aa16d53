"""Command-line entry point.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure.

Config precedence: built-in defaults < ``--config`` JSON file < ``--set key=value``
flags < ``--seed``.  Every run writes the fully resolved config next to its
outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import maskops, metrics, nets, oracles, synthdata, trainer

logger = logging.getLogger("sdcl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def resolve_config(args) -> trainer.TrainConfig:
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        overrides[key] = _parse_value(value)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        return trainer.load_config(path, overrides)
    return trainer.TrainConfig.from_dict(overrides)


def _load_data(path: str) -> list[synthdata.VolumeRecord]:
    p = Path(path)
    manifest = p / "manifest.json" if p.is_dir() else p
    if not manifest.exists():
        raise UsageError(f"dataset manifest not found: {manifest}")
    return synthdata.read_dataset(manifest)


def _load_pair(ckpt_dir: str) -> tuple[nets.SegNet, nets.SegNet, int]:
    d = Path(ckpt_dir)
    for a_name, b_name in (("student_a.ckpt", "student_b.ckpt"), ("pretrain_a.ckpt", "pretrain_b.ckpt")):
        if (d / a_name).exists() and (d / b_name).exists():
            a, it = nets.load_checkpoint(d / a_name)
            b, _ = nets.load_checkpoint(d / b_name)
            return a, b, it
    raise UsageError(f"no student checkpoints (student_a/b.ckpt or pretrain_a/b.ckpt) in {d}")


def _echo_config(out_dir: Path, config: trainer.TrainConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


def cmd_gen_data(args) -> int:
    if args.spec:
        spec = synthdata.DatasetSpec.from_dict(json.loads(Path(args.spec).read_text()))
    else:
        spec = synthdata.DatasetSpec()
    changes = {
        "n_labeled": args.n_labeled,
        "n_unlabeled": args.n_unlabeled,
        "n_test": args.n_test,
        "shape": tuple(args.shape) if args.shape else None,
        "num_classes": args.classes,
        "noise_sigma": args.noise,
        "contrast": args.contrast,
        "seed": args.seed,
    }
    for key, value in changes.items():
        if value is not None:
            setattr(spec, key, value)
    try:
        spec.validate()
    except synthdata.DataSpecError as exc:
        raise UsageError(str(exc)) from None
    records = synthdata.generate(spec)
    path = synthdata.write_dataset(records, args.out_dir, spec)
    print(f"wrote {len(records)} volumes; manifest {path}")
    return 0


def cmd_pretrain(args) -> int:
    config = resolve_config(args)
    data = _load_data(args.data)
    out = Path(args.out_dir)
    _echo_config(out, config)
    trainer.pretrain(config, synthdata.by_split(data, "labeled"), out)
    print(f"pretrained checkpoints written to {out}")
    return 0


def cmd_train(args) -> int:
    config = resolve_config(args)
    data = _load_data(args.data)
    out = Path(args.out_dir)
    if args.resume is None and args.pretrained is None:
        raise UsageError("train needs --pretrained DIR or --resume DIR")
    _echo_config(out, config)
    state = trainer.train_ssl(
        config,
        data,
        pretrained_dir=args.pretrained,
        out_dir=out,
        resume_dir=args.resume,
        stop_at=args.stop_at,
        checkpoint_every=args.checkpoint_every,
        method=args.method,
    )
    print(f"finished at iteration {state.iteration}; outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    data = _load_data(args.data)
    net_a, net_b, iteration = _load_pair(args.ckpt_dir)
    records = synthdata.by_split(data, args.split)
    if not records:
        raise UsageError(f"no {args.split} volumes in dataset")
    report = trainer.evaluate(net_a, net_b, records, net_a.num_classes)
    rows = metrics.report_rows(iteration, args.split, report)
    print(f"{'class':>6} {'dice':>8} {'jaccard':>8} {'hd95':>8} {'asd':>8}")
    for row in rows:
        print(f"{row['class']!s:>6} {row['dice']:8.4f} {row['jaccard']:8.4f} {row['hd95']:8.3f} {row['asd']:8.3f}")
    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        metrics.write_metrics_csv(Path(args.out_dir) / "eval_metrics.csv", rows)
    return 0


def cmd_inspect_masks(args) -> int:
    config = resolve_config(args)
    data = _load_data(args.data)
    net_a, net_b, _ = _load_pair(args.ckpt_dir)
    state = trainer.TrainState.from_pretrained(net_a, net_b, config)
    labeled = synthdata.by_split(data, "labeled")
    unlabeled = synthdata.by_split(data, "unlabeled")
    lab, unl = trainer.sample_batches(labeled, unlabeled, config.batch_size, state.rng)
    record = trainer.ssl_step(state, lab, unl, config, dry_run=True)
    out = Path(args.out_dir)
    _echo_config(out, config)
    for name, mask in record.masks.items():
        vol = np.asarray(mask)
        vol = vol[0] if vol.ndim == 4 else vol
        rec = synthdata.VolumeRecord(name, vol.astype(np.float64), "test", 2, vol.astype(np.uint8))
        synthdata.write_volume(rec, out / f"{name}.vol")
        print(f"{name:>18}: ones={int(vol.sum())} zeros={int(vol.size - vol.sum())}")
    return 0


def cmd_oracle_check(args) -> int:
    names = [args.suite] if args.suite else list(oracles.SUITES)
    failures = 0
    for name in names:
        start = time.perf_counter()
        passed, failed, worst = oracles.SUITES[name](seed=args.seed or 0)
        failures += failed
        status = "PASS" if failed == 0 else "FAIL"
        print(f"{status} {name:<22} passed={passed} failed={failed} worst={worst:.3g} ({time.perf_counter() - start:.1f}s)")
    print(f"total failures: {failures}")
    return 0 if failures == 0 else 2


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sdcl", description="Dual-student discrepancy correction training on synthetic volumes")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_flags(p):
        p.add_argument("--config", help="JSON file with TrainConfig fields")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--spec", help="JSON file with DatasetSpec fields")
    p.add_argument("--n-labeled", type=int)
    p.add_argument("--n-unlabeled", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--shape", type=int, nargs=3, metavar=("W", "H", "D"))
    p.add_argument("--classes", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--contrast", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="labeled-only copy-paste pre-training")
    config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="semi-supervised training from pre-trained students")
    config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--pretrained")
    p.add_argument("--resume")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--stop-at", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--method", choices=("sdcl", "bcp"), default="sdcl")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate averaged students on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt-dir", required=True)
    p.add_argument("--split", choices=synthdata.SPLITS, default="test")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-masks", help="dry-run one SSL step and dump its masks")
    config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_inspect_masks)

    p = sub.add_parser("oracle-check", help="run the brute-force oracle suites")
    p.add_argument("--suite", choices=sorted(oracles.SUITES))
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_oracle_check)
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, trainer.ConfigError, synthdata.DataSpecError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        logger.debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
