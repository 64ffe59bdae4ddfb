"""
DC-GCT Main - Command-line entry point: train, eval, predict, verify, report, synth
"""
import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional

import numpy as np

import config
import data
import metrics
import model
import train
import verify
from dcgct import (
    EXIT_CONFIG, EXIT_FAILURE, EXIT_NUMERICAL, EXIT_OK, FLOP_TARGETS, FLOP_TOLERANCE, PARAM_TARGETS,
    PARAM_TOLERANCE, ConfigError, DatasetError, DCGCTError, NumericalError, __version__, setup_logging,
)
from skeleton import build_topology

log = logging.getLogger("dcgct")


@dataclass
class RunManifest:
    command: str
    config: Dict
    seed: Optional[int]
    toolkit_version: str = __version__
    started: float = field(default_factory=time.time)
    ended: Optional[float] = None
    outputs: Dict[str, str] = field(default_factory=dict)
    status: str = "running"

    def write(self, path: Optional[str]):
        if not path:
            log.debug(f"Run manifest: {json.dumps(asdict(self))}")
            return
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2)

    def finish(self, path: Optional[str], status: str = "ok"):
        self.ended = time.time()
        self.status = status
        self.write(path)


def _manifest_path(args, default: Optional[str]) -> Optional[str]:
    return args.manifest or default


def _load_eval_model(args) -> model.DCGCT:
    ckpt = train.load_checkpoint(args.ckpt)
    topo = build_topology(args.topology)
    return model.DCGCT(ckpt.model_cfg, topo, params=ckpt.params)


def _check_arity(dataset: data.Dataset, cfg: config.ModelConfig):
    if len(dataset) and dataset.frames != cfg.frames:
        raise ConfigError(f"arity mismatch: checkpoint expects {cfg.frames} frame(s), dataset has {dataset.frames}")


def _read_predictions(path: str, expected: int, joints: int) -> np.ndarray:
    """pred3d_mm from a prediction file written by the predict command"""
    if not os.path.isfile(path):
        raise DatasetError(f"prediction file not found: {path}")
    preds = []
    with open(path, "r") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                pred = np.asarray(record["pred3d_mm"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DatasetError(f"{path} line {line_no}: bad prediction record ({e})")
            if pred.shape != (joints, 3):
                raise DatasetError(f"{path} line {line_no}: pred3d_mm shape {pred.shape}, expected ({joints}, 3)")
            preds.append(pred)
    if len(preds) != expected:
        raise DatasetError(f"{path} holds {len(preds)} predictions for {expected} samples")
    return np.stack(preds) if preds else np.zeros((0, joints, 3))


def cmd_train(args) -> int:
    model_cfg, train_cfg = config.load_run_config(args.config)
    if args.preset:
        model_cfg = config.model_preset(args.preset)
    overrides = {"seed": args.seed, "epochs": args.epochs, "batch_size": args.batch_size,
                 "lr0": args.lr, "weights_profile": args.weights}
    values = train_cfg.to_dict()
    values.update({k: v for k, v in overrides.items() if v is not None})
    if args.no_flip_augment:
        values["flip_augment"] = False
    train_cfg = config.TrainConfig.from_dict(values)

    manifest_path = _manifest_path(args, os.path.join(args.out, "manifest.json"))
    manifest = RunManifest("train", {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}, train_cfg.seed)
    manifest.outputs = {"checkpoint": os.path.join(args.out, "best.ckpt"),
                        "log": os.path.join(args.out, "log.jsonl"),
                        "config": os.path.join(args.out, "config.json")}
    manifest.write(manifest_path)

    topo = build_topology(args.topology)
    train_set = data.load_dataset(args.data, topo, "train")
    val_set = data.load_dataset(args.val, topo, "val") if args.val else None
    lifter = model.DCGCT(model_cfg, topo, seed=train_cfg.seed)
    if args.init_from:
        source = train.load_checkpoint(args.init_from)
        model.warm_start(lifter.params, source.params)
    config.save_run_config(manifest.outputs["config"], model_cfg, train_cfg)

    log.info(f"[TRAIN] {model.count_params(model_cfg) / 1e6:.2f}M parameters, "
             f"{len(train_set)} training samples, {train_cfg.epochs} epochs")
    report = train.train(lifter, train_set, train_cfg, val=val_set, out_dir=args.out, quiet=args.quiet)
    print(json.dumps(report.to_dict()["epochs"][-1] if report.epochs else {}, indent=2))
    log.info(f"[TRAIN] best val MPJPE {report.best_val_mpjpe_mm} mm at epoch {report.best_epoch}")
    manifest.finish(manifest_path)
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.identity_debug and not args.ckpt and not args.pred_file:
        raise ConfigError("eval needs --ckpt, --pred-file or --identity-debug")
    manifest_path = _manifest_path(args, args.report + ".manifest.json" if args.report else None)
    manifest = RunManifest("eval", {"ckpt": args.ckpt, "data": args.data, "protocol": args.protocol,
                                    "flip_test": args.flip_test, "scale": not args.no_scale}, None)
    if args.report:
        manifest.outputs["report"] = args.report
    manifest.write(manifest_path)

    topo = build_topology(args.topology)
    dataset = data.load_dataset(args.data, topo, "test")
    gt = dataset.targets()
    if args.identity_debug:
        pred = gt.copy()
    elif args.pred_file:
        pred = _read_predictions(args.pred_file, len(dataset), topo.joint_count)
    else:
        lifter = _load_eval_model(args)
        _check_arity(dataset, lifter.cfg)
        pred = train.predict_dataset(lifter, dataset, flip_test=args.flip_test)

    result = metrics.evaluate(pred, gt, dataset.actions(), protocol=args.protocol, scale=not args.no_scale)
    if args.report:
        with open(args.report, "w") as f:
            f.write(result.to_json())
    print(metrics.format_action_table(result))
    log.info(f"[EVAL] MPJPE {result.mpjpe_mm:.2f} mm over {result.sample_count} samples")
    manifest.finish(manifest_path)
    return EXIT_OK


def cmd_predict(args) -> int:
    manifest_path = _manifest_path(args, args.out + ".manifest.json")
    manifest = RunManifest("predict", {"ckpt": args.ckpt, "data": args.data, "flip_test": args.flip_test}, None,
                           outputs={"predictions": args.out})
    manifest.write(manifest_path)

    topo = build_topology(args.topology)
    dataset = data.load_dataset(args.data, topo, "test")
    lifter = _load_eval_model(args)
    _check_arity(dataset, lifter.cfg)
    pred = train.predict_dataset(lifter, dataset, flip_test=args.flip_test)

    with open(args.out, "w") as f:
        for sample, pose in zip(dataset.samples, pred):
            record = sample.to_record()
            del record["target3d_mm"]
            record["pred3d_mm"] = pose.astype(np.float64).tolist()
            f.write(json.dumps(record) + "\n")
    log.info(f"Wrote {len(pred)} predictions to {args.out}")
    manifest.finish(manifest_path)
    return EXIT_OK


def cmd_verify(args) -> int:
    manifest_path = _manifest_path(args, args.report + ".manifest.json" if args.report else None)
    manifest = RunManifest("verify", {"suite": args.suite, "corrupt_adjoint": args.corrupt_adjoint}, args.seed)
    manifest.write(manifest_path)

    report = verify.run_suites(args.suite, args.seed, args.corrupt_adjoint)
    for r in report.results:
        flag = "ok" if r.passed else "FAIL"
        print(f"{r.suite:<11}{r.name:<48}{r.error:>12.3e}  < {r.threshold:.0e}  {flag}")
    for suite in ("grads", "invariants"):
        worst = report.worst(suite)
        if worst is not None:
            print(f"[VERIFY] worst {suite}: {worst.name} {worst.error:.3e}")
    if args.report:
        with open(args.report, "w") as f:
            json.dump(report.to_dict(), f, indent=2)

    if not report.passed:
        log.error(f"[VERIFY] {len(report.failures())} check(s) failed")
        manifest.finish(manifest_path, "failed")
        return EXIT_FAILURE
    manifest.finish(manifest_path)
    return EXIT_OK


def _report_rows(what: str, extra: Optional[config.ModelConfig]) -> List[Dict]:
    rows = []
    if what in ("params", "all"):
        for name, target in PARAM_TARGETS.items():
            measured = model.count_params(config.model_preset(name))
            rows.append({"metric": "params", "config": name, "measured": measured, "target": target,
                         "deviation": measured / target - 1.0, "ok": abs(measured / target - 1.0) <= PARAM_TOLERANCE})
        if extra is not None:
            rows.append({"metric": "params", "config": "--config", "measured": model.count_params(extra),
                         "target": None, "deviation": None, "ok": True})
    if what in ("flops", "all"):
        for name, target in FLOP_TARGETS.items():
            measured = model.count_flops(config.model_preset(name))
            rows.append({"metric": "flops", "config": name, "measured": measured, "target": target,
                         "deviation": measured / target - 1.0, "ok": abs(measured / target - 1.0) <= FLOP_TOLERANCE})
        if extra is not None:
            rows.append({"metric": "flops", "config": "--config", "measured": model.count_flops(extra),
                         "target": None, "deviation": None, "ok": True})
    return rows


def cmd_report(args) -> int:
    extra = config.load_run_config(args.config)[0] if args.config else None
    manifest = RunManifest("report", {"what": args.what, "config": extra.to_dict() if extra else None}, None)
    manifest.write(_manifest_path(args, None))

    rows = _report_rows(args.what, extra)
    print(f"{'metric':<8}{'config':<18}{'measured':>12}{'target':>12}{'dev':>9}  status")
    for row in rows:
        target = f"{row['target'] / 1e6:.2f}M" if row["target"] else "-"
        dev = f"{100 * row['deviation']:+.1f}%" if row["deviation"] is not None else "-"
        status = "pass" if row["ok"] else "OUT OF TOLERANCE"
        print(f"{row['metric']:<8}{row['config']:<18}{row['measured'] / 1e6:>11.3f}M{target:>12}{dev:>9}  {status}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=2)
    failed = [r for r in rows if not r["ok"]]
    manifest.finish(_manifest_path(args, None), "failed" if failed else "ok")
    return EXIT_FAILURE if failed else EXIT_OK


def cmd_synth(args) -> int:
    manifest_path = _manifest_path(args, args.out + ".manifest.json")
    manifest = RunManifest("synth", {"count": args.count, "frames": args.frames, "noise_mm": args.noise_mm,
                                     "topology": args.topology}, args.seed, outputs={"dataset": args.out})
    manifest.write(manifest_path)

    topo = build_topology(args.topology)
    dataset = data.synth_generate(topo, args.count, args.frames, args.noise_mm, args.seed)
    data.save_dataset(dataset, args.out)
    log.info(f"Wrote {len(dataset)} samples to {args.out}")
    manifest.finish(manifest_path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcgct", description="Double-chain graph-convolutional transformer pose lifter")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--verbose", action="store_true", help="Debug logging")
    common.add_argument("--quiet", action="store_true", help="Disable progress bars")
    common.add_argument("--manifest", help="Run manifest path (default: next to the primary output)")
    common.add_argument("--topology", default="h36m17", help="Topology preset or JSON file (default: h36m17)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="Train a model")
    p.add_argument("--config", help="Run config JSON {model, train}")
    p.add_argument("--preset", choices=sorted(config.MODEL_PRESETS), help="Model preset (replaces the config's model)")
    p.add_argument("--data", required=True, help="Training dataset (JSONL)")
    p.add_argument("--val", help="Validation dataset (JSONL); defaults to the training set")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--seed", type=int, help="Seed for every random draw")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="Initial learning rate")
    p.add_argument("--weights", help="Joint weight profile JSON")
    p.add_argument("--init-from", help="Warm-start from a checkpoint (matching names and shapes)")
    p.add_argument("--no-flip-augment", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint or prediction file")
    p.add_argument("--ckpt", help="Checkpoint")
    p.add_argument("--data", required=True, help="Dataset with targets (JSONL)")
    p.add_argument("--protocol", choices=["1", "2", "all"], default="all")
    p.add_argument("--report", help="MetricReport JSON output")
    p.add_argument("--pred-file", help="Evaluate predictions written by the predict command")
    p.add_argument("--identity-debug", action="store_true", help="Use targets as predictions")
    p.add_argument("--flip-test", action="store_true", help="Average with the flipped-input prediction")
    p.add_argument("--no-scale", action="store_true", help="Rigid instead of similarity alignment for protocol 2")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="Write 3D predictions for a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--flip-test", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("verify", parents=[common], help="Run gradient and invariant suites")
    p.add_argument("--suite", choices=verify.SUITES, default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="JSON output")
    p.add_argument("--corrupt-adjoint", metavar="OP", help="Debug: scale one op's adjoint (negative control)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", parents=[common], help="Parameter and FLOP accounting against calibration targets")
    p.add_argument("--what", choices=["params", "flops", "all"], default="all")
    p.add_argument("--config", help="Also report this run config")
    p.add_argument("--json", help="JSON output")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", parents=[common], help="Generate a synthetic dataset")
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--frames", type=int, default=1)
    p.add_argument("--noise-mm", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main function"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    setup_logging("DEBUG" if args.verbose else None)

    try:
        return args.func(args)
    except NumericalError as e:
        log.error(str(e))
        return EXIT_NUMERICAL
    except ConfigError as e:
        log.error(str(e))
        return EXIT_CONFIG
    except DCGCTError as e:
        log.error(str(e))
        return EXIT_FAILURE
    except OSError as e:
        log.error(f"I/O failure: {e}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
