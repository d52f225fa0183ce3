"""Command-line interface: generate-data, train, eval, infer, benchmark.

Configuration precedence, lowest to highest: built-in defaults, --config
file, --set key.path=value overrides, then explicit command flags. The
CUBEFUSION_DATA_ROOT environment variable overrides the configured data
root but yields to an explicit --data/--out flag.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
import time
from pathlib import Path

import torch

from .config import RunConfig, apply_overrides, load_config, save_config
from .dataset import CubeDataset, generate_dataset
from .detection import (FusionDetector, prepare_batch, run_inference,
                        to_detection_sets)
from .evaluation import aggregate_report, write_report
from .training import (Trainer, load_checkpoint, model_from_checkpoint)

ENV_DATA_ROOT = "CUBEFUSION_DATA_ROOT"
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    """argparse variant that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _add_config_args(parser):
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY.PATH=VALUE",
                        help="override a config entry (repeatable)")


def build_parser() -> _Parser:
    parser = _Parser(prog="cubefusion",
                     description="camera + 4D-radar-cube 3D object detection")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("generate-data", help="write a synthetic dataset")
    _add_config_args(p)
    p.add_argument("--out", help="target dataset directory")
    p.add_argument("--count", type=int, help="number of scenes")
    p.add_argument("--seed", type=int, help="dataset seed")
    p.add_argument("--force", action="store_true",
                   help="allow writing into a non-empty directory")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train a detector")
    _add_config_args(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", default="runs/train", help="output directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", default="runs/eval", help="report directory")
    p.add_argument("--fail-modality", choices=["none", "camera", "radar"],
                   help="zero one modality's raw input before inference")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="write per-scene detection JSON")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", default="runs/infer", help="output directory")
    p.add_argument("--scene", help="restrict to one scene id")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("benchmark", help="time the forward pass")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (first scene is used)")
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--out", help="write the timing report JSON here")
    p.set_defaults(func=cmd_benchmark)
    return parser


def _load_run_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    if args.overrides:
        config = apply_overrides(config, args.overrides)
    return config


def _resolve_data_root(cli_value: str | None, config: RunConfig) -> Path:
    if cli_value:
        return Path(cli_value)
    env = os.environ.get(ENV_DATA_ROOT)
    if env:
        return Path(env)
    return Path(config.data.root)


def _load_dataset(args, config: RunConfig) -> CubeDataset:
    return CubeDataset(_resolve_data_root(getattr(args, "data", None), config))


def _check_rig(payload: dict, dataset: CubeDataset) -> None:
    if payload["rig"] != dataset.rig.to_dict():
        raise ValueError("sensor rig mismatch between checkpoint and dataset; "
                         "evaluate on data generated with the training rig")


def cmd_generate_data(args) -> int:
    config = _load_run_config(args)
    out = _resolve_data_root(args.out, config)
    count = args.count if args.count is not None else config.data.num_scenes
    seed = args.seed if args.seed is not None else config.data.seed
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ValueError(f"{out} is not empty; pass --force to overwrite")
    manifest = generate_dataset(out, count, seed, config.data.scene,
                                config.data.rig)
    print(f"wrote {manifest['num_scenes']} scenes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_run_config(args)
    dataset = _load_dataset(args, config)
    samples = [dataset[i] for i in range(len(dataset))]
    out_dir = Path(args.out)

    torch.manual_seed(config.training.seed)
    model = FusionDetector(config.model, dataset.rig)
    trainer = Trainer(model, samples, config.training, out_dir)
    if args.resume:
        trainer.resume(args.resume)
    remaining = config.training.epochs - trainer.epoch
    if remaining > 0:
        trainer.train(remaining)
    final = trainer.save(out_dir / "last.ckpt")
    save_config(config, out_dir / "config.yaml")
    print(f"trained to epoch {trainer.epoch}; checkpoint at {final}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _load_run_config(args)
    payload = load_checkpoint(args.checkpoint)
    dataset = _load_dataset(args, config)
    _check_rig(payload, dataset)
    model = model_from_checkpoint(payload)
    fail = args.fail_modality or config.evaluation.fail_modality
    samples = [dataset[i] for i in range(len(dataset))]
    frames = run_inference(model, samples,
                           batch_size=config.training.batch_size,
                           fail_modality=None if fail == "none" else fail,
                           score_threshold=config.evaluation.score_threshold)
    report = aggregate_report(frames, range_max=model.rig.range_max,
                              iou_thresholds=config.evaluation.iou_thresholds)
    write_report(report, args.out)
    total = report["total"]["map"]["3d"]
    shown = {t: (None if v is None else round(v, 4)) for t, v in total.items()}
    print(f"evaluated {report['num_frames']} frames; 3D mAP {shown}; "
          f"report in {args.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    config = _load_run_config(args)
    payload = load_checkpoint(args.checkpoint)
    dataset = _load_dataset(args, config)
    _check_rig(payload, dataset)
    model = model_from_checkpoint(payload)
    model.eval()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    ids = dataset.scene_ids()
    if args.scene is not None:
        if args.scene not in ids:
            raise ValueError(f"scene {args.scene!r} not in dataset")
        ids = [args.scene]
    index = {scene_id: i for i, scene_id in enumerate(dataset.scene_ids())}
    for scene_id in ids:
        sample = dataset[index[scene_id]]
        with torch.no_grad():
            decoded = model(prepare_batch([sample], model.config))[-1]
        dets = to_detection_sets(decoded, config.evaluation.score_threshold)[0]
        with open(out_dir / f"{scene_id}.json", "w") as fh:
            json.dump({"scene_id": scene_id, "detections": dets.to_list()},
                      fh, indent=2)
    print(f"wrote detections for {len(ids)} scene(s) to {out_dir}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    config = _load_run_config(args)
    payload = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(payload)
    model.eval()

    if args.data:
        dataset = _load_dataset(args, config)
        _check_rig(payload, dataset)
        sample = dataset[0]
    else:
        from .synthetic import (SceneConfig, generate_scene, render_camera,
                                render_radar)
        scene_config = SceneConfig()
        scene = generate_scene(0, scene_config, model.rig)
        sample = {"camera": render_camera(scene, model.rig),
                  "cube": render_radar(scene, model.rig, scene_config)}
    batch = prepare_batch([sample], model.config)

    with torch.no_grad():
        for _ in range(max(args.warmup, 0)):
            model(batch)
        times_ms = []
        for _ in range(max(args.runs, 1)):
            start = time.perf_counter()
            model(batch)
            times_ms.append((time.perf_counter() - start) * 1e3)
    report = {
        "runs": len(times_ms),
        "mean_ms": statistics.fmean(times_ms),
        "std_ms": statistics.pstdev(times_ms),
        "parameters": model.parameter_count(),
    }
    print(json.dumps(report, indent=2))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=2)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except Exception as exc:  # runtime failures map to a stable exit code
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
