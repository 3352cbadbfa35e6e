"""Command-line front end: gen-data, train, synth, eval.

Configuration comes from a JSON file (see README for the schema) with CLI
flags taking precedence.  Every command validates the resolved config before
doing any work, logs line-delimited JSON records that include a hash of the
resolved config, and is byte-reproducible for a fixed seed.  Exit codes:
0 success, 1 validation error, 2 runtime/numerical error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from .denoiser import (
    LearnedDenoiser,
    NetworkConfig,
    TrainingConfig,
    build_slice_dataset,
    init_params,
    load_checkpoint,
    normalize_condition,
    save_checkpoint,
    train,
)
from .diffusion_core import build_linear_schedule
from .errors import DivergenceError, NonFiniteSampleError
from .metrics import format_report_lines, plane_metrics, threshold_mask
from .phantom import (
    EchoTrain,
    PairEntry,
    generate_pair,
    read_manifest,
    split_dataset,
    write_manifest,
)
from .pipeline import PipelineConfig, initial_synthesis, synthesize_volume
from .volume import load_volume, save_volume

__all__ = ["RunConfig", "main"]


@dataclass
class RunConfig:
    """Resolved configuration for one command invocation."""

    # reproducibility / geometry
    seed: int = 0
    n: int = 32
    cond_channels: int = 10
    # diffusion process
    steps: int = 1000
    refine_steps: int = 10
    beta_start: float = 1e-4
    beta_end: float = 0.02
    fusion_weights: tuple = (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)
    # phantom dataset
    volumes: int = 12
    split: tuple = (8, 2, 2)
    noise_sigma: float = 0.01
    n_structures: int = 4
    echo_te1_ms: float = 4.0
    echo_spacing_ms: float = 4.0
    # training
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 3e-5
    momentum: float = 0.9
    base_filters: int = 16
    time_channels: int = 8
    # evaluation
    mask_quantile: float = 0.5
    task: str = "synthesis"
    # execution
    workers: int = 1
    # paths
    dataset_dir: str = "data"
    checkpoint: str = "out/model.gpdn"
    output_dir: str = "out"
    condition_path: str = ""
    prediction_path: str = ""
    reference_path: str = ""

    def validate(self) -> None:
        c = self
        checks = [
            (c.seed >= 0, f"seed must be >= 0, got {c.seed}"),
            (c.n >= 1, f"n must be >= 1, got {c.n}"),
            (c.cond_channels >= 1, f"cond_channels must be >= 1, got {c.cond_channels}"),
            (c.steps >= 1, f"steps must be >= 1, got {c.steps}"),
            (1 <= c.refine_steps <= c.steps,
             f"refine_steps must be in [1, {c.steps}], got {c.refine_steps}"),
            (0 < c.beta_start <= c.beta_end < 1,
             f"need 0 < beta_start <= beta_end < 1, got ({c.beta_start}, {c.beta_end})"),
            (len(c.fusion_weights) == 3, "fusion_weights must have 3 entries"),
            (abs(sum(c.fusion_weights) - 1.0) <= 1e-9, "fusion_weights must sum to 1"),
            (c.volumes >= 1, f"volumes must be >= 1, got {c.volumes}"),
            (len(c.split) == 3 and all(int(s) > 0 for s in c.split),
             f"split must be three positive counts, got {c.split}"),
            (sum(c.split) <= c.volumes,
             f"split {c.split} exceeds volume count {c.volumes}"),
            (c.noise_sigma >= 0, f"noise_sigma must be >= 0, got {c.noise_sigma}"),
            (c.n_structures >= 0, f"n_structures must be >= 0, got {c.n_structures}"),
            (c.echo_te1_ms > 0 and c.echo_spacing_ms > 0, "echo times must be positive"),
            (c.epochs >= 0, f"epochs must be >= 0, got {c.epochs}"),
            (c.batch_size >= 1, f"batch_size must be >= 1, got {c.batch_size}"),
            (c.learning_rate >= 0, f"learning_rate must be >= 0, got {c.learning_rate}"),
            (0 <= c.momentum < 1, f"momentum must be in [0, 1), got {c.momentum}"),
            (c.base_filters >= 1, f"base_filters must be >= 1, got {c.base_filters}"),
            (c.time_channels >= 2 and c.time_channels % 2 == 0,
             f"time_channels must be even and >= 2, got {c.time_channels}"),
            (0 < c.mask_quantile < 1,
             f"mask_quantile must be in (0, 1), got {c.mask_quantile}"),
            (c.workers >= 1, f"workers must be >= 1, got {c.workers}"),
        ]
        for ok, message in checks:
            if not ok:
                raise ValueError(message)

    def digest(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


_TUPLE_KEYS = {"fusion_weights", "split"}


def _load_config(path: str | None, overrides: dict) -> RunConfig:
    values: dict = {}
    if path:
        if not os.path.isfile(path):
            raise ValueError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
        if not isinstance(raw, dict):
            raise ValueError(f"config root must be a JSON object: {path}")
        known = {f.name for f in dataclasses.fields(RunConfig)}
        for key, value in raw.items():
            if key not in known:
                raise ValueError(f"unknown config key: {key!r}")
            values[key] = tuple(value) if key in _TUPLE_KEYS else value
    for key, value in overrides.items():
        if value is not None:
            values[key] = value
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def _emit(event: str, cfg: RunConfig, **fields) -> None:
    record = {"event": event, "config_hash": cfg.digest()}
    record.update(fields)
    print(json.dumps(record, sort_keys=True))


def _schedule(cfg: RunConfig):
    return build_linear_schedule(cfg.steps, cfg.beta_start, cfg.beta_end)


def _echo_train(cfg: RunConfig) -> EchoTrain:
    return EchoTrain(
        te1_ms=cfg.echo_te1_ms,
        spacing_ms=cfg.echo_spacing_ms,
        n_echoes=cfg.cond_channels,
    )


def cmd_gen_data(cfg: RunConfig) -> int:
    os.makedirs(cfg.dataset_dir, exist_ok=True)
    ids = [f"pair_{i:04d}" for i in range(cfg.volumes)]
    tr, va, te = split_dataset(ids, cfg.split, seed=cfg.seed)
    membership = {pid: "train" for pid in tr}
    membership.update({pid: "validation" for pid in va})
    membership.update({pid: "test" for pid in te})
    echo = _echo_train(cfg)
    entries = []
    for i, pid in enumerate(ids):
        condition, target = generate_pair(
            [cfg.seed, i], cfg.n, echo_train=echo,
            noise_sigma=cfg.noise_sigma, n_structures=cfg.n_structures,
        )
        cond_name = f"{pid}_cond.gpcv"
        target_name = f"{pid}_target.gpcv"
        save_volume(os.path.join(cfg.dataset_dir, cond_name), condition)
        save_volume(os.path.join(cfg.dataset_dir, target_name), target)
        entries.append(
            PairEntry(pid, cond_name, target_name, membership.get(pid, "unused"))
        )
    write_manifest(os.path.join(cfg.dataset_dir, "manifest.tsv"), entries)
    _emit("gen-data", cfg, volumes=len(ids), dataset_dir=cfg.dataset_dir)
    return 0


def _load_split(cfg: RunConfig, split: str):
    manifest_path = os.path.join(cfg.dataset_dir, "manifest.tsv")
    if not os.path.isfile(manifest_path):
        raise ValueError(f"dataset manifest not found: {manifest_path}")
    pairs = []
    for entry in read_manifest(manifest_path):
        if entry.split != split:
            continue
        condition = load_volume(os.path.join(cfg.dataset_dir, entry.condition_path))
        target = load_volume(os.path.join(cfg.dataset_dir, entry.target_path))
        pairs.append((target, normalize_condition(condition)))
    return pairs


def cmd_train(cfg: RunConfig) -> int:
    pairs = _load_split(cfg, "train")
    if not pairs:
        raise ValueError("no training volumes in manifest")
    dataset = build_slice_dataset(pairs)
    schedule = _schedule(cfg)
    net = NetworkConfig(
        cond_channels=cfg.cond_channels,
        base_filters=cfg.base_filters,
        time_channels=cfg.time_channels,
    )
    params0 = init_params(net, cfg.seed)
    tcfg = TrainingConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        momentum=cfg.momentum,
        seed=cfg.seed,
    )
    params, losses = train(dataset, params0, tcfg, schedule)
    parent = os.path.dirname(cfg.checkpoint)
    if parent:
        os.makedirs(parent, exist_ok=True)
    save_checkpoint(cfg.checkpoint, params)
    loss_path = cfg.checkpoint + ".losses.tsv"
    with open(loss_path, "w", encoding="utf-8") as f:
        for epoch, loss in enumerate(losses):
            f.write(f"{epoch}\t{loss!r}\n")
    for epoch, loss in enumerate(losses):
        _emit("train-epoch", cfg, epoch=epoch, loss=loss)
    _emit("train", cfg, checkpoint=cfg.checkpoint, slices=len(dataset))
    return 0


def cmd_synth(cfg: RunConfig, no_refine: bool) -> int:
    if not os.path.isfile(cfg.checkpoint):
        raise ValueError(f"checkpoint not found: {cfg.checkpoint}")
    if not os.path.isfile(cfg.condition_path):
        raise ValueError(f"condition volume not found: {cfg.condition_path}")
    params = load_checkpoint(cfg.checkpoint)
    model = LearnedDenoiser(params, cfg.steps)
    y = normalize_condition(load_volume(cfg.condition_path))
    schedule = _schedule(cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)

    def out(name: str) -> str:
        return os.path.join(cfg.output_dir, name)

    if no_refine:
        initial = initial_synthesis(y, model, schedule, cfg.seed, workers=cfg.workers)
        save_volume(out("initial.gpcv"), initial)
        save_volume(out("final.gpcv"), initial)
        _emit("synth", cfg, refined=False, output_dir=cfg.output_dir)
        return 0
    pipe_cfg = PipelineConfig(
        n=y.n,
        steps=cfg.steps,
        refine_steps=cfg.refine_steps,
        cond_channels=y.q,
        fusion_weights=tuple(cfg.fusion_weights),
        seed=cfg.seed,
    )
    result = synthesize_volume(y, model, schedule, pipe_cfg, workers=cfg.workers)
    save_volume(out("initial.gpcv"), result.initial)
    save_volume(out("refined_coronal.gpcv"), result.refined_coronal)
    save_volume(out("refined_sagittal.gpcv"), result.refined_sagittal)
    save_volume(out("final.gpcv"), result.final)
    _emit("synth", cfg, refined=True, output_dir=cfg.output_dir)
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    if not os.path.isfile(cfg.prediction_path):
        raise ValueError(f"prediction volume not found: {cfg.prediction_path}")
    if not os.path.isfile(cfg.reference_path):
        raise ValueError(f"reference volume not found: {cfg.reference_path}")
    prediction = load_volume(cfg.prediction_path)
    reference = load_volume(cfg.reference_path)
    mask = threshold_mask(reference, cfg.mask_quantile)
    report = plane_metrics(reference, prediction, mask)
    os.makedirs(cfg.output_dir, exist_ok=True)
    lines = format_report_lines(cfg.task, report)
    report_path = os.path.join(cfg.output_dir, "report.tsv")
    with open(report_path, "w", encoding="utf-8") as f:
        for line in lines:
            f.write(line + "\n")
    for plane, metrics in report.items():
        _emit("eval", cfg, plane=plane, **metrics)
    return 0


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on usage errors; those are validation
    # failures here, so surface them as ValueError and exit 1 instead.
    def error(self, message):
        raise ValueError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="triplanediff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--steps", type=int)
        p.add_argument("--refine-steps", type=int, dest="refine_steps")
        p.add_argument("--out", help="output location (see README per command)")

    g = sub.add_parser("gen-data", help="generate the phantom dataset")
    common(g)
    t = sub.add_parser("train", help="train the noise predictor")
    common(t)
    s = sub.add_parser("synth", help="synthesize a volume from a condition file")
    common(s)
    s.add_argument("--condition", help="condition volume (GPCV)")
    s.add_argument("--no-refine", action="store_true",
                   help="skip plane refinement (initial volume only)")
    e = sub.add_parser("eval", help="PSNR/SSIM report for a volume pair")
    common(e)
    e.add_argument("--pred", help="predicted volume (GPCV)")
    e.add_argument("--ref", help="reference volume (GPCV)")
    e.add_argument("--task", help="task label for report records")
    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        overrides = {
            "seed": args.seed,
            "workers": args.workers,
            "steps": args.steps,
            "refine_steps": args.refine_steps,
        }
        if args.command == "gen-data":
            overrides["dataset_dir"] = args.out
        elif args.command == "train":
            overrides["checkpoint"] = args.out
        else:
            overrides["output_dir"] = args.out
        if args.command == "synth":
            overrides["condition_path"] = args.condition
        if args.command == "eval":
            overrides["prediction_path"] = args.pred
            overrides["reference_path"] = args.ref
            overrides["task"] = args.task
        cfg = _load_config(args.config, overrides)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "synth":
            return cmd_synth(cfg, no_refine=args.no_refine)
        return cmd_eval(cfg)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DivergenceError, NonFiniteSampleError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
