"""Command-line front end.

Subcommands: ``describe``, ``count``, ``gradcheck``, ``synth``, ``train``,
``eval``.  Global flags ``--seed``, ``--config``, ``--out``, ``--format``.
A config file holds ``key=value`` lines keyed by option name; command-line
flags override it, and unknown keys are rejected.  Every subcommand is
deterministic given its flags and seed.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .blocks import describe_block
from .complexity import count_flops, emit_cost_table
from .gradsuite import run_gradient_suites
from .model import (ConfigError, ModelConfig, build_model, init_params,
                    load_checkpoint, save_checkpoint, stage_extents)
from .ops import GeometryError, ShapeError
from .pipeline import (DatasetError, ManifestError, SynthConfig,
                       aggregate_video_score, format_synth_config,
                       load_manifest, loso_splits, metric_mae, metric_mse,
                       metric_rmse, save_manifest, synth_generate)
from .training import (SCHEDULES, TrainConfig, TrainingDiverged,
                       predict_scores, save_history, train)


class CliError(Exception):
    """Fatal subcommand error; message goes to stderr, exit code 1."""


class UsageError(Exception):
    """Bad flag/config combination; message goes to stderr, exit code 2."""


def _fraction(text: str) -> Fraction:
    return Fraction(text)


def _int_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part]


def _str_list(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Opt:
    flag: str
    parse: object
    default: object
    help: str
    is_flag: bool = False

    @property
    def dest(self) -> str:
        return self.flag.lstrip("-").replace("-", "_")


GLOBAL_OPTS = (
    Opt("--seed", int, 0, "random seed"),
    Opt("--config", str, None, "key=value overlay file (flags win)"),
    Opt("--out", str, None, "output path (default: stdout / cwd)"),
    Opt("--format", str, "text", "output format: text or csv"),
)

MODEL_OPTS = (
    Opt("--model", str, "dmsn", "model kind: dmsn, dmsn-a, dmsn-b, dmsn-c"),
    Opt("--frames", int, 16, "clip length in frames"),
    Opt("--size", int, 112, "input height/width in pixels"),
    Opt("--branches", int, 4, "branch count per block (2-4)"),
    Opt("--width", _fraction, Fraction(1), "channel width multiplier, e.g. 1/8"),
)

SUBCOMMANDS: dict[str, tuple[Opt, ...]] = {
    "describe": MODEL_OPTS + (
        Opt("--detail", _bool, False,
            "also list every conv inside each block", is_flag=True),
    ),
    "count": (
        Opt("--model", _str_list, ["dmsn"], "comma list of model kinds"),
        Opt("--frames", _int_list, [16], "comma list of clip lengths"),
        Opt("--branches", _int_list, [4], "comma list of branch counts"),
        Opt("--size", int, 112, "input height/width in pixels"),
        Opt("--width", _fraction, Fraction(1), "channel width multiplier"),
        Opt("--convention", str, "mac1", "FLOP convention: mac1 or mac2"),
    ),
    "gradcheck": (
        Opt("--scale", str, "micro", "suite scale (micro only)"),
        Opt("--inject-bug", _bool, False,
            "negative control: corrupt one analytic gradient", is_flag=True),
    ),
    "synth": (
        Opt("--clips", int, 64, "number of clips to generate"),
        Opt("--frames", int, 16, "clip length in frames"),
        Opt("--size", int, 32, "frame height/width in pixels"),
        Opt("--subjects", int, 4, "number of synthetic subjects"),
        Opt("--label-min", float, 0.0, "lower label bound"),
        Opt("--label-max", float, 4.0, "upper label bound"),
        Opt("--speed", float, 1.0, "bump displacement per frame per label unit"),
    ),
    "train": MODEL_OPTS + (
        Opt("--data", str, None, "clip manifest to train on"),
        Opt("--schedule", str, "depression",
            "learning-rate schedule: pretrain, depression, pain"),
        Opt("--optimizer", str, "adam", "optimizer: sgd or adam"),
        Opt("--epochs", int, None, "epoch count (default: schedule's)"),
        Opt("--batch-size", int, 8, "minibatch size"),
        Opt("--steps", int, None, "stop after this many optimizer steps"),
        Opt("--loss", str, "mse", "training loss: mse or mae"),
        Opt("--history", str, None, "write per-step loss records here"),
    ),
    "eval": (
        Opt("--data", str, None, "clip manifest to evaluate"),
        Opt("--checkpoint", str, None, "model checkpoint to load"),
        Opt("--aggregate", str, None, "video aggregation: median"),
        Opt("--loso", _bool, False, "report leave-one-subject-out folds",
            is_flag=True),
        Opt("--batch-size", int, 8, "scoring batch size"),
    ),
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dmsn",
        description="Decomposed multiscale spatiotemporal network toolkit")
    subs = parser.add_subparsers(dest="command", required=True)
    for name, opts in SUBCOMMANDS.items():
        sub = subs.add_parser(name)
        for opt in opts + GLOBAL_OPTS:
            if opt.is_flag:
                sub.add_argument(opt.flag, dest=opt.dest, action="store_const",
                                 const="true", default=None, help=opt.help)
            else:
                sub.add_argument(opt.flag, dest=opt.dest, type=str,
                                 default=None, help=opt.help)
    return parser


def _read_config(path: str) -> dict[str, str]:
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{lineno}: expected key=value")
                key, value = line.split("=", 1)
                values[key.strip().replace("-", "_")] = value.strip()
    except OSError as exc:
        raise CliError(f"cannot read config file: {exc}") from exc
    return values


def _resolve(ns: argparse.Namespace, opts: tuple[Opt, ...]) -> dict:
    """Merge flag values over config-file values over defaults."""
    table = {opt.dest: opt for opt in opts + GLOBAL_OPTS}
    overlay: dict[str, str] = {}
    if ns.config is not None:
        overlay = _read_config(ns.config)
        unknown = set(overlay) - set(table)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    values = {}
    for dest, opt in table.items():
        raw = getattr(ns, dest)
        if raw is None and dest in overlay:
            raw = overlay[dest]
        values[dest] = opt.default if raw is None else opt.parse(raw)
    return values


def _model_config(values: dict, model: str | None = None) -> ModelConfig:
    return ModelConfig(model_kind=model or values["model"],
                       clip_len=values["frames"],
                       input_size=(values["size"], values["size"]),
                       branch_count=values["branches"],
                       width_multiplier=values["width"],
                       seed=values["seed"])


def _emit(text: str, out_path: str | None) -> None:
    if out_path is None:
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")
    else:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)


def cmd_describe(values: dict) -> int:
    config = _model_config(values)
    spec = build_model(config)
    lines = [f"model {config.model_kind}  frames {config.clip_len}  "
             f"input {config.input_size[0]}x{config.input_size[1]}  "
             f"branches {config.branch_count}  width {config.width_multiplier}"]
    extents = {name: (c, dims) for name, c, dims in stage_extents(spec)}
    for name in ("input", "conv1", "pool"):
        c, (t, h, w) = extents[name]
        detail = ""
        if name == "conv1":
            detail = "7x7x7 s(1,2,2) p(3,3,3)  3->{}".format(c)
        elif name == "pool":
            detail = "max 3x3x3 s2 p1"
        lines.append(f"{name:<10} {detail:<28} {c:>5}  {t}x{h}x{w}")
    t, h, w = extents["pool"][1]
    for stage_name, blocks in spec.stages:
        for i, block in enumerate(blocks, start=1):
            if block.spatial_stride != 1:
                h = (h - 1) // block.spatial_stride + 1
                w = (w - 1) // block.spatial_stride + 1
            lines.append(f"{stage_name}.{i:<8} DMSN-{block.variant}  "
                         f"{block.in_channels}->{block.out_channels}  "
                         f"s{block.spatial_stride}  {t}x{h}x{w}")
            if values["detail"]:
                lines.extend("  " + line for line in
                             describe_block(block, f"{stage_name}.{i}."))
    lines.append(f"head       spatial-avgpool, fc {spec.head_channels}->1, "
                 f"temporal-avgpool  scalar")
    _emit("\n".join(lines) + "\n", values["out"])
    return 0


def cmd_count(values: dict) -> int:
    if values["convention"] not in ("mac1", "mac2"):
        raise UsageError(f"unknown convention {values['convention']!r}")
    reports = []
    for kind in values["model"]:
        for branches in values["branches"]:
            for frames in values["frames"]:
                config = ModelConfig(model_kind=kind, clip_len=frames,
                                     input_size=(values["size"], values["size"]),
                                     branch_count=branches,
                                     width_multiplier=values["width"],
                                     seed=values["seed"])
                report = count_flops(build_model(config),
                                     convention=values["convention"])
                if branches != 4:
                    report.label = f"{kind}-br{branches}"
                reports.append(report)
    _emit(emit_cost_table(reports, format=values["format"]), values["out"])
    return 0


def cmd_gradcheck(values: dict) -> int:
    if values["scale"] != "micro":
        raise UsageError(f"unsupported gradcheck scale {values['scale']!r}")
    results = run_gradient_suites(seed=values["seed"],
                                  inject_bug=values["inject_bug"])
    lines = [f"{name:<22} {report.summary()}" for name, report in results]
    ok = all(report.passed for _, report in results)
    lines.append(f"gradient suites: {'all passed' if ok else 'FAILURES'}")
    _emit("\n".join(lines) + "\n", values["out"])
    return 0 if ok else 1


def cmd_synth(values: dict) -> int:
    out_dir = values["out"] or "."
    config = SynthConfig(clip_count=values["clips"], clip_len=values["frames"],
                         height=values["size"], width=values["size"],
                         subjects=values["subjects"],
                         label_min=values["label_min"],
                         label_max=values["label_max"],
                         step_per_unit=values["speed"], seed=values["seed"])
    dataset = synth_generate(config)
    os.makedirs(out_dir, exist_ok=True)
    manifest = os.path.join(out_dir, "manifest.tsv")
    save_manifest(dataset, manifest, data_dir=os.path.join(out_dir, "clips"))
    with open(os.path.join(out_dir, "synth_config.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(format_synth_config(config))
    sys.stdout.write(f"wrote {len(dataset.clips)} clips over "
                     f"{len(dataset.subjects())} subjects to {manifest}\n")
    return 0


def cmd_train(values: dict) -> int:
    if values["data"] is None:
        raise UsageError("train needs --data <manifest>")
    if values["out"] is None:
        raise UsageError("train needs --out <checkpoint path>")
    if values["schedule"] not in SCHEDULES:
        raise UsageError(f"unknown schedule {values['schedule']!r}; valid: "
                         f"{', '.join(SCHEDULES)}")
    dataset = load_manifest(values["data"])
    model_config = _model_config(values)
    sample = dataset.clip_arrays()[0]
    if sample.shape != (3, model_config.clip_len) + model_config.input_size:
        raise CliError(f"dataset clips have shape {sample.shape}, model wants "
                       f"(3, {model_config.clip_len}, "
                       f"{model_config.input_size[0]}, "
                       f"{model_config.input_size[1]})")
    train_config = TrainConfig(optimizer=values["optimizer"],
                               schedule=values["schedule"],
                               epochs=values["epochs"],
                               batch_size=values["batch_size"],
                               loss=values["loss"], seed=values["seed"],
                               max_steps=values["steps"])
    params, history = train(model_config, dataset, train_config)
    spec = build_model(model_config)
    save_checkpoint(spec, params, values["out"])
    if values["history"]:
        save_history(history, values["history"])
    final = history.steps[-1][3] if history.steps else float("nan")
    sys.stdout.write(f"trained {len(history.steps)} steps; final loss "
                     f"{final:.6g}; checkpoint {values['out']}\n")
    return 0


def _metric_rows(scores: np.ndarray, labels: np.ndarray, dataset, values: dict):
    rows = [("overall", "all", len(scores), metric_mae(scores, labels),
             metric_rmse(scores, labels), metric_mse(scores, labels))]
    if values["loso"]:
        plan = loso_splits(dataset)
        pooled_pred, pooled_truth = [], []
        for fold_no, (_, test_subjects) in enumerate(plan.folds, start=1):
            keep = [i for i, c in enumerate(dataset.clips)
                    if c.subject_id in test_subjects]
            p, t = scores[keep], labels[keep]
            rows.append((f"fold{fold_no}", ",".join(test_subjects), len(keep),
                         metric_mae(p, t), metric_rmse(p, t), metric_mse(p, t)))
            pooled_pred.extend(p)
            pooled_truth.extend(t)
        rows.append(("loso-pooled", "all", len(pooled_pred),
                     metric_mae(pooled_pred, pooled_truth),
                     metric_rmse(pooled_pred, pooled_truth),
                     metric_mse(pooled_pred, pooled_truth)))
    if values["aggregate"] is not None:
        if values["aggregate"] != "median":
            raise UsageError(f"unknown aggregation {values['aggregate']!r}")
        videos: dict[str, list[int]] = {}
        for i, clip in enumerate(dataset.clips):
            videos.setdefault(clip.video_id, []).append(i)
        vp = [aggregate_video_score(scores[idx]) for idx in videos.values()]
        vt = [aggregate_video_score(labels[idx]) for idx in videos.values()]
        rows.append(("video-median", "all", len(vp), metric_mae(vp, vt),
                     metric_rmse(vp, vt), metric_mse(vp, vt)))
    return rows


def cmd_eval(values: dict) -> int:
    if values["data"] is None or values["checkpoint"] is None:
        raise UsageError("eval needs --data <manifest> and --checkpoint <file>")
    spec, params = load_checkpoint(values["checkpoint"])
    dataset = load_manifest(values["data"])
    clips = dataset.clip_arrays()
    want = (3, spec.config.clip_len) + tuple(spec.config.input_size)
    if clips[0].shape != want:
        raise CliError(f"dataset clips have shape {clips[0].shape}, checkpoint "
                       f"wants {want}")
    scores = predict_scores(spec, params, clips,
                            batch_size=values["batch_size"])
    labels = dataset.labels()
    rows = _metric_rows(scores, labels, dataset, values)
    if values["format"] == "csv":
        lines = ["scope,subjects,clips,mae,rmse,mse"]
        lines += [f"{scope},{subj},{n},{mae:.6f},{rmse:.6f},{mse:.6f}"
                  for scope, subj, n, mae, rmse, mse in rows]
    else:
        lines = [f"{scope:<14} {subj:<14} n={n:<5} mae {mae:.6f}  "
                 f"rmse {rmse:.6f}  mse {mse:.6f}"
                 for scope, subj, n, mae, rmse, mse in rows]
    _emit("\n".join(lines) + "\n", values["out"])
    return 0


COMMANDS = {
    "describe": cmd_describe,
    "count": cmd_count,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = _build_parser()
    ns = parser.parse_args(argv)
    try:
        values = _resolve(ns, SUBCOMMANDS[ns.command])
        return COMMANDS[ns.command](values)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return 2
    except ConfigError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except (CliError, ManifestError, DatasetError, ShapeError, GeometryError,
            TrainingDiverged, ValueError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
