"""Command-line entry point: data -> teacher -> distill stages -> sample -> analyze -> eval."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .. import plots
from ..analysis import (TEN_BUCKETS, TWO_BUCKETS, ReferenceStats, curve_grid_indices, effective_params,
                        eval_metrics, noise_bucket_stats, select_kappa, trajectory_l1_curve,
                        weight_diff_distribution)
from ..denoiser import Model
from ..diffusion import TRAJECTORY_KINDS, train_teacher
from ..distill import DISTILL_STAGES, distill_stage
from ..io_utils import atomic_write, atomic_write_text, file_digest, sha256_bytes
from ..sampler import VARIANTS, _PHASE_EXPERTS, allocate_steps, sample
from ..synth_data import Dataset, dataset_bytes, generate_dataset, read_dataset
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import Config, ConfigError

RUN_ROOT_ENV = "DCM_RUN_ROOT"
log = logging.getLogger("dcmlab")


class CommandError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CommandError(f"usage: {message}")


class Run:
    """Paths and manifest bookkeeping under one run root."""

    def __init__(self, root: Path, config: Config, command: str):
        self.root = root
        self.config = config
        self.command = command
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.seeds: dict[str, object] = {}
        self.extra: dict[str, object] = {}
        self.started = time.perf_counter()

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def rel(self, p: Path) -> str:
        return p.relative_to(self.root).as_posix()

    def need(self, p: Path, what: str) -> Path:
        if not p.exists():
            raise CommandError(f"missing prerequisite: {what} ({self.rel(p)}) does not exist")
        self.inputs[self.rel(p)] = file_digest(p)
        return p

    def write(self, p: Path, payload: bytes) -> None:
        atomic_write(p, payload)
        self.outputs[self.rel(p)] = sha256_bytes(payload)

    def write_text(self, p: Path, text: str) -> None:
        self.write(p, text.encode("utf-8"))

    def note_output(self, p: Path) -> None:
        self.outputs[self.rel(p)] = file_digest(p)

    def manifest(self, name: str) -> Path:
        doc = {"command": self.command, "config_hash": self.config.digest(), "seeds": self.seeds,
               "inputs": dict(sorted(self.inputs.items())), "outputs": dict(sorted(self.outputs.items())),
               **self.extra, "wall_time_s": round(time.perf_counter() - self.started, 3)}
        p = self.path("manifests", f"{name}.json")
        atomic_write_text(p, json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return p


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _tag(cfg: Config) -> str:
    return cfg.digest()[:10]


# ------------------------------------------------------------------ commands


def cmd_gen_data(run: Run, args) -> None:
    ds = generate_dataset(run.config.data)
    run.seeds["data"] = run.config.data.seed
    run.write(run.path("data", "train.dcmv"), dataset_bytes(ds))
    run.manifest("gen-data")


def _load_dataset(run: Run) -> Dataset:
    return read_dataset(run.need(run.path("data", "train.dcmv"), "dataset from gen-data"))


def _load_ckpt(run: Run, stage: str, what: str) -> Checkpoint:
    ck = load_checkpoint(run.need(run.path("checkpoints", f"{stage}.dcmc"), what))
    if ck.stage != stage:
        raise CommandError(f"checkpoint {stage}.dcmc holds a {ck.stage} model")
    return ck


def _jsonl_sink(lines: list[str]):
    return lambda rec: lines.append(json.dumps(rec if isinstance(rec, dict) else rec.to_dict(), sort_keys=True))


def cmd_train_teacher(run: Run, args) -> None:
    cfg = run.config
    ds = _load_dataset(run)
    lines: list[str] = []
    res = train_teacher(ds, cfg.teacher, cfg.model, cfg.schedule_obj(), on_record=_jsonl_sink(lines))
    run.seeds.update(teacher=cfg.teacher.seed, model_init=cfg.model.seed)
    run.write_text(run.path("logs", "teacher.jsonl"), "\n".join(lines) + ("\n" if lines else ""))
    p = run.path("checkpoints", "teacher.dcmc")
    save_checkpoint(Checkpoint(res.model), p)
    run.note_output(p)
    losses = res.losses
    if losses.size:
        k = min(100, losses.size)
        run.extra["loss_first"] = float(losses[:k].mean())
        run.extra["loss_last"] = float(losses[-k:].mean())
    run.manifest("train-teacher")


def cmd_distill(run: Run, args) -> None:
    cfg = run.config
    stage = args.stage
    teacher = _load_ckpt(run, "teacher", "teacher checkpoint from train-teacher").model
    if stage == "detail":
        init = _load_ckpt(run, "semantic", "semantic expert checkpoint from distill --stage semantic").model
    else:
        init = teacher
    ds = _load_dataset(run)
    lines: list[str] = []
    res = distill_stage(cfg.distill(stage), teacher, init, ds, cfg.grid_obj(), on_record=_jsonl_sink(lines))
    run.seeds[f"distill.{stage}"] = cfg.distill(stage).seed
    run.write_text(run.path("logs", f"{stage}.jsonl"), "\n".join(lines) + ("\n" if lines else ""))
    p = run.path("checkpoints", f"{stage}.dcmc")
    save_checkpoint(Checkpoint(res.model, res.ema, res.discriminator), p)
    run.note_output(p)
    run.manifest(f"distill-{stage}")


_EXPERT_SOURCES = {"vcm": "VCM checkpoint from distill --stage vcm",
                   "semantic": "semantic expert checkpoint from distill --stage semantic",
                   "detail": "detail expert checkpoint from distill --stage detail"}


def _experts_for(run: Run, variant: str) -> dict[str, Model]:
    keys = sorted(set(_PHASE_EXPERTS[variant]))
    experts = {k: _load_ckpt(run, k, _EXPERT_SOURCES[k]).model for k in keys}
    run.extra.setdefault("experts", {}).update(
        {k: run.inputs[f"checkpoints/{k}.dcmc"] for k in keys})
    return experts


def _sample_clips(run: Run, variant: str, steps: int, count: int, seed0: int) -> tuple[np.ndarray, np.ndarray]:
    cfg = run.config
    experts = _experts_for(run, variant)
    grid = cfg.grid_obj()
    plan = allocate_steps(steps, grid, variant)
    labels = np.arange(count) % cfg.model.classes
    clips = [sample(plan, experts, [int(labels[i])], [seed0 + i], grid)[0] for i in range(count)]
    run.extra.setdefault("plans", {})[variant] = plan.to_dict()
    return np.stack(clips) if clips else np.zeros((0,) + (cfg.model.frames, cfg.model.height, cfg.model.width),
                                                  np.float32), labels


def cmd_sample(run: Run, args) -> None:
    cfg = run.config
    variant = args.variant or cfg.sampler.variant
    steps = args.steps or cfg.sampler.steps
    count = args.count if args.count is not None else cfg.sampler.count
    seed0 = args.seed if args.seed is not None else cfg.sampler.seed
    if variant not in VARIANTS:
        raise CommandError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    clips, labels = _sample_clips(run, variant, steps, count, seed0)
    run.seeds["sample"] = [seed0 + i for i in range(count)]
    ds = Dataset(clips.astype(np.float32), labels.astype(np.uint32), cfg.model.classes)
    run.write(run.path("samples", f"{variant}_s{steps}.dcmv"), dataset_bytes(ds))
    run.manifest(f"sample-{variant}-s{steps}")


def cmd_analyze(run: Run, args) -> None:
    cfg = run.config
    tag = _tag(cfg)
    grid = cfg.grid_obj()
    chosen = [a for a in ("curve", "kappa", "weight_diff", "buckets") if getattr(args, a)]
    if not chosen:
        raise CommandError("analyze needs one of --curve, --kappa, --weight-diff, --buckets")
    curve_path = run.path("analysis", f"curve-{tag}.csv")
    if args.curve:
        teacher = _load_ckpt(run, "teacher", "teacher checkpoint from train-teacher").model
        seeds = list(range(cfg.analysis.curve_seeds))
        run.seeds["curve"] = seeds
        curves = {space: trajectory_l1_curve(teacher, grid, cfg.analysis.curve_class, seeds, space=space)
                  for space in TRAJECTORY_KINDS}
        idx = curve_grid_indices(grid)
        rows = [(j, int(n), grid.step(int(n)), _fmt(grid.alpha_bar(int(n))),
                 *(_fmt(curves[space][j]) for space in TRAJECTORY_KINDS)) for j, n in enumerate(idx)]
        run.write_text(curve_path, _csv(rows, ["position", "grid_index", "step", "alpha_bar",
                                               *(f"l1_{space}" for space in TRAJECTORY_KINDS)]))
        plots.plot_curve(curves[cfg.analysis.kappa_space], idx, run.path("analysis", f"curve-{tag}.png"))
    if args.kappa:
        run.need(curve_path, "trajectory curve from analyze --curve")
        space = cfg.analysis.kappa_space
        with open(curve_path) as fh:
            series = np.array([float(r[f"l1_{space}"]) for r in csv.DictReader(fh)])
        k = select_kappa(series, cfg.analysis.kappa_threshold)
        doc = {"kappa_position": k, "grid_index_at_position": grid.N - k, "curve": space,
               "threshold_fraction": cfg.analysis.kappa_threshold, "configured_kappa": grid.kappa}
        run.write_text(run.path("analysis", f"kappa-{tag}.json"), json.dumps(doc, indent=2, sort_keys=True) + "\n")
        plots.plot_curve(series, curve_grid_indices(grid), run.path("analysis", f"kappa-{tag}.png"), k)
    if args.weight_diff:
        a = _load_ckpt(run, args.a, f"{args.a} checkpoint").model
        b = _load_ckpt(run, args.b, f"{args.b} checkpoint").model
        rep = weight_diff_distribution(effective_params(a.params, a.config), effective_params(b.params, b.config))
        rows = [(d.name, d.group, _fmt(d.distance)) for d in rep.layers]
        run.write_text(run.path("analysis", f"weight-diff-{args.a}-{args.b}-{tag}.csv"),
                       _csv(rows, ["name", "group", "distance"]))
        run.write_text(run.path("analysis", f"weight-diff-groups-{args.a}-{args.b}-{tag}.csv"),
                       _csv([(g, _fmt(v)) for g, v in rep.group_means.items()], ["group", "mean_distance"]))
        plots.plot_weight_diff(rep, run.path("analysis", f"weight-diff-{args.a}-{args.b}-{tag}.png"))
    if args.buckets:
        stage = args.stage
        logp = run.need(run.path("logs", f"{stage}.jsonl"), f"{stage} training log from distill --stage {stage}")
        records = [json.loads(line) for line in logp.read_text().splitlines() if line.strip()]
        stats = noise_bucket_stats(records, TEN_BUCKETS if cfg.analysis.fine_buckets else TWO_BUCKETS)
        rows = [(_fmt(s.lo), _fmt(s.hi), s.count, _fmt(s.mean_loss), _fmt(s.mean_grad_norm)) for s in stats]
        run.write_text(run.path("analysis", f"buckets-{stage}-{tag}.csv"),
                       _csv(rows, ["alpha_bar_lo", "alpha_bar_hi", "count", "mean_loss", "mean_grad_norm"]))
        if len(stats) >= 2:
            run.extra["high_low_noise_loss_ratio"] = stats[0].mean_loss / stats[-1].mean_loss
        plots.plot_buckets(stats, run.path("analysis", f"buckets-{stage}-{tag}.png"))
    run.manifest("analyze-" + "-".join(chosen))


def cmd_eval(run: Run, args) -> None:
    cfg = run.config
    tag = _tag(cfg)
    ref = ReferenceStats.from_config(cfg.data, cfg.eval.reference_count)
    weights = cfg.eval.weights
    if args.clips:
        p = run.need(Path(args.clips) if Path(args.clips).is_absolute() else run.path(args.clips), "clip file")
        rep = eval_metrics(read_dataset(p).clips, ref, weights)
        run.write_text(run.path("eval", f"metrics-{p.stem}-{tag}.json"), rep.to_json() + "\n")
        run.manifest(f"eval-{p.stem}")
        return
    steps = args.steps or cfg.eval.steps
    seeds = [cfg.eval.seed_offset + i for i in range(cfg.eval.seeds)]
    run.seeds["eval"] = seeds
    variants = [v for v in VARIANTS] if not args.variant else [args.variant]
    reports = {}
    for v in variants:
        clips, _ = _sample_clips(run, v, steps, len(seeds), seeds[0])
        reports[v] = eval_metrics(clips, ref, weights)
    rows = []
    for v, rep in reports.items():
        for i, s in enumerate(seeds):
            rows.append((s, v, _fmt(rep.motion[i]), _fmt(rep.detail[i]), _fmt(rep.coherence[i]),
                         _fmt(rep.combined[i])))
    run.write_text(run.path("eval", f"per-seed-s{steps}-{tag}.csv"),
                   _csv(rows, ["seed", "variant", "motion", "detail", "coherence", "combined"]))
    ordering = sorted(reports, key=lambda v: (reports[v].means()["combined"], v))
    base = reports.get("vcm")
    order_rows = []
    for rank, v in enumerate(ordering, 1):
        m = reports[v].means()
        wins = (sum(a <= b for a, b in zip(reports[v].combined, base.combined)) if base is not None else "")
        order_rows.append((rank, v, _fmt(m["combined"]), _fmt(m["motion"]), _fmt(m["detail"]),
                           _fmt(m["coherence"]), wins))
    run.write_text(run.path("eval", f"ordering-s{steps}-{tag}.csv"),
                   _csv(order_rows, ["rank", "variant", "combined", "motion", "detail", "coherence",
                                     "seeds_at_least_as_good_as_vcm"]))
    summary = {v: reports[v].to_dict() for v in reports}
    summary["reference"] = {"band": list(ref.band), "amplitude": ref.amplitude}
    run.write_text(run.path("eval", f"metrics-s{steps}-{tag}.json"), json.dumps(summary, indent=2, sort_keys=True) + "\n")
    plots.plot_variants({v: reports[v].combined for v in reports}, run.path("eval", f"variants-s{steps}-{tag}.png"))
    run.manifest(f"eval-s{steps}")


# --------------------------------------------------------------------- wiring


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dcmlab", description=__doc__)
    p.add_argument("--config", help="YAML file of dotted keys overriding defaults")
    p.add_argument("--run-dir", help=f"run root (default ${RUN_ROOT_ENV} or ./runs)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.add_parser("gen-data", help="generate the synthetic training set")
    sub.add_parser("train-teacher", help="train the multi-step teacher")
    d = sub.add_parser("distill", help="run one distillation stage")
    d.add_argument("--stage", required=True, choices=DISTILL_STAGES)
    s = sub.add_parser("sample", help="few-step sampling with a variant pipeline")
    s.add_argument("--variant", choices=VARIANTS)
    s.add_argument("--steps", type=int)
    s.add_argument("--count", type=int)
    s.add_argument("--seed", type=int)
    a = sub.add_parser("analyze", help="trajectory curve, kappa, weight diffs, noise buckets")
    a.add_argument("--curve", action="store_true")
    a.add_argument("--kappa", action="store_true")
    a.add_argument("--weight-diff", dest="weight_diff", action="store_true")
    a.add_argument("--buckets", action="store_true")
    a.add_argument("--stage", default="vcm", choices=DISTILL_STAGES, help="log used by --buckets")
    a.add_argument("--a", default="semantic", choices=("teacher",) + DISTILL_STAGES)
    a.add_argument("--b", default="detail", choices=("teacher",) + DISTILL_STAGES)
    e = sub.add_parser("eval", help="synthetic quality metrics")
    e.add_argument("--clips", help="evaluate a clip file instead of sampling the variants")
    e.add_argument("--steps", type=int)
    e.add_argument("--variant", choices=VARIANTS)
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train-teacher": cmd_train_teacher, "distill": cmd_distill,
            "sample": cmd_sample, "analyze": cmd_analyze, "eval": cmd_eval}


def run(argv: list[str] | None = None) -> int:
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        if command is None:
            raise CommandError("usage: a subcommand is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
        cfg = Config.load(args.config)
        root = Path(args.run_dir or os.environ.get(RUN_ROOT_ENV) or "runs")
        COMMANDS[command](Run(root, cfg, command), args)
        return 0
    except (CommandError, ConfigError, FileNotFoundError, ValueError, RuntimeError, KeyError) as exc:
        line = {"status": "error", "command": command, "type": type(exc).__name__, "message": str(exc)}
        print(json.dumps(line, sort_keys=True), file=sys.stderr)
        return 2 if isinstance(exc, (CommandError, ConfigError)) else 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
