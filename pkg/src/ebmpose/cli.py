"""Command-line entry points, run configuration, metrics files and the experiment harness.

    ebmpose gen-data --object box:20,10,6 --n 5000 --seed 0 --out train.jsonl
    ebmpose train --data train.jsonl --object box:20,10,6 --out model.ckpt
    ebmpose eval --data test.jsonl --object box:20,10,6 --ckpt model.ckpt --method ours
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import baselines, pipeline
from .diffusion import NoiseSchedule
from .energynet import ArchConfig, EnergyModel, TrainConfig, load_checkpoint, save_checkpoint, train_energy_model
from .errors import BadSpec, ConfigError, EbmPoseError, ParseError
from .geom import ObjectModel, PriorConfig, RigidPose, metric_kind, pose_distance, read_object
from .simulator import SensorConfig, generate_dataset, generate_trajectory, make_shape, parse_shape, read_dataset, write_dataset

# seed streams fanned out from the master seed
STREAM_TRAIN_DATA = 0
STREAM_TEST_DATA = 1
STREAM_PRIOR = 2
STREAM_INIT = 3
STREAM_TRACK = 4

# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    """Every tunable in one flat ``section.key = value`` document."""

    seed: int = 0
    sensor: SensorConfig = field(default_factory=SensorConfig)
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    train: TrainConfig = field(default_factory=TrainConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    pipeline: dict = field(default_factory=dict)

    def pipeline_config(self) -> pipeline.PipelineConfig:
        p = {**_PIPELINE_DEFAULTS, **self.pipeline}
        return pipeline.PipelineConfig(
            K=p["K"],
            t0_est=p["t0_est"],
            t0_track=p["t0_track"],
            sigma_track=p["sigma_track"],
            stages=pipeline.StageFlags(p["prefilter"], p["refine"], p["postrank"]),
            ode_tol=(p["ode_rtol"], p["ode_atol"]),
            prior=self.prior,
            rank_t=p["rank_t"],
            render_every=p["render_every"],
        )


_PIPELINE_DEFAULTS = {
    "K": 16,
    "t0_est": 0.6,
    "t0_track": 0.1,
    "sigma_track": 0.05,
    "prefilter": True,
    "refine": True,
    "postrank": True,
    "ode_rtol": 1e-3,
    "ode_atol": 1e-4,
    "rank_t": None,
    "render_every": 1,
}
_SECTIONS = ("sensor", "schedule", "train", "prior", "pipeline")


def _section_defaults(cfg: RunConfig, name: str) -> dict:
    obj = getattr(cfg, name)
    if name == "pipeline":
        return {**_PIPELINE_DEFAULTS, **obj}
    return dataclasses.asdict(obj)


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format_value(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse_scalar(text: str):
    low = text.lower()
    if low in ("none", "null", ""):
        return None
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _parse_value(text: str, default):
    text = text.strip()
    if "," in text or isinstance(default, tuple):
        return tuple(_parse_scalar(t.strip()) for t in text.split(",") if t.strip())
    v = _parse_scalar(text)
    if isinstance(default, float) and isinstance(v, int) and not isinstance(v, bool):
        v = float(v)
    return v


def format_config(cfg: RunConfig) -> str:
    lines = [f"seed = {cfg.seed}"]
    for name in _SECTIONS:
        for key, v in _section_defaults(cfg, name).items():
            lines.append(f"{name}.{key} = {_format_value(v)}")
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> RunConfig:
    """Parse a run config; unknown sections or keys are errors."""
    base = RunConfig()
    values: dict[str, dict] = {name: {} for name in _SECTIONS}
    seed = base.seed
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected 'key = value'", lineno)
        key, val = (s.strip() for s in line.split("=", 1))
        if key == "seed":
            seed = _parse_value(val, 0)
            if not isinstance(seed, int):
                raise ParseError("seed must be an integer", lineno)
            continue
        section, _, name = key.partition(".")
        if section not in values:
            raise ParseError(f"unknown section {section!r}", lineno)
        defaults = _section_defaults(base, section)
        if name not in defaults:
            raise ParseError(f"unknown key {key!r}", lineno)
        values[section][name] = _parse_value(val, defaults[name])
    try:
        return RunConfig(
            seed=seed,
            sensor=SensorConfig(**values["sensor"]),
            schedule=NoiseSchedule(**values["schedule"]),
            train=TrainConfig(**values["train"]),
            prior=PriorConfig(**values["prior"]),
            pipeline=values["pipeline"],
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def read_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


# ---------------------------------------------------------------------------
# metrics records


@dataclass
class MetricsRecord:
    method: str
    object_id: str
    index: int
    error: float  # mm
    metric: str  # "ADD" or "ADD-S"
    s2: float | None = None
    seconds: float = 0.0
    n_accepted_steps: int = 0
    n_rejected_steps: int = 0
    n_rhs_evals: int = 0
    candidate_error: float | None = None  # mean error over refined candidates
    energies: list | None = None
    pose: list | None = None  # 12 floats: row-major rotation then translation

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


def write_metrics(records: Sequence[MetricsRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_metrics(path) -> list[MetricsRecord]:
    out = []
    names = {f.name for f in dataclasses.fields(MetricsRecord)}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"bad JSON: {exc.msg}", lineno) from None
            if not isinstance(rec, dict) or set(rec) - names:
                raise ParseError("unexpected metrics fields", lineno)
            try:
                out.append(MetricsRecord(**rec))
            except TypeError as exc:
                raise ParseError(str(exc), lineno) from None
    return out


def summarize(records: Sequence[MetricsRecord]) -> list[dict]:
    groups: dict[tuple, list[float]] = {}
    for r in records:
        groups.setdefault((r.method, r.object_id, r.metric), []).append(r.error)
    return [
        {"method": m, "object_id": o, "metric": k, "n": len(v), "median": float(np.median(v)), "mean": float(np.mean(v))}
        for (m, o, k), v in groups.items()
    ]


def write_csv(rows: Sequence[dict], path) -> None:
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# ---------------------------------------------------------------------------
# experiment harness


def stream_rng(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream), int(index)]))


def _pose_list(pose: RigidPose) -> list:
    return [float(v) for v in np.concatenate([pose.rotation.ravel(), pose.translation])]


def _ours_record(method, obj, i, s, result, seconds) -> MetricsRecord:
    reps = result.ode_reports
    return MetricsRecord(
        method=method,
        object_id=obj.object_id,
        index=i,
        error=pose_distance(result.pose, s.pose, obj),
        metric=metric_kind(obj),
        s2=result.uncertainty,
        seconds=seconds,
        n_accepted_steps=sum(r.n_accepted_steps for r in reps),
        n_rejected_steps=sum(r.n_rejected_steps for r in reps),
        n_rhs_evals=sum(r.n_rhs_evals for r in reps),
        candidate_error=pipeline.candidate_mean_error(result, s.pose, obj),
        energies=[float(e) for e in result.energies],
        pose=_pose_list(result.pose),
    )


def evaluate_ours(model, samples, objects, config: pipeline.PipelineConfig, seed: int, method: str = "ours", rep: int = 0):
    """Run the estimator on every sample; sample ``i`` uses prior stream ``(seed, rep, i)``."""
    out = []
    for i, s in enumerate(samples):
        obj = objects[s.object_id]
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), STREAM_PRIOR, int(rep), i]))
        t0 = time.perf_counter()
        result = pipeline.estimate(model, obj, s.imprint, config, rng)
        out.append(_ours_record(method, obj, i, s, result, time.perf_counter() - t0))
    return out


def evaluate_baseline(method: str, samples, objects, sensor: SensorConfig, seed: int, model=None, grid_cache=None):
    out = []
    grid_cache = {} if grid_cache is None else grid_cache
    for i, s in enumerate(samples):
        obj = objects[s.object_id]
        t0 = time.perf_counter()
        if method == "regression":
            pose = baselines.regress(model, obj, s.imprint)
        elif method in ("icp-global", "icp-partial"):
            init = baselines.perturb_pose(s.pose, stream_rng(seed, STREAM_INIT, i))
            pts = baselines.contact_points(s.imprint, sensor)
            target = None
            if method == "icp-partial":
                target = baselines.visible_points(obj, s.pose, s.imprint, sensor, s.indentation)
            try:
                pose = baselines.icp_refine(pts, obj, init, target=target).pose
            except EbmPoseError:
                pose = init
        elif method == "grid-match":
            if obj.object_id not in grid_cache:
                grid = baselines.make_pose_grid(obj)
                grid_cache[obj.object_id] = (grid, grid.render(obj, sensor))
            grid, rendered = grid_cache[obj.object_id]
            pose = baselines.grid_match(obj, s.imprint, grid, sensor, rendered)
        else:
            raise ConfigError(f"unknown method {method!r}")
        out.append(
            MetricsRecord(
                method=method,
                object_id=obj.object_id,
                index=i,
                error=pose_distance(pose, s.pose, obj),
                metric=metric_kind(obj),
                seconds=time.perf_counter() - t0,
                pose=_pose_list(pose),
            )
        )
    return out


ABLATIONS = ("full", "no-prefilter", "no-refine", "no-postrank", "refine-top1")


def ablation_config(base: pipeline.PipelineConfig, name: str) -> pipeline.PipelineConfig:
    flags = {
        "full": pipeline.StageFlags(),
        "no-prefilter": pipeline.StageFlags(prefilter=False),
        "no-refine": pipeline.StageFlags(refine=False),
        "no-postrank": pipeline.StageFlags(postrank=False),
        "refine-top1": pipeline.StageFlags(),
    }
    if name not in flags:
        raise ConfigError(f"unknown ablation {name!r}")
    return dataclasses.replace(base, stages=flags[name], K=1 if name == "refine-top1" else base.K)


def ablation_error(rec: MetricsRecord, name: str) -> float:
    # without post-ranking the reported number is the refined candidates' average error
    return rec.candidate_error if name == "no-postrank" else rec.error


def run_stage_ablation(model, samples, objects, base, seed, reps=3, names=ABLATIONS) -> list[dict]:
    rows = []
    for rep in range(reps):
        for name in names:
            recs = evaluate_ours(model, samples, objects, ablation_config(base, name), seed, name, rep)
            errs = [ablation_error(r, name) for r in recs]
            rows.append({"variant": name, "rep": rep, "n": len(errs), "median": float(np.median(errs)), "mean": float(np.mean(errs))})
    return rows


def run_t0_sweep(model, samples, objects, base, seed, values) -> list[dict]:
    rows = []
    for t0 in values:
        cfg = dataclasses.replace(base, t0_est=float(t0), t0_track=min(base.t0_track, float(t0)))
        recs = evaluate_ours(model, samples, objects, cfg, seed, f"t0={t0:g}")
        errs = [r.error for r in recs]
        evals = [r.n_rhs_evals for r in recs]
        rows.append({"t0": float(t0), "n": len(errs), "median": float(np.median(errs)), "mean": float(np.mean(errs)), "rhs_evals": float(np.mean(evals))})
    return rows


def run_tracking(model, obj: ObjectModel, config, sensor, seed, n_traj=3, n_steps=50, step_scale=(0.5, 0.02)) -> list[dict]:
    """Per-frame errors of the tracker and of independent per-frame estimation on the same frames."""
    rows = []
    for k in range(n_traj):
        traj = generate_trajectory(obj, n_steps, step_scale, sensor, stream_rng(seed, STREAM_TRACK, k))
        state = None
        for f, s in enumerate(traj):
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), STREAM_PRIOR, 1000 + k, f]))
            est = pipeline.estimate(model, obj, s.imprint, config, rng)
            if state is None:
                state = pipeline.TrackerState(est.pose, 0, est)
                trk_pose, trk_evals = est.pose, est.rhs_evals
            else:
                trk_pose, state = pipeline.track_step(model, obj, s.imprint, state, config, rng)
                trk_evals = state.last_result.rhs_evals
            rows.append(
                {
                    "trajectory": k,
                    "frame": f,
                    "track_error": pose_distance(trk_pose, s.pose, obj),
                    "estimate_error": pose_distance(est.pose, s.pose, obj),
                    "track_rhs_evals": trk_evals,
                    "estimate_rhs_evals": est.rhs_evals,
                }
            )
    return rows


def run_uncertainty(model, samples, objects, config, seed, n_sets=10, set_size=10, tops=(1, 3, 5)) -> list[dict]:
    """Grasp-set selection by uncertainty: mean error of the ``k`` lowest-S² grasps per set.

    ``random`` is the expected error of a uniformly random pick (the set mean).
    """
    if len(samples) < n_sets * set_size:
        raise ConfigError(f"need {n_sets * set_size} samples, got {len(samples)}")
    recs = evaluate_ours(model, samples[: n_sets * set_size], objects, config, seed, "ours")
    rows = []
    for j in range(n_sets):
        chunk = recs[j * set_size : (j + 1) * set_size]
        s2 = np.array([r.s2 for r in chunk])
        err = np.array([r.error for r in chunk])
        order = np.argsort(s2, kind="stable")
        row = {"set": j, "random": float(err.mean())}
        for k in tops:
            row[f"top{k}"] = float(err[order[:k]].mean())
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# command line


def resolve_objects(specs: Sequence[str], workdir: Path) -> dict[str, ObjectModel]:
    """Objects from shape specs (``box:20,10,6``) or object files."""
    out = {}
    for spec in specs:
        path = workdir / spec
        obj = read_object(path) if path.is_file() else make_shape(parse_shape(spec))
        out[obj.object_id] = obj
    return out


def _threads():
    n = os.environ.get("EBMPOSE_THREADS", "1")
    try:
        n = int(n)
    except ValueError:
        raise ConfigError(f"EBMPOSE_THREADS must be an integer, got {n!r}") from None
    torch.set_num_threads(max(1, n))


def _load_config(args, workdir) -> RunConfig:
    return read_config(workdir / args.config) if args.config else RunConfig()


def _dataset_objects(samples, objects):
    missing = {s.object_id for s in samples} - set(objects)
    if missing:
        raise ConfigError(f"no object given for {sorted(missing)}")


def cmd_gen_data(args, cfg: RunConfig, workdir: Path) -> None:
    objects = resolve_objects(args.object, workdir)
    seed = cfg.seed if args.seed is None else args.seed
    present = None if args.present is None else [bool(int(v)) for v in args.present.split(",")]
    samples = []
    for obj in objects.values():
        samples += generate_dataset(obj, args.n, cfg.sensor, seed, args.mask_prob, present, aug=args.aug, stream=args.stream)
    write_dataset(samples, workdir / args.out)


def cmd_train(args, cfg: RunConfig, workdir: Path) -> None:
    objects = resolve_objects(args.object, workdir)
    samples = read_dataset(workdir / args.data)
    _dataset_objects(samples, objects)
    tc = cfg.train
    if args.steps is not None:
        tc = dataclasses.replace(tc, n_steps=args.steps)
    if args.lr is not None:
        tc = dataclasses.replace(tc, learning_rate=args.lr)
    arch = ArchConfig.for_sensor(cfg.sensor, cfg.schedule)
    log = (lambda s: print(s, flush=True)) if args.verbose else (lambda s: None)
    if args.method == "ours":
        model = EnergyModel(arch, seed=cfg.seed)
        history = train_energy_model(model, samples, objects, tc, log_every=100, log=log)
    else:
        model = baselines.train_regressor(samples, objects, tc, dataclasses.replace(arch, time_input=False), log_every=100, log=log)
        history = model.history
    save_checkpoint(model, workdir / args.out)
    write_csv([{"step": i + 1, "loss": float(v)} for i, v in enumerate(history)], workdir / (args.out + ".loss.csv"))


def cmd_eval(args, cfg: RunConfig, workdir: Path) -> None:
    objects = resolve_objects(args.object, workdir)
    samples = read_dataset(workdir / args.data)[: args.limit]
    _dataset_objects(samples, objects)
    if args.method == "ours":
        recs = evaluate_ours(load_checkpoint(workdir / args.ckpt), samples, objects, cfg.pipeline_config(), cfg.seed)
    else:
        model = load_checkpoint(workdir / args.ckpt) if args.method == "regression" else None
        recs = evaluate_baseline(args.method, samples, objects, cfg.sensor, cfg.seed, model)
    out = workdir / args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(recs, out / f"metrics_{args.method}.jsonl")
    write_csv(summarize(recs), out / f"summary_{args.method}.csv")


def cmd_track(args, cfg: RunConfig, workdir: Path) -> None:
    objects = resolve_objects(args.object, workdir)
    rows = run_tracking(load_checkpoint(workdir / args.ckpt), next(iter(objects.values())), cfg.pipeline_config(), cfg.sensor, cfg.seed, args.trajectories, args.steps)
    write_csv(rows, workdir / args.out)


def cmd_uncertainty(args, cfg: RunConfig, workdir: Path) -> None:
    objects = resolve_objects(args.object, workdir)
    samples = read_dataset(workdir / args.data)
    _dataset_objects(samples, objects)
    rows = run_uncertainty(load_checkpoint(workdir / args.ckpt), samples, objects, cfg.pipeline_config(), cfg.seed, args.sets, args.set_size)
    write_csv(rows, workdir / args.out)


def cmd_ablate(args, cfg: RunConfig, workdir: Path) -> None:
    objects = resolve_objects(args.object, workdir)
    samples = read_dataset(workdir / args.data)[: args.limit]
    _dataset_objects(samples, objects)
    model = load_checkpoint(workdir / args.ckpt)
    base = cfg.pipeline_config()
    if args.sweep == "t0":
        try:
            values = [float(v) for v in args.values.split(",")]
        except ValueError:
            raise ConfigError(f"cannot parse t0 values {args.values!r}") from None
        rows = run_t0_sweep(model, samples, objects, base, cfg.seed, values)
    else:
        rows = run_stage_ablation(model, samples, objects, base, cfg.seed, args.reps)
    write_csv(rows, workdir / args.out)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ebmpose", description="In-hand pose estimation from simulated tactile imprints.")
    ap.add_argument("--workdir", default=".", help="base directory for every relative path")
    ap.add_argument("--config", help="run config file (section.key = value lines)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize a grasp dataset")
    p.add_argument("--object", action="append", default=None, help="shape spec or object file (repeatable)")
    p.add_argument("--n", type=int, required=True, help="samples per object")
    p.add_argument("--seed", type=int)
    p.add_argument("--stream", type=int, default=STREAM_TRAIN_DATA, help="0 for training data, 1 for held-out data")
    p.add_argument("--mask-prob", type=float, default=0.0)
    p.add_argument("--present", help="fixed sensor mask, e.g. 1,0")
    p.add_argument("--aug", action="store_true", help="bake observation noise into the stored imprints")
    p.add_argument("--out", default="dataset.jsonl")

    p = sub.add_parser("train", help="train the energy model or the regression baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--object", action="append", required=True)
    p.add_argument("--method", choices=("ours", "regression"), default="ours")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", default="model.ckpt")
    p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("eval", help="evaluate a method on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--object", action="append", required=True)
    p.add_argument("--method", choices=("ours", "regression", "icp-global", "icp-partial", "grid-match"), default="ours")
    p.add_argument("--ckpt")
    p.add_argument("--limit", type=int)
    p.add_argument("--out-dir", default="results")

    p = sub.add_parser("track", help="track simulated trajectories")
    p.add_argument("--object", action="append", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--trajectories", type=int, default=3)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--out", default="tracking.csv")

    p = sub.add_parser("uncertainty", help="grasp selection by estimated uncertainty")
    p.add_argument("--data", required=True)
    p.add_argument("--object", action="append", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sets", type=int, default=10)
    p.add_argument("--set-size", type=int, default=10)
    p.add_argument("--out", default="uncertainty.csv")

    p = sub.add_parser("ablate", help="stage ablation or t0 sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--object", action="append", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sweep", choices=("stages", "t0"), default="stages")
    p.add_argument("--values", default="0.4,0.6,0.8,1.0")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--limit", type=int)
    p.add_argument("--out", default="ablation.csv")
    return ap


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "track": cmd_track,
    "uncertainty": cmd_uncertainty,
    "ablate": cmd_ablate,
}


def run(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)  # usage errors exit with status 2
    workdir = Path(args.workdir)
    try:
        _threads()
        cfg = _load_config(args, workdir)
    except (EbmPoseError, OSError) as exc:
        print(f"ebmpose: error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "gen-data" and not args.object:
            args.object = ["box:20,10,6"]
        if args.command == "eval" and args.method in ("ours", "regression") and not args.ckpt:
            raise ConfigError(f"--ckpt is required for method {args.method}")
        _COMMANDS[args.command](args, cfg, workdir)
    except (ConfigError, BadSpec) as exc:  # bad flags or shape specs are usage errors
        print(f"ebmpose: error: {exc}", file=sys.stderr)
        return 2
    except (EbmPoseError, OSError) as exc:
        print(f"ebmpose: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
