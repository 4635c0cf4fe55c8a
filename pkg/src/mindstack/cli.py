"""``mindstack`` command line: track generation, pretraining, online training and comparisons.

Every command writes CSV outputs plus a ``<command>_manifest.txt`` holding the
effective config and content hashes of its inputs. Outputs depend only on the
config and the seed.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import sys
from pathlib import Path

import numpy as np

from . import localization as loc
from .config import ConfigError, ScenarioConfig, dump_config, load_config
from .control import FollowTheGapStack, ParticleFilterStack, StanleyGains
from .training import (Scenario, TrainingAborted, evaluate_stack, run_combined_comparison,
                       run_phase, write_summary)
from .vehicle import World
from .world import (MapError, generate_track, grid_to_gray, load_map, load_waypoints, save_waypoints,
                    write_map_meta, write_pgm)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_MISSING_CHECKPOINT = 2
EXIT_ALL_CRASHED = 3


class CommandError(RuntimeError):
    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message)
        self.code = code


# -- helpers --------------------------------------------------------------------

def git_blob_hash(data: bytes) -> str:
    """Content hash in the same form git uses for blobs."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: ScenarioConfig, argv, inputs=()) -> Path:
    lines = [f"command: {command}", f"argv: {' '.join(argv)}", f"seed: {cfg.seed}", "inputs:"]
    for p in ([cfg.source] if cfg.source else []) + [q for q in inputs if q is not None]:
        p = Path(p)
        if p.is_file():
            lines.append(f"  {git_blob_hash(p.read_bytes())}  {p}")
    lines += ["effective_config:", dump_config(cfg)]
    path = out_dir / f"{command}_manifest.txt"
    path.write_text("\n".join(lines))
    return path


def _fmt(v) -> str:
    return v if isinstance(v, str) else repr(float(v)) if isinstance(v, float) else str(v)


def write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def build_world(cfg: ScenarioConfig) -> World:
    m = cfg.map
    try:
        if m.pgm is not None:
            grid = load_map(m.pgm, m.meta)
            traj = load_waypoints(m.waypoints)
        else:
            grid, traj = generate_track(m.kind, m.scale, m.resolution, m.width, m.velocity)
            if m.waypoints is not None:
                traj = load_waypoints(m.waypoints)
    except (OSError, MapError, ValueError) as exc:
        raise CommandError(f"cannot build the map: {exc}") from None
    return World(grid, traj, cfg.sensor, cfg.noise_sigma, cfg.vehicle)


def _checkpoint_path(args, cfg: ScenarioConfig, out_dir: Path) -> Path:
    if getattr(args, "checkpoint", None):
        return Path(args.checkpoint)
    if cfg.pretrain.checkpoint is not None:
        return Path(cfg.pretrain.checkpoint)
    return out_dir / "pretrained.ckpt"


def load_localizer(path: Path) -> loc.Localizer:
    if not path.is_file():
        raise CommandError(f"checkpoint not found: {path} (run `mindstack pretrain` first)",
                           EXIT_MISSING_CHECKPOINT)
    try:
        return loc.Localizer.load(path)
    except Exception as exc:  # malformed file of any kind
        raise CommandError(f"cannot read checkpoint {path}: {exc}", EXIT_MISSING_CHECKPOINT) from None


def _read_gains(path: Path, default: StanleyGains) -> StanleyGains:
    if not path.is_file():
        return default
    with open(path, newline="") as fh:
        row = next(csv.DictReader(fh))
    return StanleyGains(float(row["k_e"]), float(row["k_h"]))


def _all_crashed(results) -> bool:
    return len(results) > 0 and all(r.outcome == "crash" for r in results)


# -- commands -------------------------------------------------------------------

def cmd_gen_track(args, cfg: ScenarioConfig, out_dir: Path) -> int:
    kind = args.kind or cfg.map.kind or "oval"
    scale = args.scale if args.scale is not None else cfg.map.scale
    res = args.resolution if args.resolution is not None else cfg.map.resolution
    grid, traj = generate_track(kind, scale, res, cfg.map.width, cfg.map.velocity)
    name = args.name or kind
    try:
        write_pgm(out_dir / f"{name}.pgm", grid_to_gray(grid))
        write_map_meta(out_dir / f"{name}.meta", grid)
        save_waypoints(out_dir / f"{name}_waypoints.csv", traj)
    except OSError as exc:
        raise CommandError(f"cannot write track files: {exc}") from None
    print(f"wrote {name}.pgm ({grid.width}x{grid.height}), {name}.meta, {name}_waypoints.csv "
          f"({len(traj)} waypoints, lap {traj.length:.2f} m)")
    return EXIT_OK


def _make_dataset(cfg: ScenarioConfig, world: World, augment=None, stream=0):
    p = cfg.pretrain
    return loc.generate_dataset(world.grid, cfg.sensor, cfg.noise_sigma,
                                augment if augment is not None else p.augment,
                                rng=np.random.default_rng(np.random.SeedSequence([cfg.seed, stream])),
                                prev_sigma_xy=p.prev_sigma_xy, prev_sigma_theta=p.prev_sigma_theta,
                                seed=cfg.seed)


def cmd_dataset(args, cfg: ScenarioConfig, out_dir: Path) -> int:
    world = build_world(cfg)
    ds = _make_dataset(cfg, world)
    path = Path(args.output) if args.output else out_dir / "dataset.bin"
    loc.save_dataset(path, ds)
    print(f"wrote {len(ds)} samples to {path}")
    return EXIT_OK


def pretrain_localizer(cfg: ScenarioConfig, world: World, dataset=None, epochs=None, log=None):
    """Pretrain a fresh localizer; returns it with rows (epoch, train, val loss, val error)."""
    ds = dataset if dataset is not None else _make_dataset(cfg, world)
    val = _make_dataset(cfg, world, augment=1, stream=1)
    ncfg = loc.LocNetConfig.for_grid(world.grid, cfg.sensor)
    params = loc.init_params(ncfg, np.random.default_rng(np.random.SeedSequence([cfg.seed, 2])))
    rows = []

    def on_epoch(e, loss, p):
        vl, ve = loc.evaluate(p, val, ncfg)
        rows.append((e, loss, vl, ve))
        if log is not None:
            log(*rows[-1])

    params, _ = loc.pretrain(params, ds, ncfg, cfg.pretrain.epochs if epochs is None else epochs,
                             cfg.pretrain.lr, cfg.pretrain.batch_size,
                             rng=np.random.default_rng(np.random.SeedSequence([cfg.seed, 3])),
                             log=on_epoch)
    return loc.Localizer(ncfg, params), rows


def cmd_pretrain(args, cfg: ScenarioConfig, out_dir: Path) -> int:
    world = build_world(cfg)
    ds = None
    if args.dataset:
        try:
            ds = loc.load_dataset(args.dataset)
        except (OSError, ValueError) as exc:
            raise CommandError(f"cannot read dataset {args.dataset}: {exc}") from None

    def log(e, tl, vl, ve):
        print(f"epoch {e:3d}  train {tl:.5f}  val {vl:.5f}  pos err {ve:.3f} m", flush=True)

    try:
        localizer, rows = pretrain_localizer(cfg, world, ds, args.epochs, log=None if args.quiet else log)
    except loc.TrainingDiverged as exc:
        raise CommandError(f"pretraining diverged: {exc}") from None
    ckpt = Path(args.checkpoint) if args.checkpoint else out_dir / "pretrained.ckpt"
    localizer.save(ckpt)
    write_rows(out_dir / "pretrain_loss.csv",
               ["epoch", "train_loss", "val_loss", "val_position_error_m"], rows)
    print(f"wrote {ckpt}")
    return EXIT_OK


def _scenario(cfg, world, localizer) -> Scenario:
    return Scenario(cfg.name, world, localizer, cfg.stanley_gains())


def cmd_run(args, cfg: ScenarioConfig, out_dir: Path) -> int:
    world = build_world(cfg)
    ckpt = _checkpoint_path(args, cfg, out_dir)
    pre = load_localizer(ckpt)
    sc = _scenario(cfg, world, pre)
    e2e = cfg.e2e
    phases = ["before", "train", "after"] if args.phase == "all" else [args.phase]
    reports, laps_seen = [], []
    trained_path = Path(args.trained) if args.trained else out_dir / "trained.ckpt"
    gains_path = trained_path.with_name(trained_path.stem + "_gains.csv")
    trained, gains = None, cfg.stanley_gains()
    inputs = [ckpt]
    for phase in phases:
        if phase == "train":
            try:
                trained, gains, rep = run_phase("train", sc, e2e)
            except TrainingAborted as exc:
                print(f"training aborted: {exc}", file=sys.stderr)
                return EXIT_ALL_CRASHED
            trained.save(trained_path)
            write_rows(gains_path, ["k_e", "k_h"], [(float(gains.k_e), float(gains.k_h))])
        elif phase == "after":
            if trained is None:
                trained = load_localizer(trained_path)
                gains = _read_gains(gains_path, gains)
                inputs.append(trained_path)
            rep = run_phase("after", sc, e2e, localizer=trained, gains=gains, parallel=args.parallel_laps)
        else:
            rep = run_phase("before", sc, e2e, parallel=args.parallel_laps)
        rep.write_csv(out_dir / f"phase_{phase}.csv")
        reports.append(rep)
        laps_seen += rep.laps
        tl, _ = rep.training_loss
        c, _ = rep.abs_cte
        print(f"{phase:>6}: training loss x1e2 {tl * 100:.3f}  mean |CTE| {c * 100:.2f} cm  "
              f"completed {rep.completed()}/{len(rep.laps)}  crashes {rep.crashes}")
    summary = out_dir / ("summary.csv" if args.phase == "all" else f"summary_{args.phase}.csv")
    write_summary(summary, reports)
    write_manifest(out_dir, "run", cfg, args.argv, inputs)
    return EXIT_ALL_CRASHED if _all_crashed(laps_seen) else EXIT_OK


COMPARE_HEADER = ["method", "mean_abs_cte_cm", "mean_abs_cte_cm_std", "lap_time_s", "lap_time_s_std",
                  "laps", "completed"]
COMPARE_METHODS = ("Follow-the-Gap", "PF + Pure Pursuit", "PF + Stanley",
                   "MIND-Stack before optimization", "MIND-Stack after optimization")


def _compare_row(name, results):
    cte = np.array([r.mean_abs_cte_m for r in results]) * 100.0
    lt = np.array([r.lap_time_s for r in results])
    done = sum(r.outcome == "complete" for r in results)
    return (name, float(cte.mean()), float(cte.std()), float(lt.mean()), float(lt.std()),
            len(results), done)


def run_compare(cfg: ScenarioConfig, world: World, pretrained: loc.Localizer, parallel=1):
    """All five Table-3 rows as ``(rows, per-method lap results)``."""
    b = cfg.baselines
    laps = cfg.e2e.eval_laps
    seed = cfg.seed
    results = {
        COMPARE_METHODS[0]: evaluate_stack(FollowTheGapStack(b.ftg_bubble, b.ftg_threshold), world,
                                           laps, seed, "ftg", parallel),
        COMPARE_METHODS[1]: evaluate_stack(ParticleFilterStack("pure_pursuit", b.pf, cfg.stanley_gains(),
                                                               b.lookahead), world, laps, seed, "pfpp", parallel),
        COMPARE_METHODS[2]: evaluate_stack(ParticleFilterStack("stanley", b.pf, cfg.stanley_gains(),
                                                               b.lookahead), world, laps, seed, "pfst", parallel),
    }
    sc = _scenario(cfg, world, pretrained)
    before = run_phase("before", sc, cfg.e2e, parallel=parallel)
    trained, gains, _ = run_phase("train", sc, cfg.e2e)
    after = run_phase("after", sc, cfg.e2e, localizer=trained, gains=gains, parallel=parallel)
    results[COMPARE_METHODS[3]] = before.laps
    results[COMPARE_METHODS[4]] = after.laps
    rows = [_compare_row(name, results[name]) for name in COMPARE_METHODS]
    return rows, results


def cmd_compare(args, cfg: ScenarioConfig, out_dir: Path) -> int:
    world = build_world(cfg)
    ckpt = _checkpoint_path(args, cfg, out_dir)
    pre = load_localizer(ckpt)
    try:
        rows, results = run_compare(cfg, world, pre, args.parallel_laps)
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ALL_CRASHED
    write_rows(out_dir / "compare.csv", COMPARE_HEADER, rows)
    for r in rows:
        print(f"{r[0]:<32} |CTE| {r[1]:7.2f} +- {r[2]:6.2f} cm   lap {r[3]:6.2f} +- {r[4]:5.2f} s   "
              f"{r[6]}/{r[5]} complete")
    write_manifest(out_dir, "compare", cfg, args.argv, [ckpt])
    every = [l for res in results.values() for l in res]
    return EXIT_ALL_CRASHED if _all_crashed(every) else EXIT_OK


COMBINED_HEADER = ["setting", "training_loss_x1e2", "training_loss_x1e2_std", "validation_cte_cm",
                   "validation_cte_cm_std", "k_e", "k_h", "laps", "completed"]


def cmd_combined(args, cfg: ScenarioConfig, out_dir: Path) -> int:
    world = build_world(cfg)
    ckpt = _checkpoint_path(args, cfg, out_dir)
    pre = load_localizer(ckpt)
    try:
        reports, _ = run_combined_comparison(_scenario(cfg, world, pre), cfg.e2e, args.parallel_laps)
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ALL_CRASHED
    rows = []
    for name, rep in reports.items():
        s = rep.summary_row()
        rows.append((name, s["training_loss_x1e2"], s["training_loss_x1e2_std"], s["validation_cte_cm"],
                     s["validation_cte_cm_std"], rep.gains[0], rep.gains[1], s["laps"], s["completed"]))
        print(f"{name:<18} training loss x1e2 {s['training_loss_x1e2']:.3f}  "
              f"|CTE| {s['validation_cte_cm']:.2f} cm  gains ({rep.gains[0]:.4f}, {rep.gains[1]:.4f})")
    write_rows(out_dir / "combined.csv", COMBINED_HEADER, rows)
    write_manifest(out_dir, "combined", cfg, args.argv, [ckpt])
    every = [l for rep in reports.values() for l in rep.laps]
    return EXIT_ALL_CRASHED if _all_crashed(every) else EXIT_OK


# -- argument parsing -------------------------------------------------------------

def _global_flags(parser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="scenario config file or preset name (default: oval)")
    parser.add_argument("--seed", type=int, default=d, help="override the config seed")
    parser.add_argument("--out-dir", default=argparse.SUPPRESS if suppress else ".",
                        help="output directory (default: current directory)")
    parser.add_argument("--laps", type=int, default=d, help="override training and evaluation lap counts")
    parser.add_argument("--parallel-laps", type=int, default=argparse.SUPPRESS if suppress else 1,
                        help="worker processes for evaluation laps")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mindstack", description=__doc__.splitlines()[0])
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    g = sub.add_parser("gen-track", parents=[common], help="write a generated map, metadata and waypoints")
    g.add_argument("--kind", choices=["oval", "hairpin", "chicane"])
    g.add_argument("--scale", type=float)
    g.add_argument("--resolution", type=float)
    g.add_argument("--name", help="file stem (default: the track kind)")
    g.set_defaults(func=cmd_gen_track)

    d = sub.add_parser("dataset", parents=[common], help="generate and cache the pretraining dataset")
    d.add_argument("--output", help="cache path (default: OUT_DIR/dataset.bin)")
    d.set_defaults(func=cmd_dataset)

    t = sub.add_parser("pretrain", parents=[common], help="supervised localizer pretraining")
    t.add_argument("--dataset", help="dataset cache to train on (default: generate)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--checkpoint", help="output checkpoint (default: OUT_DIR/pretrained.ckpt)")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_pretrain)

    r = sub.add_parser("run", parents=[common], help="before / train / after phases")
    r.add_argument("--phase", choices=["before", "train", "after", "all"], default="all")
    r.add_argument("--checkpoint", help="pretrained checkpoint (default: OUT_DIR/pretrained.ckpt)")
    r.add_argument("--trained", help="trained checkpoint path (default: OUT_DIR/trained.ckpt)")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", parents=[common], help="baseline comparison table")
    c.add_argument("--checkpoint")
    c.set_defaults(func=cmd_compare)

    m = sub.add_parser("combined", parents=[common], help="localization / control / combined training")
    m.add_argument("--checkpoint")
    m.set_defaults(func=cmd_combined)
    return p


def effective_config(args) -> ScenarioConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.laps is not None:
        if args.laps < 1:
            raise ConfigError("--laps must be at least 1")
        cfg = cfg.with_laps(args.laps)
    return cfg


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    if args.parallel_laps < 1:
        parser.error("--parallel-laps must be at least 1")
    try:
        cfg = effective_config(args)
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        code = args.func(args, cfg, out_dir)
        if args.command in ("gen-track", "dataset", "pretrain"):
            inputs = [Path(args.dataset)] if getattr(args, "dataset", None) else []
            write_manifest(out_dir, args.command, cfg, argv, inputs)
        return code
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
