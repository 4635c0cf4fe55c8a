"""Online end-to-end training of the localizer against the downstream control loss."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import AutodiffError, Tape, ops
from .control import StanleyGains, stanley_steer, tracking_errors
from .localization import Localizer, localization_loss, loc_forward
from .pose import Pose, wrap_angle
from .vehicle import LapLog, StepOutput, VehicleState, World, propagate_two_steps, run_lap

GAIN_FLOOR = 1e-3
PHASES = ("before", "train", "after")
LOSS_DISPLAY_SCALE = 1e2


@dataclass(frozen=True)
class E2EConfig:
    lr: float = 9e-8
    alpha: float = 5.5
    beta: float = 1.0
    gamma: float = 0.0
    laps: int = 30
    eval_laps: int = 30
    train_loc: bool = True
    train_stanley: bool = False
    stanley_lr: float = 1e-3
    loc_reference: str = "frozen"     # or "ground_truth"
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.stanley_lr < 0:
            raise ValueError("learning rates must be nonnegative")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.laps < 1 or self.eval_laps < 1:
            raise ValueError("lap counts must be at least 1")
        if self.loc_reference not in ("frozen", "ground_truth"):
            raise ValueError(f"unknown loc_reference {self.loc_reference!r}")


@dataclass
class HeadingHistory:
    theta_t: object
    theta_t1: float
    theta_t2: float

    @classmethod
    def replicate(cls, theta):
        v = float(ops.value(theta))
        return cls(theta, v, v)

    def push(self, theta) -> "HeadingHistory":
        return HeadingHistory(theta, float(ops.value(self.theta_t)), self.theta_t1)


def total_loss(e_cross, hist: HeadingHistory, loc_loss, cfg: E2EConfig):
    """``alpha*e_cross^2 + beta*|theta_t - 2 theta_{t-1} + theta_{t-2}| + gamma*L_loc``.

    Successive heading differences are wrapped before they are combined. Terms
    with zero weight are left out entirely.
    """
    terms = []
    if cfg.alpha > 0:
        sq = e_cross * e_cross if isinstance(e_cross, (float, int)) else ops.square(e_cross)
        terms.append(cfg.alpha * sq)
    if cfg.beta > 0:
        d1 = wrap_angle(hist.theta_t - hist.theta_t1)
        d2 = wrap_angle(hist.theta_t1 - hist.theta_t2)
        curv = d1 - d2
        terms.append(cfg.beta * (abs(curv) if isinstance(curv, (float, int)) else ops.abs(curv)))
    if cfg.gamma > 0:
        terms.append(cfg.gamma * loc_loss)
    if not terms:
        return 0.0
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


@dataclass
class E2EStepResult:
    delta: float
    loss: float
    loss_loc: float
    trained_est: Pose
    frozen_est: Pose
    updated: bool


def e2e_timestep(trained: Localizer, frozen: Localizer, gains: StanleyGains, world: World,
                 state: VehicleState, scan, prev_trained: Pose, prev_frozen: Pose,
                 hist: HeadingHistory | None, cfg: E2EConfig, learn=True, gt: Pose | None = None):
    """One control step with an optional SGD update.

    Returns the step result, the new heading history and the (possibly updated)
    gains. ``trained.params`` is updated in place when ``learn`` is set.
    """
    vp = world.vehicle
    frozen_est = frozen.estimate(scan, prev_frozen)
    train_loc = learn and cfg.train_loc and cfg.lr > 0
    train_gain = learn and cfg.train_stanley and cfg.stanley_lr > 0
    use_tape = train_loc or train_gain
    tape = Tape() if use_tape else None

    if train_loc:
        params = {k: tape.leaf(v, name=k) for k, v in trained.params.items()}
    else:
        params = trained.params
    if train_gain:
        g = StanleyGains(tape.leaf(float(gains.k_e), name="gain.k_e"),
                         tape.leaf(float(gains.k_h), name="gain.k_h"))
    else:
        g = gains

    try:
        est = loc_forward(params, scan, prev_trained, trained.cfg)
        v = max(float(state.v), 0.1)
        delta = stanley_steer(tracking_errors(est, world.traj), v, g, vp.delta_max)
        ref = frozen_est
        prop = propagate_two_steps(ref, delta, v, vp.dt, vp.wheelbase, vp.delta_max)
        e_cross = tracking_errors(prop, world.traj).e_cross
        new_hist = HeadingHistory.replicate(est.theta) if hist is None else hist.push(est.theta)
        anchor = gt if (cfg.loc_reference == "ground_truth" and gt is not None) else frozen_est
        l_loc = localization_loss(est, anchor)
        loss = total_loss(e_cross, new_hist, l_loc, cfg)
    except AutodiffError:
        # non-finite value on the tape: drive with the frozen estimate, skip the update
        fallback = stanley_steer(tracking_errors(frozen_est, world.traj), max(float(state.v), 0.1),
                                 StanleyGains(float(gains.k_e), float(gains.k_h)), vp.delta_max)
        res = E2EStepResult(fallback, math.nan, math.nan, frozen_est, frozen_est, False)
        return res, hist, gains

    loss_v = float(ops.value(loss))
    updated = False
    if use_tape and isinstance(loss, ops.Node) and math.isfinite(loss_v):
        grads = tape.backward(loss)
        if train_loc:
            for k in trained.params:
                trained.params[k] = trained.params[k] - cfg.lr * grads[k]
        if train_gain:
            gains = StanleyGains(max(float(gains.k_e) - cfg.stanley_lr * float(grads["gain.k_e"]), GAIN_FLOOR),
                                 max(float(gains.k_h) - cfg.stanley_lr * float(grads["gain.k_h"]), GAIN_FLOOR))
        updated = True

    hist_out = HeadingHistory(float(ops.value(new_hist.theta_t)), new_hist.theta_t1, new_hist.theta_t2)
    res = E2EStepResult(float(ops.value(delta)), loss_v, float(ops.value(l_loc)),
                        est.values(), frozen_est, updated)
    return res, hist_out, gains


class MindStack:
    """Localizer + Stanley stack; learns online when ``learn`` is set."""

    def __init__(self, trained: Localizer, frozen: Localizer, gains: StanleyGains,
                 cfg: E2EConfig, learn=False):
        self.trained = trained
        self.frozen = frozen
        self.gains = gains
        self.cfg = cfg
        self.learn = learn
        self.updates = 0

    def reset(self, world, start, rng):
        self.prev_trained = start
        self.prev_frozen = start
        self.hist = None

    def step(self, world, scan, state, rng) -> StepOutput:
        res, self.hist, self.gains = e2e_timestep(
            self.trained, self.frozen, self.gains, world, state, scan,
            self.prev_trained, self.prev_frozen, self.hist, self.cfg, learn=self.learn,
            gt=state.pose)
        self.prev_trained = res.trained_est
        self.prev_frozen = res.frozen_est
        self.updates += res.updated
        i = world.traj.nearest_index(res.trained_est.x, res.trained_est.y)
        return StepOutput(res.delta, float(world.traj.velocity[i]), res.trained_est,
                          res.loss, res.loss_loc)


# -- phases ---------------------------------------------------------------------

@dataclass
class LapResult:
    lap: int
    mean_training_loss: float
    mean_abs_cte_m: float
    lap_time_s: float
    outcome: str

    @classmethod
    def from_log(cls, lap, log: LapLog):
        return cls(lap, log.mean_loss(), log.mean_abs_cte(), log.lap_time, log.outcome)


@dataclass
class PhaseReport:
    phase: str
    laps: list = field(default_factory=list)
    crashes: int = 0
    gains: tuple = (1.8, 1.3)

    def _stat(self, attr):
        vals = np.array([getattr(l, attr) for l in self.laps], dtype=np.float64)
        if vals.size == 0:
            return math.nan, math.nan
        return float(vals.mean()), float(vals.std())

    @property
    def training_loss(self):
        return self._stat("mean_training_loss")

    @property
    def abs_cte(self):
        return self._stat("mean_abs_cte_m")

    @property
    def lap_time(self):
        return self._stat("lap_time_s")

    def completed(self) -> int:
        return sum(l.outcome == "complete" for l in self.laps)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lap", "mean_training_loss", "mean_abs_cte_m", "lap_time_s", "outcome"])
            for l in self.laps:
                w.writerow([l.lap, repr(l.mean_training_loss), repr(l.mean_abs_cte_m),
                            repr(l.lap_time_s), l.outcome])

    def summary_row(self) -> dict:
        tl, tls = self.training_loss
        c, cs = self.abs_cte
        t, ts = self.lap_time
        return {"setting": self.phase,
                "training_loss_x1e2": tl * LOSS_DISPLAY_SCALE,
                "training_loss_x1e2_std": tls * LOSS_DISPLAY_SCALE,
                "validation_cte_cm": c * 100.0, "validation_cte_cm_std": cs * 100.0,
                "lap_time_s": t, "lap_time_s_std": ts,
                "laps": len(self.laps), "completed": self.completed(), "crashes": self.crashes}


SUMMARY_HEADER = ["setting", "training_loss_x1e2", "training_loss_x1e2_std", "validation_cte_cm",
                  "validation_cte_cm_std", "lap_time_s", "lap_time_s_std", "laps", "completed",
                  "crashes"]


def write_summary(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for r in reports:
            row = r.summary_row()
            w.writerow([row[k] if isinstance(row[k], (str, int)) else repr(row[k]) for k in SUMMARY_HEADER])


def lap_rng(seed: int, tag: str, lap: int, attempt: int = 0) -> np.random.Generator:
    """RNG stream for one lap, keyed by seed, a phase/method tag, lap index and retry."""
    key = [ord(c) for c in tag]
    return np.random.default_rng(np.random.SeedSequence([seed, lap, attempt, *key]))


def max_lap_steps(world: World, factor=3.0) -> int:
    v = float(np.min(world.traj.velocity))
    return int(factor * world.traj.length / (v * world.vehicle.dt)) + 100


@dataclass
class Scenario:
    name: str
    world: World
    pretrained: Localizer
    gains: StanleyGains = field(default_factory=StanleyGains)


def _stack_lap(args):
    stack, world, seed, tag, lap = args
    log = run_lap(stack, world, max_steps=max_lap_steps(world), rng=lap_rng(seed, tag, lap))
    return LapResult.from_log(lap, log)


def evaluate_stack(stack, world: World, laps: int, seed: int, tag: str, parallel: int = 1) -> list:
    """Independent seeded evaluation laps of any driving stack.

    Every lap gets its own RNG stream, so results do not depend on ``parallel``.
    """
    jobs = [(stack, world, seed, tag, lap) for lap in range(laps)]
    if parallel > 1 and laps > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(min(parallel, laps)) as ex:
            return list(ex.map(_stack_lap, jobs))
    return [_stack_lap(j) for j in jobs]


def evaluate_laps(scenario: Scenario, localizer: Localizer, gains: StanleyGains, cfg: E2EConfig,
                  phase: str, laps: int, parallel: int = 1) -> PhaseReport:
    stack = MindStack(localizer, scenario.pretrained, gains, cfg, learn=False)
    results = evaluate_stack(stack, scenario.world, laps, cfg.seed, phase, parallel)
    rep = PhaseReport(phase, results, gains=(float(gains.k_e), float(gains.k_h)))
    rep.crashes = sum(r.outcome == "crash" for r in results)
    return rep


class TrainingAborted(RuntimeError):
    pass


def train_laps(scenario: Scenario, localizer: Localizer, gains: StanleyGains, cfg: E2EConfig,
               phase="train", max_restarts=None):
    """Online training for ``cfg.laps`` laps; crashed laps restart from the start pose."""
    max_restarts = cfg.laps if max_restarts is None else max_restarts
    stack = MindStack(localizer, scenario.pretrained, gains, cfg, learn=True)
    report = PhaseReport(phase)
    lap, attempt = 0, 0
    while lap < cfg.laps:
        log = run_lap(stack, scenario.world, max_steps=max_lap_steps(scenario.world),
                      rng=lap_rng(cfg.seed, phase, lap, attempt))
        if log.outcome == "crash":
            report.crashes += 1
            if report.crashes > max_restarts:
                raise TrainingAborted(f"{report.crashes} crashes during training")
            attempt += 1
            continue
        report.laps.append(LapResult.from_log(lap, log))
        lap += 1
        attempt = 0
    report.gains = (float(stack.gains.k_e), float(stack.gains.k_h))
    return stack.trained, stack.gains, report


@dataclass
class PhaseResults:
    before: PhaseReport
    train: PhaseReport
    after: PhaseReport
    trained: Localizer
    gains: StanleyGains


def run_phase(phase: str, scenario: Scenario, cfg: E2EConfig, localizer: Localizer | None = None,
              gains: StanleyGains | None = None, parallel: int = 1):
    """Run one protocol phase.

    ``before`` and ``after`` evaluate without learning (``after`` expects the
    trained ``localizer``); ``train`` returns ``(localizer, gains, report)``.
    """
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    gains = gains if gains is not None else scenario.gains
    if phase == "train":
        loc = (localizer or scenario.pretrained).copy()
        return train_laps(scenario, loc, gains, cfg)
    loc = localizer if localizer is not None else scenario.pretrained
    return evaluate_laps(scenario, loc, gains, cfg, phase, cfg.eval_laps, parallel)


def run_protocol(scenario: Scenario, cfg: E2EConfig, parallel: int = 1) -> PhaseResults:
    """Before / train / after on one scenario."""
    before = run_phase("before", scenario, cfg, parallel=parallel)
    trained, gains, train_rep = run_phase("train", scenario, cfg)
    after = run_phase("after", scenario, cfg, localizer=trained, gains=gains, parallel=parallel)
    return PhaseResults(before, train_rep, after, trained, gains)


COMBINED_SETTINGS = ("localization_only", "control_loss", "stanley_only", "combined")


def run_combined_comparison(scenario: Scenario, cfg: E2EConfig, parallel: int = 1,
                            protocol: PhaseResults | None = None):
    """The four training setups; each is evaluated over ``cfg.eval_laps`` laps.

    Returns ``{setting: PhaseReport}`` plus the trained artifacts per setting.
    """
    base = protocol if protocol is not None else run_protocol(
        scenario, replace(cfg, train_loc=True, train_stanley=False), parallel)
    reports = {"localization_only": replace(base.before, phase="localization_only"),
               "control_loss": replace(base.after, phase="control_loss")}
    artifacts = {"localization_only": (scenario.pretrained, scenario.gains),
                 "control_loss": (base.trained, base.gains)}

    for name, train_loc in (("stanley_only", False), ("combined", True)):
        c = replace(cfg, train_loc=train_loc, train_stanley=True)
        loc, gains, _ = train_laps(scenario, scenario.pretrained.copy(), scenario.gains, c, phase=name)
        rep = evaluate_laps(scenario, loc, gains, c, "after", c.eval_laps, parallel)
        rep.phase = name
        reports[name] = rep
        artifacts[name] = (loc, gains)
    return reports, artifacts
