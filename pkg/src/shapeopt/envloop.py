"""Single-step episodes, rewards and the training loop.

Every episode starts from the same constant observation, draws one action,
turns it into a shape and scores the shape with one flow simulation. A
coordinator collects batches of episodes (optionally on a process pool),
always in episode-index order, and runs one PPO update per batch.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Optional, Sequence

import numpy as np

from . import agent
from .flow import run_flow
from .geometry import (ActionTriplet, ControlPoint, DegenerateShape, ShapeSpec, build_shape,
                       decode_point, polygon_area, reference_points, validate, write_outline)

if TYPE_CHECKING:
    from .config import RunConfig

log = logging.getLogger(__name__)

SHAPINGS = ("none", "positive_doubling", "area_penalty", "both")
MA_WINDOW = 50
HISTORY_HEADER = ("episode", "reward", "mean_cd", "mean_cl", "area", "failed", "duration_s")


@dataclass(frozen=True)
class RewardMode:
    r_fail: float = -5.0
    shaping: str = "none"
    multiplier: float = 2.0
    target_area: float = math.pi
    # lift-to-drag ratio of the reference cylinder, subtracted from every reward
    reference_ratio: float = 0.0
    recompute_reference: bool = False

    def __post_init__(self):
        if not self.r_fail < 0.0:
            raise ValueError("reward.r_fail must be < 0")
        if self.shaping not in SHAPINGS:
            raise ValueError(f"reward.shaping must be one of {', '.join(SHAPINGS)}")
        if self.target_area <= 0.0:
            raise ValueError("reward.target_area must be > 0")

    @property
    def doubling(self) -> bool:
        return self.shaping in ("positive_doubling", "both")

    @property
    def area_penalty(self) -> bool:
        return self.shaping in ("area_penalty", "both")


def compute_reward(result, area: float, mode: RewardMode) -> float:
    """Reward for one simulated shape.

    ``result`` needs ``failed`` and ``mean_ratio``; ``None`` counts as a
    failure. Steps: ratio minus the reference, floor at ``r_fail``, optional
    scaling of positive values, optional relative area penalty (which also
    hits failed shapes).
    """
    failed = result is None or result.failed or not math.isfinite(result.mean_ratio)
    if failed:
        r = mode.r_fail
    else:
        r = result.mean_ratio - mode.reference_ratio
        r = max(r, mode.r_fail)
        if mode.doubling and r > 0.0:
            r = mode.multiplier * r
    if mode.area_penalty:
        a = area if math.isfinite(area) else 0.0
        r -= abs(a - mode.target_area) / mode.target_area
    return float(r)


@dataclass
class EpisodeRecord:
    episode: int
    raw_action: np.ndarray
    action: np.ndarray
    points: tuple
    log_prob: float
    value: float
    mean_cd: float
    mean_cl: float
    mean_ratio: float
    failed: bool
    failure_reason: str
    area: float
    reward: float
    duration_s: float = 0.0

    def csv_row(self, timing: bool = True) -> list[str]:
        row = [str(self.episode), repr(self.reward), repr(self.mean_cd), repr(self.mean_cl),
               repr(self.area), str(int(self.failed))]
        row.append(f"{self.duration_s:.3f}" if timing else "")
        return row

    def spec(self, cfg: "RunConfig") -> Optional[ShapeSpec]:
        try:
            return ShapeSpec(tuple(self.points), cfg.geometry.smoothing, cfg.geometry.samples)
        except DegenerateShape:
            return None


@dataclass
class RunHistory:
    records: list = field(default_factory=list)
    window: int = MA_WINDOW

    def __len__(self) -> int:
        return len(self.records)

    def append(self, rec: EpisodeRecord) -> None:
        expected = len(self.records)
        if rec.episode != expected:
            raise ValueError(f"episode {rec.episode} appended where {expected} was expected")
        self.records.append(rec)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.records], dtype=float)

    def moving_average(self, window: Optional[int] = None) -> np.ndarray:
        """Trailing mean over the last ``window`` completed episodes (fewer at the start)."""
        w = window or self.window
        r = self.rewards
        if r.size == 0:
            return r
        c = np.concatenate([[0.0], np.cumsum(r)])
        idx = np.arange(1, r.size + 1)
        lo = np.maximum(idx - w, 0)
        return (c[idx] - c[lo]) / (idx - lo)

    def best_indices(self) -> list[int]:
        """Episodes that set a new best reward when they completed."""
        out, best = [], -math.inf
        for rec in self.records:
            if not rec.failed and rec.reward > best:
                best = rec.reward
                out.append(rec.episode)
        return out

    def top(self, k: int) -> list[EpisodeRecord]:
        ok = [r for r in self.records if not r.failed]
        return sorted(ok, key=lambda r: (-r.reward, r.episode))[:k]

    def to_csv(self, timing: bool = True) -> str:
        lines = [",".join(HISTORY_HEADER)]
        lines += [",".join(r.csv_row(timing)) for r in self.records]
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> bytes:
        """Everything except wall-clock timing, as bytes."""
        return self.to_csv(timing=False).encode()


# ---------------------------------------------------------------- episodes

def episode_rng(seed: int, episode: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(episode)]))


def decode_action(action: np.ndarray, cfg: "RunConfig") -> list[ControlPoint]:
    """Free points come from consecutive triplets; fixed ones sit on the reference cylinder."""
    g = cfg.geometry
    ref = reference_points(g.n)
    free = sorted(g.free_points)
    action = np.asarray(action, dtype=float).ravel()
    if action.size != 3 * len(free):
        raise ValueError(f"action has {action.size} entries, expected {3 * len(free)}")
    pts = list(ref)
    for k, i in enumerate(free):
        t = ActionTriplet(*action[3 * k:3 * k + 3])
        pts[i] = decode_point(t, i, g.n, g.r_min, g.r_max, g.angular_factor)
    return pts


def score_points(points: Sequence[ControlPoint], cfg: "RunConfig"):
    """Build, validate and simulate one shape. Returns (FlowResult or None, area, reason)."""
    try:
        spec = ShapeSpec(tuple(points), cfg.geometry.smoothing, cfg.geometry.samples)
    except DegenerateShape as exc:
        return None, 0.0, f"degenerate: {exc}"
    poly = build_shape(spec)
    area = abs(polygon_area(poly))
    check = validate(poly)
    if not check:
        return None, area, check.reason
    result = run_flow(poly, cfg.flow)
    return result, area, result.failure_reason if result.failed else ""


def run_episode(params: agent.PolicyParams, episode: int, cfg: "RunConfig",
                rng: Optional[np.random.Generator] = None,
                deterministic: bool = False) -> EpisodeRecord:
    t0 = time.perf_counter()
    rng = episode_rng(cfg.run.seed, episode) if rng is None else rng
    obs = np.ones(cfg.run.obs_dim)
    sample = agent.sample_action(params, obs, rng, deterministic=deterministic)
    val = float(agent.value(params, obs)[0])
    points = decode_action(sample.action, cfg)
    result, area, reason = score_points(points, cfg)
    reward = compute_reward(result, area, cfg.reward)
    failed = result is None or result.failed
    nan = float("nan")
    return EpisodeRecord(
        episode=episode, raw_action=sample.raw, action=sample.action, points=tuple(points),
        log_prob=sample.log_prob, value=val,
        mean_cd=nan if failed else result.mean_cd,
        mean_cl=nan if failed else result.mean_cl,
        mean_ratio=nan if failed else result.mean_ratio,
        failed=failed, failure_reason=reason, area=area, reward=reward,
        duration_s=time.perf_counter() - t0)


def _episode_task(args):
    params, episode, cfg = args
    return run_episode(params, episode, cfg)


def collect(params: agent.PolicyParams, episodes: Sequence[int], cfg: "RunConfig",
            pool: Optional[ProcessPoolExecutor] = None) -> list[EpisodeRecord]:
    """Run the given episodes; results always come back in episode order."""
    tasks = [(params, e, cfg) for e in episodes]
    if pool is None:
        return [_episode_task(t) for t in tasks]
    chunk = max(1, math.ceil(len(tasks) / max(1, cfg.run.workers)))
    return list(pool.map(_episode_task, tasks, chunksize=chunk))


def to_batch(records: Sequence[EpisodeRecord], obs_dim: int) -> agent.RolloutBatch:
    return agent.RolloutBatch(
        obs=np.ones((len(records), obs_dim)),
        raw_actions=np.array([r.raw_action for r in records]),
        log_probs=np.array([r.log_prob for r in records]),
        rewards=np.array([r.reward for r in records]),
        values=np.array([r.value for r in records]))


# ---------------------------------------------------------------- training

CHECKPOINT_NAME = "checkpoint.bin"
STATE_NAME = "state.json"


def reference_ratio(cfg: "RunConfig") -> float:
    """Lift-to-drag ratio of the reference cylinder under the configured flow."""
    result, _, _ = score_points(reference_points(cfg.geometry.n), cfg)
    if result is None or result.failed:
        raise RuntimeError("reference cylinder simulation failed")
    return float(result.mean_ratio)


def initial_params(cfg: "RunConfig") -> agent.PolicyParams:
    a = cfg.agent
    return agent.init_params(cfg.run.obs_dim, cfg.act_dim, a.hidden,
                             np.random.default_rng(np.random.SeedSequence([cfg.run.seed, 2**32])),
                             log_std_init=a.log_std_init)


def _write_history_row(fh, rec: EpisodeRecord) -> None:
    fh.write(",".join(rec.csv_row()) + "\n")


def _read_history(path: Path, upto: int) -> list[dict]:
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    return rows[:upto]


def _record_from_row(row: dict) -> EpisodeRecord:
    nan = float("nan")
    return EpisodeRecord(int(row["episode"]), np.array([]), np.array([]), (), nan, nan,
                         float(row["mean_cd"]), float(row["mean_cl"]), nan, bool(int(row["failed"])),
                         "", float(row["area"]), float(row["reward"]), float(row["duration_s"] or 0.0))


class Trainer:
    """Coordinator: owns the parameters, the history and the run directory."""

    def __init__(self, cfg: "RunConfig", outdir: Optional[str | Path] = None,
                 progress: Optional[Callable[[int, RunHistory], None]] = None):
        self.cfg = cfg
        self.outdir = Path(outdir or cfg.run.outdir)
        self.progress = progress
        self.params = initial_params(cfg)
        self.opt = agent.OptimizerState()
        self.update_rng = np.random.default_rng(np.random.SeedSequence([cfg.run.seed, 2**32 + 1]))
        self.history = RunHistory()
        self.updates = 0
        self.best = -math.inf

    # persistence
    def save(self) -> None:
        agent.save_checkpoint(self.outdir / CHECKPOINT_NAME, self.params, self.opt)
        state = {"episode": len(self.history), "updates": self.updates,
                 "update_rng": self.update_rng.bit_generator.state,
                 "reference_ratio": self.cfg.reward.reference_ratio}
        tmp = self.outdir / (STATE_NAME + ".tmp")
        tmp.write_text(json.dumps(state, indent=1))
        tmp.replace(self.outdir / STATE_NAME)

    def restore(self) -> None:
        state = json.loads((self.outdir / STATE_NAME).read_text())
        self.params, opt = agent.load_checkpoint(self.outdir / CHECKPOINT_NAME)
        self.opt = opt or agent.OptimizerState()
        self.update_rng.bit_generator.state = state["update_rng"]
        self.updates = int(state["updates"])
        rows = _read_history(self.outdir / "history.csv", int(state["episode"]))
        self.history = RunHistory([_record_from_row(r) for r in rows])
        ok = [r.reward for r in self.history.records if not r.failed]
        self.best = max(ok) if ok else -math.inf
        # drop rows written after the checkpoint
        with (self.outdir / "history.csv").open("w") as fh:
            fh.write(",".join(HISTORY_HEADER) + "\n")
            for rec in self.history.records:
                _write_history_row(fh, rec)

    def run(self, resume: bool = False) -> RunHistory:
        cfg = self.cfg
        self.outdir.mkdir(parents=True, exist_ok=True)
        hist_path = self.outdir / "history.csv"
        if resume and (self.outdir / STATE_NAME).exists():
            self.restore()
        else:
            hist_path.write_text(",".join(HISTORY_HEADER) + "\n")
        total = cfg.run.episodes
        pool = ProcessPoolExecutor(cfg.run.workers) if cfg.run.workers > 1 else None
        try:
            with hist_path.open("a") as fh:
                while len(self.history) < total:
                    start = len(self.history)
                    stop = min(start + cfg.agent.batch_size, total)
                    records = collect(self.params, range(start, stop), cfg, pool)
                    try:
                        self.params, _ = agent.update(self.params, to_batch(records, cfg.run.obs_dim),
                                                      cfg.agent, self.update_rng, self.opt)
                    except agent.NonFiniteLoss:
                        for rec in records:
                            self._accept(rec, fh)
                        fh.flush()
                        self.save()
                        raise
                    self.updates += 1
                    for rec in records:
                        self._accept(rec, fh)
                    fh.flush()
                    if self.updates % cfg.run.checkpoint_every == 0:
                        self.save()
                    if self.progress is not None:
                        self.progress(self.updates, self.history)
        finally:
            if pool is not None:
                pool.shutdown()
        self.save()
        return self.history

    def _accept(self, rec: EpisodeRecord, fh) -> None:
        self.history.append(rec)
        _write_history_row(fh, rec)
        if not rec.failed and rec.reward > self.best:
            self.best = rec.reward
            spec = rec.spec(self.cfg)
            if spec is not None:
                write_outline(build_shape(spec), self.outdir / f"shape_{rec.episode}.dat")


def train(cfg: "RunConfig", outdir: Optional[str | Path] = None, resume: bool = False,
          progress: Optional[Callable[[int, RunHistory], None]] = None) -> RunHistory:
    if cfg.reward.recompute_reference:
        from dataclasses import replace
        cfg = replace(cfg, reward=replace(cfg.reward, reference_ratio=reference_ratio(cfg)))
    return Trainer(cfg, outdir, progress).run(resume=resume)


def evaluate(params: agent.PolicyParams, cfg: "RunConfig", k: int = 1,
             first_episode: int = 0) -> list[EpisodeRecord]:
    """Episodes at the policy mean, best first.

    The observation is constant, so every mean-action episode yields the same
    shape; it is simulated once and the record repeated under consecutive
    episode numbers.
    """
    if k < 1:
        return []
    rec = run_episode(params, first_episode, cfg, deterministic=True)
    out = [rec]
    for i in range(1, k):
        out.append(EpisodeRecord(**{**rec.__dict__, "episode": first_episode + i}))
    return sorted(out, key=lambda r: (-r.reward, r.episode))
