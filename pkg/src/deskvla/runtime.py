"""Closed-loop deployment: preprocessing, chunk queue, action adaptation, safety filter, latency accounting.

The executor ticks on a simulated clock at ``control_rate``. When the queue
runs dry, an inference is started from the observation of that tick. Its
result becomes available once the elapsed simulated time plus the latency
budget covers its total latency; until then the executor holds the last
command and flags a deadline miss.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import simarm
from .core import DEFAULT_LIMITS, ACTION_LOW, JointLimits, check_finite

LOG_COLUMNS = ("tick,time_s,queue_depth,tau_pre_ms,tau_forward_ms,tau_post_ms,tau_total_ms,"
               "deadline_miss,estop,degraded,theta1,theta2,theta3,theta4,theta5,gripper")


class InputError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def _default_scale(lim: JointLimits = DEFAULT_LIMITS) -> tuple[float, ...]:
    return tuple(float(v) for v in np.append(lim.half_range[:5], 1.0))


def _default_offset(lim: JointLimits = DEFAULT_LIMITS) -> tuple[float, ...]:
    return tuple(float(v) for v in np.append(lim.midpoint[:5], 0.0))


@dataclass(frozen=True)
class RuntimeConfig:
    control_rate: float = 20.0
    tau_max_ms: float = 50.0
    n_chunk: int = 50
    preprocess_rate: float = 30.0
    top_shape: tuple[int, int] = (64, 64)
    wrist_shape: tuple[int, int] = (32, 32)
    limits: JointLimits = DEFAULT_LIMITS
    scale: tuple[float, ...] = field(default_factory=_default_scale)
    offset: tuple[float, ...] = field(default_factory=_default_offset)
    a_min: tuple[float, ...] = tuple(DEFAULT_LIMITS.lower)
    a_max: tuple[float, ...] = tuple(DEFAULT_LIMITS.upper)
    smoothing: float = 0.0
    estop: bool = False
    # injected (pre, forward, post) latencies in ms; None records measured wall time instead
    latency_ms: tuple[float, float, float] | None = (5.0, 35.0, 5.0)
    max_ticks: int = 400
    task: str = "turn on the controller by pressing the button"

    def __post_init__(self):
        if self.control_rate <= 0:
            raise ValueError("control_rate must be positive")
        if self.tau_max_ms <= 0:
            raise ValueError("tau_max_ms must be positive")
        if self.n_chunk < 1:
            raise ValueError("n_chunk must be >= 1")
        if not np.all(np.asarray(self.a_min) < np.asarray(self.a_max)):
            raise ValueError("a_min must be below a_max componentwise")
        if not 0 <= self.smoothing < 1:
            raise ValueError("smoothing must lie in [0, 1)")

    @property
    def dt(self) -> float:
        return 1.0 / self.control_rate


class ChunkQueue:
    """Pending actions of the latest refill, consumed strictly in order."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._items: list[np.ndarray] = []
        self._next = 0
        self.generation = 0

    def __len__(self) -> int:
        return len(self._items) - self._next

    def refill(self, chunk: np.ndarray) -> None:
        if len(chunk) > self.capacity:
            raise ValueError(f"chunk of {len(chunk)} exceeds capacity {self.capacity}")
        self._items = [np.asarray(a, dtype=np.float64) for a in chunk]
        self._next = 0
        self.generation += 1

    def pop(self) -> np.ndarray:
        if not len(self):
            raise IndexError("queue is empty")
        a = self._items[self._next]
        self._next += 1
        return a


@dataclass
class TickRecord:
    tick: int
    time_s: float
    digest: int
    command: np.ndarray
    queue_depth: int
    generation: int
    tau: tuple[float, float, float]
    deadline_miss: bool
    estop: bool
    degraded: bool
    interventions: tuple[str, ...]
    distance: float

    @property
    def tau_total(self) -> float:
        return sum(self.tau)


@dataclass
class EpisodeLog:
    ticks: list[TickRecord] = field(default_factory=list)
    measured_ms: list[tuple[float, float, float]] = field(default_factory=list)
    success: bool = False
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.ticks)

    @property
    def commands(self) -> np.ndarray:
        return np.array([t.command for t in self.ticks]).reshape(-1, 6)

    @property
    def distances(self) -> np.ndarray:
        return np.array([t.distance for t in self.ticks])

    def refill_ticks(self) -> list[int]:
        """Ticks at which a new chunk started executing."""
        out, gen = [], 0
        for t in self.ticks:
            if t.generation != gen:
                out.append(t.tick)
                gen = t.generation
        return out

    def to_csv(self) -> str:
        rows = [LOG_COLUMNS]
        for t in self.ticks:
            vals = [str(t.tick), f"{t.time_s:.6g}", str(t.queue_depth)]
            vals += [f"{v:.6g}" for v in (*t.tau, t.tau_total)]
            vals += [str(int(t.deadline_miss)), str(int(t.estop)), str(int(t.degraded))]
            vals += [f"{v:.6g}" for v in t.command]
            rows.append(",".join(vals))
        return "\n".join(rows) + "\n"

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    def latency_stats(self) -> tuple[float, float]:
        """Mean and standard deviation of the total latency over refills."""
        totals = [sum(m) for m in self.measured_ms] or [0.0]
        return float(np.mean(totals)), float(np.std(totals))


# -- per-stage operations ------------------------------------------------------


def preprocess(frame: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resize (half-pixel centres, edge clamped) of an RGB8 frame, scaled to [0, 1]."""
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[0] == 0 or frame.shape[1] == 0:
        raise InputError(f"cannot preprocess frame of shape {frame.shape}")
    h, w = frame.shape[:2]
    th, tw = shape
    img = frame.astype(np.float64)
    if (h, w) != (th, tw):
        img = _resize_axis(_resize_axis(img, th, 0), tw, 1)
    return img / 255.0


def _resize_axis(img: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = img.shape[axis]
    if n_in == n_out:
        return img
    pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = pos - i0
    shape = [1] * img.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    return np.take(img, i0, axis=axis) * (1 - frac) + np.take(img, i1, axis=axis) * frac


def frames_to_unit(frames: np.ndarray) -> np.ndarray:
    """RGB8 frames already at model resolution, scaled to [0, 1]."""
    return np.asarray(frames, dtype=np.float64) / 255.0


def adapt_action(a, cfg: RuntimeConfig = RuntimeConfig()) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return np.clip(a * np.asarray(cfg.scale) + np.asarray(cfg.offset), cfg.a_min, cfg.a_max)


def safety_filter(prev_cmd, new_cmd, cfg: RuntimeConfig = RuntimeConfig(), dt: float | None = None,
                  estop: bool | None = None) -> np.ndarray:
    """Smooth, rate-limit, clamp; an active e-stop returns ``prev_cmd`` unchanged."""
    prev = np.asarray(prev_cmd, dtype=np.float64)
    if cfg.estop if estop is None else estop:
        return prev.copy()
    new = np.asarray(new_cmd, dtype=np.float64)
    new = np.where(np.isfinite(new), new, prev)
    dt = cfg.dt if dt is None else dt
    beta = cfg.smoothing
    cmd = beta * prev + (1 - beta) * new
    step = cfg.limits.vmax * dt
    cmd = np.clip(cmd, prev - step, prev + step)
    return np.clip(cmd, cfg.limits.lo, cfg.limits.hi)


def frame_failed(frame: np.ndarray | None) -> bool:
    return frame is None or not np.any(frame)


def observation_digest(*arrays) -> int:
    crc = 0
    for a in arrays:
        if a is not None:
            crc = zlib.crc32(np.ascontiguousarray(a).tobytes(), crc)
    return crc


# -- loop -----------------------------------------------------------------------


def check_compatible(policy, cfg: RuntimeConfig) -> None:
    pc = policy.cfg
    if pc.n_chunk != cfg.n_chunk:
        raise ConfigError(f"policy chunk size {pc.n_chunk} != runtime chunk size {cfg.n_chunk}")
    if tuple(pc.top_shape) != tuple(cfg.top_shape) or tuple(pc.wrist_shape) != tuple(cfg.wrist_shape):
        raise ConfigError("policy image resolution does not match runtime resolution")


def _infer(policy, top, wrist, joints, cfg: RuntimeConfig):
    from .policy import Observation, predict_chunk

    t0 = time.perf_counter()
    obs = Observation(
        top=None if top is None else preprocess(top, cfg.top_shape),
        wrist=None if wrist is None else preprocess(wrist, cfg.wrist_shape),
        joints=joints, task=cfg.task, degraded=top is None or wrist is None,
    )
    t1 = time.perf_counter()
    chunk = predict_chunk(policy, obs)
    t2 = time.perf_counter()
    chunk = np.clip(chunk, ACTION_LOW, 1.0)[: cfg.n_chunk]
    t3 = time.perf_counter()
    return chunk, (1e3 * (t1 - t0), 1e3 * (t2 - t1), 1e3 * (t3 - t2))


def control_loop(policy, sim_cfg: simarm.SimConfig, cfg: RuntimeConfig = RuntimeConfig(),
                 seed: int = 0, max_ticks: int | None = None, infer=None) -> EpisodeLog:
    """Run one episode from a seeded reset until success, e-stop, or ``max_ticks``.

    ``infer(top, wrist, joints) -> (chunk, measured_ms)`` overrides policy inference
    (top/wrist are None when that camera has failed).
    """
    if policy is not None:
        check_compatible(policy, cfg)
    if infer is None:
        def infer(top, wrist, joints):
            return _infer(policy, top, wrist, joints, cfg)

    sim_cfg = replace(sim_cfg, tick_rate=cfg.control_rate)
    max_ticks = cfg.max_ticks if max_ticks is None else max_ticks
    rng = np.random.default_rng(seed)
    state = simarm.reset(sim_cfg, seed=seed)
    log = EpisodeLog(seed=seed)
    queue = ChunkQueue(cfg.n_chunk)
    prev = state.joints.copy()
    dt = cfg.dt
    pending = None  # (chunk, tau, start_tick)
    tau_current = (0.0, 0.0, 0.0)
    estopped = cfg.estop

    for tick in range(max_ticks):
        top, wrist = simarm.render_views(state, sim_cfg, rng)
        joints = simarm.sense_joints(state, sim_cfg, rng)
        top_ok, wrist_ok = not frame_failed(top), not frame_failed(wrist)
        degraded = top_ok != wrist_ok
        miss = False
        if not (top_ok or wrist_ok):
            estopped = True

        if not estopped and not len(queue) and pending is None:
            chunk, measured = infer(top if top_ok else None, wrist if wrist_ok else None, joints)
            log.measured_ms.append(measured)
            tau = tuple(float(v) for v in (cfg.latency_ms if cfg.latency_ms is not None else measured))
            pending = (chunk, tau, tick)
        if pending is not None:
            chunk, tau, k = pending
            if (tick - k) * dt * 1e3 + cfg.tau_max_ms >= sum(tau):
                queue.refill(chunk)
                tau_current = tau
                pending = None
            else:
                miss = True
                tau_current = tau

        notes = []
        if estopped:
            cmd = prev.copy()
            notes.append("estop")
        elif miss or not len(queue):
            cmd = prev.copy()
            notes.append("hold")
        else:
            target = adapt_action(queue.pop(), cfg)
            cmd = safety_filter(prev, target, cfg, dt)
            if not np.allclose(cmd, target):
                notes.append("filtered")
        check_finite(cmd, "command")
        state = simarm.step(state, cmd, sim_cfg)
        log.ticks.append(TickRecord(
            tick=tick, time_s=tick * dt, digest=observation_digest(top, wrist, joints), command=cmd,
            queue_depth=len(queue), generation=queue.generation, tau=tau_current, deadline_miss=miss,
            estop=estopped, degraded=degraded, interventions=tuple(notes), distance=state.distance_to_button(),
        ))
        prev = cmd
        if simarm.check_success(state):
            log.success = True
            break
        if estopped:
            break
    return log


@dataclass
class DeploySummary:
    logs: list[EpisodeLog]

    @property
    def success_rate(self) -> float:
        return float(np.mean([lg.success for lg in self.logs])) if self.logs else 0.0

    def to_csv(self) -> str:
        rows = ["episode,seed,success,ticks,deadline_misses,estop,final_distance"]
        for i, lg in enumerate(self.logs):
            misses = sum(t.deadline_miss for t in lg.ticks)
            estop = int(any(t.estop for t in lg.ticks))
            dist = lg.ticks[-1].distance if lg.ticks else float("nan")
            rows.append(f"{i},{lg.seed},{int(lg.success)},{len(lg)},{misses},{estop},{dist:.6g}")
        rows.append(f"# success_rate,{self.success_rate:.6g}")
        return "\n".join(rows) + "\n"


def deploy_seeds(seed: int, n: int) -> list[int]:
    ss = np.random.SeedSequence([seed, 0xDE9])
    return [int(s.generate_state(1)[0]) for s in ss.spawn(n)]


def deploy(policy, n_episodes: int, sim_cfg: simarm.SimConfig = simarm.SimConfig(),
           cfg: RuntimeConfig = RuntimeConfig(), seed: int = 0) -> DeploySummary:
    return DeploySummary([control_loop(policy, sim_cfg, cfg, seed=s) for s in deploy_seeds(seed, n_episodes)])
