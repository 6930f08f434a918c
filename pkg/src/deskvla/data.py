"""Episode dataset store, validation, statistics and the scripted demonstration generator.

Directory layout::

    manifest.txt                 key = value lines
    episode_000000.joints        u32 count, then per frame 13 little-endian f64:
                                 timestamp, 6 state values, 6 action values
    episode_000000.top.frames    u32 width, height, channels, frame_count + raw RGB8
    episode_000000.wrist.frames  same layout as the top view
"""

from __future__ import annotations

import struct
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import simarm
from .core import DEFAULT_LIMITS, JOINT_NAMES, JointLimits, RangeError

FORMAT_VERSION = 1
DEFAULT_FPS = 30.0
DEFAULT_TASK = "turn on the controller by pressing the button"

_FRAME_HEADER = struct.Struct("<IIII")
_RECORD = np.dtype([("t", "<f8"), ("state", "<f8", (6,)), ("action", "<f8", (6,))])


class FormatError(ValueError):
    pass


class InputError(ValueError):
    pass


@dataclass
class EpisodeMeta:
    episode_id: int
    frames: int
    task: str = DEFAULT_TASK
    success: bool = True
    t_start: float = 0.0
    t_end: float = 0.0
    button: tuple[float, float, float] | None = None


@dataclass
class DatasetManifest:
    fps: float = DEFAULT_FPS
    top_shape: tuple[int, int] = (64, 64)
    wrist_shape: tuple[int, int] = (32, 32)
    episodes: list[EpisodeMeta] = field(default_factory=list)
    version: int = FORMAT_VERSION

    def to_text(self) -> str:
        lines = [
            f"format_version = {self.version}",
            f"fps = {self.fps!r}",
            f"top_height = {self.top_shape[0]}",
            f"top_width = {self.top_shape[1]}",
            f"wrist_height = {self.wrist_shape[0]}",
            f"wrist_width = {self.wrist_shape[1]}",
            f"n_episodes = {len(self.episodes)}",
        ]
        for m in self.episodes:
            p = f"episode.{m.episode_id:06d}"
            lines += [
                f"{p}.task = {m.task}",
                f"{p}.frames = {m.frames}",
                f"{p}.success = {int(m.success)}",
                f"{p}.t_start = {m.t_start!r}",
                f"{p}.t_end = {m.t_end!r}",
            ]
            if m.button is not None:
                lines.append(f"{p}.button = " + " ".join(repr(float(v)) for v in m.button))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, where: str = "manifest") -> "DatasetManifest":
        kv = parse_key_values(text, where)
        try:
            man = cls(
                fps=float(kv["fps"]),
                top_shape=(int(kv["top_height"]), int(kv["top_width"])),
                wrist_shape=(int(kv["wrist_height"]), int(kv["wrist_width"])),
                version=int(kv["format_version"]),
            )
            per_ep: dict[int, dict[str, str]] = defaultdict(dict)
            for key, val in kv.items():
                if key.startswith("episode."):
                    _, eid, name = key.split(".", 2)
                    per_ep[int(eid)][name] = val
            for eid in sorted(per_ep):
                e = per_ep[eid]
                button = tuple(float(v) for v in e["button"].split()) if "button" in e else None
                man.episodes.append(EpisodeMeta(
                    episode_id=eid, frames=int(e["frames"]), task=e.get("task", ""),
                    success=bool(int(e.get("success", "0"))), t_start=float(e.get("t_start", "0")),
                    t_end=float(e.get("t_end", "0")), button=button,
                ))
            if int(kv["n_episodes"]) != len(man.episodes):
                raise FormatError(f"{where}: n_episodes={kv['n_episodes']} but {len(man.episodes)} listed")
        except (KeyError, ValueError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"{where}: malformed manifest ({exc})") from exc
        return man


def parse_key_values(text: str, where: str = "<text>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{where}:{n}: expected 'key = value'")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


@dataclass
class Episode:
    timestamps: np.ndarray  # (T,)
    states: np.ndarray  # (T, 6) measured joints
    actions: np.ndarray  # (T, 6) commanded joints
    top: np.ndarray  # (T, H, W, 3) uint8
    wrist: np.ndarray  # (T, h, w, 3) uint8
    task: str = DEFAULT_TASK
    success: bool = True
    button: tuple[float, float, float] | None = None

    def __len__(self) -> int:
        return len(self.timestamps)


def _paths(root: Path, eid: int) -> tuple[Path, Path, Path]:
    stem = root / f"episode_{eid:06d}"
    return Path(f"{stem}.joints"), Path(f"{stem}.top.frames"), Path(f"{stem}.wrist.frames")


def read_manifest(root) -> DatasetManifest:
    path = Path(root) / "manifest.txt"
    if not path.is_file():
        raise FormatError(f"{path}: missing manifest")
    return DatasetManifest.from_text(path.read_text(), str(path))


def write_manifest(root, manifest: DatasetManifest) -> None:
    Path(root, "manifest.txt").write_text(manifest.to_text())


def _write_frames(path: Path, frames: np.ndarray) -> None:
    t, h, w, c = frames.shape
    with open(path, "wb") as fh:
        fh.write(_FRAME_HEADER.pack(w, h, c, t))
        fh.write(np.ascontiguousarray(frames, dtype=np.uint8).tobytes())


def read_frames(path: Path) -> np.ndarray:
    if not path.is_file():
        raise FormatError(f"{path}: missing frame file")
    buf = path.read_bytes()
    if len(buf) < _FRAME_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    w, h, c, t = _FRAME_HEADER.unpack_from(buf)
    payload = len(buf) - _FRAME_HEADER.size
    if payload != w * h * c * t:
        raise FormatError(f"{path}: header promises {t} frames of {w}x{h}x{c}, file holds {payload} bytes")
    return np.frombuffer(buf, dtype=np.uint8, offset=_FRAME_HEADER.size).reshape(t, h, w, c)


def read_frame_header(path: Path) -> tuple[int, int, int, int]:
    with open(path, "rb") as fh:
        head = fh.read(_FRAME_HEADER.size)
    if len(head) < _FRAME_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    return _FRAME_HEADER.unpack(head)


def _write_joints(path: Path, ep: Episode) -> None:
    rec = np.zeros(len(ep), dtype=_RECORD)
    rec["t"] = ep.timestamps
    rec["state"] = ep.states
    rec["action"] = ep.actions
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(ep)))
        fh.write(rec.tobytes())


def read_joints(path: Path) -> np.ndarray:
    if not path.is_file():
        raise FormatError(f"{path}: missing joint file")
    buf = path.read_bytes()
    if len(buf) < 4:
        raise FormatError(f"{path}: truncated count")
    (n,) = struct.unpack_from("<I", buf)
    if len(buf) - 4 != n * _RECORD.itemsize:
        raise FormatError(f"{path}: count {n} does not match payload size")
    return np.frombuffer(buf, dtype=_RECORD, offset=4)


def write_episode(root, episode: Episode, manifest: DatasetManifest, episode_id: int | None = None) -> EpisodeMeta:
    """Write one episode's files and record it in ``manifest`` (which is rewritten)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    eid = len(manifest.episodes) if episode_id is None else episode_id
    jpath, tpath, wpath = _paths(root, eid)
    _write_joints(jpath, episode)
    _write_frames(tpath, episode.top)
    _write_frames(wpath, episode.wrist)
    meta = EpisodeMeta(
        episode_id=eid, frames=len(episode), task=episode.task, success=episode.success,
        t_start=float(episode.timestamps[0]), t_end=float(episode.timestamps[-1]),
        button=None if episode.button is None else tuple(float(v) for v in episode.button),
    )
    manifest.episodes = [m for m in manifest.episodes if m.episode_id != eid] + [meta]
    manifest.episodes.sort(key=lambda m: m.episode_id)
    write_manifest(root, manifest)
    return meta


def read_episode(root, episode_id: int, manifest: DatasetManifest | None = None) -> Episode:
    root = Path(root)
    manifest = manifest or read_manifest(root)
    metas = {m.episode_id: m for m in manifest.episodes}
    if episode_id not in metas:
        raise RangeError(f"episode {episode_id} not in manifest ({len(metas)} episodes)")
    meta = metas[episode_id]
    jpath, tpath, wpath = _paths(root, episode_id)
    rec = read_joints(jpath)
    return Episode(
        timestamps=rec["t"].copy(), states=rec["state"].copy(), actions=rec["action"].copy(),
        top=read_frames(tpath), wrist=read_frames(wpath), task=meta.task, success=meta.success,
        button=meta.button,
    )


def load_dataset(root, max_episodes: int | None = None) -> list[Episode]:
    manifest = read_manifest(root)
    ids = [m.episode_id for m in manifest.episodes]
    if max_episodes is not None:
        ids = ids[:max_episodes]
    return [read_episode(root, i, manifest) for i in ids]


# -- validation -----------------------------------------------------------


@dataclass
class ValidationReport:
    violations: list[tuple[int | None, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def for_episode(self, eid: int) -> list[str]:
        return [msg for e, msg in self.violations if e == eid]


def validate_dataset(root, limits: JointLimits = DEFAULT_LIMITS) -> ValidationReport:
    root = Path(root)
    if not root.is_dir():
        raise OSError(f"{root}: not a readable directory")
    report = ValidationReport()
    try:
        man = read_manifest(root)
    except FormatError as exc:
        report.violations.append((None, str(exc)))
        return report
    ids = [m.episode_id for m in man.episodes]
    if ids != list(range(len(ids))):
        report.violations.append((None, f"episode ids not contiguous from 0: {ids[:10]}"))
    if man.fps <= 0:
        report.violations.append((None, f"fps must be positive, got {man.fps}"))
    for m in man.episodes:
        eid = m.episode_id
        bad = report.violations.append
        if m.frames <= 0:
            bad((eid, f"episode {eid}: frame count {m.frames} not positive"))
            continue
        jpath, tpath, wpath = _paths(root, eid)
        try:
            rec = read_joints(jpath)
            th = read_frame_header(tpath)
            wh = read_frame_header(wpath)
        except (FormatError, OSError) as exc:
            bad((eid, f"episode {eid}: {exc}"))
            continue
        counts = {"joints": len(rec), "top": th[3], "wrist": wh[3]}
        if any(c != m.frames for c in counts.values()):
            detail = ", ".join(f"{k} {v}" for k, v in counts.items())
            bad((eid, f"episode {eid}: frame count mismatch: manifest {m.frames}, {detail}"))
        if (th[1], th[0]) != tuple(man.top_shape) or (wh[1], wh[0]) != tuple(man.wrist_shape):
            bad((eid, f"episode {eid}: camera geometry differs from manifest"))
        t = rec["t"]
        if len(t) > 1:
            dt = np.diff(t)
            if np.any(dt <= 0):
                k = int(np.flatnonzero(dt <= 0)[0]) + 1
                bad((eid, f"episode {eid}: timestamps not increasing at frame {k}"))
            elif abs(dt.mean() * man.fps - 1.0) > 0.1:
                bad((eid, f"episode {eid}: mean frame spacing {dt.mean():.4g}s inconsistent with {man.fps} fps"))
        for what in ("state", "action"):
            v = rec[what]
            out = (v < limits.lo) | (v > limits.hi) | ~np.isfinite(v)
            if out.any():
                k, j = (int(i) for i in np.argwhere(out)[0])
                bad((eid, f"episode {eid}: {what} {JOINT_NAMES[j]}={v[k, j]:.6g} outside limits at frame {k}"))
    return report


# -- statistics -----------------------------------------------------------


@dataclass
class RunningStats:
    """Welford accumulator over rows of a (n, 6) stream."""

    n: int = 0
    mean: np.ndarray = field(default_factory=lambda: np.zeros(6))
    m2: np.ndarray = field(default_factory=lambda: np.zeros(6))
    lo: np.ndarray = field(default_factory=lambda: np.full(6, np.inf))
    hi: np.ndarray = field(default_factory=lambda: np.full(6, -np.inf))

    def update(self, rows: np.ndarray) -> None:
        for x in np.asarray(rows, dtype=np.float64):
            self.n += 1
            d = x - self.mean
            self.mean = self.mean + d / self.n
            self.m2 = self.m2 + d * (x - self.mean)
        self.lo = np.minimum(self.lo, rows.min(axis=0))
        self.hi = np.maximum(self.hi, rows.max(axis=0))

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.m2 / self.n) if self.n else np.zeros(6)


@dataclass
class DatasetStats:
    n_episodes: int
    n_frames: int
    state_mean: np.ndarray
    state_std: np.ndarray
    state_min: np.ndarray
    state_max: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray
    action_min: np.ndarray
    action_max: np.ndarray
    length_counts: np.ndarray
    length_edges: np.ndarray

    def to_csv(self) -> str:
        rows = [f"# episodes,{self.n_episodes}", f"# frames,{self.n_frames}",
                "joint,state_mean,state_std,state_min,state_max,action_mean,action_std,action_min,action_max"]
        for j, name in enumerate(JOINT_NAMES):
            vals = (self.state_mean, self.state_std, self.state_min, self.state_max,
                    self.action_mean, self.action_std, self.action_min, self.action_max)
            rows.append(name + "," + ",".join(f"{v[j]:.6g}" for v in vals))
        rows.append("length_bin_lo,length_bin_hi,count")
        for lo, hi, c in zip(self.length_edges[:-1], self.length_edges[1:], self.length_counts):
            rows.append(f"{lo:.6g},{hi:.6g},{c}")
        return "\n".join(rows) + "\n"


def dataset_stats(root, bins: int = 10) -> DatasetStats:
    man = read_manifest(root)
    if not man.episodes:
        raise InputError(f"{root}: dataset has no episodes")
    s, a = RunningStats(), RunningStats()
    lengths = []
    for m in man.episodes:
        rec = read_joints(_paths(Path(root), m.episode_id)[0])
        s.update(rec["state"])
        a.update(rec["action"])
        lengths.append(len(rec))
    counts, edges = np.histogram(lengths, bins=bins)
    return DatasetStats(
        n_episodes=len(lengths), n_frames=int(sum(lengths)),
        state_mean=s.mean, state_std=s.std, state_min=s.lo, state_max=s.hi,
        action_mean=a.mean, action_std=a.std, action_min=a.lo, action_max=a.hi,
        length_counts=counts, length_edges=edges,
    )


# -- scripted expert --------------------------------------------------------

# nominal phase durations in seconds; each episode scales them by a factor in [0.9, 1.1]
EXPERT_PHASES = (
    ("idle", 0.3), ("approach", 3.4), ("settle", 0.5), ("press", 1.0),
    ("hold", 0.5), ("release", 1.0), ("return", 2.6), ("rest", 0.6),
)
HOVER_CLEARANCE = 0.06


def min_jerk(q0: np.ndarray, q1: np.ndarray, s: float) -> np.ndarray:
    s = min(max(s, 0.0), 1.0)
    return q0 + (q1 - q0) * (10 * s**3 - 15 * s**4 + 6 * s**5)


@dataclass
class ExpertPlan:
    waypoints: list[np.ndarray]
    durations: list[float]

    @property
    def total(self) -> float:
        return float(sum(self.durations))

    def __call__(self, t: float) -> np.ndarray:
        for q0, q1, d in zip(self.waypoints[:-1], self.waypoints[1:], self.durations):
            if t <= d:
                return min_jerk(q0, q1, t / d)
            t -= d
        return self.waypoints[-1].copy()


def plan_expert(button, cfg: simarm.SimConfig, time_scale: float = 1.0) -> ExpertPlan | None:
    """Joint-space min-jerk plan home -> hover -> press -> hover -> home, or None if unreachable."""
    bx, by, top = (float(v) for v in button)
    hover = simarm.inverse_kinematics((bx, by, top + HOVER_CLEARANCE), cfg)
    press = simarm.inverse_kinematics((bx, by, top - simarm.PRESS_OVERTRAVEL * cfg.press_depth), cfg)
    if hover is None or press is None:
        return None
    home = np.array(simarm.HOME_POSE)
    hover = np.append(hover, 0.0)
    press = np.append(press, 0.0)
    wp = [home, home, hover, hover, press, press, hover, home, home]
    durations = [d * time_scale for _, d in EXPERT_PHASES]
    plan = ExpertPlan(wp, durations)
    peak = np.max([1.875 * np.abs(q1 - q0) / d for q0, q1, d in zip(wp[:-1], wp[1:], durations)], axis=0)
    if np.any(peak > cfg.limits.vmax):
        return None
    return plan


def episode_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def record_expert_episode(cfg: simarm.SimConfig, seed: int, fps: float = DEFAULT_FPS,
                          max_retries: int = 20, task: str = DEFAULT_TASK) -> Episode:
    rec_cfg = _recording_config(cfg, fps)
    rng = np.random.default_rng(seed)
    for attempt in range(max_retries):
        state = simarm.reset(rec_cfg, seed=int(rng.integers(2**31)))
        plan = plan_expert(state.button, rec_cfg, time_scale=float(rng.uniform(0.9, 1.1)))
        if plan is not None:
            break
    else:
        raise RuntimeError(f"no reachable button after {max_retries} samples (seed {seed})")
    n = int(round(plan.total * fps))
    ts = np.arange(n) / fps
    states, actions, tops, wrists = [], [], [], []
    for t in ts:
        top, wrist = simarm.render_views(state, rec_cfg, rng)
        cmd = plan(t + 1.0 / fps)
        states.append(simarm.sense_joints(state, rec_cfg, rng))
        actions.append(cmd)
        tops.append(top)
        wrists.append(wrist)
        state = simarm.step(state, cmd, rec_cfg)
    return Episode(
        timestamps=ts, states=np.array(states), actions=np.array(actions),
        top=np.stack(tops), wrist=np.stack(wrists), task=task,
        success=simarm.check_success(state), button=tuple(float(v) for v in state.button),
    )


def _recording_config(cfg: simarm.SimConfig, fps: float) -> simarm.SimConfig:
    return replace(cfg, tick_rate=fps)


def generate_demos(n_episodes: int, out_dir, cfg: simarm.SimConfig = simarm.SimConfig(),
                   seed: int = 0, fps: float = DEFAULT_FPS) -> Path:
    if n_episodes < 1:
        raise InputError("n_episodes must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(fps=fps, top_shape=cfg.top_shape, wrist_shape=cfg.wrist_shape)
    for i in range(n_episodes):
        ep = record_expert_episode(cfg, episode_seed(seed, i), fps)
        write_episode(out, ep, manifest, episode_id=i)
    return out


def chunk_targets(ep: Episode, frame: int, n_chunk: int, control_rate: float, fps: float) -> np.ndarray:
    """Commands the policy should issue at the next ``n_chunk`` control ticks from ``frame``.

    Entry k is the command that should be reached at tick k+1. The recorded
    command at frame j targets time t_j + 1/fps, so it is resampled with that
    lead removed; times past the end of the episode hold the last command.
    """
    t0 = ep.timestamps[frame]
    query = t0 + (np.arange(n_chunk) + 1) / control_rate - 1.0 / fps
    src = ep.timestamps
    return np.stack([np.interp(query, src, ep.actions[:, j]) for j in range(6)], axis=1)


def frames_to_seconds(n_frames: int, fps: float = DEFAULT_FPS) -> float:
    return n_frames / fps


def expected_total_frames(n_episodes: int, fps: float = DEFAULT_FPS) -> int:
    return int(round(n_episodes * sum(d for _, d in EXPERT_PHASES) * fps))

