"""Trajectory ingestion, windowing, feature derivation, and preprocessing.

Every transform applied to a window (rotation to a canonical heading,
dataset min-max normalization, scale augmentation) stores enough state on
the window to be inverted exactly, and the window exposes the two maps the
density side of the package needs: world coordinates -> model coordinates
and back, plus the constant log-density correction between the two spaces.

Also provides reproducible synthetic processes with known ground-truth
marginal densities; these stand in for full-scale benchmark data in the
end-to-end checks.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError, DegeneracyError, FormatError, ParseError

REQUIRED_COLUMNS = ("scene_id", "agent_id", "frame", "x", "y")


def wrap_angle(theta):
    """Wrap angles to (-pi, pi]."""
    wrapped = np.mod(np.asarray(theta, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    return np.where(wrapped == -np.pi, np.pi, wrapped)


@dataclass
class TrajectoryRecord:
    scene_id: str
    agent_id: str
    frames: np.ndarray       # (n,) increasing ints
    positions: np.ndarray    # (n, 2) meters
    frame_period: float = 1.0

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class MinMaxBounds:
    x_min: float
    x_max: float
    y_min: float
    y_max: float

    @property
    def ranges(self) -> np.ndarray:
        return np.array([self.x_max - self.x_min, self.y_max - self.y_min])

    @property
    def lows(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min])

    def normalize(self, pts: np.ndarray) -> np.ndarray:
        return (pts - self.lows) / self.ranges

    def denormalize(self, pts: np.ndarray) -> np.ndarray:
        return pts * self.ranges + self.lows

    def log_density_correction(self) -> float:
        """log p_world = log p_normalized + this constant."""
        return -float(np.sum(np.log(self.ranges)))


@dataclass
class TrajectoryWindow:
    """One training or evaluation instance in (possibly preprocessed) coordinates."""

    observed: np.ndarray     # (T+1, 2)
    features: np.ndarray     # (T+1, 5): vx, vy, ax, ay, heading
    future: np.ndarray       # (S, 2); S >= 2 in evaluation mode
    frame_period: float = 1.0
    scene_id: str = ""
    agent_id: str = ""
    start_frame: int = 0
    rotation_angle: float | None = None
    rotation_pivot: np.ndarray | None = None
    bounds: MinMaxBounds | None = None
    scale_factor: float | None = None
    scale_center: np.ndarray | None = None
    displacement: bool = False

    @property
    def horizon(self) -> int:
        return self.future.shape[0]

    # -- world <-> model coordinate maps -------------------------------------

    def world_to_model(self, pts: np.ndarray) -> np.ndarray:
        out = np.asarray(pts, dtype=np.float64)
        if self.rotation_angle is not None:
            out = _rotate(out, -self.rotation_angle, self.rotation_pivot)
        if self.bounds is not None:
            out = self.bounds.normalize(out)
        return out

    def model_to_world(self, pts: np.ndarray) -> np.ndarray:
        out = np.asarray(pts, dtype=np.float64)
        if self.bounds is not None:
            out = self.bounds.denormalize(out)
        if self.rotation_angle is not None:
            out = _rotate(out, self.rotation_angle, self.rotation_pivot)
        return out

    def log_density_correction(self) -> float:
        """Constant added to model-space log densities to get world-space ones."""
        return self.bounds.log_density_correction() if self.bounds is not None else 0.0


# -- ingestion ---------------------------------------------------------------------


def load_trajectories(path, fmt: str = "generic_csv",
                      frame_period: float = 1.0) -> list[TrajectoryRecord]:
    """Read the generic CSV schema: header scene_id,agent_id,frame,x,y."""
    if fmt != "generic_csv":
        raise FormatError(f"unknown format {fmt!r}")
    groups: dict[tuple[str, str], list[tuple[int, float, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError("empty file: missing header row") from None
        header = [h.strip() for h in header]
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise FormatError(f"missing column(s): {', '.join(missing)}")
        idx = {c: header.index(c) for c in REQUIRED_COLUMNS}
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                frame = int(float(row[idx["frame"]]))
                x = float(row[idx["x"]])
                y = float(row[idx["y"]])
            except (ValueError, IndexError):
                raise ParseError(f"unparseable row at line {line_no}",
                                 row=line_no) from None
            key = (row[idx["scene_id"]].strip(), row[idx["agent_id"]].strip())
            groups.setdefault(key, []).append((frame, x, y))

    records = []
    for (scene, agent) in sorted(groups):
        rows = sorted(groups[(scene, agent)])
        frames = np.array([r[0] for r in rows], dtype=np.int64)
        dupes = frames[:-1][np.diff(frames) == 0]
        if dupes.size:
            raise FormatError(
                f"duplicate frame {int(dupes[0])} for scene {scene!r} agent {agent!r}")
        positions = np.array([[r[1], r[2]] for r in rows], dtype=np.float64)
        records.append(TrajectoryRecord(scene_id=scene, agent_id=agent, frames=frames,
                                        positions=positions, frame_period=frame_period))
    return records


# -- windowing ---------------------------------------------------------------------


@dataclass
class SlicingConfig:
    obs_len: int = 8
    pred_len: int = 12
    step: int = 1
    max_trajectory_len: int | None = None
    require_full: bool = True

    def __post_init__(self):
        if self.obs_len < 2:
            raise ContractError("obs_len must be >= 2 (features need differences)")
        if self.pred_len < 1:
            raise ContractError("pred_len must be >= 1")
        if self.step < 1:
            raise ContractError("step must be >= 1")


def slice_windows(records, cfg: SlicingConfig) -> list[TrajectoryWindow]:
    """Sliding windows of obs_len + pred_len; drops over-long (parked) agents.

    With ``require_full`` off (evaluation), windows keep a full observed
    part but accept 2..pred_len future frames.
    """
    min_future = cfg.pred_len if cfg.require_full else 2
    windows = []
    for rec in records:
        if cfg.max_trajectory_len is not None and len(rec) > cfg.max_trajectory_len:
            continue
        length = len(rec)
        for start in range(0, length - (cfg.obs_len + min_future) + 1, cfg.step):
            obs = rec.positions[start:start + cfg.obs_len]
            fut = rec.positions[start + cfg.obs_len:start + cfg.obs_len + cfg.pred_len]
            windows.append(TrajectoryWindow(
                observed=obs.copy(),
                features=compute_features(obs, rec.frame_period),
                future=fut.copy(),
                frame_period=rec.frame_period,
                scene_id=rec.scene_id, agent_id=rec.agent_id,
                start_frame=int(rec.frames[start])))
    return windows


def compute_features(observed: np.ndarray, frame_period: float) -> np.ndarray:
    """Velocity, acceleration, heading per observation.

    Backward differences with a forward difference at index 0; heading is
    atan2 of velocity, holding the previous value (0 at the start) when the
    speed is exactly zero.
    """
    obs = np.asarray(observed, dtype=np.float64)
    if obs.shape[0] < 2:
        raise ContractError("features need at least two observations")
    dt = frame_period
    vel = np.empty_like(obs)
    vel[1:] = (obs[1:] - obs[:-1]) / dt
    vel[0] = (obs[1] - obs[0]) / dt
    acc = np.empty_like(obs)
    acc[1:] = (vel[1:] - vel[:-1]) / dt
    acc[0] = (vel[1] - vel[0]) / dt
    heading = np.zeros(obs.shape[0])
    prev = 0.0
    for t in range(obs.shape[0]):
        if vel[t, 0] == 0.0 and vel[t, 1] == 0.0:
            heading[t] = prev
        else:
            heading[t] = math.atan2(vel[t, 1], vel[t, 0])
            prev = heading[t]
    return np.column_stack([vel, acc, heading])


# -- preprocessing -----------------------------------------------------------------


def _rotate(pts: np.ndarray, angle: float, pivot: np.ndarray) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    rel = pts - pivot
    rot = np.empty_like(rel)
    rot[..., 0] = c * rel[..., 0] - s * rel[..., 1]
    rot[..., 1] = s * rel[..., 0] + c * rel[..., 1]
    return rot + pivot


def _rotate_vectors(vecs: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    out = np.empty_like(vecs)
    out[..., 0] = c * vecs[..., 0] - s * vecs[..., 1]
    out[..., 1] = s * vecs[..., 0] + c * vecs[..., 1]
    return out


def canonical_rotate(window: TrajectoryWindow) -> TrajectoryWindow:
    """Rotate about the last observation so the final displacement points along +x.

    A stationary final displacement leaves the window unchanged (identity
    rotation, angle 0).  The applied angle and pivot are stored so samples
    rotate back exactly.
    """
    if window.rotation_angle is not None:
        raise ContractError("window is already rotated")
    last, prev = window.observed[-1], window.observed[-2]
    disp = last - prev
    phi = 0.0 if (disp[0] == 0.0 and disp[1] == 0.0) else math.atan2(disp[1], disp[0])
    pivot = last.copy()
    feats = window.features
    new_feats = np.column_stack([
        _rotate_vectors(feats[:, 0:2], -phi),
        _rotate_vectors(feats[:, 2:4], -phi),
        wrap_angle(feats[:, 4] - phi),
    ])
    return replace(window,
                   observed=_rotate(window.observed, -phi, pivot),
                   features=new_feats,
                   future=_rotate(window.future, -phi, pivot),
                   rotation_angle=phi,
                   rotation_pivot=pivot)


def undo_rotation(window: TrajectoryWindow) -> TrajectoryWindow:
    """Exact inverse of :func:`canonical_rotate`."""
    if window.rotation_angle is None:
        raise ContractError("window is not rotated")
    phi, pivot = window.rotation_angle, window.rotation_pivot
    feats = window.features
    new_feats = np.column_stack([
        _rotate_vectors(feats[:, 0:2], phi),
        _rotate_vectors(feats[:, 2:4], phi),
        wrap_angle(feats[:, 4] + phi),
    ])
    return replace(window,
                   observed=_rotate(window.observed, phi, pivot),
                   features=new_feats,
                   future=_rotate(window.future, phi, pivot),
                   rotation_angle=None,
                   rotation_pivot=None)


def min_max_bounds(windows) -> MinMaxBounds:
    """Dataset-level position bounds; compute on the training split only."""
    pts = np.concatenate([np.concatenate([w.observed, w.future]) for w in windows])
    bounds = MinMaxBounds(x_min=float(pts[:, 0].min()), x_max=float(pts[:, 0].max()),
                          y_min=float(pts[:, 1].min()), y_max=float(pts[:, 1].max()))
    if bounds.x_max == bounds.x_min or bounds.y_max == bounds.y_min:
        raise DegeneracyError("degenerate min-max bounds (max equals min)")
    return bounds


def apply_min_max(window: TrajectoryWindow, bounds: MinMaxBounds) -> TrajectoryWindow:
    """Map positions into [0,1]^2 and recompute features in normalized units."""
    if window.bounds is not None:
        raise ContractError("window is already normalized")
    obs = bounds.normalize(window.observed)
    return replace(window,
                   observed=obs,
                   features=compute_features(obs, window.frame_period),
                   future=bounds.normalize(window.future),
                   bounds=bounds)


def min_max_normalize(windows) -> tuple[list[TrajectoryWindow], MinMaxBounds]:
    bounds = min_max_bounds(windows)
    return [apply_min_max(w, bounds) for w in windows], bounds


def scale_augment(window: TrajectoryWindow, rng: np.random.Generator,
                  scale_range: tuple[float, float] = (0.3, 1.7)) -> TrajectoryWindow:
    """Scale the window about its mean by a random factor; features recomputed."""
    factor = float(rng.uniform(*scale_range))
    pts = np.concatenate([window.observed, window.future])
    center = pts.mean(axis=0)
    obs = (window.observed - center) * factor + center
    fut = (window.future - center) * factor + center
    return replace(window,
                   observed=obs,
                   features=compute_features(obs, window.frame_period),
                   future=fut,
                   scale_factor=factor,
                   scale_center=center)


def to_displacements(future: np.ndarray, last_observed: np.ndarray) -> np.ndarray:
    """Consecutive displacements: d_1 = u_1 - o_T, d_s = u_s - u_{s-1}."""
    fut = np.asarray(future, dtype=np.float64)
    out = np.empty_like(fut)
    out[0] = fut[0] - last_observed
    out[1:] = fut[1:] - fut[:-1]
    return out


def from_displacements(disp: np.ndarray, last_observed: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_displacements` (cumulative sum from o_T)."""
    return last_observed + np.cumsum(np.asarray(disp, dtype=np.float64), axis=0)


def split_train_test(windows, test_fraction: float, seed: int
                     ) -> tuple[list[TrajectoryWindow], list[TrajectoryWindow]]:
    """Seeded random window split (e.g. 0.25 for a 75/25 split)."""
    order = np.random.default_rng(seed).permutation(len(windows))
    n_test = int(round(test_fraction * len(windows)))
    test_idx = set(order[:n_test].tolist())
    train = [w for i, w in enumerate(windows) if i not in test_idx]
    test = [w for i, w in enumerate(windows) if i in test_idx]
    return train, test


# -- synthetic processes -----------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Reproducible toy processes with known ground-truth marginal densities.

    ``constant_velocity``: straight motion; the observed part is exact and
    each future position gets independent isotropic Gaussian noise, so the
    true marginal at every horizon is a Gaussian of std ``noise_sigma``
    centered on the extrapolated position.

    ``two_mode_turn``: straight observed motion, then an equal-probability
    left or right turn of ``turn_angle`` total, again with independent
    noise on the future part: a two-component mixture marginal.
    """

    process: str = "constant_velocity"
    n_windows: int = 100
    obs_len: int = 8
    pred_len: int = 12
    noise_sigma: float = 0.1
    frame_period: float = 1.0
    speed_range: tuple[float, float] = (0.5, 1.5)
    start_box: float = 2.0
    turn_angle: float = math.pi / 2
    noise_on: str = "future"

    def __post_init__(self):
        if self.process not in ("constant_velocity", "two_mode_turn"):
            raise ContractError(f"unknown synthetic process {self.process!r}")
        if self.noise_on not in ("future", "all"):
            raise ContractError("noise_on must be 'future' or 'all'")


def _clean_trajectory(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Noise-free path of length obs_len + pred_len for one agent."""
    total = spec.obs_len + spec.pred_len
    speed = rng.uniform(*spec.speed_range)
    heading = rng.uniform(-math.pi, math.pi)
    start = rng.uniform(-spec.start_box, spec.start_box, size=2)
    dt = spec.frame_period
    pts = np.empty((total, 2))
    pts[0] = start
    if spec.process == "constant_velocity":
        step = speed * dt * np.array([math.cos(heading), math.sin(heading)])
        for t in range(1, total):
            pts[t] = pts[t - 1] + step
        return pts
    # two_mode_turn: straight during observation, then a constant-rate turn
    turn_dir = 1.0 if rng.uniform() < 0.5 else -1.0
    dtheta = turn_dir * spec.turn_angle / spec.pred_len
    theta = heading
    for t in range(1, total):
        if t > spec.obs_len - 1:
            theta += dtheta
        pts[t] = pts[t - 1] + speed * dt * np.array([math.cos(theta), math.sin(theta)])
    return pts


def synthesize_dataset(spec: SyntheticSpec, seed: int) -> list[TrajectoryRecord]:
    """Generate one record per window (each of length obs_len + pred_len)."""
    rng = np.random.default_rng(seed)
    records = []
    for i in range(spec.n_windows):
        pts = _clean_trajectory(spec, rng)
        if spec.noise_sigma > 0:
            if spec.noise_on == "future":
                noise = rng.normal(0.0, spec.noise_sigma,
                                   size=(spec.pred_len, 2))
                pts[spec.obs_len:] += noise
            else:
                pts += rng.normal(0.0, spec.noise_sigma, size=pts.shape)
        records.append(TrajectoryRecord(
            scene_id="synthetic", agent_id=f"agent{i:05d}",
            frames=np.arange(pts.shape[0], dtype=np.int64),
            positions=pts, frame_period=spec.frame_period))
    return records


def constant_velocity_truth(window: TrajectoryWindow, s: float) -> np.ndarray:
    """Clean extrapolated position at horizon s for the straight-line process.

    Valid when the observed part is noise-free: the generating velocity is
    exactly the last observed displacement per frame.
    """
    vel = (window.observed[-1] - window.observed[-2]) / window.frame_period
    return window.observed[-1] + vel * s * window.frame_period


def two_mode_branch_templates(window: TrajectoryWindow, spec: SyntheticSpec
                              ) -> tuple[np.ndarray, np.ndarray]:
    """Clean left/right future branches implied by a two-mode window's state."""
    disp = window.observed[-1] - window.observed[-2]
    speed = float(np.linalg.norm(disp)) / window.frame_period
    heading = math.atan2(disp[1], disp[0])
    branches = []
    for turn_dir in (1.0, -1.0):
        dtheta = turn_dir * spec.turn_angle / spec.pred_len
        theta = heading
        pos = window.observed[-1].copy()
        pts = np.empty((spec.pred_len, 2))
        for t in range(spec.pred_len):
            theta += dtheta
            pos = pos + speed * window.frame_period * np.array(
                [math.cos(theta), math.sin(theta)])
            pts[t] = pos
        branches.append(pts)
    return branches[0], branches[1]
