"""Demonstration ingestion, windowed batching and synthetic datasets.

On disk a demonstration is one CSV file with header ``t,z1,...,zn`` and one
row per sample.  Values are written with ``repr`` so a write/read round trip
is exact.  A directory may also carry ``attractors.json`` annotating the
attractor of each demonstration group.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.interpolate import CubicSpline

ANNOTATION_FILE = "attractors.json"


class DemoFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        z = np.asarray(self.points, dtype=np.float64)
        if z.ndim == 1:
            z = z[:, None]
        if t.ndim != 1 or z.ndim != 2 or t.shape[0] != z.shape[0]:
            raise ValueError(f"times {t.shape} and points {z.shape} do not align")
        if t.shape[0] < 2:
            raise ValueError("a trajectory needs at least two samples")
        if np.any(np.diff(t) <= 0):
            raise ValueError("trajectory times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "points", z)

    def __len__(self) -> int:
        return self.times.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])


@dataclass
class DemoSet:
    names: list[str]
    trajectories: list[Trajectory]
    attractors: np.ndarray | None = None
    groups: list[int] | None = None

    def __post_init__(self):
        if len(self.names) != len(self.trajectories):
            raise ValueError("one name per trajectory")
        if not self.trajectories:
            raise ValueError("a DemoSet needs at least one trajectory")
        dims = {tr.dim for tr in self.trajectories}
        if len(dims) != 1:
            raise ValueError(f"mixed dimensionality in DemoSet: {sorted(dims)}")
        if self.attractors is not None:
            self.attractors = np.atleast_2d(np.asarray(self.attractors, dtype=np.float64))
            if self.attractors.shape[1] != self.dim:
                raise ValueError("attractor dimension differs from the data")
        if self.groups is not None and len(self.groups) != len(self.trajectories):
            raise ValueError("one group label per trajectory")

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i: int) -> Trajectory:
        return self.trajectories[i]

    @property
    def dim(self) -> int:
        return self.trajectories[0].dim

    def subset(self, indices: Sequence[int]) -> "DemoSet":
        idx = list(indices)
        return DemoSet(
            [self.names[i] for i in idx],
            [self.trajectories[i] for i in idx],
            self.attractors,
            None if self.groups is None else [self.groups[i] for i in idx],
        )


# --------------------------------------------------------------------------
# files


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def trajectory_csv(traj: Trajectory) -> str:
    header = ["t"] + [f"z{i + 1}" for i in range(traj.dim)]
    lines = [",".join(header)]
    for t, row in zip(traj.times, traj.points):
        lines.append(",".join(repr(float(v)) for v in (t, *row)))
    return "\n".join(lines) + "\n"


def write_trajectory(path: str | os.PathLike, traj: Trajectory) -> None:
    atomic_write_text(path, trajectory_csv(traj))


def read_trajectory(path: str | os.PathLike) -> Trajectory:
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DemoFormatError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    n = len(header) - 1
    if n < 1 or header != ["t"] + [f"z{i + 1}" for i in range(n)]:
        raise DemoFormatError(f"{path}:1: malformed header {rows[0]!r}; expected t,z1,...,zn")
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != n + 1:
            raise DemoFormatError(f"{path}:{lineno}: expected {n + 1} fields, got {len(row)}")
        try:
            data.append([float(v) for v in row])
        except ValueError as exc:
            raise DemoFormatError(f"{path}:{lineno}: {exc}") from None
    if len(data) < 2:
        raise DemoFormatError(f"{path}: need at least two samples")
    arr = np.array(data, dtype=np.float64)
    bad = np.nonzero(np.diff(arr[:, 0]) <= 0)[0]
    if bad.size:
        raise DemoFormatError(f"{path}:{int(bad[0]) + 3}: time column is not strictly increasing")
    return Trajectory(arr[:, 0], arr[:, 1:])


def load_demos(directory: str | os.PathLike) -> DemoSet:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"demo directory {directory} does not exist")
    files = sorted(directory.glob("*.csv"))
    if not files:
        raise DemoFormatError(f"{directory}: no CSV demonstrations found")
    names = [f.stem for f in files]
    trajs = [read_trajectory(f) for f in files]
    attractors = groups = None
    ann = directory / ANNOTATION_FILE
    if ann.exists():
        meta = json.loads(ann.read_text(encoding="utf-8"))
        attractors = np.array(meta["attractors"], dtype=np.float64)
        if "groups" in meta:
            groups = [int(meta["groups"][n]) for n in names]
    try:
        return DemoSet(names, trajs, attractors, groups)
    except ValueError as exc:
        raise DemoFormatError(f"{directory}: {exc}") from None


def save_demos(directory: str | os.PathLike, demos: DemoSet) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, tr in zip(demos.names, demos.trajectories):
        write_trajectory(directory / f"{name}.csv", tr)
    if demos.attractors is not None:
        meta: dict = {"attractors": demos.attractors.tolist()}
        if demos.groups is not None:
            meta["groups"] = dict(zip(demos.names, demos.groups))
        atomic_write_text(directory / ANNOTATION_FILE, json.dumps(meta, indent=1) + "\n")


# --------------------------------------------------------------------------
# batching


@dataclass
class WindowBatch:
    demo_index: np.ndarray  # (N_B,)
    starts: np.ndarray  # (N_B,)
    times: np.ndarray  # (N_B, N_S)
    points: np.ndarray  # (N_B, N_S, n)

    @property
    def y0(self) -> np.ndarray:
        return self.points[:, 0, :]

    def __len__(self) -> int:
        return self.starts.shape[0]


def make_windows(demos: DemoSet, n_samples: int, n_batch: int, seed: int) -> WindowBatch:
    """Sample ``n_batch`` windows of ``n_samples`` consecutive samples.

    Each window picks a demonstration uniformly, then a start index uniformly
    in ``[0, len - n_samples]``.
    """
    if n_samples < 2 or n_batch < 1:
        raise ValueError("need n_samples >= 2 and n_batch >= 1")
    for name, tr in zip(demos.names, demos.trajectories):
        if len(tr) < n_samples:
            raise ValueError(f"demo {name!r} has {len(tr)} samples, fewer than window length {n_samples}")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(demos), size=n_batch)
    starts = np.array([rng.integers(0, len(demos[i]) - n_samples + 1) for i in idx], dtype=np.int64)
    times = np.stack([demos[i].times[s : s + n_samples] for i, s in zip(idx, starts)])
    points = np.stack([demos[i].points[s : s + n_samples] for i, s in zip(idx, starts)])
    return WindowBatch(idx, starts, times, points)


# --------------------------------------------------------------------------
# synthetic data


def synth_multimodal(groups: Sequence[DemoSet], offsets) -> DemoSet:
    """Union of demo groups, each demo translated to end on its group's attractor."""
    offsets = np.atleast_2d(np.asarray(offsets, dtype=np.float64))
    if offsets.shape[0] != len(groups):
        raise ValueError(f"{len(groups)} groups but {offsets.shape[0]} offsets")
    names, trajs, labels = [], [], []
    for g, (demos, off) in enumerate(zip(groups, offsets)):
        if off.shape[0] != demos.dim:
            raise ValueError(f"offset {off.tolist()} does not match data dimension {demos.dim}")
        for name, tr in zip(demos.names, demos.trajectories):
            pts = tr.points - tr.points[-1] + off
            pts[-1] = off
            names.append(f"g{g}_{name}")
            trajs.append(Trajectory(tr.times.copy(), pts))
            labels.append(g)
    return DemoSet(names, trajs, offsets.copy(), labels)


# waypoints of the bundled handwriting-style shapes; every shape ends at 0
SHAPES: dict[str, np.ndarray] = {
    "angle": np.array([[-0.95, -0.05], [-0.75, 0.35], [-0.5, 0.65], [-0.25, 0.45], [-0.08, 0.15], [0.0, 0.0]]),
    "hook": np.array([[0.55, -0.55], [0.1, -0.85], [-0.45, -0.65], [-0.5, -0.3], [-0.2, -0.12], [0.0, 0.0]]),
}


def _smooth_path(waypoints: np.ndarray) -> CubicSpline:
    """C2 curve through the waypoints, parameterised by normalised chord length."""
    seg = np.linalg.norm(np.diff(waypoints, axis=0), axis=1)
    u = np.concatenate([[0.0], np.cumsum(seg)])
    return CubicSpline(u / u[-1], waypoints, bc_type="natural")


def handwriting_shape(
    name: str, n_demos: int = 7, dt: float = 0.01, seed: int = 0, launch: float = 0.5
) -> DemoSet:
    """Demonstrations of a bundled shape.

    Each demo perturbs the waypoints (fading out toward the goal) and ends at
    rest at the origin.  The progress profile mixes a minimum-jerk curve with
    a decelerating cubic; ``launch`` is the weight of the latter, so
    ``launch=0`` starts from rest.  All demos share the sampling step ``dt``;
    durations differ.
    """
    if name not in SHAPES:
        raise KeyError(f"unknown shape {name!r}; available: {sorted(SHAPES)}")
    base = SHAPES[name]
    rng = np.random.default_rng(seed)
    names, trajs = [], []
    fade = np.linspace(1.0, 0.0, base.shape[0])[:, None]
    for k in range(n_demos):
        wp = base + fade * rng.normal(scale=0.04, size=base.shape)
        wp[-1] = 0.0
        spline = _smooth_path(wp)
        duration = rng.uniform(2.6, 3.4)
        n = int(round(duration / dt)) + 1
        tau = np.linspace(0.0, 1.0, n)
        s = (1 - launch) * (10 * tau**3 - 15 * tau**4 + 6 * tau**5) + launch * (1 - (1 - tau) ** 3)
        pts = spline(s)
        pts[-1] = 0.0
        names.append(f"{name}_{k}")
        trajs.append(Trajectory(np.arange(n) * dt, pts))
    return DemoSet(names, trajs, np.zeros((1, 2)), [0] * n_demos)


def bundled_shapes_dir() -> Path:
    return Path(__file__).resolve().parent / "data" / "shapes"


def load_bundled(name: str) -> DemoSet:
    return load_demos(bundled_shapes_dir() / name)
