"""BAL problem files: parsing, serialization, pruning, and randomized starting states.

The BAL plain-text format is:

    <num_cameras> <num_points> <num_observations>
    <cam_idx> <point_idx> <x> <y>          (one line per observation)
    <9 reals per camera>                   (angle-axis, translation, focal, k1, k2)
    <3 reals per point>

Tokens are whitespace-separated; decimal and scientific notation are accepted.
"""

from __future__ import annotations

import bz2
import gzip
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterator

import numpy as np

logger = logging.getLogger(__name__)

CAMERA_FIELDS = 9
POINT_FIELDS = 3


class BalParseError(ValueError):
    """Malformed BAL input; carries the 1-based line number of the offending token."""

    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


@dataclass(frozen=True)
class Observation:
    """A single image measurement of one landmark from one camera."""

    camera_index: int
    landmark_index: int
    measurement: np.ndarray  # (2,) pixels


def _frozen(a: np.ndarray, dtype=np.float64) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class BaProblem:
    """Observation graph of a bundle adjustment problem.

    Immutable after construction; safe to share read-only across threads.
    ``metric_cameras`` rows hold (angle-axis[3], translation[3], focal, k1, k2)
    and are only consumed by the metric upgrade stage.
    """

    num_cameras: int
    num_landmarks: int
    num_observations: int
    camera_indices: np.ndarray  # (n_obs,) int64
    landmark_indices: np.ndarray  # (n_obs,) int64
    measurements: np.ndarray  # (n_obs, 2) float64
    metric_cameras: np.ndarray | None = None  # (num_cameras, 9)
    metric_points: np.ndarray | None = None  # (num_landmarks, 3)

    def __post_init__(self):
        object.__setattr__(self, "camera_indices", _frozen(self.camera_indices, np.int64))
        object.__setattr__(self, "landmark_indices", _frozen(self.landmark_indices, np.int64))
        object.__setattr__(self, "measurements", _frozen(self.measurements))
        if self.metric_cameras is not None:
            object.__setattr__(self, "metric_cameras", _frozen(self.metric_cameras))
        if self.metric_points is not None:
            object.__setattr__(self, "metric_points", _frozen(self.metric_points))
        n = self.num_observations
        if len(self.camera_indices) != n or len(self.landmark_indices) != n:
            raise ValueError("observation count does not match index arrays")
        if self.measurements.shape != (n, 2):
            raise ValueError("measurement array must be (num_observations, 2)")
        if n and (self.camera_indices.min() < 0 or self.camera_indices.max() >= self.num_cameras):
            raise ValueError("camera index out of range")
        if n and (self.landmark_indices.min() < 0 or self.landmark_indices.max() >= self.num_landmarks):
            raise ValueError("landmark index out of range")

    @property
    def observations(self) -> Iterator[Observation]:
        for c, l, m in zip(self.camera_indices, self.landmark_indices, self.measurements):
            yield Observation(int(c), int(l), m)


@dataclass(frozen=True)
class ProjectiveState:
    """Per-camera 3x4 projective matrices and per-landmark homogeneous 4-vectors.

    Stage-1 states keep the last landmark coordinate at exactly 1; stage-2
    states keep every vectorized camera and every landmark at unit norm.
    """

    cameras: np.ndarray  # (n_p, 3, 4)
    landmarks: np.ndarray  # (n_l, 4)

    def __post_init__(self):
        object.__setattr__(self, "cameras", _frozen(self.cameras))
        object.__setattr__(self, "landmarks", _frozen(self.landmarks))
        if self.cameras.ndim != 3 or self.cameras.shape[1:] != (3, 4):
            raise ValueError("cameras must be (n, 3, 4)")
        if self.landmarks.ndim != 2 or self.landmarks.shape[1] != 4:
            raise ValueError("landmarks must be (n, 4)")


def _tokens(stream: IO[str]) -> Iterator[tuple[int, str]]:
    for line_no, line in enumerate(stream, start=1):
        for tok in line.split():
            yield line_no, tok


class _TokenReader:
    def __init__(self, stream: IO[str]):
        self._it = _tokens(stream)
        self.line = 0

    def next_token(self, what: str) -> str:
        try:
            self.line, tok = next(self._it)
        except StopIteration:
            raise BalParseError(self.line, f"truncated file: expected {what}") from None
        return tok

    def next_int(self, what: str) -> int:
        tok = self.next_token(what)
        try:
            return int(tok)
        except ValueError:
            raise BalParseError(self.line, f"expected integer {what}, got {tok!r}") from None

    def next_float(self, what: str) -> float:
        tok = self.next_token(what)
        try:
            return float(tok)
        except ValueError:
            raise BalParseError(self.line, f"non-numeric token for {what}: {tok!r}") from None

    def at_end(self) -> bool:
        try:
            self.line, tok = next(self._it)
        except StopIteration:
            return True
        return False


def parse_bal(stream: IO[str]) -> BaProblem:
    """Parse a BAL-format text stream into a :class:`BaProblem`.

    Raises :class:`BalParseError` with a line number for malformed headers,
    out-of-range indices, truncated files, and non-numeric tokens.
    """
    rd = _TokenReader(stream)
    n_cam = rd.next_int("camera count")
    n_lm = rd.next_int("point count")
    n_obs = rd.next_int("observation count")
    if n_cam < 0 or n_lm < 0 or n_obs < 0:
        raise BalParseError(rd.line, "malformed header: negative count")

    cam_idx = np.empty(n_obs, dtype=np.int64)
    lm_idx = np.empty(n_obs, dtype=np.int64)
    meas = np.empty((n_obs, 2), dtype=np.float64)
    for k in range(n_obs):
        c = rd.next_int("camera index")
        if not 0 <= c < n_cam:
            raise BalParseError(rd.line, f"camera index {c} out of range [0, {n_cam})")
        p = rd.next_int("point index")
        if not 0 <= p < n_lm:
            raise BalParseError(rd.line, f"point index {p} out of range [0, {n_lm})")
        cam_idx[k] = c
        lm_idx[k] = p
        meas[k, 0] = rd.next_float("measurement x")
        meas[k, 1] = rd.next_float("measurement y")

    cams = np.empty((n_cam, CAMERA_FIELDS), dtype=np.float64)
    for i in range(n_cam):
        for j in range(CAMERA_FIELDS):
            cams[i, j] = rd.next_float(f"camera {i} parameter {j}")
    pts = np.empty((n_lm, POINT_FIELDS), dtype=np.float64)
    for i in range(n_lm):
        for j in range(POINT_FIELDS):
            pts[i, j] = rd.next_float(f"point {i} coordinate {j}")
    if not rd.at_end():
        raise BalParseError(rd.line, "trailing data after point block")

    return BaProblem(
        num_cameras=n_cam,
        num_landmarks=n_lm,
        num_observations=n_obs,
        camera_indices=cam_idx,
        landmark_indices=lm_idx,
        measurements=meas,
        metric_cameras=cams,
        metric_points=pts,
    )


def write_bal(problem: BaProblem, stream: IO[str]) -> None:
    """Serialize a problem back to BAL text, losslessly (17 significant digits).

    Missing metric blocks are written as zeros so the output always follows
    the full grammar.
    """
    stream.write(f"{problem.num_cameras} {problem.num_landmarks} {problem.num_observations}\n")
    for c, l, m in zip(problem.camera_indices, problem.landmark_indices, problem.measurements):
        stream.write(f"{c} {l} {m[0]:.17g} {m[1]:.17g}\n")
    cams = problem.metric_cameras
    if cams is None:
        cams = np.zeros((problem.num_cameras, CAMERA_FIELDS))
    for row in cams:
        for v in row:
            stream.write(f"{v:.17g}\n")
    pts = problem.metric_points
    if pts is None:
        pts = np.zeros((problem.num_landmarks, POINT_FIELDS))
    for row in pts:
        for v in row:
            stream.write(f"{v:.17g}\n")


def load_bal(path: str | Path) -> BaProblem:
    """Read a BAL file from disk, transparently decompressing gzip or bzip2 input."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(3)
    if magic[:2] == b"\x1f\x8b":
        opener = gzip.open
    elif magic == b"BZh":
        opener = bz2.open
    else:
        opener = open
    with opener(path, "rt") as fh:
        return parse_bal(fh)


def prune_underobserved(problem: BaProblem, min_cameras: int = 2) -> BaProblem:
    """Drop landmarks seen by fewer than ``min_cameras`` distinct cameras.

    Cameras left without observations are dropped as well; surviving cameras
    and landmarks are reindexed densely and metric blocks follow. Landmarks
    seen only once yield rank-deficient closed-form systems, so they are
    removed before any solving and never re-added.
    """
    n_distinct = np.zeros(problem.num_landmarks, dtype=np.int64)
    pairs = np.unique(np.stack([problem.camera_indices, problem.landmark_indices], axis=1), axis=0)
    np.add.at(n_distinct, pairs[:, 1], 1)
    keep_lm = n_distinct >= min_cameras
    obs_keep = keep_lm[problem.landmark_indices]
    cam_seen = np.zeros(problem.num_cameras, dtype=bool)
    cam_seen[problem.camera_indices[obs_keep]] = True

    if keep_lm.all() and cam_seen.all():
        return problem

    lm_map = np.cumsum(keep_lm) - 1
    cam_map = np.cumsum(cam_seen) - 1
    dropped_lms = int((~keep_lm).sum())
    dropped_cams = int((~cam_seen).sum())
    logger.info("pruned %d under-observed landmarks and %d empty cameras", dropped_lms, dropped_cams)

    return BaProblem(
        num_cameras=int(cam_seen.sum()),
        num_landmarks=int(keep_lm.sum()),
        num_observations=int(obs_keep.sum()),
        camera_indices=cam_map[problem.camera_indices[obs_keep]],
        landmark_indices=lm_map[problem.landmark_indices[obs_keep]],
        measurements=problem.measurements[obs_keep],
        metric_cameras=None if problem.metric_cameras is None else problem.metric_cameras[cam_seen],
        metric_points=None if problem.metric_points is None else problem.metric_points[keep_lm],
    )


def random_init(problem: BaProblem, seed: int, config=None) -> ProjectiveState:
    """Build the randomized starting state for the first stage.

    Camera entries are i.i.d. standard normal from a Philox counter-based
    generator (stable across platforms for a given seed); landmarks are then
    set to their closed-form optimum given those cameras and normalized to a
    last coordinate of exactly 1. A pure function of (problem, seed, config).
    """
    from .objective import PoseConfig, solve_landmarks

    rng = np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))
    cameras = rng.standard_normal((problem.num_cameras, 3, 4))
    zero_landmarks = np.zeros((problem.num_landmarks, 4))
    zero_landmarks[:, 3] = 1.0
    state = ProjectiveState(cameras=cameras, landmarks=zero_landmarks)
    landmarks = solve_landmarks(state, problem, config or PoseConfig())
    return ProjectiveState(cameras=cameras, landmarks=landmarks)
