"""Closed race tracks, random track generation, and reference speed profiles."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class TrackGenerationError(RuntimeError):
    """Raised when no valid track was found within the retry budget."""


class TrackFormatError(ValueError):
    pass


def _wrap_angle(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def _periodic_moving_average(values, window):
    if window <= 1:
        return values.copy()
    half = window // 2
    padded = np.concatenate([values[-half:], values, values[:half]])
    kernel = np.full(window, 1.0 / window)
    return np.convolve(padded, kernel, mode="valid")


def segments_intersect(p1, p2, q1, q2) -> np.ndarray:
    """Vectorized proper-or-touching intersection test of segments p1p2 and q1q2."""

    def orient(a, b, c):
        return ((b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1])
                - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0]))

    o1 = orient(p1, p2, q1)
    o2 = orient(p1, p2, q2)
    o3 = orient(q1, q2, p1)
    o4 = orient(q1, q2, p2)
    return (o1 * o2 <= 0) & (o3 * o4 <= 0)


def self_intersects(points: np.ndarray) -> bool:
    """True if any two non-adjacent segments of the closed polyline intersect."""
    pts = np.asarray(points, dtype=float)
    n = len(pts) - 1
    a, b = pts[:-1], pts[1:]
    i, j = np.triu_indices(n, k=2)
    keep = ~((i == 0) & (j == n - 1))
    i, j = i[keep], j[keep]
    # cheap bounding-box rejection before the orientation test
    lo_a, hi_a = np.minimum(a, b), np.maximum(a, b)
    overlap = np.all((lo_a[i] <= hi_a[j]) & (lo_a[j] <= hi_a[i]), axis=1)
    i, j = i[overlap], j[overlap]
    if len(i) == 0:
        return False
    return bool(np.any(segments_intersect(a[i], b[i], a[j], b[j])))


@dataclass(frozen=True)
class BoundarySlab:
    """Two antiparallel half-planes ``A @ p <= b`` bounding the track locally."""

    A: np.ndarray
    b: np.ndarray

    def violation(self, p) -> np.ndarray:
        return np.maximum(0.0, self.A @ np.asarray(p, dtype=float) - self.b)


@dataclass(frozen=True, eq=False)
class Track:
    """Closed centerline polyline with constant width.

    ``centerline`` holds ``n + 1`` points whose last entry repeats the first.
    """

    centerline: np.ndarray
    width: float
    closed: bool = True
    theta: np.ndarray = field(init=False, repr=False)
    _seg: np.ndarray = field(init=False, repr=False)
    _seg_len: np.ndarray = field(init=False, repr=False)
    _kappa: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pts = np.array(self.centerline, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 4:
            raise TrackFormatError("centerline must be an (n, 2) array with n >= 4")
        if not np.all(np.isfinite(pts)):
            raise TrackFormatError("centerline contains non-finite values")
        if np.linalg.norm(pts[0] - pts[-1]) > 1e-9:
            raise TrackFormatError("centerline is not closed")
        pts[-1] = pts[0]
        seg = np.diff(pts, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(seg_len <= 0):
            raise TrackFormatError("consecutive waypoints must be distinct")
        if not self.width > 0:
            raise TrackFormatError("width must be > 0")
        pts.setflags(write=False)
        object.__setattr__(self, "centerline", pts)
        object.__setattr__(self, "_seg", seg)
        object.__setattr__(self, "_seg_len", seg_len)
        theta = np.concatenate([[0.0], np.cumsum(seg_len)])
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "_kappa", self._vertex_curvature())

    @property
    def length(self) -> float:
        return float(self.theta[-1])

    @property
    def n(self) -> int:
        return len(self.centerline) - 1

    @property
    def spacing(self) -> float:
        return self.length / self.n

    def reversed(self) -> "Track":
        return Track(self.centerline[::-1].copy(), self.width)

    def wrap(self, theta):
        return np.mod(theta, self.length)

    def _locate(self, theta):
        theta = self.wrap(np.asarray(theta, dtype=float))
        i = np.clip(np.searchsorted(self.theta, theta, side="right") - 1, 0, self.n - 1)
        t = (theta - self.theta[i]) / self._seg_len[i]
        return i, t

    def point(self, theta) -> np.ndarray:
        i, t = self._locate(theta)
        return self.centerline[i] + t[..., None] * self._seg[i]

    def tangent(self, theta) -> np.ndarray:
        i, _ = self._locate(theta)
        return self._seg[i] / self._seg_len[i][..., None]

    def project(self, p) -> float:
        """Arc length of the closest centerline point to ``p``; ties go to the smaller arc length."""
        p = np.asarray(p, dtype=float)
        a = self.centerline[:-1]
        rel = p - a
        t = np.clip(np.einsum("ij,ij->i", rel, self._seg) / self._seg_len**2, 0.0, 1.0)
        closest = a + t[:, None] * self._seg
        dist2 = np.sum((closest - p) ** 2, axis=1)
        best = dist2.min()
        candidates = np.flatnonzero(dist2 <= best + 1e-12 * max(best, 1e-300))
        thetas = self.theta[candidates] + t[candidates] * self._seg_len[candidates]
        thetas = np.where(thetas >= self.length, thetas - self.length, thetas)
        return float(thetas.min())

    def frenet(self, p):
        """Return ``(theta, signed lateral offset)``; positive offsets lie to the left."""
        theta = self.project(p)
        c = self.point(theta)
        tg = self.tangent(theta)
        rel = np.asarray(p, dtype=float) - c
        return theta, float(tg[0] * rel[1] - tg[1] * rel[0])

    def boundary_slab(self, theta) -> BoundarySlab:
        c = self.point(theta)
        tg = self.tangent(theta)
        normal = np.array([-tg[1], tg[0]])
        A = np.vstack([normal, -normal])
        half = 0.5 * self.width
        b = np.array([normal @ c + half, -(normal @ c) + half])
        return BoundarySlab(A, b)

    def _vertex_curvature(self, window: int = 5) -> np.ndarray:
        heading = np.arctan2(self._seg[:, 1], self._seg[:, 0])
        turn = _wrap_angle(heading - np.roll(heading, 1))
        ds = 0.5 * (self._seg_len + np.roll(self._seg_len, 1))
        return _periodic_moving_average(turn / ds, window)

    @property
    def vertex_curvature(self) -> np.ndarray:
        """Smoothed signed curvature at the ``n`` distinct waypoints."""
        return self._kappa.copy()

    def curvature(self, theta):
        kappa = np.append(self._kappa, self._kappa[0])
        return np.interp(self.wrap(theta), self.theta, kappa)

    def total_turning(self) -> float:
        heading = np.arctan2(self._seg[:, 1], self._seg[:, 0])
        return float(np.sum(_wrap_angle(heading - np.roll(heading, 1))))

    # -- persistence ---------------------------------------------------

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# width={self.width!r}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["x", "y"])
        for x, y in self.centerline:
            writer.writerow([repr(float(x)), repr(float(y))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Track":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("# width="):
            raise TrackFormatError("missing '# width=' metadata line")
        try:
            width = float(lines[0].split("=", 1)[1])
        except ValueError as exc:
            raise TrackFormatError(f"bad width line: {lines[0]!r}") from exc
        reader = csv.reader(lines[1:])
        header = next(reader, None)
        if header != ["x", "y"]:
            raise TrackFormatError(f"expected header x,y, got {header!r}")
        pts = [(float(r[0]), float(r[1])) for r in reader if r]
        return cls(np.array(pts), width)

    @classmethod
    def load(cls, path) -> "Track":
        return cls.from_csv(Path(path).read_text())


# ---------------------------------------------------------------------------
# generation


@dataclass(frozen=True)
class TrackGenConfig:
    n_checkpoints: int = 8
    radius: float = 1.5
    radius_jitter: float = 0.3
    angle_jitter: float = 0.3
    spacing: float = 0.02
    min_radius: float = 0.3
    width: float = 0.37
    samples_per_segment: int = 60
    max_retries: int = 200

    def __post_init__(self):
        if self.n_checkpoints < 6:
            raise ValueError("n_checkpoints must be >= 6")
        for name in ("radius", "spacing", "min_radius", "width"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not 0 <= self.radius_jitter < 1:
            raise ValueError("radius_jitter must be in [0, 1)")
        if not 0 <= self.angle_jitter < 0.5:
            raise ValueError("angle_jitter must be in [0, 0.5)")


def catmull_rom_closed(control: np.ndarray, samples_per_segment: int) -> np.ndarray:
    """Uniform Catmull-Rom spline through closed control points; returns a closed polyline."""
    P = np.asarray(control, dtype=float)
    P0, P1, P2, P3 = np.roll(P, 1, axis=0), P, np.roll(P, -1, axis=0), np.roll(P, -2, axis=0)
    t = np.linspace(0.0, 1.0, samples_per_segment, endpoint=False)[:, None, None]
    curve = 0.5 * (2.0 * P1
                   + (-P0 + P2) * t
                   + (2.0 * P0 - 5.0 * P1 + 4.0 * P2 - P3) * t**2
                   + (-P0 + 3.0 * P1 - 3.0 * P2 + P3) * t**3)
    curve = curve.transpose(1, 0, 2).reshape(-1, 2)
    return np.vstack([curve, curve[:1]])


def resample_closed(polyline: np.ndarray, spacing: float) -> np.ndarray:
    seg = np.diff(polyline, axis=0)
    s = np.concatenate([[0.0], np.cumsum(np.hypot(seg[:, 0], seg[:, 1]))])
    n = max(int(round(s[-1] / spacing)), 8)
    target = np.linspace(0.0, s[-1], n + 1)
    pts = np.column_stack([np.interp(target, s, polyline[:, 0]),
                           np.interp(target, s, polyline[:, 1])])
    pts[-1] = pts[0]
    return pts


def _has_clearance(track: Track, min_radius: float) -> bool:
    """Non-neighbouring parts of the centerline must stay more than a track width apart."""
    pts = track.centerline[:-1]
    theta = track.theta[:-1]
    sep = np.abs(theta[:, None] - theta[None, :])
    sep = np.minimum(sep, track.length - sep)
    far = sep > max(3.0 * track.width, np.pi * min_radius)
    dist = np.hypot(pts[:, None, 0] - pts[None, :, 0], pts[:, None, 1] - pts[None, :, 1])
    return bool(np.all(dist[far] > 1.1 * track.width))


def generate_random_track(seed: int, cfg: TrackGenConfig | None = None) -> Track:
    """Random closed circuit: jittered checkpoints on a circle joined by a Catmull-Rom spline.

    Candidates are rejected on self-intersection, curvature above
    ``1 / min_radius`` or insufficient clearance between distant parts.
    """
    cfg = cfg or TrackGenConfig()
    rng = np.random.default_rng(seed)
    n = cfg.n_checkpoints
    sector = 2.0 * np.pi / n
    for _ in range(cfg.max_retries):
        angles = sector * (np.arange(n) + rng.uniform(-cfg.angle_jitter, cfg.angle_jitter, n))
        radii = cfg.radius * (1.0 + rng.uniform(-cfg.radius_jitter, cfg.radius_jitter, n))
        control = np.column_stack([radii * np.cos(angles), radii * np.sin(angles)])
        dense = catmull_rom_closed(control, cfg.samples_per_segment)
        pts = resample_closed(dense, cfg.spacing)
        try:
            track = Track(pts, cfg.width)
        except TrackFormatError:
            continue
        if np.max(np.abs(track.vertex_curvature)) > 1.0 / cfg.min_radius:
            continue
        if self_intersects(track.centerline):
            continue
        if not _has_clearance(track, cfg.min_radius):
            continue
        return _rotate_start(track)
    raise TrackGenerationError(f"no valid track for seed {seed} after {cfg.max_retries} attempts")


def _rotate_start(track: Track) -> Track:
    """Re-index the closed centerline so that it starts at the least curved waypoint."""
    kappa = np.abs(track.vertex_curvature)
    window = max(int(0.05 * track.n), 1)
    smooth = _periodic_moving_average(kappa, 2 * window + 1)
    start = int(np.argmin(smooth))
    pts = np.roll(track.centerline[:-1], -start, axis=0)
    return Track(np.vstack([pts, pts[:1]]), track.width)


def circle_track(radius: float, width: float, spacing: float, center=(0.0, 0.0)) -> Track:
    n = max(int(round(2.0 * np.pi * radius / spacing)), 8)
    ang = np.linspace(0.0, 2.0 * np.pi, n + 1)
    pts = np.column_stack([center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)])
    pts[-1] = pts[0]
    return Track(pts, width)


def stadium_track(straight: float, radius: float, width: float, spacing: float) -> Track:
    """Two straights joined by half circles, counter-clockwise, starting mid-straight."""
    n_s = max(int(round(straight / spacing)), 2)
    n_c = max(int(round(np.pi * radius / spacing)), 4)
    half = 0.5 * straight
    bottom = np.column_stack([np.linspace(0.0, half, n_s // 2, endpoint=False), np.full(n_s // 2, -radius)])
    a = np.linspace(-0.5 * np.pi, 0.5 * np.pi, n_c, endpoint=False)
    right = np.column_stack([half + radius * np.cos(a), radius * np.sin(a)])
    top = np.column_stack([np.linspace(half, -half, n_s, endpoint=False), np.full(n_s, radius)])
    a = np.linspace(0.5 * np.pi, 1.5 * np.pi, n_c, endpoint=False)
    left = np.column_stack([-half + radius * np.cos(a), radius * np.sin(a)])
    rest = np.column_stack([np.linspace(-half, 0.0, n_s - n_s // 2, endpoint=False),
                            np.full(n_s - n_s // 2, -radius)])
    pts = np.vstack([bottom, right, top, left, rest])
    return Track(np.vstack([pts, pts[:1]]), width)


# ---------------------------------------------------------------------------
# reference speed profile


@dataclass(frozen=True)
class SpeedLimits:
    v_max: float
    a_lat_max: float
    a_lon_max: float
    a_brake_max: float

    def __post_init__(self):
        for name in ("v_max", "a_lat_max", "a_lon_max", "a_brake_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")


@dataclass(frozen=True, eq=False)
class RacingLine:
    """Arc-length parameterized reference path with a periodic speed profile."""

    track: Track
    theta: np.ndarray
    x: np.ndarray
    y: np.ndarray
    v: np.ndarray

    @property
    def length(self) -> float:
        return float(self.theta[-1])

    def position(self, theta) -> np.ndarray:
        th = np.mod(theta, self.length)
        return np.stack([np.interp(th, self.theta, self.x), np.interp(th, self.theta, self.y)], axis=-1)

    def speed(self, theta):
        return np.interp(np.mod(theta, self.length), self.theta, self.v)

    def project(self, p) -> float:
        return self.track.project(p)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["theta", "x", "y", "v"])
        for row in zip(self.theta, self.x, self.y, self.v):
            writer.writerow([repr(float(c)) for c in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, track: Track) -> "RacingLine":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header != ["theta", "x", "y", "v"]:
            raise TrackFormatError(f"expected header theta,x,y,v, got {header!r}")
        data = np.array([[float(c) for c in r] for r in reader if r])
        return cls(track, *data.T)


def _forward_pass(cap, ds, accel):
    """Periodic forward pass: v[i+1]^2 <= v[i]^2 + 2 a ds[i]."""
    n = len(cap)
    v = cap.copy()
    start = int(np.argmin(cap))
    for k in range(1, n + 1):
        i = (start + k) % n
        j = (i - 1) % n
        v[i] = min(v[i], np.sqrt(v[j] ** 2 + 2.0 * accel * ds[j]))
    return v


def compute_racing_line(track: Track, limits: SpeedLimits) -> RacingLine:
    """Curvature-limited speed profile along the centerline.

    The lateral-acceleration cap is followed by a periodic forward pass
    (traction) and a periodic backward pass (braking); the profile is the
    pointwise minimum of both.
    """
    kappa = np.abs(track.vertex_curvature)
    with np.errstate(divide="ignore"):
        cap = np.where(kappa > 0, np.sqrt(limits.a_lat_max / np.maximum(kappa, 1e-300)), np.inf)
    cap = np.minimum(cap, limits.v_max)
    ds = np.diff(track.theta)
    fwd = _forward_pass(cap, ds, limits.a_lon_max)
    bwd = _forward_pass(cap[::-1], np.roll(ds[::-1], -1), limits.a_brake_max)[::-1]
    v = np.minimum(fwd, bwd)
    pts = track.centerline
    return RacingLine(track, track.theta.copy(), pts[:, 0].copy(), pts[:, 1].copy(), np.append(v, v[0]))
