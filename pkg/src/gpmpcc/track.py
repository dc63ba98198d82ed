"""Arc-length parameterized piecewise-linear track centerline."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

DEFAULT_SPACING = 0.5  # m
PROJECTION_WINDOW = 20.0  # m
THETA_FD_STEP = 1e-3  # m


class ProgressState(NamedTuple):
    theta: float
    vs: float


class TrackFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Track:
    """Centerline samples ``(theta, Xc, Yc, Phic)``.

    For closed tracks the last sample repeats the first position at
    ``theta == theta_max``; headings are unwrapped and continuous.
    """

    theta: np.ndarray
    Xc: np.ndarray
    Yc: np.ndarray
    Phic: np.ndarray
    R: float = 5.0
    closed: bool = True

    def __post_init__(self):
        if len(self.theta) < 2:
            raise TrackFormatError("a track needs at least two samples")
        if self.theta[0] != 0.0 or np.any(np.diff(self.theta) <= 0):
            raise TrackFormatError("arc length must start at 0 and increase strictly")
        if np.any(np.abs(np.diff(self.Phic)) >= math.pi):
            raise TrackFormatError("heading samples are not unwrapped")
        if self.closed and math.hypot(self.Xc[-1] - self.Xc[0], self.Yc[-1] - self.Yc[0]) > 1e-6:
            raise TrackFormatError("closed track does not end at its start")

    @property
    def theta_max(self) -> float:
        return float(self.theta[-1])

    @property
    def samples(self) -> np.ndarray:
        return np.column_stack([self.theta, self.Xc, self.Yc, self.Phic])

    def wrap(self, theta):
        theta = np.asarray(theta, dtype=float)
        if self.closed:
            return np.mod(theta, self.theta_max)
        return np.clip(theta, 0.0, self.theta_max)

    def with_width(self, R: float) -> "Track":
        return Track(self.theta, self.Xc, self.Yc, self.Phic, R=R, closed=self.closed)


def _densify(points: np.ndarray, spacing: float) -> tuple[np.ndarray, np.ndarray]:
    """Split segments longer than ``spacing``; returns points and source segment ids."""
    out, seg = [], []
    for i in range(len(points) - 1):
        p, q = points[i], points[i + 1]
        n = max(1, math.ceil(np.linalg.norm(q - p) / spacing - 1e-9))
        s = np.arange(n)[:, None] / n
        out.append(p + s * (q - p))
        seg.append(i + s[:, 0])
    out.append(points[-1:])
    seg.append(np.array([len(points) - 1.0]))
    return np.concatenate(out), np.concatenate(seg)


def _headings(points: np.ndarray, closed: bool) -> np.ndarray:
    d = np.diff(points, axis=0)
    seg = np.arctan2(d[:, 1], d[:, 0])
    seg = np.unwrap(seg)
    if closed:
        # vertex heading = mean of adjacent segment headings (wrapping the loop)
        prev = np.concatenate([[seg[-1] - _turn(seg)], seg])
        nxt = np.concatenate([seg, [seg[0] + _turn(seg)]])
        return np.unwrap(0.5 * (prev + nxt))
    head = np.empty(len(points))
    head[0], head[-1] = seg[0], seg[-1]
    head[1:-1] = 0.5 * (seg[:-1] + seg[1:])
    return head


def _turn(seg):
    # total heading change around a loop, rounded to whole turns
    return 2 * math.pi * round((seg[-1] - seg[0]) / (2 * math.pi))


def from_points(xy, heading=None, *, closed: bool | None = None, R: float = 5.0,
                spacing: float = DEFAULT_SPACING) -> Track:
    xy = np.asarray(xy, dtype=float)
    if xy.ndim != 2 or xy.shape[1] != 2:
        raise TrackFormatError("expected an (n, 2) array of centerline points")
    if closed is None:
        closed = len(xy) >= 3
    if len(xy) < (3 if closed else 2):
        raise TrackFormatError(f"too few points ({len(xy)}) for a {'closed' if closed else 'open'} track")
    if closed and np.linalg.norm(xy[-1] - xy[0]) <= 1e-9:
        xy = xy[:-1]
        heading = None if heading is None else np.asarray(heading)[:-1]
    pts = np.vstack([xy, xy[:1]]) if closed else xy
    dense, seg_pos = _densify(pts, spacing)
    chord = np.linalg.norm(np.diff(dense, axis=0), axis=1)
    if np.any(chord <= 0):
        raise TrackFormatError("repeated consecutive points make arc length non-monotone")
    theta = np.concatenate([[0.0], np.cumsum(chord)])
    if heading is None:
        phi = _headings(dense, closed)
    else:
        h = np.unwrap(np.asarray(heading, dtype=float))
        if closed:
            loop = np.unwrap(np.concatenate([h, h[:1]]))
            h = loop
        phi = np.interp(seg_pos, np.arange(len(h)), h)
    if closed:
        dense[-1] = dense[0]
    return Track(theta, dense[:, 0].copy(), dense[:, 1].copy(), phi, R=R, closed=closed)


def load_centerline(path, *, closed: bool | None = None, R: float = 5.0,
                    spacing: float = DEFAULT_SPACING) -> Track:
    """Load a ``x,y[,heading]`` CSV; header row and ``#`` comments are optional."""
    rows = []
    header_seen = False
    with open(path, newline="") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            cells = [c.strip() for c in line.split(",")]
            try:
                values = [float(c) for c in cells]
            except ValueError:
                if not rows and not header_seen:
                    header_seen = True
                    continue
                raise TrackFormatError(f"{path}:{lineno}: malformed row {raw.strip()!r}") from None
            if len(values) not in (2, 3) or (rows and len(values) != len(rows[0])):
                raise TrackFormatError(f"{path}:{lineno}: expected 2 or 3 columns consistently")
            rows.append(values)
    if not rows:
        raise TrackFormatError(f"{path}: no samples")
    data = np.array(rows)
    heading = data[:, 2] if data.shape[1] == 3 else None
    return from_points(data[:, :2], heading, closed=closed, R=R, spacing=spacing)


def save_centerline(track: Track, path) -> None:
    n = len(track.theta) - 1 if track.closed else len(track.theta)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "heading"])
        for i in range(n):
            w.writerow([repr(float(track.Xc[i])), repr(float(track.Yc[i])), repr(float(track.Phic[i]))])


# ---------------------------------------------------------------------------
# queries


def _locate(track: Track, theta):
    th = track.wrap(theta)
    i = np.clip(np.searchsorted(track.theta, th, side="right") - 1, 0, len(track.theta) - 2)
    t0, t1 = track.theta[i], track.theta[i + 1]
    return i, (th - t0) / (t1 - t0)


def query(track: Track, theta):
    """Centerline ``(Xc, Yc, Phic)`` at arc length ``theta`` (wrapped)."""
    i, s = _locate(track, theta)
    Xc = track.Xc[i] + s * (track.Xc[i + 1] - track.Xc[i])
    Yc = track.Yc[i] + s * (track.Yc[i + 1] - track.Yc[i])
    Phic = track.Phic[i] + s * (track.Phic[i + 1] - track.Phic[i])
    return Xc, Yc, Phic


def project(track: Track, X: float, Y: float, theta_hint: float | None = None,
            window: float = PROJECTION_WINDOW) -> float:
    """Arc length of the closest centerline point, searched near ``theta_hint``.

    Without a hint the whole track is scanned.
    """
    n_seg = len(track.theta) - 1
    if theta_hint is None:
        segs = np.arange(n_seg)
    else:
        lo = float(theta_hint) - window
        hi = float(theta_hint) + window
        if track.closed:
            span = np.arange(math.floor(lo / track.theta_max), math.floor(hi / track.theta_max) + 1)
            segs = []
            for lap in span:
                a = np.searchsorted(track.theta, lo - lap * track.theta_max, side="right") - 1
                b = np.searchsorted(track.theta, hi - lap * track.theta_max, side="left")
                segs.append(np.arange(max(a, 0), min(b, n_seg)))
            segs = np.unique(np.concatenate(segs))
        else:
            a = max(np.searchsorted(track.theta, lo, side="right") - 1, 0)
            b = min(np.searchsorted(track.theta, hi, side="left"), n_seg)
            segs = np.arange(a, max(b, a + 1))
    px, py = track.Xc[segs], track.Yc[segs]
    dx, dy = track.Xc[segs + 1] - px, track.Yc[segs + 1] - py
    s = np.clip(((X - px) * dx + (Y - py) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    d2 = (px + s * dx - X) ** 2 + (py + s * dy - Y) ** 2
    k = int(np.argmin(d2))
    i = segs[k]
    theta = track.theta[i] + s[k] * (track.theta[i + 1] - track.theta[i])
    return float(track.wrap(theta))


def contouring_errors(X, Y, track: Track, theta):
    """Lag and contouring errors ``(e_l, e_c)`` relative to the point at ``theta``."""
    Xc, Yc, Phi = query(track, theta)
    dx, dy = np.asarray(X) - Xc, np.asarray(Y) - Yc
    c, s = np.cos(Phi), np.sin(Phi)
    e_l = -c * dx - s * dy
    e_c = s * dx - c * dy
    return e_l, e_c


class ErrorLinearization(NamedTuple):
    """First-order models ``e(X, Y, theta) ~ e0 + grad . ([X, Y, theta] - p0)``."""

    e_l: np.ndarray
    e_c: np.ndarray
    grad_l: np.ndarray  # (..., 3): d/dX, d/dY, d/dtheta
    grad_c: np.ndarray


def linearize_errors(X, Y, track: Track, theta, h: float = THETA_FD_STEP) -> ErrorLinearization:
    X, Y, theta = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (X, Y, theta)))
    Xc, Yc, Phi = query(track, theta)
    c, s = np.cos(Phi), np.sin(Phi)
    e_l, e_c = contouring_errors(X, Y, track, theta)
    lp, cp = contouring_errors(X, Y, track, theta + h)
    lm, cm = contouring_errors(X, Y, track, theta - h)
    grad_l = np.stack([-c, -s, (lp - lm) / (2 * h)], axis=-1)
    grad_c = np.stack([s, -c, (cp - cm) / (2 * h)], axis=-1)
    return ErrorLinearization(e_l, e_c, grad_l, grad_c)


def curvature(track: Track) -> np.ndarray:
    """Heading rate along the centerline at each sample [1/m]."""
    return np.gradient(track.Phic, track.theta)


# ---------------------------------------------------------------------------
# benchmark layout


# corner vertices (m) and fillet radii (m); counter-clockwise
BENCHMARK_CORNERS = (
    (360.0, 0.0, 20.0),
    (360.0, 165.0, 25.0),
    (225.0, 225.0, 30.0),
    (225.0, 345.0, 20.0),
    (90.0, 345.0, 15.0),
    (90.0, 225.0, 15.0),
    (-60.0, 225.0, 25.0),
    (-105.0, 90.0, 30.0),
    (-90.0, 0.0, 20.0),
)


def rounded_polygon(corners, spacing: float = DEFAULT_SPACING) -> np.ndarray:
    """Closed path of straights joined by circular fillets.

    ``corners`` holds ``(x, y, radius)`` per vertex.  The path starts on the
    first edge (from the last vertex to the first), halfway along.
    """
    V = np.array([c[:2] for c in corners], dtype=float)
    radii = [float(c[2]) for c in corners]
    n = len(V)
    if n < 3:
        raise TrackFormatError("a rounded polygon needs at least three corners")
    fillets = []
    for i in range(n):
        d_in = V[i] - V[i - 1]
        d_out = V[(i + 1) % n] - V[i]
        d_in /= np.linalg.norm(d_in)
        d_out /= np.linalg.norm(d_out)
        turn = math.atan2(d_in[0] * d_out[1] - d_in[1] * d_out[0], d_in @ d_out)
        t = radii[i] * math.tan(abs(turn) / 2)
        fillets.append((V[i] - t * d_in, V[i] + t * d_out, turn, d_in, t))
    pts = []
    for i in range(n):
        p_in, p_out, turn, d_in, _ = fillets[i]
        side = math.copysign(1.0, turn)
        centre = p_in + radii[i] * side * np.array([-d_in[1], d_in[0]])
        a0 = math.atan2(p_in[1] - centre[1], p_in[0] - centre[0])
        m = max(2, math.ceil(radii[i] * abs(turn) / spacing))
        a = a0 + turn * np.arange(m) / m
        pts.append(centre + radii[i] * np.column_stack([np.cos(a), np.sin(a)]))
        q_in = fillets[(i + 1) % n][0]
        edge = q_in - p_out
        if edge @ (V[(i + 1) % n] - V[i]) <= 0:
            raise TrackFormatError(f"fillets at corners {i} and {(i + 1) % n} overlap")
        m = max(1, math.ceil(np.linalg.norm(edge) / spacing))
        pts.append(p_out + edge * (np.arange(m) / m)[:, None])
    xy = np.concatenate(pts)
    # rotate the start onto the middle of the closing edge
    mid = 0.5 * (fillets[-1][1] + fillets[0][0])
    start = int(np.argmin(np.linalg.norm(xy - mid, axis=1)))
    return np.roll(xy, -start, axis=0)


def benchmark_points(spacing: float = DEFAULT_SPACING) -> np.ndarray:
    """Closed benchmark layout (about 1.5 km): long straights into tight corners."""
    return rounded_polygon(BENCHMARK_CORNERS, spacing)


def benchmark_track(R: float = 4.5, spacing: float = DEFAULT_SPACING) -> Track:
    return from_points(benchmark_points(spacing), closed=True, R=R, spacing=spacing)
