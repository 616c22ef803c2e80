"""Synthetic data generators for the three experiment families, plus CSV
ingestion for externally supplied event data."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ConfigError


@dataclass
class EventTable:
    """Continuous-time event data: rows of (t in [0,1], x in R^D)."""

    t: np.ndarray
    x: np.ndarray
    provenance: str
    splits: dict
    t_range: tuple = (0.0, 1.0)

    @property
    def dim(self):
        return self.x.shape[1]

    def subset(self, name):
        idx = self.splits[name]
        return self.t[idx], self.x[idx]

    def __len__(self):
        return len(self.t)


@dataclass
class SnapshotDataset:
    """Samples observed only at a few time values, split per snapshot."""

    times: np.ndarray
    train: list
    val: list
    test: list
    provenance: str = ""

    @property
    def dim(self):
        return self.train[0].shape[1]

    def snapshots(self, split="train"):
        data = getattr(self, split)
        return [(float(t), X) for t, X in zip(self.times, data)]


@dataclass
class SocEnvironment:
    """Obstacle-avoidance control problem between two Gaussian endpoints."""

    obstacles: list                      # (center (2,), radius) pairs
    q0_mean: np.ndarray
    q0_std: float
    q1_mean: np.ndarray
    q1_std: float
    arena: tuple = ((-2.0, -2.0), (2.0, 2.0))
    base_drift: object = None            # callable (t, x)->(n,D); None means 0
    sigma_t: float = 1.0                 # control-cost weight 1/(2 sigma^2)
    eta: float = 0.1                     # mean-field entropy weight
    obstacle_weight: float = 1.0

    def __post_init__(self):
        for c, r in self.obstacles:
            if r <= 0:
                raise ConfigError(f"obstacle radius must be positive, got {r}")

    def sample_q0(self, n, rng):
        return self.q0_mean[None, :] + self.q0_std * rng.standard_normal((n, 2))

    def sample_q1(self, n, rng):
        return self.q1_mean[None, :] + self.q1_std * rng.standard_normal((n, 2))

    def violations(self, points):
        """Fraction of points strictly inside any obstacle."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        inside = np.zeros(len(points), dtype=bool)
        for c, r in self.obstacles:
            d2 = ((points - np.asarray(c)[None, :]) ** 2).sum(1)
            inside |= d2 < r * r
        return float(inside.mean())


def _make_splits(n, rng, ratios=(0.70, 0.15, 0.15)):
    perm = rng.permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train:n_train + n_val]),
        "test": np.sort(perm[n_train + n_val:]),
    }


def gen_pinwheel(n, arms=5, rotation_rate=np.pi, noise=0.3, seed=0):
    """2D pinwheel whose arm phase rotates linearly with t.

    Arms are radial Gaussian blobs swept into spirals; rotation_rate is the
    total phase advance over t in [0, 1].
    """
    if arms < 2:
        raise ConfigError(f"pinwheel needs at least 2 arms, got {arms}")
    rng = np.random.default_rng(seed)
    t = rng.random(n)
    arm = rng.integers(0, arms, size=n)
    radial = 1.0 + 0.25 * noise * rng.standard_normal(n)
    swirl = 0.8 * (radial - 1.0)
    theta = (2.0 * np.pi / arms) * arm + 0.35 * noise * rng.standard_normal(n)
    theta = theta + swirl + rotation_rate * t
    # overall scale keeps the finite-sample W2 floor between time slices of a
    # static pinwheel well under 0.05 at n=512
    x = 0.12 * np.stack([radial * np.cos(theta), radial * np.sin(theta)], axis=1)
    return EventTable(t=t, x=x, provenance=f"pinwheel(arms={arms},seed={seed})",
                      splits=_make_splits(n, rng))


def default_snapshot_spec(dim=5, n_snapshots=5):
    """Gaussian blobs drifting along a fixed direction with mild curvature."""
    rng = np.random.default_rng(12345)
    direction = rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)
    bend = rng.standard_normal(dim) * 0.4
    times = np.linspace(0.0, 1.0, n_snapshots)
    spec = []
    for tt in times:
        mean = 2.5 * (2.0 * tt - 1.0) * direction + np.sin(np.pi * tt) * bend
        spec.append((float(tt), [(1.0, mean, np.full(dim, 0.25))]))
    return spec


def gen_snapshots(spec, n_per_snapshot, seed=0):
    """Draw i.i.d. Gaussian-mixture samples at each snapshot time.

    spec: list of (t_i, components) with components = (weight, mean, var_diag).
    """
    if len(spec) < 2:
        raise ConfigError("need at least 2 snapshots")
    times = np.array([s[0] for s in spec], dtype=np.float64)
    if np.any(np.diff(times) <= 0):
        raise ConfigError("snapshot times must be strictly increasing")
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for _, comps in spec:
        weights = np.array([c[0] for c in comps], dtype=np.float64)
        weights = weights / weights.sum()
        means = [np.asarray(c[1], dtype=np.float64) for c in comps]
        variances = [np.asarray(c[2], dtype=np.float64) for c in comps]
        dim = means[0].size
        pick = rng.choice(len(comps), size=n_per_snapshot, p=weights)
        X = np.empty((n_per_snapshot, dim))
        for k in range(len(comps)):
            rows = np.nonzero(pick == k)[0]
            if rows.size:
                X[rows] = means[k][None, :] + np.sqrt(variances[k])[None, :] * \
                    rng.standard_normal((rows.size, dim))
        splits = _make_splits(n_per_snapshot, rng)
        train.append(X[splits["train"]])
        val.append(X[splits["val"]])
        test.append(X[splits["test"]])
    return SnapshotDataset(times=times, train=train, val=val, test=test,
                           provenance=f"gaussian_snapshots(seed={seed})")


def gen_obstacle_env(seed=0, n_obstacles=3, radius_range=(0.25, 0.45),
                     arena=((-2.0, -2.0), (2.0, 2.0)),
                     q0=((-1.4, 0.0), 0.15), q1=((1.4, 0.0), 0.15),
                     sigma_t=1.0, eta=0.1, obstacle_weight=1.0, margin=0.25):
    """Random circular obstacles between two Gaussian endpoints.

    Centers are rejection-sampled so no obstacle covers either endpoint mean
    (with a safety margin); 1000 failed attempts abort.
    """
    lo, hi = np.asarray(arena[0], float), np.asarray(arena[1], float)
    q0_mean = np.asarray(q0[0], dtype=np.float64)
    q1_mean = np.asarray(q1[0], dtype=np.float64)
    if np.any(q0_mean < lo) or np.any(q0_mean > hi) or \
       np.any(q1_mean < lo) or np.any(q1_mean > hi):
        raise ConfigError("arena must contain both endpoint means")
    if radius_range[0] <= 0 or radius_range[1] < radius_range[0]:
        raise ConfigError(f"invalid radius range {radius_range}")
    rng = np.random.default_rng(seed)
    # keep centers away from the walls so obstacles stay inside the arena
    span = hi - lo
    c_lo = lo + 0.25 * span
    c_hi = hi - 0.25 * span
    obstacles = []
    attempts = 0
    while len(obstacles) < n_obstacles:
        attempts += 1
        if attempts > 1000:
            raise ConfigError("arena too crowded: could not place obstacles "
                              "after 1000 attempts")
        c = rng.uniform(c_lo, c_hi)
        r = rng.uniform(*radius_range)
        if np.linalg.norm(c - q0_mean) <= r + margin:
            continue
        if np.linalg.norm(c - q1_mean) <= r + margin:
            continue
        obstacles.append((c, float(r)))
    return SocEnvironment(obstacles=obstacles, q0_mean=q0_mean, q0_std=float(q0[1]),
                          q1_mean=q1_mean, q1_std=float(q1[1]), arena=arena,
                          sigma_t=sigma_t, eta=eta, obstacle_weight=obstacle_weight)


# ---------------------------------------------------------------------------
# CSV ingestion

def load_events_csv(path, seed=0):
    """Parse "t,x1,...,xD" rows; min-max normalize t to [0,1]; 70/15/15 split."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such file: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if header[0] != "t" or any(h != f"x{i+1}" for i, h in enumerate(header[1:])):
            raise ConfigError(f"{path}: header must be t,x1,...,xD, got {header}")
        dim = len(header) - 1
        if dim < 1:
            raise ConfigError(f"{path}: no coordinate columns")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 1:
                raise ValueError(f"{path}:{lineno}: expected {dim + 1} fields, "
                                 f"got {len(row)}")
            try:
                vals = [float(v) for v in row]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric value") from None
            if not all(np.isfinite(vals)):
                raise ValueError(f"{path}:{lineno}: non-finite value")
            rows.append(vals)
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    data = np.array(rows, dtype=np.float64)
    t_raw = data[:, 0]
    t_min, t_max = float(t_raw.min()), float(t_raw.max())
    t = (t_raw - t_min) / (t_max - t_min) if t_max > t_min else np.zeros_like(t_raw)
    rng = np.random.default_rng(seed)
    return EventTable(t=t, x=data[:, 1:], provenance=str(path),
                      splits=_make_splits(len(rows), rng), t_range=(t_min, t_max))


def save_events_csv(path, table):
    """Write an EventTable back out with t in its original range."""
    t_min, t_max = table.t_range
    t_raw = table.t * (t_max - t_min) + t_min
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"x{i+1}" for i in range(table.dim)])
        for ti, xi in zip(t_raw, table.x):
            writer.writerow([repr(float(ti))] + [repr(float(v)) for v in xi])
