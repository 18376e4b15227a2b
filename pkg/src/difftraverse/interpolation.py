"""Bezier curves through trajectory latents and uniform sampling along them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .trajectory import ArchiveError, Trajectory, read_archive, write_archive

DEFAULT_CONTROL_POINTS = 7
DEFAULT_SAMPLES = 50


class InterpolationError(ValueError):
    pass


def binomial(n: int, k: int) -> float:
    """Multiplicative binomial coefficient, exact in float for n <= 64."""
    k = min(k, n - k)
    out = 1.0
    for j in range(1, k + 1):
        out = out * (n - k + j) / j
    return out


def bernstein_weight(n: int, i: int, u: float) -> float:
    if n < 0 or not 0 <= i <= n:
        raise InterpolationError(f"need 0 <= i <= n, got i={i}, n={n}")
    if not 0.0 <= u <= 1.0:
        raise InterpolationError(f"u={u} outside [0, 1]")
    return binomial(n, i) * (1.0 - u) ** (n - i) * u ** i


@dataclass(frozen=True)
class BezierCurve:
    control_points: np.ndarray  # (n+1, *latent_shape)

    def __post_init__(self):
        if np.ndim(self.control_points) < 2 or len(self.control_points) < 2:
            raise InterpolationError("a Bezier curve needs at least two control points")

    @property
    def degree(self) -> int:
        return len(self.control_points) - 1


def bezier_point(curve: BezierCurve, u: float) -> np.ndarray:
    n = curve.degree
    w = np.array([bernstein_weight(n, i, u) for i in range(n + 1)])
    return np.tensordot(w, curve.control_points, axes=1)


@dataclass
class CurveSamples:
    u: np.ndarray
    latents: np.ndarray  # (m, *latent_shape)
    control_indices: tuple = ()

    def __len__(self) -> int:
        return len(self.u)


def sample_curve(curve: BezierCurve, m: int = DEFAULT_SAMPLES) -> CurveSamples:
    if m < 2:
        raise InterpolationError("need at least two samples")
    u = np.arange(m) / (m - 1)
    return CurveSamples(u, np.stack([bezier_point(curve, float(v)) for v in u]))


def control_indices(n_points: int, n_ctrl: int) -> list[int]:
    """Uniformly spaced indices over ``n_points`` with both ends pinned."""
    if n_ctrl < 2 or n_points < n_ctrl:
        raise InterpolationError(f"cannot pick {n_ctrl} control points from {n_points}")
    return [int(round(k * (n_points - 1) / (n_ctrl - 1))) for k in range(n_ctrl)]


def interpolate_trajectory(traj: Trajectory, n_ctrl: int = DEFAULT_CONTROL_POINTS,
                           m: int = DEFAULT_SAMPLES) -> CurveSamples:
    """Fit a degree ``n_ctrl-1`` curve over [neutral, ascending-tau points] and sample it."""
    pts = traj.latents()
    if len(pts) < n_ctrl:
        raise InterpolationError(f"trajectory has {len(pts)} points, need {n_ctrl}")
    idx = control_indices(len(pts), n_ctrl)
    out = sample_curve(BezierCurve(pts[idx]), m)
    out.control_indices = tuple(idx)
    return out


def save_samples(samples: CurveSamples, traj: Trajectory, path):
    manifest = {
        "interpolated": True,
        **traj.plan.to_json(),
        "schedule": traj.provenance.get("schedule"),
        "model_checkpoint_sha256": traj.provenance.get("model_hash", ""),
        "x_T_sha256": traj.provenance.get("x_T_sha256"),
        "control_indices": list(samples.control_indices),
        "control_taus": [([0] + traj.taus)[i] for i in samples.control_indices],
        "m": len(samples),
        "u": [float(v) for v in samples.u],
    }
    return write_archive(path, manifest, samples.latents)


def load_samples(path) -> tuple[CurveSamples, dict]:
    manifest, records = read_archive(path)
    if not manifest.get("interpolated"):
        raise ArchiveError("interpolated", "archive holds a trajectory, not interpolated samples")
    if manifest["m"] != records.shape[0] or len(manifest["u"]) != records.shape[0]:
        raise ArchiveError("m", f"manifest m={manifest['m']} vs {records.shape[0]} records")
    return CurveSamples(np.array(manifest["u"]), records,
                        tuple(manifest["control_indices"])), manifest
