"""Disentanglement metrics: classifier flip rate along a trajectory (CFRT),
pairwise cosine similarity of trajectory directions, a classifier-feature
perceptual distance, and PCA projection for scatter reports."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .models import ClassifierModel, classify_batch, features
from .synth import ATTRIBUTES
from .trajectory import DEFAULT_SWAP_SET, Trajectory

UNDEFINED_NORM = 1e-12
DEFAULT_CFRT_TAU = 25


class MetricError(ValueError):
    pass


# --------------------------------------------------------------------------
# CFRT


@dataclass
class Predictions:
    """Classifier outputs for a batch: content probabilities and one column per attribute head."""

    content: np.ndarray  # (N, 4)
    attrs: dict  # name -> (N,)

    def __len__(self) -> int:
        return len(self.content)


def predict(classifier: ClassifierModel, images) -> Predictions:
    images = np.asarray(images, dtype=np.float64)
    cp, ap = classify_batch(classifier, images)
    return Predictions(cp, {a: ap[:, i] for i, a in enumerate(ATTRIBUTES)})


@dataclass
class CounterfactualSet:
    neutral: np.ndarray  # (N, 32, 32)
    counterfactuals: dict  # attribute -> list of images, one per neutral sample
    content_labels: np.ndarray | None = None
    attr_labels: np.ndarray | None = None

    @property
    def attributes(self) -> list[str]:
        return list(self.counterfactuals)

    def validate(self) -> None:
        n = len(self.neutral)
        for a, imgs in self.counterfactuals.items():
            for i in range(n):
                if i >= len(imgs) or imgs[i] is None:
                    raise MetricError(f"sample {i} has no counterfactual for attribute {a!r}")
                if np.shape(imgs[i]) != np.shape(self.neutral[i]):
                    raise MetricError(f"sample {i}, attribute {a!r}: shape mismatch")


@dataclass
class CfrtReport:
    attribute: str
    score: float
    n: int
    samples: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"attribute": self.attribute, "score": self.score, "n": self.n,
                "samples": self.samples}


def cfrt_from_predictions(neutral: Predictions, counterfactuals: dict, A: str,
                          flip_threshold: float = 0.5) -> CfrtReport:
    """CFRT for attribute ``A`` given precomputed predictions.

    ``counterfactuals`` maps every attribute in the set to the predictions on
    its counterfactuals. An empty set of other attributes contributes a max of 0.
    """
    if A not in counterfactuals:
        raise MetricError(f"no counterfactuals for attribute {A!r}")
    fx = neutral.attrs[A]
    cf_a = counterfactuals[A]
    delta = np.abs(fx - cf_a.attrs[A])
    others = [j for j in counterfactuals if j != A]
    if others:
        max_other = np.max([np.abs(fx - counterfactuals[j].attrs[A]) for j in others], axis=0)
    else:
        max_other = np.zeros_like(delta)
    flip_ok = delta > max_other
    content_ok = neutral.content.argmax(axis=1) == cf_a.content.argmax(axis=1)
    kept = [k for k in neutral.attrs if k != A]
    others_ok = np.ones(len(neutral), dtype=bool)
    changed: list[list[str]] = [[] for _ in range(len(neutral))]
    for k in kept:
        same = (neutral.attrs[k] >= flip_threshold) == (cf_a.attrs[k] >= flip_threshold)
        others_ok &= same
        for i in np.flatnonzero(~same):
            changed[i].append(k)
    passed = flip_ok & content_ok & others_ok
    rows = []
    for i in range(len(neutral)):
        failed = [name for name, ok in (("flip", flip_ok[i]), ("content", content_ok[i]),
                                        ("other_attributes", others_ok[i])) if not ok]
        rows.append({"sample": i, "delta_target": float(delta[i]),
                     "max_delta_other": float(max_other[i]), "passed": bool(passed[i]),
                     "failed": failed, "changed_attributes": changed[i]})
    return CfrtReport(A, float(np.mean(passed)) if len(passed) else 0.0, len(passed), rows)


def cfrt(cf_set: CounterfactualSet, classifier: ClassifierModel, A: str,
         flip_threshold: float = 0.5) -> CfrtReport:
    cf_set.validate()
    if A not in cf_set.counterfactuals:
        raise MetricError(f"counterfactual set has no attribute {A!r}")
    neutral = predict(classifier, cf_set.neutral)
    cfs = {a: predict(classifier, np.stack(imgs)) for a, imgs in cf_set.counterfactuals.items()}
    return cfrt_from_predictions(neutral, cfs, A, flip_threshold)


def _concat(preds: list) -> Predictions:
    return Predictions(np.concatenate([p.content for p in preds]),
                       {a: np.concatenate([p.attrs[a] for p in preds]) for a in preds[0].attrs})


def pooled_cfrt(neutral: Predictions, counterfactuals_by_position: list, A: str,
                flip_threshold: float = 0.5) -> CfrtReport:
    """CFRT pooled over several counterfactual positions (e.g. curve samples).

    ``counterfactuals_by_position[k]`` maps each attribute to its predictions
    at position ``k``; every (start sample, position) pair is one indicator.
    """
    if not counterfactuals_by_position:
        raise MetricError("no counterfactual positions")
    k = len(counterfactuals_by_position)
    attrs = list(counterfactuals_by_position[0])
    pooled = {a: _concat([c[a] for c in counterfactuals_by_position]) for a in attrs}
    rep = cfrt_from_predictions(_concat([neutral] * k), pooled, A, flip_threshold)
    n = len(neutral)
    for row in rep.samples:
        pos, row["sample"] = divmod(row["sample"], n)
        row["position"] = pos
    return rep


def counterfactual_set(trajectories: dict, tau: int = DEFAULT_CFRT_TAU) -> CounterfactualSet:
    """Assemble counterfactuals from per-attribute trajectory lists sharing noise seeds.

    ``trajectories[a][i]`` is the trajectory for attribute ``a`` and start
    sample ``i``; the neutral image is taken from the first attribute.
    """
    attrs = list(trajectories)
    if not attrs:
        raise MetricError("no trajectories given")
    first = trajectories[attrs[0]]
    neutral = np.stack([t.neutral.z0 for t in first])
    cfs = {}
    for a in attrs:
        if len(trajectories[a]) != len(first):
            raise MetricError(f"attribute {a!r} has {len(trajectories[a])} trajectories, "
                              f"expected {len(first)}")
        for i, (t, ref) in enumerate(zip(trajectories[a], first)):
            if t.plan.noise_seed != ref.plan.noise_seed or not np.array_equal(
                    t.neutral.z0, ref.neutral.z0):
                raise MetricError(f"sample {i}: attribute {a!r} trajectory has a different start")
        cfs[a] = [t.point(tau).z0 for t in trajectories[a]]
    return CounterfactualSet(neutral, cfs)


# --------------------------------------------------------------------------
# cosine matrix


@dataclass
class CosineMatrix:
    grid: tuple
    matrix: np.ndarray  # NaN where undefined
    undefined: np.ndarray  # bool mask

    def to_json(self) -> dict:
        return {"grid": list(self.grid),
                "matrix": [[None if np.isnan(v) else float(v) for v in row] for row in self.matrix],
                "undefined": self.undefined.tolist()}


def cosine_from_deltas(deltas: np.ndarray, grid=None) -> CosineMatrix:
    d = np.asarray(deltas, dtype=np.float64).reshape(len(deltas), -1)
    norms = np.linalg.norm(d, axis=1)
    bad = norms < UNDEFINED_NORM
    safe = np.where(bad, 1.0, norms)
    unit = d / safe[:, None]
    m = np.clip(unit @ unit.T, -1.0, 1.0)
    m = 0.5 * (m + m.T)
    np.fill_diagonal(m, 1.0)
    undefined = bad[:, None] | bad[None, :]
    m[undefined] = np.nan
    return CosineMatrix(tuple(grid) if grid is not None else tuple(range(len(d))), m, undefined)


def cosine_matrix(traj: Trajectory, grid=DEFAULT_SWAP_SET) -> CosineMatrix:
    z_orig = traj.neutral.z0
    missing = [t for t in grid if t not in traj.taus]
    if missing:
        raise MetricError(f"trajectory lacks grid timesteps {missing}")
    return cosine_from_deltas(np.stack([traj.point(t).z0 - z_orig for t in grid]), grid)


# --------------------------------------------------------------------------
# perceptual distance


def _layer_distance(fa: list, fb: list) -> float:
    return float(np.mean([np.linalg.norm(a - b) for a, b in zip(fa, fb)]))


def perceptual_distance(a: np.ndarray, b: np.ndarray, classifier: ClassifierModel) -> float:
    """Mean L2 distance between unit-normalized hidden activations (not LPIPS)."""
    if np.shape(a) != np.shape(b):
        raise MetricError(f"shape mismatch {np.shape(a)} vs {np.shape(b)}")
    return _layer_distance(features(classifier, a), features(classifier, b))


# --------------------------------------------------------------------------
# PCA


@dataclass
class Projection:
    coords: np.ndarray  # (n, k)
    components: np.ndarray  # (k, d)
    explained_variance: np.ndarray  # (k,)
    mean: np.ndarray

    def reconstruction_error(self, latents) -> float:
        x = np.asarray(latents, dtype=np.float64).reshape(len(latents), -1) - self.mean
        recon = self.coords @ self.components
        return float(np.sum((x - recon) ** 2))


def pca_project(latents, k: int = 2) -> Projection:
    x = np.asarray(latents, dtype=np.float64)
    x = x.reshape(len(x), -1)
    if len(x) < k + 1:
        raise MetricError(f"need at least {k + 1} latents for a {k}-d projection, got {len(x)}")
    mean = x.mean(axis=0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:k].copy()
    for c in comps:
        if c[np.argmax(np.abs(c))] < 0:
            c *= -1.0
    var = (s[:k] ** 2) / max(len(x) - 1, 1)
    return Projection(xc @ comps.T, comps, var, mean)


# --------------------------------------------------------------------------
# per-trajectory evaluation


@dataclass
class PerceptualReport:
    style_attr: str
    positions: list  # tau values or curve parameters
    distances: list
    style_probs: list
    spearman: float | None
    spearman_defined: bool
    metric: str = "feature_perceptual_distance"

    def __len__(self) -> int:
        return len(self.positions)

    def to_json(self) -> dict:
        return {"metric": self.metric, "style_attr": self.style_attr,
                "positions": list(self.positions), "distances": list(self.distances),
                "style_probs": list(self.style_probs), "spearman": self.spearman,
                "spearman_defined": self.spearman_defined}


def spearman(x, y) -> float | None:
    """Spearman rank correlation; ``None`` when either input is constant."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if len(x) < 2 or np.all(x == x[0]) or np.all(y == y[0]):
        return None
    return float(stats.spearmanr(x, y).statistic)


def evaluate_points(positions, latents, origin, classifier: ClassifierModel,
                    style_attr: str) -> PerceptualReport:
    if style_attr not in ATTRIBUTES:
        raise MetricError(f"unknown attribute {style_attr!r}")
    f0 = features(classifier, origin)
    dists = [_layer_distance(f0, features(classifier, z)) for z in latents]
    probs = predict(classifier, np.stack(latents)).attrs[style_attr]
    rho = spearman(positions, probs)
    return PerceptualReport(style_attr, [float(p) for p in positions], dists,
                            [float(p) for p in probs], rho, rho is not None)


def evaluate_trajectory(traj: Trajectory, classifier: ClassifierModel, style_attr: str,
                        samples=None) -> PerceptualReport:
    """Distances to the neutral latent and style probability along a trajectory.

    With ``samples`` (interpolated curve samples) the curve parameter replaces tau.
    """
    intended = set(traj.plan.style_spec) - set(traj.plan.neutral_spec)
    if intended and style_attr not in intended:
        raise MetricError(f"style attribute {style_attr!r} does not match trajectory style "
                          f"{sorted(traj.plan.style_spec)}")
    if samples is None:
        positions, latents = [0] + traj.taus, list(traj.latents())
    else:
        positions, latents = list(samples.u), list(samples.latents)
    return evaluate_points(positions, latents, traj.neutral.z0, classifier, style_attr)
