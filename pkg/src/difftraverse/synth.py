"""Procedural "phantom X-ray" images with a content identity and four
independent, region-confined style attributes."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .numeric import make_rng

ATTRIBUTES = ("effusion", "device", "marker", "grid")
SIZE = 32
SPLITS = {"train": 1, "val": 2, "test": 3}

_SS = 4  # supersampling factor for anti-aliased shapes


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class ContentParams:
    body_center: tuple[float, float]
    body_axes: tuple[float, float]
    lung_offset: float
    identity_seed: int

    def validate(self) -> None:
        cx, cy = self.body_center
        ax, ay = self.body_axes
        for name, v, lo, hi in (
            ("body_center.x", cx, 0.35, 0.65),
            ("body_center.y", cy, 0.35, 0.65),
            ("body_axes.x", ax, 0.25, 0.35),
            ("body_axes.y", ay, 0.25, 0.35),
            ("lung_offset", self.lung_offset, 0.08, 0.14),
        ):
            if not lo <= v <= hi:
                raise SynthError(f"{name}={v} outside [{lo}, {hi}]")
        if not 0 <= self.identity_seed < 2**64:
            raise SynthError("identity_seed must be an unsigned 64-bit integer")

    def to_json(self) -> dict:
        return {
            "body_center": list(self.body_center),
            "body_axes": list(self.body_axes),
            "lung_offset": self.lung_offset,
            "identity_seed": self.identity_seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ContentParams":
        return cls(tuple(d["body_center"]), tuple(d["body_axes"]),
                   float(d["lung_offset"]), int(d["identity_seed"]))


@dataclass(frozen=True)
class AttributeFlags:
    effusion: bool = False
    device: bool = False
    marker: bool = False
    grid: bool = False
    severity: dict = field(default_factory=dict)

    @classmethod
    def of(cls, **severities: float) -> "AttributeFlags":
        """``AttributeFlags.of(device=0.8)`` sets device with severity 0.8."""
        return cls(**{a: a in severities for a in ATTRIBUTES}, severity=dict(severities))

    def present(self) -> list[str]:
        return [a for a in ATTRIBUTES if getattr(self, a)]

    def validate(self) -> None:
        if set(self.severity) != set(self.present()):
            raise SynthError("severity must be defined exactly for present attributes")
        for a, s in self.severity.items():
            if not 0.5 <= s <= 1.0:
                raise SynthError(f"severity[{a}]={s} outside [0.5, 1.0]")

    def vector(self) -> np.ndarray:
        return np.array([float(getattr(self, a)) for a in ATTRIBUTES])

    def to_json(self) -> dict:
        return {**{a: getattr(self, a) for a in ATTRIBUTES},
                "severity": {a: self.severity[a] for a in self.present()}}

    @classmethod
    def from_json(cls, d: dict) -> "AttributeFlags":
        return cls(**{a: bool(d[a]) for a in ATTRIBUTES},
                   severity={k: float(v) for k, v in d["severity"].items()})


@dataclass(frozen=True)
class Phantom:
    image: np.ndarray
    content: ContentParams
    attrs: AttributeFlags


@dataclass
class Dataset:
    phantoms: list[Phantom]
    split: str
    seed: int
    attr_probs: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.phantoms)

    def images(self) -> np.ndarray:
        return np.stack([p.image for p in self.phantoms])

    def attr_labels(self) -> np.ndarray:
        return np.stack([p.attrs.vector() for p in self.phantoms])

    def content_labels(self) -> np.ndarray:
        return np.array([content_quadrant(p.content) for p in self.phantoms], dtype=np.int64)

    def specs(self) -> list[frozenset]:
        return [frozenset(p.attrs.present()) for p in self.phantoms]


# --------------------------------------------------------------------------
# rendering


@lru_cache(maxsize=1)
def _subpixel_grid():
    # pixel-centre-relative subsample offsets; (x, y) in unit image coordinates
    c = (np.arange(SIZE * _SS) + 0.5) / (SIZE * _SS)
    return np.meshgrid(c, c)


@lru_cache(maxsize=1)
def _pixel_grid():
    c = (np.arange(SIZE) + 0.5) / SIZE
    return np.meshgrid(c, c)


def _downsample(a: np.ndarray) -> np.ndarray:
    return a.reshape(SIZE, _SS, SIZE, _SS).mean(axis=(1, 3))


def _ellipse_cover(cx, cy, ax, ay) -> np.ndarray:
    """Fractional pixel coverage of an axis-aligned ellipse."""
    x, y = _subpixel_grid()
    inside = ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 <= 1.0
    return _downsample(inside.astype(np.float64))


def _lungs(c: ContentParams):
    cx, cy = c.body_center
    lax, lay = 0.07, 0.45 * c.body_axes[1]
    lcy = cy - 0.02
    return [(cx - c.lung_offset, lcy, lax, lay), (cx + c.lung_offset, lcy, lax, lay)]


def _identity_uniforms(identity_seed: int, stream: int, n: int) -> np.ndarray:
    return make_rng(identity_seed, stream).uniform(n)


def render_base(content: ContentParams) -> np.ndarray:
    """Attribute-free anatomy, before clamping."""
    cx, cy = content.body_center
    ax, ay = content.body_axes
    body = _ellipse_cover(cx, cy, ax, ay)
    lungs = sum(_ellipse_cover(*l) for l in _lungs(content))
    x, y = _pixel_grid()
    gx, gy = _identity_uniforms(content.identity_seed, 0, 2) * 0.2 - 0.1
    shading = body * (gx * (x - cx) / ax + gy * (y - cy) / ay)
    return -1.0 + 0.8 * body - 0.5 * lungs + shading


def _polyline_distance(pts: np.ndarray) -> np.ndarray:
    x, y = _pixel_grid()
    best = np.full(x.shape, np.inf)
    for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
        dx, dy = x1 - x0, y1 - y0
        s = np.clip(((x - x0) * dx + (y - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
        best = np.minimum(best, np.hypot(x - (x0 + s * dx), y - (y0 + s * dy)))
    return best


def attribute_edit(content: ContentParams, attr: str, severity: float) -> np.ndarray:
    """Additive edit of one attribute; non-zero only inside its region mask."""
    cx, cy = content.body_center
    ax, ay = content.body_axes
    x, y = _pixel_grid()
    px = 1.0 / SIZE
    if attr == "effusion":
        out = np.zeros((SIZE, SIZE))
        for lx, ly, lax, lay in _lungs(content):
            top = ly + lay / 3.0
            ramp = np.clip((y - top) / (ly + lay - top), 0.0, 1.0)
            lower = (y >= top) & (np.abs(x - lx) <= lax + px) & (y <= ly + lay + px)
            cover = _ellipse_cover(lx, ly, lax, lay)
            out += np.where(lower, cover * (0.25 + 0.75 * ramp), 0.0)
        return severity * 0.8 * np.clip(out, 0.0, 1.0)
    if attr == "device":
        # lead from the upper-left chest to the mediastinum; stays above the
        # lower lung thirds (effusion) and away from the upper-right marker
        u = _identity_uniforms(content.identity_seed, 1, 3) * 0.2 - 0.1
        pts = np.array([
            [cx - 0.65 * ax, cy + (u[0] - 0.55) * ay],
            [cx + 0.5 * u[1] * ax, cy - 0.35 * ay],
            [cx + 0.5 * u[2] * ax, cy - 0.05],
        ])
        line = np.clip(1.0 - _polyline_distance(pts) / px, 0.0, 1.0)
        return severity * 0.9 * line
    if attr == "marker":
        mx, my = cx + 0.65 * ax, cy - 0.65 * ay
        r = 2.0 * px
        return severity * 0.9 * _ellipse_cover(mx, my, r, r)
    if attr == "grid":
        out = np.zeros((SIZE, SIZE))
        out[:, 1:SIZE // 4:4] = 1.0
        return severity * 0.5 * out
    raise SynthError(f"unknown attribute {attr!r}")


def attribute_mask(content: ContentParams, attr: str) -> np.ndarray:
    return attribute_edit(content, attr, 1.0) > 0.0


def render_phantom(content: ContentParams, attrs: AttributeFlags) -> np.ndarray:
    content.validate()
    attrs.validate()
    img = render_base(content)
    for a in attrs.present():
        img = img + attribute_edit(content, a, attrs.severity[a])
    return np.clip(img, -1.0, 1.0)


def content_quadrant(content: ContentParams) -> int:
    cx, cy = content.body_center
    return int(cx >= 0.5) + 2 * int(cy >= 0.5)


# --------------------------------------------------------------------------
# datasets


def sample_phantom(seed: int, stream_id: int, attr_probs: dict) -> Phantom:
    rng = make_rng(seed, stream_id)
    u = rng.uniform(6)
    content = ContentParams(
        body_center=(0.35 + 0.3 * u[0], 0.35 + 0.3 * u[1]),
        body_axes=(0.25 + 0.1 * u[2], 0.25 + 0.1 * u[3]),
        lung_offset=0.08 + 0.06 * u[4],
        identity_seed=int(u[5] * 2**53),
    )
    draws = rng.uniform(len(ATTRIBUTES))
    sev = 0.5 + 0.5 * rng.uniform(len(ATTRIBUTES))
    present = {a: float(sev[i]) for i, a in enumerate(ATTRIBUTES)
               if draws[i] < attr_probs.get(a, 0.0)}
    attrs = AttributeFlags.of(**present)
    return Phantom(render_phantom(content, attrs), content, attrs)


def sample_dataset(n: int, seed: int, attr_probs: dict, split: str = "train") -> Dataset:
    if n < 1:
        raise SynthError("n must be at least 1")
    if split not in SPLITS:
        raise SynthError(f"unknown split {split!r}")
    for a, p in attr_probs.items():
        if a not in ATTRIBUTES:
            raise SynthError(f"unknown attribute {a!r}")
        if not 0.0 <= p <= 1.0:
            raise SynthError(f"probability for {a} outside [0, 1]")
    base = SPLITS[split] << 40
    phantoms = [sample_phantom(seed, base | i, attr_probs) for i in range(n)]
    return Dataset(phantoms, split, seed, dict(attr_probs))


def to_pgm_bytes(image: np.ndarray) -> bytes:
    v = np.round((np.clip(image, -1, 1) + 1.0) / 2.0 * 255.0).astype(np.uint8)
    h, w = v.shape
    return b"P5\n%d %d\n255\n" % (w, h) + v.tobytes()


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise SynthError(f"{path}: not an 8-bit P5 PGM")
    w, h = int(parts[1]), int(parts[2])
    raw = np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)
    return raw.astype(np.float64) / 255.0 * 2.0 - 1.0


def save_dataset(ds: Dataset, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    records = []
    for i, p in enumerate(ds.phantoms):
        name = f"{i:06d}.pgm"
        (d / name).write_bytes(to_pgm_bytes(p.image))
        records.append({"file": name, "content": p.content.to_json(), "attrs": p.attrs.to_json(),
                        "content_class": content_quadrant(p.content)})
    index = {"split": ds.split, "seed": ds.seed, "attr_probs": ds.attr_probs,
             "size": [SIZE, SIZE], "samples": records}
    (d / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
    return d


def load_dataset(directory) -> Dataset:
    """Re-renders every sample from the index (images are exact, not the 8-bit PGMs)."""
    path = Path(directory) / "index.json"
    if not path.exists():
        raise SynthError(f"{path}: dataset index not found")
    index = json.loads(path.read_text())
    phantoms = []
    for rec in index["samples"]:
        content = ContentParams.from_json(rec["content"])
        attrs = AttributeFlags.from_json(rec["attrs"])
        phantoms.append(Phantom(render_phantom(content, attrs), content, attrs))
    return Dataset(phantoms, index["split"], index["seed"], index["attr_probs"])
