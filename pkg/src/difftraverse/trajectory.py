"""Embedding-swap traversal: regenerate from one shared x_T with the style
embedding taking over for the last ``tau`` reverse steps, for each ``tau``
in a swap set. Includes the LTRJ1 archive format."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import NoiseSchedule, generate
from .numeric import make_rng
from .prompting import EmbeddingTable, attribute_spec, embed, format_prompt, parse_prompt
from .synth import SIZE

DEFAULT_SWAP_SET = tuple(range(5, 50, 5))
LATENT_MAGIC = b"LTRJ1"
ARCHIVE_VERSION = 1
_NOISE_STREAM = 0x5EED


class TrajectoryError(ValueError):
    pass


class ArchiveError(ValueError):
    """Archive validation failure; ``field`` names the offending item."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class SwapPlan:
    neutral_spec: frozenset = frozenset()
    style_spec: frozenset = frozenset()
    swap_set: tuple = DEFAULT_SWAP_SET
    noise_seed: int = 0
    allow_degenerate: bool = False

    def validate(self, T: int) -> None:
        attribute_spec(self.neutral_spec)
        attribute_spec(self.style_spec)
        taus = list(self.swap_set)
        if not taus:
            raise TrajectoryError("swap_set is empty")
        if any(not 0 <= t <= T for t in taus):
            raise TrajectoryError(f"swap_set entries must lie in [0, {T}]")
        if any(b <= a for a, b in zip(taus, taus[1:])):
            raise TrajectoryError("swap_set must be strictly increasing")
        if self.style_spec == self.neutral_spec and not self.allow_degenerate:
            raise TrajectoryError("style_spec equals neutral_spec (pass allow_degenerate=True)")

    def to_json(self) -> dict:
        return {"neutral_prompt": format_prompt(self.neutral_spec),
                "style_prompt": format_prompt(self.style_spec),
                "swap_set": list(self.swap_set), "noise_seed": self.noise_seed}


@dataclass(frozen=True)
class TrajectoryPoint:
    tau: int
    z0: np.ndarray
    trace_digest: str


@dataclass
class Trajectory:
    neutral: TrajectoryPoint
    points: list
    plan: SwapPlan
    provenance: dict = field(default_factory=dict)

    @property
    def taus(self) -> list[int]:
        return [p.tau for p in self.points]

    def latents(self) -> np.ndarray:
        """Neutral latent first, then points by ascending tau."""
        return np.stack([self.neutral.z0] + [p.z0 for p in self.points])

    def point(self, tau: int) -> TrajectoryPoint:
        for p in self.points:
            if p.tau == tau:
                return p
        raise TrajectoryError(f"trajectory has no point at tau={tau}")

    def equals(self, other: "Trajectory") -> bool:
        return (self.plan.to_json() == other.plan.to_json()
                and self.provenance == other.provenance
                and self.taus == other.taus
                and [p.trace_digest for p in self.points] == [p.trace_digest for p in other.points]
                and self.neutral.trace_digest == other.neutral.trace_digest
                and np.array_equal(self.latents(), other.latents()))


def embedding_schedule(e: np.ndarray, e_prime: np.ndarray, tau: int, T: int) -> list:
    """Entry ``t-1`` conditions reverse step ``t``; ``e_prime`` for ``t <= tau``."""
    if not 0 <= tau <= T:
        raise TrajectoryError(f"tau={tau} outside [0, {T}]")
    return [e_prime if t <= tau else e for t in range(1, T + 1)]


def draw_x_T(noise_seed: int) -> np.ndarray:
    return make_rng(noise_seed, _NOISE_STREAM).normal((SIZE, SIZE))


def array_digest(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype="<f8").tobytes()).hexdigest()


def _trace_digest(trace) -> str:
    h = hashlib.sha256()
    for x in trace.latents:
        h.update(np.ascontiguousarray(x, dtype="<f8").tobytes())
    return h.hexdigest()


def _to_f32(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def generate_point(x_T, e, e_prime, tau, denoiser, schedule) -> TrajectoryPoint:
    z0, trace = generate(x_T, embedding_schedule(e, e_prime, tau, schedule.T), denoiser, schedule)
    return TrajectoryPoint(tau, _to_f32(z0), _trace_digest(trace))


def build_trajectory(plan: SwapPlan, denoiser, schedule: NoiseSchedule, table: EmbeddingTable,
                     model_hash: str = "", neutral: TrajectoryPoint | None = None) -> Trajectory:
    """Generate the neutral point and one point per swap timestep from a shared x_T.

    ``neutral`` may be passed to reuse a neutral generation for the same
    ``(noise_seed, neutral_spec)``; it is then not recomputed.
    """
    plan.validate(schedule.T)
    x_T = draw_x_T(plan.noise_seed)
    e = embed(plan.neutral_spec, table)
    e_prime = embed(plan.style_spec, table)
    if neutral is None:
        neutral = generate_point(x_T, e, e, 0, denoiser, schedule)
    points = [generate_point(x_T, e, e_prime, tau, denoiser, schedule) for tau in plan.swap_set]
    provenance = {"model_hash": model_hash, "schedule": schedule.params(),
                  "x_T_sha256": array_digest(x_T), "table_seed": table.seed}
    return Trajectory(neutral, points, plan, provenance)


# --------------------------------------------------------------------------
# archives


def write_latents(path: Path, records: np.ndarray) -> bytes:
    records = np.ascontiguousarray(records, dtype="<f4")
    n, per = records.shape[0], int(np.prod(records.shape[1:]))
    blob = LATENT_MAGIC + struct.pack("<II", n, per) + records.tobytes()
    path.write_bytes(blob)
    return blob


def read_latents(path: Path, expected_records: int, shape: tuple) -> np.ndarray:
    if not path.exists():
        raise ArchiveError("latents.bin", f"{path} not found")
    blob = path.read_bytes()
    if blob[:5] != LATENT_MAGIC:
        raise ArchiveError("magic", f"expected {LATENT_MAGIC!r}, found {blob[:5]!r}")
    if len(blob) < 13:
        raise ArchiveError("record_count", "header truncated")
    n, per = struct.unpack("<II", blob[5:13])
    if n != expected_records:
        raise ArchiveError("record_count",
                           f"manifest lists {expected_records} records, latents.bin declares {n}")
    if per != int(np.prod(shape)):
        raise ArchiveError("latent_dims", f"manifest dims {list(shape)} vs {per} elements per record")
    body = blob[13:]
    complete = len(body) // (4 * per)
    if len(body) != 4 * per * n:
        raise ArchiveError("record_count",
                           f"latents.bin holds {complete} complete records "
                           f"({len(body)} bytes), header declares {n}")
    return np.frombuffer(body, dtype="<f4").astype(np.float64).reshape((n,) + tuple(shape))


def write_archive(directory, manifest: dict, records: np.ndarray) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    blob = write_latents(d / "latents.bin", records)
    manifest = dict(manifest, format_version=ARCHIVE_VERSION,
                    latent_dims=list(records.shape[1:]), record_count=int(records.shape[0]),
                    latents_sha256=hashlib.sha256(blob).hexdigest())
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return d


def read_archive(directory) -> tuple[dict, np.ndarray]:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise ArchiveError("manifest.json", f"{mpath} not found")
    try:
        manifest = json.loads(mpath.read_text())
    except ValueError as exc:
        raise ArchiveError("manifest.json", f"unreadable ({exc})") from None
    if manifest.get("format_version") != ARCHIVE_VERSION:
        raise ArchiveError("format_version", f"unsupported {manifest.get('format_version')!r}")
    records = read_latents(d / "latents.bin", manifest["record_count"],
                           tuple(manifest["latent_dims"]))
    digest = hashlib.sha256((d / "latents.bin").read_bytes()).hexdigest()
    if digest != manifest.get("latents_sha256"):
        raise ArchiveError("latents_sha256", "latents.bin does not match the manifest hash")
    return manifest, records


def save_archive(traj: Trajectory, path) -> Path:
    manifest = {
        "interpolated": False,
        **traj.plan.to_json(),
        "schedule": traj.provenance.get("schedule"),
        "model_checkpoint_sha256": traj.provenance.get("model_hash", ""),
        "x_T_sha256": traj.provenance.get("x_T_sha256"),
        "table_seed": traj.provenance.get("table_seed"),
        "taus": [0] + traj.taus,
        "trace_digests": [traj.neutral.trace_digest] + [p.trace_digest for p in traj.points],
    }
    return write_archive(path, manifest, traj.latents())


def load_archive(path) -> Trajectory:
    manifest, records = read_archive(path)
    if manifest.get("interpolated"):
        raise ArchiveError("interpolated", "archive holds interpolated samples, not a trajectory")
    swap_set = manifest["swap_set"]
    if len(swap_set) + 1 != records.shape[0]:
        raise ArchiveError("swap_set", f"{len(swap_set)} swap timesteps plus the neutral record "
                           f"!= {records.shape[0]} latent records")
    taus, digests = manifest["taus"], manifest["trace_digests"]
    if taus != [0] + swap_set or len(digests) != records.shape[0]:
        raise ArchiveError("taus", "taus/trace_digests inconsistent with swap_set")
    style = parse_prompt(manifest["style_prompt"])
    neutral_spec = parse_prompt(manifest["neutral_prompt"])
    plan = SwapPlan(neutral_spec, style, tuple(swap_set), manifest["noise_seed"],
                    allow_degenerate=style == neutral_spec)
    provenance = {"model_hash": manifest["model_checkpoint_sha256"],
                  "schedule": manifest["schedule"], "x_T_sha256": manifest["x_T_sha256"],
                  "table_seed": manifest["table_seed"]}
    neutral = TrajectoryPoint(0, records[0], digests[0])
    points = [TrajectoryPoint(t, records[i + 1], digests[i + 1]) for i, t in enumerate(swap_set)]
    return Trajectory(neutral, points, plan, provenance)
