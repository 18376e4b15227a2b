"""Pipeline stages behind the command line: config model, artifact layout,
manifests, and one function per subcommand.

Every stage loads and validates all of its inputs before it writes anything.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from . import __version__
from .diffusion import generate
from .interpolation import interpolate_trajectory, load_samples, save_samples
from .metrics import (CosineMatrix, cfrt_from_predictions, cosine_matrix, counterfactual_set,
                      evaluate_trajectory, pca_project, pooled_cfrt, predict)
from .models import (ClassifierConfig, ClassifierModel, DenoiserConfig, DenoiserModel, TrainConfig,
                     evaluate_classifier, load_checkpoint, predict_noise, save_checkpoint,
                     train_classifier, train_denoiser)
from .prompting import attribute_spec, embed, make_table, parse_prompt
from .report import CosineReport, DistanceReport, PcaReport, emit_report, write_csv, write_json
from .synth import ATTRIBUTES, SPLITS, load_dataset, sample_dataset, save_dataset, to_pgm_bytes
from .trajectory import (DEFAULT_SWAP_SET, SwapPlan, build_trajectory, draw_x_T, load_archive,
                         save_archive)

log = logging.getLogger("difftraverse")


class PipelineError(ValueError):
    """Data or validation failure; the message names the artifact or config key."""


class ConfigNotFound(FileNotFoundError):
    pass


# --------------------------------------------------------------------------
# config


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSection(_Strict):
    seed: int = 0
    n_train: int = Field(8000, ge=1)
    n_val: int = Field(1000, ge=1)
    n_test: int = Field(1000, ge=1)
    attr_probs: dict[str, float] = Field(default_factory=lambda: {a: 0.3 for a in ATTRIBUTES})

    @field_validator("attr_probs")
    @classmethod
    def _known(cls, v):
        for a, p in v.items():
            if a not in ATTRIBUTES:
                raise ValueError(f"unknown attribute {a!r}")
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability for {a!r} outside [0, 1]")
        return v


class ScheduleSection(_Strict):
    T: int = Field(50, ge=1)
    beta_start: float = Field(0.001, gt=0, lt=1)
    beta_end: float = Field(0.2, gt=0, lt=1)


class TrainSection(_Strict):
    steps: int = Field(ge=0)
    batch_size: int = Field(ge=1)
    lr: float = Field(gt=0)
    seed: int = Field(ge=0)
    lr_decay: str = "cosine"
    hidden: list[int]

    def train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.steps, batch_size=self.batch_size, lr=self.lr,
                           seed=self.seed, lr_decay=self.lr_decay)


class TraverseSection(_Strict):
    styles: list[str] = Field(default_factory=lambda: list(ATTRIBUTES))
    neutral_prompt: str = "neutral phantom"
    swap_set: list[int] = Field(default_factory=lambda: list(DEFAULT_SWAP_SET))
    first_noise_seed: int = Field(1000, ge=0)
    count: int = Field(100, ge=1)

    @field_validator("styles")
    @classmethod
    def _styles(cls, v):
        if not v:
            raise ValueError("at least one style attribute is required")
        for a in v:
            if a not in ATTRIBUTES:
                raise ValueError(f"unknown attribute {a!r}")
        if len(set(v)) != len(v):
            raise ValueError("duplicate style attribute")
        return v


class InterpolateSection(_Strict):
    n_ctrl: int = Field(7, ge=2)
    m: int = Field(50, ge=2)


class EvaluateSection(_Strict):
    cfrt_tau: int = 25
    flip_threshold: float = Field(0.5, gt=0, lt=1)
    pca_seeds: int = Field(3, ge=1)


class RunConfig(_Strict):
    output_dir: str = "run"
    table_seed: int = Field(1, ge=0)
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    schedule: ScheduleSection = Field(default_factory=ScheduleSection)
    denoiser: TrainSection = Field(default_factory=lambda: TrainSection(
        steps=3000, batch_size=64, lr=2e-3, seed=1, hidden=[512, 512]))
    classifier: TrainSection = Field(default_factory=lambda: TrainSection(
        steps=4000, batch_size=64, lr=1e-3, seed=2, hidden=[256, 128]))
    traverse: TraverseSection = Field(default_factory=TraverseSection)
    interpolate: InterpolateSection = Field(default_factory=InterpolateSection)
    evaluate: EvaluateSection = Field(default_factory=EvaluateSection)

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def load_config(path: Optional[str], output_dir: Optional[str] = None) -> RunConfig:
    """Read a JSON config; ``path=None`` gives the defaults. Raises ConfigNotFound
    for a missing path and PipelineError for an invalid document."""
    data = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigNotFound(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except ValueError as exc:
            raise PipelineError(f"{p}: invalid JSON ({exc})") from None
    if output_dir is not None:
        data["output_dir"] = output_dir
    try:
        return RunConfig.model_validate(data)
    except Exception as exc:  # pydantic.ValidationError
        errs = getattr(exc, "errors", lambda: [])()
        where = "; ".join(".".join(str(x) for x in e["loc"]) + ": " + e["msg"] for e in errs)
        raise PipelineError(f"config {path or '<defaults>'}: {where or exc}") from None


# --------------------------------------------------------------------------
# layout and manifests


class Layout:
    def __init__(self, root):
        self.root = Path(root)

    def data(self, split: str) -> Path:
        return self.root / "data" / split

    @property
    def denoiser(self) -> Path:
        return self.root / "models" / "denoiser.mdl"

    @property
    def classifier(self) -> Path:
        return self.root / "models" / "classifier.mdl"

    def trajectory(self, style: str, seed: int) -> Path:
        return self.root / "trajectories" / style / f"seed_{seed:04d}"

    def interpolated(self, style: str, seed: int) -> Path:
        return self.root / "interpolated" / style / f"seed_{seed:04d}"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    def manifest(self, command: str) -> Path:
        return self.root / "manifests" / f"{command}.json"


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    path = Path(path)
    if path.is_dir():
        for f in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(str(f.relative_to(path)).encode())
            h.update(f.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def write_manifest(layout: Layout, command: str, cfg: RunConfig, inputs: list, outputs: list,
                   started: float) -> Path:
    def rel(p):
        p = Path(p)
        return str(p.relative_to(layout.root)) if p.is_relative_to(layout.root) else str(p)

    doc = {"tool": "difftraverse", "version": __version__, "command": command,
           "config_sha256": cfg.digest(),
           "inputs": {rel(p): file_digest(p) for p in inputs},
           "outputs": {rel(p): file_digest(p) for p in outputs},
           "timings": {"seconds": round(time.perf_counter() - started, 3)}}
    path = layout.manifest(command)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


def _require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise PipelineError(f"{what} not found: {path} (run the producing subcommand first)")
    return Path(path)


def _schedule(cfg: RunConfig):
    return DenoiserConfig(T=cfg.schedule.T, beta_start=cfg.schedule.beta_start,
                          beta_end=cfg.schedule.beta_end).schedule()


def _load_model(path: Path, kind: type, what: str):
    _require(path, what)
    model = load_checkpoint(path)
    if not isinstance(model, kind):
        raise PipelineError(f"{path}: expected a {what}, found {type(model).__name__}")
    return model


def _seeds(cfg: RunConfig) -> list[int]:
    t = cfg.traverse
    return list(range(t.first_noise_seed, t.first_noise_seed + t.count))


def denoiser_fn(model: DenoiserModel):
    return lambda x, t, e: predict_noise(model, x, t, e)


# --------------------------------------------------------------------------
# stages


def stage_synth(cfg: RunConfig) -> list[Path]:
    layout, d = Layout(cfg.output_dir), cfg.dataset
    sizes = {"train": d.n_train, "val": d.n_val, "test": d.n_test}
    out = []
    for split in SPLITS:
        log.info("synth: %d %s samples", sizes[split], split)
        ds = sample_dataset(sizes[split], d.seed, d.attr_probs, split)
        out.append(save_dataset(ds, layout.data(split)))
    return out


def stage_train_denoiser(cfg: RunConfig) -> tuple[list, list]:
    layout = Layout(cfg.output_dir)
    src = _require(layout.data("train") / "index.json", "training dataset index")
    sec = cfg.denoiser
    tc = sec.train_config()
    tc.validate()
    ds = load_dataset(src.parent)
    config = DenoiserConfig(hidden=tuple(sec.hidden))
    log.info("train-denoiser: %d steps on %d samples", tc.steps, len(ds))
    model, rep = train_denoiser(ds, make_table(cfg.table_seed), _schedule(cfg), tc, config)
    ckpt = save_checkpoint(model, layout.denoiser)
    rpath = write_json(layout.root / "models" / "denoiser_train.json",
                       {"train_config": sec.model_dump(), "loss_curve": rep.loss_curve,
                        "metrics": rep.metrics})
    return [src], [ckpt, rpath]


def stage_train_classifier(cfg: RunConfig) -> tuple[list, list]:
    layout = Layout(cfg.output_dir)
    srcs = [_require(layout.data(s) / "index.json", f"{s} dataset index") for s in SPLITS]
    sec = cfg.classifier
    tc = sec.train_config()
    tc.validate()
    train, val, test = (load_dataset(p.parent) for p in srcs)
    log.info("train-classifier: %d steps on %d samples", tc.steps, len(train))
    model, rep = train_classifier(train, tc, test, ClassifierConfig(hidden=tuple(sec.hidden)))
    ckpt = save_checkpoint(model, layout.classifier)
    # evaluate the stored (float32) weights, which every later stage uses
    stored = load_checkpoint(ckpt)
    metrics = {"train": evaluate_classifier(stored, train), "val": evaluate_classifier(stored, val),
               "heldout": evaluate_classifier(stored, test)}
    rpath = write_json(layout.root / "models" / "classifier_train.json",
                       {"train_config": sec.model_dump(), "loss_curve": rep.loss_curve,
                        "metrics": metrics})
    return srcs, [ckpt, rpath]


def stage_generate(cfg: RunConfig, prompt: str, noise_seed: int, out: Path) -> tuple[list, list]:
    layout = Layout(cfg.output_dir)
    spec = parse_prompt(prompt)
    if noise_seed < 0:
        raise PipelineError(f"--seed must be non-negative, got {noise_seed}")
    model = _load_model(layout.denoiser, DenoiserModel, "denoiser checkpoint")
    schedule = model.config.schedule()
    e = embed(spec, make_table(cfg.table_seed))
    z0, _ = generate(draw_x_T(noise_seed), [e] * schedule.T, denoiser_fn(model), schedule,
                     keep_trace=False)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(to_pgm_bytes(z0))
    return [layout.denoiser], [out]


def _plans(cfg: RunConfig, styles=None, seeds=None) -> list[SwapPlan]:
    neutral = parse_prompt(cfg.traverse.neutral_prompt)
    plans = []
    for seed in seeds if seeds is not None else _seeds(cfg):
        for a in styles or cfg.traverse.styles:
            plan = SwapPlan(neutral, attribute_spec(set(neutral) | {a}),
                            tuple(cfg.traverse.swap_set), seed)
            plan.validate(cfg.schedule.T)
            plans.append(plan)
    return plans


def stage_traverse(cfg: RunConfig, styles=None) -> tuple[list, list]:
    layout = Layout(cfg.output_dir)
    plans = _plans(cfg, styles)
    model = _load_model(layout.denoiser, DenoiserModel, "denoiser checkpoint")
    schedule = model.config.schedule()
    if (schedule.T, schedule.beta_start, schedule.beta_end) != (
            cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end):
        raise PipelineError(f"{layout.denoiser}: checkpoint schedule differs from config.schedule")
    table = make_table(cfg.table_seed)
    model_hash = file_digest(layout.denoiser)
    fn = denoiser_fn(model)
    outputs, neutral_cache = [], {}
    log.info("traverse: %d trajectories", len(plans))
    for plan in plans:
        key = (plan.noise_seed, plan.neutral_spec)
        traj = build_trajectory(plan, fn, schedule, table, model_hash, neutral_cache.get(key))
        neutral_cache = {key: traj.neutral}  # plans are grouped by seed
        style = next(iter(plan.style_spec - plan.neutral_spec))
        outputs.append(save_archive(traj, layout.trajectory(style, plan.noise_seed)))
    return [layout.denoiser], outputs


def stage_traverse_one(cfg: RunConfig, neutral_prompt: str, style_prompt: str, noise_seed: int,
                       out: Path) -> tuple[list, list]:
    layout = Layout(cfg.output_dir)
    neutral, style = parse_prompt(neutral_prompt), parse_prompt(style_prompt)
    plan = SwapPlan(neutral, style, tuple(cfg.traverse.swap_set), noise_seed)
    plan.validate(cfg.schedule.T)
    model = _load_model(layout.denoiser, DenoiserModel, "denoiser checkpoint")
    traj = build_trajectory(plan, denoiser_fn(model), model.config.schedule(),
                            make_table(cfg.table_seed), file_digest(layout.denoiser))
    return [layout.denoiser], [save_archive(traj, out)]


def stage_interpolate(cfg: RunConfig) -> tuple[list, list]:
    layout = Layout(cfg.output_dir)
    sources = [(a, s, _require(layout.trajectory(a, s), "trajectory archive"))
               for s in _seeds(cfg) for a in cfg.traverse.styles]
    trajs = [(a, s, load_archive(p)) for a, s, p in sources]
    outputs = []
    for a, s, traj in trajs:
        samples = interpolate_trajectory(traj, cfg.interpolate.n_ctrl, cfg.interpolate.m)
        outputs.append(save_samples(samples, traj, layout.interpolated(a, s)))
    return [p for _, _, p in sources], outputs


def stage_interpolate_one(cfg: RunConfig, archive: Path, out: Path) -> tuple[list, list]:
    traj = load_archive(_require(archive, "trajectory archive"))
    samples = interpolate_trajectory(traj, cfg.interpolate.n_ctrl, cfg.interpolate.m)
    return [archive], [save_samples(samples, traj, out)]


# --------------------------------------------------------------------------
# evaluation


CFRT_COLUMNS = ["attribute", "source", "sample", "position", "noise_seed", "delta_target",
                "max_delta_other", "passed", "failed", "changed_attributes"]
PERCEPTUAL_COLUMNS = ["attribute", "source", "noise_seed", "position", "distance", "style_prob"]
SUMMARY_COLUMNS = ["attribute", "n_trajectories", "cfrt_trajectory", "cfrt_interpolated",
                   "cfrt_gap", "closeness_fraction", "mean_spearman", "spearman_defined"]


def evaluate_all(trajs: dict, samples: dict, classifier: ClassifierModel, cfg: RunConfig) -> dict:
    """All metrics for ``trajs[a][i]`` / ``samples[a][i]`` (style ``a``, start ``i``)."""
    ev = cfg.evaluate
    styles = list(trajs)
    seeds = [t.plan.noise_seed for t in trajs[styles[0]]]
    if ev.cfrt_tau not in cfg.traverse.swap_set:
        raise PipelineError(f"evaluate.cfrt_tau={ev.cfrt_tau} is not in traverse.swap_set")
    cf = counterfactual_set(trajs, ev.cfrt_tau)
    neutral = predict(classifier, cf.neutral)
    cf_preds = {a: predict(classifier, np.stack(v)) for a, v in cf.counterfactuals.items()}
    m = len(samples[styles[0]][0])
    # interpolated: every curve position except u=0, which is the start image itself
    by_pos = [{a: predict(classifier, np.stack([s.latents[k] for s in samples[a]]))
               for a in styles} for k in range(1, m)]
    out = {"cfrt": {}, "cfrt_interpolated": {}, "perceptual": {}, "cosine": {}, "summary": {}}
    for a in styles:
        rep = cfrt_from_predictions(neutral, cf_preds, a, ev.flip_threshold)
        irep = pooled_cfrt(neutral, by_pos, a, ev.flip_threshold)
        for row in rep.samples:
            row["noise_seed"] = seeds[row["sample"]]
        for row in irep.samples:
            row["noise_seed"] = seeds[row["sample"]]
            row["position"] += 1
        out["cfrt"][a], out["cfrt_interpolated"][a] = rep, irep
        perc = [evaluate_trajectory(t, classifier, a) for t in trajs[a]]
        iperc = [evaluate_trajectory(t, classifier, a, s) for t, s in zip(trajs[a], samples[a])]
        out["perceptual"][a] = {"trajectory": perc, "interpolated": iperc}
        mats = [cosine_matrix(t, tuple(cfg.traverse.swap_set)) for t in trajs[a]]
        out["cosine"][a] = mats
        lo, hi = 1, len(cfg.traverse.swap_set)
        close = float(np.mean([p.distances[lo] < p.distances[hi] for p in perc]))
        rhos = [p.spearman for p in perc if p.spearman_defined]
        out["summary"][a] = {
            "n_trajectories": len(trajs[a]), "cfrt_trajectory": rep.score,
            "cfrt_interpolated": irep.score, "cfrt_gap": abs(rep.score - irep.score),
            "closeness_fraction": close,
            "mean_spearman": float(np.mean(rhos)) if rhos else None,
            "spearman_defined": len(rhos)}
    out["seeds"] = seeds
    return out


def _mean_cosine(mats: list) -> CosineMatrix:
    """Entry-wise mean over trajectories, skipping undefined entries."""
    stack = np.stack([m.matrix for m in mats])
    count = np.sum(~np.isnan(stack), axis=0)
    total = np.nansum(stack, axis=0)
    undefined = count == 0
    mean = np.where(undefined, np.nan, total / np.maximum(count, 1))
    return CosineMatrix(mats[0].grid, mean, undefined)


def stage_evaluate(cfg: RunConfig) -> tuple[list, list]:
    layout = Layout(cfg.output_dir)
    seeds, styles = _seeds(cfg), cfg.traverse.styles
    tpaths = {a: [_require(layout.trajectory(a, s), "trajectory archive") for s in seeds]
              for a in styles}
    ipaths = {a: [_require(layout.interpolated(a, s), "interpolated archive") for s in seeds]
              for a in styles}
    classifier = _load_model(layout.classifier, ClassifierModel, "classifier checkpoint")
    trajs = {a: [load_archive(p) for p in tpaths[a]] for a in styles}
    samples = {a: [load_samples(p)[0] for p in ipaths[a]] for a in styles}
    log.info("evaluate: %d styles x %d trajectories", len(styles), len(seeds))
    res = evaluate_all(trajs, samples, classifier, cfg)

    rep_dir = layout.reports
    cfrt_rows, perc_rows = [], []
    for a in styles:
        for src, key in (("trajectory", "cfrt"), ("interpolated", "cfrt_interpolated")):
            for row in res[key][a].samples:
                cfrt_rows.append({"attribute": a, "source": src, "position": cfg.evaluate.cfrt_tau,
                                  **row})
        for src in ("trajectory", "interpolated"):
            for seed, p in zip(seeds, res["perceptual"][a][src]):
                for pos, d, pr in zip(p.positions, p.distances, p.style_probs):
                    perc_rows.append({"attribute": a, "source": src, "noise_seed": seed,
                                      "position": pos, "distance": d, "style_prob": pr})
    outputs = [
        write_json(rep_dir / "cfrt.json", {
            "cfrt_tau": cfg.evaluate.cfrt_tau, "flip_threshold": cfg.evaluate.flip_threshold,
            "trajectory": {a: r.to_json() for a, r in res["cfrt"].items()},
            "interpolated": {a: r.to_json() for a, r in res["cfrt_interpolated"].items()}}),
        write_csv(rep_dir / "cfrt.csv", cfrt_rows, CFRT_COLUMNS),
        write_json(rep_dir / "perceptual.json", {
            "metric": "feature_perceptual_distance", "seeds": seeds,
            **{a: {src: [p.to_json() for p in v] for src, v in res["perceptual"][a].items()}
               for a in styles}}),
        write_csv(rep_dir / "perceptual.csv", perc_rows, PERCEPTUAL_COLUMNS),
    ]
    cos_doc = {}
    for a in styles:
        mean = _mean_cosine(res["cosine"][a])
        cos_doc[a] = {"mean": mean.to_json(), "per_seed": {str(s): m.to_json()["matrix"]
                                                          for s, m in zip(seeds, res["cosine"][a])}}
    outputs.append(write_json(rep_dir / "cosine.json", cos_doc))
    summary = {"classifier": json.loads((layout.root / "models" / "classifier_train.json")
                                        .read_text())["metrics"]
               if (layout.root / "models" / "classifier_train.json").exists() else None,
               "attributes": res["summary"]}
    outputs.append(write_json(rep_dir / "summary.json", summary))
    outputs.append(write_csv(rep_dir / "summary.csv",
                             [{"attribute": a, **v} for a, v in res["summary"].items()],
                             SUMMARY_COLUMNS))
    inputs = [layout.classifier] + [p for v in tpaths.values() for p in v] + \
             [p for v in ipaths.values() for p in v]
    return inputs, outputs


def build_reports(cfg: RunConfig) -> list:
    """Plot bundles from the evaluation JSON plus a joint PCA of a few trajectories."""
    layout = Layout(cfg.output_dir)
    cos_path = _require(layout.reports / "cosine.json", "cosine report")
    perc_path = _require(layout.reports / "perceptual.json", "perceptual report")
    cos = json.loads(cos_path.read_text())
    perc = json.loads(perc_path.read_text())
    reports = []
    for a in cfg.traverse.styles:
        if a not in cos:
            raise PipelineError(f"{cos_path}: no cosine entry for style {a!r}")
        m = cos[a]["mean"]
        mat = np.array([[np.nan if v is None else v for v in row] for row in m["matrix"]])
        reports.append(CosineReport(f"cosine_{a}",
                                    CosineMatrix(tuple(m["grid"]), mat, np.array(m["undefined"]))))
    series = {}
    for a in cfg.traverse.styles:
        runs = perc.get(a, {}).get("trajectory")
        if not runs:
            raise PipelineError(f"{perc_path}: no trajectory entries for style {a!r}")
        series[a] = (runs[0]["positions"], np.mean([r["distances"] for r in runs], axis=0).tolist())
    reports.append(DistanceReport("distance_vs_tau", series))
    seeds = _seeds(cfg)[: cfg.evaluate.pca_seeds]
    trajs = [(a, s, load_archive(_require(layout.trajectory(a, s), "trajectory archive")))
             for s in seeds for a in cfg.traverse.styles]
    lat = np.concatenate([t.latents() for _, _, t in trajs])
    proj = pca_project(lat, 2)
    n = len(trajs[0][2].latents())
    reports.append(PcaReport("pca_scatter", [(a, s, proj.coords[i * n:(i + 1) * n])
                                             for i, (a, s, _) in enumerate(trajs)]))
    return reports


def stage_report(cfg: RunConfig) -> tuple[list, list]:
    layout = Layout(cfg.output_dir)
    reports = build_reports(cfg)
    outputs = emit_report(reports, layout.reports)
    return [layout.reports / "cosine.json", layout.reports / "perceptual.json"], outputs
