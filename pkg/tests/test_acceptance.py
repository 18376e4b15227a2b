"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The end-to-end criteria share two full default pipeline runs (session
fixtures), so this module takes roughly twenty minutes on one CPU core.
"""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from difftraverse import cli
from difftraverse import diffusion as df
from difftraverse import interpolation as ip
from difftraverse import metrics as mt
from difftraverse import models as md
from difftraverse import numeric as nm
from difftraverse import pipeline as pl
from difftraverse.prompting import embed, make_table
from difftraverse.synth import ATTRIBUTES, load_dataset
from difftraverse.trajectory import (build_trajectory, draw_x_T, generate_point, load_archive,
                                     save_archive, SwapPlan)

pytestmark = pytest.mark.slow

STYLE_ARTIFACTS = ("device", "marker", "grid")


def record(log, n, ok, detail):
    log[n] = f"CRITERION {n:>2} {'PASS' if ok else 'FAIL'}: {detail}"
    assert ok, log[n]


def _run_pipeline(root: Path) -> tuple[Path, float]:
    started = time.perf_counter()
    code = cli.run(["-q", "pipeline", "--output-dir", str(root)])
    assert code == 0, f"pipeline exited with {code}"
    return root, time.perf_counter() - started


@pytest.fixture(scope="session")
def run_a(tmp_path_factory):
    return _run_pipeline(tmp_path_factory.mktemp("accept") / "run_a")


@pytest.fixture(scope="session")
def run_b(tmp_path_factory, run_a):
    return _run_pipeline(tmp_path_factory.mktemp("accept") / "run_b")


def _timings(root: Path) -> dict:
    return {p.stem: json.loads(p.read_text())["timings"]["seconds"]
            for p in (root / "manifests").glob("*.json")}


def _summary(root: Path) -> dict:
    return json.loads((root / "reports" / "summary.json").read_text())["attributes"]


# --------------------------------------------------------------------------
# exact oracle criteria


def test_criterion_01_oracle_ddim_reconstruction(acceptance_log):
    started = time.perf_counter()
    sched = df.make_schedule(50)
    g = np.random.default_rng(0)
    worst = 0.0
    for _ in range(5):
        x0 = g.uniform(-1, 1, (32, 32))
        x_T = g.normal(size=(32, 32))
        e = np.zeros(16)
        out, _ = df.generate(x_T, [e] * sched.T, df.oracle_denoiser(x0, sched), sched)
        worst = max(worst, float(np.max(np.abs(out - x0))))
    elapsed = time.perf_counter() - started
    record(acceptance_log, 1, worst < 1e-10 and elapsed < 1.0,
           f"max |x0_hat - x0| = {worst:.2e} (< 1e-10), {elapsed:.3f} s")


def test_criterion_02_gamma_coefficients(acceptance_log):
    started = time.perf_counter()
    flat = df.schedule_from_alpha_bar([1.0, 0.6, 0.6])
    g_flat = df.gamma(flat, 2)
    hand = df.schedule_from_alpha_bar([1.0, 0.25])
    g0, g1 = df.gamma(hand, 1)
    # alpha_bar_{t-1} = 1, alpha_bar_t = 1/4: sqrt(1/0.25) = 2, 0 - sqrt(4 - 1) = -sqrt(3)
    x0 = np.random.default_rng(1).normal(size=(32, 32))
    eps = np.random.default_rng(2).normal(size=(32, 32))
    x_t = df.forward_noise(x0, 1, eps, hand)
    back = df.ddim_step(x_t, 1, eps, hand)
    err = float(np.max(np.abs(back - x0)))
    elapsed = time.perf_counter() - started
    ok = (g_flat == (1.0, 0.0) and abs(g0 - 2.0) < 1e-12 and abs(g1 + math.sqrt(3)) < 1e-12
          and err < 1e-12 and elapsed < 1.0)
    record(acceptance_log, 2, ok, f"degenerate {g_flat}, hand case ({g0!r}, {g1!r}), "
           f"reconstruction error {err:.1e}, {elapsed:.3f} s")


def test_criterion_03_bernstein_bezier(acceptance_log):
    started = time.perf_counter()
    grid = np.linspace(0, 1, 101)
    unity = max(abs(sum(ip.bernstein_weight(n, i, u) for i in range(n + 1)) - 1.0)
                for n in range(1, 17) for u in grid)
    g = np.random.default_rng(3)
    ends = 0.0
    for n in (1, 3, 6, 16):
        pts = g.normal(size=(n + 1, 5))
        c = ip.BezierCurve(pts)
        ends = max(ends, np.max(np.abs(ip.bezier_point(c, 0.0) - pts[0])),
                   np.max(np.abs(ip.bezier_point(c, 1.0) - pts[-1])))
    p, q = g.normal(size=4), g.normal(size=4)
    lin = max(np.max(np.abs(ip.bezier_point(ip.BezierCurve(np.stack([p, q])), u)
                            - ((1 - u) * p + u * q))) for u in grid)
    mid = ip.bezier_point(ip.BezierCurve(np.array([[0.0, 0.0], [1.0, 2.0], [2.0, 0.0]])), 0.5)
    mid_err = float(np.max(np.abs(mid - [1.0, 1.0])))
    elapsed = time.perf_counter() - started
    ok = unity < 1e-12 and ends == 0.0 and lin < 1e-12 and mid_err < 1e-12 and elapsed < 1.0
    record(acceptance_log, 3, ok, f"partition of unity {unity:.1e}, endpoints {ends:.1e}, "
           f"linear {lin:.1e}, midpoint {mid.tolist()}, {elapsed:.3f} s")


def _brute_cfrt(neutral, cfs, A, thr=0.5):
    hits = 0
    for i in range(len(neutral)):
        d = abs(neutral.attrs[A][i] - cfs[A].attrs[A][i])
        m = 0.0
        for j in cfs:
            if j != A:
                m = max(m, abs(neutral.attrs[A][i] - cfs[j].attrs[A][i]))
        same_content = int(np.argmax(neutral.content[i])) == int(np.argmax(cfs[A].content[i]))
        same_attrs = all((neutral.attrs[k][i] >= thr) == (cfs[A].attrs[k][i] >= thr)
                         for k in neutral.attrs if k != A)
        hits += int(d > m and same_content and same_attrs)
    return hits / len(neutral)


def _preds(content, attrs):
    return mt.Predictions(np.asarray(content, float), {a: np.asarray(v, float)
                                                       for a, v in attrs.items()})


def test_criterion_04_cfrt_fixtures(acceptance_log):
    started = time.perf_counter()
    content = [[0.9, 0.05, 0.03, 0.02], [0.1, 0.7, 0.1, 0.1]]
    base = {"effusion": [0.1, 0.1], "device": [0.1, 0.5], "marker": [0.2, 0.2],
            "grid": [0.1, 0.1]}
    neutral = _preds(content, base)
    cf_dev = _preds(content, {**base, "device": [0.9, 0.7]})  # |delta| 0.8 and 0.2
    cf_mark = _preds(content, {**base, "device": [0.15, 0.8]})  # 0.05 and 0.3 on device head
    fixture = {"device": cf_dev, "marker": cf_mark}
    two = mt.cfrt_from_predictions(neutral, fixture, "device").score
    lone = mt.cfrt_from_predictions(neutral, {"device": neutral}, "device").score
    g = np.random.default_rng(4)
    agree = True
    for _ in range(50):
        n = int(g.integers(1, 12))
        rp = lambda: _preds(g.dirichlet(np.ones(4), n), {a: g.uniform(size=n) for a in ATTRIBUTES})
        nt = rp()
        sub = list(ATTRIBUTES[: int(g.integers(1, 5))])
        cfs = {a: rp() for a in sub}
        for A in sub:
            agree &= mt.cfrt_from_predictions(nt, cfs, A).score == _brute_cfrt(nt, cfs, A)
    ok = (two == 0.5 == _brute_cfrt(neutral, fixture, "device") and lone == 0.0
          == _brute_cfrt(neutral, {"device": neutral}, "device") and agree)
    elapsed = time.perf_counter() - started
    record(acceptance_log, 4, ok and elapsed < 1.0,
           f"two-sample fixture {two}, empty-other fixture {lone}, brute force agreement on "
           f"50 random fixtures: {agree}, {elapsed:.3f} s")


def test_criterion_05_cosine_matrix(acceptance_log, run_a):
    root, _ = run_a
    trajs = [load_archive(p) for p in sorted((root / "trajectories").glob("*/seed_*"))[:8]]
    started = time.perf_counter()
    props = True
    for t in trajs:
        m = mt.cosine_matrix(t).matrix
        ok_mask = ~np.isnan(m)
        props &= bool(np.array_equal(m, m.T, equal_nan=True))
        props &= bool(np.all(np.diag(m)[np.diag(ok_mask)] == 1.0))
        props &= bool(np.all(np.abs(m[ok_mask]) <= 1.0))
    base = np.array([0.3, -1.0, 2.0, 0.5])
    col = mt.cosine_from_deltas(np.stack([c * base for c in (0.2, 1, 3, 9)])).matrix
    orth = mt.cosine_from_deltas(np.array([[1.0, 0, 0, 0], [0, 2.0, 0, 0]])).matrix[0, 1]
    diag = mt.cosine_from_deltas(np.array([[1.0, 1, 0, 0], [1.0, 0, 0, 0]])).matrix[0, 1]
    elapsed = time.perf_counter() - started
    ok = (props and np.all(np.abs(col - 1) < 1e-9) and abs(orth) < 1e-12
          and abs(diag - 1 / math.sqrt(2)) < 1e-9 and elapsed < 1.0)
    record(acceptance_log, 5, ok, f"properties on {len(trajs)} generated trajectories: {props}, "
           f"orthogonal {orth:.1e}, diagonal {diag:.12f}, {elapsed:.3f} s")


# --------------------------------------------------------------------------
# gradients


def test_criterion_06_gradient_checks(acceptance_log):
    started = time.perf_counter()
    worst = {"denoiser": 0.0, "classifier": 0.0}
    g = np.random.default_rng(6)
    x = g.normal(size=(4, 1024))
    t = g.integers(1, 51, size=4)
    e = g.normal(size=(4, 16))
    eps = g.normal(size=(4, 1024))
    y = g.integers(0, 4, size=4)
    a = g.integers(0, 2, size=(4, 4)).astype(float)
    for point in range(3):
        nets = [
            # reduced width: every coordinate differenced
            (md.DenoiserModel.init(md.DenoiserConfig(hidden=(12, 10), time_dim=8, prompt_dim=8),
                                   seed=10 + point), None),
            (md.ClassifierModel.init(md.ClassifierConfig(hidden=(10, 8)), seed=20 + point), None),
            # full size: a random sample of coordinates per parameter
            (md.DenoiserModel.init(md.DenoiserConfig(), seed=30 + point), 12),
            (md.ClassifierModel.init(md.ClassifierConfig(), seed=40 + point), 12),
        ]
        for model, coords in nets:
            prng = nm.make_rng(50 + point, 0)
            for name in model.store.names():  # move off the initialization point
                p = model.store.params[name]
                p += 0.05 * prng.normal(p.shape)
            if isinstance(model, md.DenoiserModel):
                kind = "denoiser"
                loss = lambda s, m=model: md.denoiser_loss(m, x, t, e, eps)
            else:
                kind = "classifier"
                loss = lambda s, m=model: md.classifier_loss(m, x, y, a)
            err = nm.check_gradients(loss, model.store, 1e-5, coords_per_param=coords,
                                     rng=nm.make_rng(point, 1))
            worst[kind] = max(worst[kind], err)
    elapsed = time.perf_counter() - started
    ok = max(worst.values()) < 1e-4 and elapsed < 120
    record(acceptance_log, 6, ok, f"max relative error denoiser {worst['denoiser']:.2e}, "
           f"classifier {worst['classifier']:.2e} (< 1e-4) at 3 points, {elapsed:.1f} s")


# --------------------------------------------------------------------------
# end-to-end toy analogs


def test_criterion_07_classifier(acceptance_log, run_a):
    root, _ = run_a
    clf = md.load_checkpoint(root / "models" / "classifier.mdl")
    test = load_dataset(root / "data" / "test")
    sizes = [len(load_dataset(root / "data" / s).phantoms) for s in ("train", "val")]
    res = md.evaluate_classifier(clf, test)
    secs = _timings(root)
    runtime = secs["synth"] + secs["train-classifier"]
    ok = (sizes == [8000, 1000] and len(test.phantoms) == 1000
          and res["content"]["accuracy"] >= 0.90 and runtime <= 600
          and all(res[a]["accuracy"] >= 0.90 and res[a]["f1"] >= 0.85 for a in ATTRIBUTES))
    heads = ", ".join(f"{a} {res[a]['accuracy']:.3f}/{res[a]['f1']:.3f}" for a in ATTRIBUTES)
    record(acceptance_log, 7, ok, f"content acc {res['content']['accuracy']:.3f}; acc/F1 "
           f"{heads}; {runtime:.0f} s")


def test_criterion_08_disentanglement(acceptance_log, run_a):
    root, wall = run_a
    summ = _summary(root)
    clf = md.load_checkpoint(root / "models" / "classifier.mdl")
    cfg = pl.RunConfig()
    seeds = list(range(cfg.traverse.first_noise_seed,
                       cfg.traverse.first_noise_seed + cfg.traverse.count))
    trajs = {a: [load_archive(root / "trajectories" / a / f"seed_{s:04d}") for s in seeds]
             for a in ATTRIBUTES}
    cf = mt.counterfactual_set(trajs, 25)
    recomputed = {a: mt.cfrt(cf, clf, a).score for a in ATTRIBUTES}
    consistent = all(recomputed[a] == summ[a]["cfrt_trajectory"] for a in ATTRIBUTES)
    # closeness: distance to the neutral image at tau=5 against tau=45
    close = {}
    for a in STYLE_ARTIFACTS:
        hits = [mt.perceptual_distance(t.point(5).z0, t.neutral.z0, clf)
                < mt.perceptual_distance(t.point(45).z0, t.neutral.z0, clf) for t in trajs[a]]
        close[a] = float(np.mean(hits))
    runtime = sum(_timings(root).values())
    ok = (consistent and runtime <= 1800
          and all(len(trajs[a]) == 100 for a in ATTRIBUTES)
          and all(recomputed[a] >= 0.70 for a in STYLE_ARTIFACTS)
          and all(close[a] >= 0.80 and close[a] == summ[a]["closeness_fraction"]
                  for a in STYLE_ARTIFACTS)
          and all(summ[a]["mean_spearman"] >= 0.6 for a in STYLE_ARTIFACTS))
    detail = "; ".join(f"{a} cfrt {recomputed[a]:.2f} close {close[a]:.2f} "
                       f"rho {summ[a]['mean_spearman']:.3f}" for a in STYLE_ARTIFACTS)
    record(acceptance_log, 8, ok, f"{detail}; stages {runtime:.0f} s (wall {wall:.0f} s)")


def test_criterion_09_interpolation(acceptance_log, run_a):
    root, _ = run_a
    summ = _summary(root)
    passing = [a for a in STYLE_ARTIFACTS if summ[a]["cfrt_trajectory"] >= 0.70]
    n_samples = {len(ip.load_samples(p)[0])
                 for p in sorted((root / "interpolated").glob("*/seed_*"))[:20]}
    secs = _timings(root)
    runtime = secs["interpolate"] + secs["evaluate"]
    gaps = {a: abs(summ[a]["cfrt_interpolated"] - summ[a]["cfrt_trajectory"]) for a in passing}
    ok = bool(passing) and n_samples == {50} and runtime <= 600 and all(
        g <= 0.15 for g in gaps.values())
    record(acceptance_log, 9, ok, "; ".join(
        f"{a} traj {summ[a]['cfrt_trajectory']:.3f} interp {summ[a]['cfrt_interpolated']:.3f} "
        f"gap {gaps[a]:.3f}" for a in passing) + f"; {runtime:.1f} s incremental")


def _report_bytes(root: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted((root / "reports").iterdir())
            if p.suffix in (".csv", ".json")}


def _tree_bytes(directory: Path) -> dict:
    return {str(p.relative_to(directory)): p.read_bytes()
            for p in sorted(directory.rglob("*")) if p.is_file()}


def test_criterion_10_determinism_and_persistence(acceptance_log, run_a, run_b, tmp_path):
    (root_a, wall_a), (root_b, wall_b) = run_a, run_b
    ra, rb = _report_bytes(root_a), _report_bytes(root_b)
    reports_equal = bool(ra) and ra == rb
    # checkpoint round trips
    ckpt_ok = True
    for name in ("denoiser.mdl", "classifier.mdl"):
        src = root_a / "models" / name
        out = md.save_checkpoint(md.load_checkpoint(src), tmp_path / name)
        ckpt_ok &= src.read_bytes() == Path(out).read_bytes()
        ckpt_ok &= src.read_bytes() == (root_b / "models" / name).read_bytes()
    # archive round trips
    arch_ok = True
    for src in sorted((root_a / "trajectories").glob("*/seed_*"))[::25]:
        dst = tmp_path / "rt" / src.parent.name / src.name
        save_archive(load_archive(src), dst)
        arch_ok &= _tree_bytes(src) == _tree_bytes(dst)
    # degenerate trajectories with the trained denoiser
    den = md.load_checkpoint(root_a / "models" / "denoiser.mdl")
    sched, table = den.config.schedule(), make_table(1)
    fn = pl.denoiser_fn(den)
    seed = 1000
    x_T = draw_x_T(seed)
    e = embed(frozenset(), table)
    e_style = embed(frozenset({"device"}), table)
    neutral = generate_point(x_T, e, e, 0, fn, sched)
    tau0 = generate_point(x_T, e, e_style, 0, fn, sched)
    same = build_trajectory(SwapPlan(frozenset(), frozenset(), (5, 25, 45), seed, allow_degenerate=True), fn, sched,
                            table)
    stored = load_archive(root_a / "trajectories" / "device" / f"seed_{seed:04d}").neutral.z0
    degenerate_ok = (np.array_equal(tau0.z0, neutral.z0) and np.array_equal(stored, neutral.z0)
                     and all(np.array_equal(p.z0, neutral.z0) for p in same.points))
    ok = reports_equal and ckpt_ok and arch_ok and degenerate_ok and wall_b <= 2 * wall_a
    record(acceptance_log, 10, ok, f"{len(ra)} report files identical: {reports_equal}; "
           f"checkpoint round trip {ckpt_ok}; archive round trip {arch_ok}; degenerate "
           f"trajectories {degenerate_ok}; second run {wall_b:.0f} s vs {wall_a:.0f} s")


# --------------------------------------------------------------------------
# supplementary checks on the trained models


def test_denoiser_training_reduces_loss(run_a):
    doc = json.loads((run_a[0] / "models" / "denoiser_train.json").read_text())
    curve = np.asarray(doc["loss_curve"])
    assert curve[-50:].mean() < 0.5 * curve[:50].mean()


def test_trained_classifier_sees_device_edit(run_a):
    root, _ = run_a
    clf = md.load_checkpoint(root / "models" / "classifier.mdl")
    t = load_archive(root / "trajectories" / "device" / "seed_1000")
    assert mt.perceptual_distance(t.neutral.z0, t.point(45).z0, clf) > 0
