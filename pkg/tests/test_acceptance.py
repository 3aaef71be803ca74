"""Acceptance criteria, one test each, with a printed PASS/FAIL line per criterion."""
import dataclasses
import os
import time
from pathlib import Path

import numpy as np
import pytest

from detguard.attack import run_soundness
from detguard.certifier import (CATEGORIES, ThreatModel, WorstCaseAnalyzer, dg_pa_one, enumerate_patch_locations,
                                parallel_sweep)
from detguard.cli import main
from detguard.explainer import ClusterConfig, det_cluster
from detguard.geometry import (PatchSpec, PixelBox, ReceptiveFieldConfig, Rect, corrupted_footprint,
                               corruption_bound, footprint_boxes, map_box_to_feature_space)
from detguard.objectness import PredictorConfig, predict_objectness_map, worst_case_objectness_map
from detguard.pipeline import recall_by_category
from conftest import ACCEPTANCE_LINES
from oracles import dyadic_logits, naive_box_map, naive_footprint, table_dbscan, window_objectness

PATCH = (16, 16)


def record(n, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {n}. {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


@pytest.fixture(scope="module")
def desk_certs(desk_suite):
    """Certificates for every object and category at the operating threshold."""
    t0 = time.perf_counter()
    threshold = desk_suite.operating_threshold()
    rows = desk_suite.certify(PATCH, CATEGORIES, threshold)
    return threshold, rows, time.perf_counter() - t0


def random_rf(rng, max_cells=48):
    r = int(rng.integers(1, 34))
    s = int(rng.integers(1, 9))
    X, Y = (int(v) for v in rng.integers(1, max_cells + 1, size=2))
    # a few spare pixels that no cell reaches
    W = r + s * (X - 1) + int(rng.integers(0, s))
    H = r + s * (Y - 1) + int(rng.integers(0, s))
    return ReceptiveFieldConfig(r, s, W, H)


def test_c1_soundness(desk_suite, desk_certs):
    cfg = desk_suite.cfg
    threshold, rows, cert_secs = desk_certs
    data = desk_suite.dataset
    certified = {}
    for row in rows:
        if not row.certificate.certified:
            continue
        obj = data.annotations[row.image_id][row.object_id]
        rf = desk_suite.model.rf_config(*data.images[row.image_id].shape[:2])
        locs = enumerate_patch_locations(PATCH, rf, obj, ThreatModel(row.certificate.category, cfg.close_distance),
                                         prune_dominated=False)
        certified.setdefault(row.image_id, {}).setdefault(row.object_id, set()).update(locs)
    certified = {i: {k: sorted(v) for k, v in o.items()} for i, o in certified.items()}
    cores = os.cpu_count() or 1
    t0 = time.perf_counter()
    stats = run_soundness(data.images, data.annotations, certified, desk_suite.model, desk_suite.base, cfg.pcfg,
                          cfg.ccfg, jobs=min(cores, 8), n_feature=cfg.n_feature_variants,
                          n_pixel=cfg.n_pixel_variants, drop_rate=cfg.drop_rate, iou_threshold=cfg.iou_threshold)
    secs = cert_secs + time.perf_counter() - t0
    per_loc = stats.variants / max(stats.locations, 1)
    enough = len(data) >= 200 and cfg.n_feature_variants >= 100 and cfg.n_pixel_variants >= 20
    # the time budget is stated for an 8-core desktop; on fewer cores it is reported, not judged
    timed = secs < 600 if cores >= 8 else True
    ok = enough and not stats.violations and stats.locations > 0 and timed
    record(1, "soundness", ok,
           f"{len(data)} images, {sum(len(v) for v in certified.values())} certified objects, "
           f"{stats.locations} locations, {per_loc:.0f} variants/location, {stats.checks} checks, "
           f"{len(stats.violations)} violations, {secs:.0f}s on {cores} core(s)")
    assert enough and stats.locations > 0
    assert stats.violations == []
    assert timed


def test_c2_oracle_equivalence():
    rng = np.random.default_rng(2)
    n = 1000
    bad = dict(predict=0, worst=0, cluster=0, box=0, footprint=0)
    for _ in range(n):
        X, Y = (int(v) for v in rng.integers(1, 49, size=2))
        K = int(rng.integers(2, 7))  # N <= 5 object classes plus background
        logits = dyadic_logits(rng, X, Y, K)
        pcfg = PredictorConfig(int(rng.integers(1, min(X, 8) + 1)), int(rng.integers(1, min(Y, 8) + 1)),
                               float(rng.choice([0.25, 0.5, 1.0, 2.0, 3.0])))
        bad["predict"] += not np.array_equal(predict_objectness_map(logits, pcfg),
                                             window_objectness(logits, pcfg.w_x, pcfg.w_y, pcfg.T))
        x0, y0 = int(rng.integers(0, X)), int(rng.integers(0, Y))
        cut = {(a, b) for a in range(x0, min(X, x0 + int(rng.integers(1, 12))))
               for b in range(y0, min(Y, y0 + int(rng.integers(1, 12))))}
        bad["worst"] += not np.array_equal(worst_case_objectness_map(logits, cut, pcfg),
                                           window_objectness(logits, pcfg.w_x, pcfg.w_y, pcfg.T, cut))
        points = rng.random((X, Y)) < rng.uniform(0.05, 0.7)
        ccfg = ClusterConfig(float(rng.choice([1.0, 1.5, 2.0, 2.5, 3.0])), int(rng.integers(1, 13)))
        got = det_cluster(points, ccfg)
        got = None if got is None else {frozenset(c) for c in got}
        bad["cluster"] += got != table_dbscan(points, ccfg.eps, ccfg.min_points)
        rf = random_rf(rng)
        bx0, by0 = int(rng.integers(0, rf.W)), int(rng.integers(0, rf.H))
        box = PixelBox(bx0, by0, int(rng.integers(bx0 + 1, rf.W + 1)), int(rng.integers(by0 + 1, rf.H + 1)))
        bad["box"] += map_box_to_feature_space(box, rf) != naive_box_map(box, rf.r, rf.s, rf.W, rf.H)
        rects = []
        for _ in range(int(rng.integers(1, 3))):
            px, py = int(rng.integers(1, rf.W + 1)), int(rng.integers(1, rf.H + 1))
            rects.append(Rect(int(rng.integers(0, rf.W - px + 1)), int(rng.integers(0, rf.H - py + 1)), px, py))
        bad["footprint"] += corrupted_footprint(PatchSpec(tuple(rects)), rf) != \
            naive_footprint(rects, rf.r, rf.s, rf.W, rf.H)
    ok = not any(bad.values())
    record(2, "oracle equivalence", ok, f"{n} instances per function, mismatches {bad}")
    assert bad == dict(predict=0, worst=0, cluster=0, box=0, footprint=0)


def test_c3_corruption_bound():
    rng = np.random.default_rng(3)
    pairs = [(1, 1), (5, 1), (9, 4), (7, 3), (17, 6), (33, 8), (8, 8), (3, 5)]
    over = 0
    witnessed = {rs: False for rs in pairs}
    for k in range(10_000):
        r, s = pairs[k % len(pairs)]
        p = int(rng.integers(1, 65))
        rf = ReceptiveFieldConfig(r, s, r + s * 79, r + s * 79)
        x, y = (int(v) for v in rng.integers(0, rf.W - p + 1, size=2))
        cells = corrupted_footprint(PatchSpec.single(x, y, p, p), rf)
        xs = {c[0] for c in cells}
        ys = {c[1] for c in cells}
        bound = corruption_bound(p, r, s)
        over += len(xs) > bound or len(ys) > bound
        witnessed[(r, s)] |= len(xs) == bound or len(ys) == bound
    ok = over == 0 and all(witnessed.values())
    record(3, "corruption bound", ok, f"10000 tuples, {over} over the bound, "
           f"equality seen for {sum(witnessed.values())}/{len(pairs)} (r,s) pairs")
    assert over == 0 and all(witnessed.values())


def test_c4_clean_performance(desk_suite):
    rep = desk_suite.evaluate()
    ok = rep.ap >= rep.base_ap - 0.01 and rep.far <= 0.05 and rep.operating.reached
    record(4, "clean performance", ok, f"base AP {rep.base_ap:.4f}, defense AP {rep.ap:.4f}, "
           f"FAR@0.8 {rep.far:.4f} (threshold {rep.operating.point.threshold})")
    assert rep.operating.reached
    assert rep.ap >= rep.base_ap - 0.01
    assert rep.far <= 0.05


def test_c5_threat_model_ordering(desk_suite, desk_certs):
    _, rows, _ = desk_certs
    cr = recall_by_category(rows, desk_suite.dataset.n_objects())
    ok = cr["far"] >= cr["close"] >= cr["over"] and cr["far"] > 0
    record(5, "threat-model ordering", ok, " ".join(f"CR[{c}]={cr[c]:.4f}" for c in CATEGORIES))
    assert cr["far"] >= cr["close"] >= cr["over"]
    assert cr["far"] > 0


def antitone(vals):
    return all(a >= b for a, b in zip(vals, vals[1:]))


def test_c6_monotonicity(desk_suite, desk_certs):
    threshold, _, _ = desk_certs
    n_obj = desk_suite.dataset.n_objects()
    by_patch = {p: recall_by_category(desk_suite.certify((p, p), CATEGORIES, threshold), n_obj)
                for p in (8, 16, 24, 32)}
    patch_ok = all(antitone([by_patch[p][c] for p in sorted(by_patch)]) for c in CATEGORIES)

    by_T = {}
    for T in (80.0, 100.0, 120.0, 140.0, 160.0):
        s = desk_suite.with_config(dataclasses.replace(desk_suite.cfg, T=T))
        rep = s.evaluate()
        cr = recall_by_category(s.certify(PATCH, CATEGORIES, rep.operating.point.threshold), n_obj)
        by_T[T] = (rep.far, cr)
    Ts = sorted(by_T)
    T_ok = antitone([by_T[t][0] for t in Ts]) and all(antitone([by_T[t][1][c] for t in Ts]) for c in CATEGORIES)

    # nested footprints on real logits
    rng = np.random.default_rng(6)
    data = desk_suite.dataset
    pcfg, ccfg = desk_suite.cfg.pcfg, desk_suite.cfg.ccfg
    pairs = counter = outer_certified = 0
    while pairs < 1000:
        image_id = data.ids[int(rng.integers(len(data)))]
        objs = data.annotations[image_id]
        if not objs:
            continue
        obj = objs[int(rng.integers(len(objs)))]
        rf = desk_suite.model.rf_config(*data.images[image_id].shape[:2])
        fbox = map_box_to_feature_space(obj, rf)
        big = int(rng.integers(4, 48))
        small = int(rng.integers(1, big + 1))
        x, y = (int(v) for v in rng.integers(0, rf.W - big + 1, size=2))
        dx, dy = (int(v) for v in rng.integers(0, big - small + 1, size=2))
        outer = PatchSpec.single(x, y, big, big)
        inner = PatchSpec.single(x + dx, y + dy, small, small)
        logits = desk_suite.logits(image_id)
        a = dg_pa_one(logits, outer, fbox, pcfg, ccfg, rf)
        b = dg_pa_one(logits, inner, fbox, pcfg, ccfg, rf)
        outer_certified += a
        counter += a and not b
        pairs += 1
    ok = patch_ok and T_ok and counter == 0
    record(6, "monotonicity", ok,
           "patch " + ", ".join(f"{p}px " + "/".join(f"{by_patch[p][c]:.3f}" for c in CATEGORIES) for p in by_patch)
           + "; T " + ", ".join(f"{t:g}: FAR {by_T[t][0]:.3f} CR " + "/".join(f"{by_T[t][1][c]:.3f}" for c in CATEGORIES)
                                for t in Ts)
           + f"; nesting {counter} counterexamples in {pairs} pairs ({outer_certified} outer certified)")
    assert patch_ok, by_patch
    assert T_ok, by_T
    assert counter == 0 and outer_certified > 0


def test_c7_multi_patch_reduction(desk_suite):
    rng = np.random.default_rng(7)
    data = desk_suite.dataset
    pcfg, ccfg = desk_suite.cfg.pcfg, desk_suite.cfg.ccfg
    cases = mismatches = certified = 0
    while cases < 1000:
        image_id = data.ids[int(rng.integers(len(data)))]
        objs = data.annotations[image_id]
        if not objs:
            continue
        obj = objs[int(rng.integers(len(objs)))]
        rf = desk_suite.model.rf_config(*data.images[image_id].shape[:2])
        fbox = map_box_to_feature_space(obj, rf)
        rects = []
        for _ in range(2):
            px, py = (int(v) for v in rng.integers(1, 25, size=2))
            rects.append(Rect(int(rng.integers(0, rf.W - px + 1)), int(rng.integers(0, rf.H - py + 1)), px, py))
        two = PatchSpec(tuple(rects))
        logits = desk_suite.logits(image_id)
        got = dg_pa_one(logits, two, fbox, pcfg, ccfg, rf)
        union = corrupted_footprint(PatchSpec((rects[0],)), rf) | corrupted_footprint(PatchSpec((rects[1],)), rf)
        om = worst_case_objectness_map(logits, union, pcfg)
        expect = det_cluster(om[fbox.slices()], ccfg) is not None
        view = WorstCaseAnalyzer(logits, pcfg, ccfg, rf).object_view(obj)
        mismatches += got != expect or view.verdict_boxes(footprint_boxes(two, rf)) != expect
        certified += expect
        cases += 1
    ok = mismatches == 0 and 0 < certified < cases
    record(7, "multi-patch reduction", ok, f"{cases} two-rectangle cases, {mismatches} mismatches "
           f"({certified} certified)")
    assert mismatches == 0 and 0 < certified < cases


def test_c8_performance():
    rf = ReceptiveFieldConfig(33, 8, 416, 416)
    assert rf.feature_shape == (48, 48)
    rng = np.random.default_rng(8)
    logits = rng.normal(-1.0, 1.0, size=(48, 48, 4))
    logits[15:35, 15:35, 0] += 4.0
    obj = PixelBox(150, 150, 260, 260, 0)
    locs = enumerate_patch_locations((32, 32), rf, obj, ThreatModel("all", 8))
    analyzer = WorstCaseAnalyzer(logits, PredictorConfig(4, 4, 110.0), ClusterConfig(2.0, 10), rf)
    t0 = time.perf_counter()
    seq = analyzer.object_view(obj).sweep(locs)
    t1 = time.perf_counter() - t0
    t0 = time.perf_counter()
    par = parallel_sweep(analyzer.object_view(obj), locs, jobs=8)
    t8 = time.perf_counter() - t0
    speedup = t1 / t8
    same = np.array_equal(seq, par)
    fast = t1 < 10.0
    scales = speedup >= 4.0
    record(8, "performance", fast and scales and same,
           f"{len(locs)} locations, single-threaded {t1:.2f}s, 8 jobs {t8:.2f}s, speedup {speedup:.2f}x "
           f"on {os.cpu_count()} core(s)")
    assert len(locs) == 1681 and same
    assert fast
    assert scales, f"8-job speedup {speedup:.2f}x with {os.cpu_count()} core(s)"


def _pipeline(root: Path) -> None:
    root.mkdir()
    (root / "train.spec").write_text("n_images = 30\nseed = 1\n")
    (root / "eval.spec").write_text("n_images = 6\nseed = 0\n")
    (root / "run.cfg").write_text("n_feature_variants = 4\nn_pixel_variants = 2\n")
    c = ["--data", root / "ev", "--model", root / "model.txt", "--config", root / "run.cfg"]
    steps = [
        ["gen-data", "--spec", root / "train.spec", "--out", root / "train"],
        ["gen-data", "--spec", root / "eval.spec", "--out", root / "ev"],
        ["train", "--data", root / "train", "--out", root / "model.txt"],
        ["detect", *c, "--out", root / "verdicts.csv", "--maps", root / "maps"],
        ["eval", "--verdicts", root / "verdicts.csv", "--data", root / "ev", "--out", root / "report.csv"],
        ["certify", *c, "--patch", "16x16", "--out", root / "certs.csv"],
        ["attack-sim", "--data", root / "ev", "--model", root / "model.txt", "--certificates", root / "certs.csv",
         "--out", root / "violations.csv"],
        ["sweep", *c, "--param", "min_points", "--values", "6", "10", "--out", root / "sweep.csv"],
    ]
    for argv in steps:
        assert main([str(a) for a in argv]) == 0, argv
    for om in sorted((root / "maps").iterdir()):
        assert main(["render", "--map", str(om), "--out", str(om.with_suffix(".pgm"))]) == 0


def test_c9_determinism(tmp_path):
    trees = []
    for tag in ("first", "second"):
        _pipeline(tmp_path / tag)
        root = tmp_path / tag
        trees.append({p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()})
    kinds = {p.suffix for p in trees[0]}
    differing = sorted(str(p) for p in trees[0] if trees[0][p] != trees[1].get(p))
    ok = trees[0].keys() == trees[1].keys() and not differing and {".csv", ".pgm", ".ppm", ".txt"} <= kinds
    record(9, "determinism", ok, f"{len(trees[0])} files compared byte for byte, {len(differing)} differ")
    assert trees[0].keys() == trees[1].keys()
    assert differing == []
    assert {".csv", ".pgm", ".ppm", ".txt"} <= kinds
