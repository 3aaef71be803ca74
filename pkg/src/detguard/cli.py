"""Command-line interface.

Every CSV output starts with ``# key = value`` comment lines echoing the
effective configuration. Failures exit non-zero with a one-line
``error: <kind>: <message>`` on stderr and leave no partial outputs.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import io
import logging
import os
import shutil
import sys
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .attack import SoundnessStats, run_soundness
from .certifier import CATEGORIES, Certificate, enumerate_patch_locations, ThreatModel
from .detectors import BaseDetector, Detection, ExternalDetector, PerfectCleanDetector
from .evaluation import EvalConfig, VerdictRecord, evaluate, per_class_recall, report_rows, REPORT_COLUMNS
from .geometry import PixelBox, Rect
from .kvconfig import ConfigError, comment_header, format_value, kv_lines, load_kv, parse_comment_header, from_mapping
from .local_model import load_model, save_model, train_local_model
from .netpbm import write_pgm
from .pipeline import CertRow, RunConfig, Suite, recall_by_category
from .synthdata import MANIFEST, SceneSpec, load_dataset, sha256_file, write_dataset

log = logging.getLogger("detguard")

VERDICT_COLUMNS = ("image_id", "conf_threshold", "alert", "base_detections", "detections")
CERT_COLUMNS = ("image_id", "object_id", "label", "category", "n_locations", "certified", "failing_x", "failing_y")
VIOLATION_COLUMNS = ("image_id", "object_id", "patch_x", "patch_y", "strategy", "outcome")
SWEEP_PARAMS = ("T", "window", "eps", "min_points", "patch")
MAP_MAGIC = "OMAP v1"


class CliError(Exception):
    pass


# --- output helpers -----------------------------------------------------------

class Outputs:
    """Tracks files a command writes so they can be removed on failure."""

    def __init__(self):
        self.paths: list[Path] = []
        self.dirs: list[Path] = []

    def file(self, path) -> Path:
        path = Path(path)
        self.paths.append(path)
        return path

    def directory(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            self.dirs.append(path)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def cleanup(self) -> None:
        for p in self.paths:
            with contextlib.suppress(FileNotFoundError):
                p.unlink()
        for d in reversed(self.dirs):
            shutil.rmtree(d, ignore_errors=True)


def write_csv(path: Path, header: Sequence[str], columns: Sequence[str], rows) -> None:
    buf = io.StringIO()
    buf.write(comment_header(header))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path) -> tuple[dict[str, str], list[dict[str, str]]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = parse_comment_header(lines)
    body = [ln for ln in lines if not ln.startswith("#")]
    return header, list(csv.DictReader(body))


def sibling(path: Path, tag: str) -> Path:
    return path.with_name(f"{path.stem}.{tag}{path.suffix or '.csv'}")


# --- shared loading -------------------------------------------------------------

def load_config(path: Optional[str]) -> RunConfig:
    return RunConfig() if path is None else load_kv(path, RunConfig)


def make_base(spec: str, dataset) -> BaseDetector:
    if spec == "perfect":
        return PerfectCleanDetector(dataset.annotations)
    if spec.startswith("external:"):
        return ExternalDetector.from_file(spec[len("external:"):], known_ids=dataset.ids)
    raise CliError(f"unknown base detector {spec!r} (expected perfect or external:PATH)")


def parse_patch(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise CliError(f"bad patch size {text!r} (expected WxH)") from None
    if w < 1 or h < 1:
        raise CliError(f"patch size must be positive, got {text}")
    return w, h


def run_header(cfg: RunConfig, data: str, model_path: Optional[str] = None, **extra) -> list[str]:
    lines = kv_lines(cfg)
    lines.append(f"data_manifest_sha256 = {sha256_file(Path(data) / MANIFEST)}")
    if model_path is not None:
        lines.append(f"model_sha256 = {sha256_file(model_path)}")
    lines += [f"{k} = {format_value(v)}" for k, v in extra.items()]
    return lines


def format_detections(dets: Sequence[Detection]) -> str:
    return ";".join(f"{d.box.x_min} {d.box.y_min} {d.box.x_max} {d.box.y_max} {d.label} {d.confidence!r}"
                    for d in dets)


def parse_detections(text: str) -> tuple[Detection, ...]:
    if not text:
        return ()
    return tuple(Detection.from_values(*p.split()[:5], float(p.split()[5])) for p in text.split(";"))


def categories_of(name: str) -> tuple[str, ...]:
    if name == "all":
        return CATEGORIES
    if name not in CATEGORIES:
        raise CliError(f"unknown category {name!r}")
    return (name,)


# --- subcommands ------------------------------------------------------------------

def cmd_gen_data(args, out: Outputs) -> None:
    spec = load_kv(args.spec, SceneSpec)
    root = out.directory(args.out)
    write_dataset(spec, root)
    print(f"wrote {spec.n_images} images to {root}")


def cmd_train(args, out: Outputs) -> None:
    cfg = load_config(args.config)
    data = load_dataset(args.data, verify=True)
    model = train_local_model(data.items(), data.n_classes, cfg.r, cfg.s, learning_rate=cfg.learning_rate,
                              epochs=cfg.epochs, seed=cfg.seed, n_proj=cfg.n_proj)
    save_model(model, out.file(args.out))
    print(f"trained model on {len(data)} images -> {args.out}")


def _suite(args) -> Suite:
    cfg = load_config(args.config)
    data = load_dataset(args.data, verify=True)
    model = load_model(args.model)
    if model.n_classes != data.n_classes:
        raise CliError(f"model has {model.n_classes} classes, dataset has {data.n_classes}")
    return Suite(data, model, make_base(args.base, data), cfg)


def cmd_detect(args, out: Outputs) -> None:
    suite = _suite(args)
    rows = []
    for rec in suite.verdicts():
        dets = "" if rec.alert else format_detections(rec.base)
        rows.append([rec.image_id, repr(rec.threshold), int(rec.alert), format_detections(rec.base), dets])
    header = run_header(suite.cfg, args.data, args.model, base=args.base)
    write_csv(out.file(args.out), header, VERDICT_COLUMNS, rows)
    if args.maps:
        root = out.directory(args.maps)
        for i in suite.dataset.ids:
            write_map(out.file(root / f"{i}.om"), suite.objectness(i))
    print(f"wrote {len(rows)} verdicts to {args.out}")


def cmd_certify(args, out: Outputs) -> None:
    suite = _suite(args)
    patch = parse_patch(args.patch)
    cats = categories_of(args.category)
    threshold = args.threshold if args.threshold is not None else suite.operating_threshold()
    rows = suite.certify(patch, cats, threshold, jobs=args.jobs)
    header = run_header(suite.cfg, args.data, args.model, base=args.base, patch=f"{patch[0]}x{patch[1]}",
                        category=args.category, conf_threshold=threshold)
    write_csv(out.file(args.out), header, CERT_COLUMNS, [cert_row(r) for r in rows])
    n_obj = suite.dataset.n_objects()
    summary = []
    for cat, cr in recall_by_category(rows, n_obj).items():
        summary.append([cat, "all", sum(r.certificate.certified for r in rows if r.certificate.category == cat),
                        n_obj, f"{cr:.6f}"])
        flags = [(r.label, r.certificate.certified) for r in rows if r.certificate.category == cat]
        for label, ok, tot in per_class_recall(flags, suite.dataset.n_classes):
            summary.append([cat, label, ok, tot, f"{ok / tot:.6f}" if tot else ""])
    write_csv(out.file(sibling(Path(args.out), "summary")), header, ("category", "label", "certified", "total", "cr"),
              summary)
    for row in summary:
        if row[1] == "all":
            print(f"CR[{row[0]}] = {row[4]}")


def cert_row(r: CertRow) -> list:
    c = r.certificate
    fx, fy = (c.failing_location.x, c.failing_location.y) if c.failing_location else ("", "")
    return [r.image_id, r.object_id, c.object.label, c.category, c.n_locations, int(c.certified), fx, fy]


def cmd_attack_sim(args, out: Outputs) -> None:
    header, rows = read_csv(args.certificates)
    try:
        cfg = from_mapping(header, RunConfig)
        patch = parse_patch(header["patch"])
        base_spec = header["base"]
    except KeyError as exc:
        raise CliError(f"{args.certificates}: header lacks {exc}") from None
    if header.get("model_sha256") != sha256_file(args.model):
        raise CliError("model file does not match the one the certificates were issued for")
    data = load_dataset(args.data, verify=True)
    if header.get("data_manifest_sha256") != sha256_file(Path(args.data) / MANIFEST):
        raise CliError("dataset does not match the one the certificates were issued for")
    model = load_model(args.model)
    base = make_base(base_spec, data)
    certified: dict[str, dict[int, set]] = {}
    n_cert = 0
    for row in rows:
        if row["certified"] != "1":
            continue
        n_cert += 1
        image_id, k = row["image_id"], int(row["object_id"])
        obj = data.annotations[image_id][k]
        rf = model.rf_config(*data.images[image_id].shape[:2])
        # attack every footprint the claim covers, including the dominated ones
        locs = enumerate_patch_locations(patch, rf, obj, ThreatModel(row["category"], cfg.close_distance),
                                         prune_dominated=False)
        certified.setdefault(image_id, {}).setdefault(k, set()).update(locs)
    certified_lists = {i: {k: sorted(v) for k, v in objs.items()} for i, objs in certified.items()}
    stats = run_soundness(data.images, data.annotations, certified_lists, model, base, cfg.pcfg, cfg.ccfg,
                          jobs=args.jobs, n_feature=cfg.n_feature_variants, n_pixel=cfg.n_pixel_variants,
                          seed=args.seed, drop_rate=cfg.drop_rate, iou_threshold=cfg.iou_threshold)
    out_header = kv_lines(cfg) + [f"{k} = {header[k]}" for k in ("data_manifest_sha256", "model_sha256", "base",
                                                                  "patch")] + [f"seed = {args.seed}"]
    write_csv(out.file(args.out), out_header, VIOLATION_COLUMNS,
              [[v.image_id, v.object_id, v.patch_x, v.patch_y, v.strategy, v.outcome] for v in stats.violations])
    print(f"certificates={n_cert} locations={stats.locations} variants={stats.variants} checks={stats.checks} "
          f"violations={len(stats.violations)}")


def cmd_eval(args, out: Outputs) -> None:
    header, rows = read_csv(args.verdicts)
    cfg = from_mapping(header, RunConfig)
    anchor = cfg.anchor if args.anchor is None else args.anchor
    ecfg = EvalConfig(cfg.iou_threshold, tuple(cfg.conf_grid), anchor)
    data = load_dataset(args.data)
    records = []
    for row in rows:
        if row["image_id"] not in data.annotations:
            raise CliError(f"verdict for unknown image {row['image_id']!r}")
        records.append(VerdictRecord(row["image_id"], float(row["conf_threshold"]),
                                     parse_detections(row["base_detections"]), row["alert"] == "1"))
    report = evaluate(records, data.annotations, ecfg)
    out_header = kv_lines(dataclasses.replace(cfg, anchor=anchor)) + [f"verdicts_sha256 = {sha256_file(args.verdicts)}"]
    write_csv(out.file(args.out), out_header, REPORT_COLUMNS, report_rows(report))
    flag = "" if report.operating.reached else " (anchor not reached)"
    print(f"base AP={report.base_ap:.4f} defense AP={report.ap:.4f} FAR@{anchor}={report.far:.4f}{flag}")


def write_map(path: Path, om: np.ndarray) -> None:
    X, Y = om.shape
    lines = [f"{MAP_MAGIC} {X} {Y}"] + ["".join("1" if om[x, y] else "0" for x in range(X)) for y in range(Y)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_map(path) -> np.ndarray:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 4 or " ".join(head[:2]) != MAP_MAGIC:
        raise CliError(f"{path}: not an objectness map dump")
    X, Y = int(head[2]), int(head[3])
    body = lines[1:1 + Y]
    if len(body) != Y or any(len(row) != X or set(row) - {"0", "1"} for row in body):
        raise CliError(f"{path}: malformed {X}x{Y} map body")
    return np.array([[c == "1" for c in row] for row in body], dtype=bool).T


def cmd_render(args, out: Outputs) -> None:
    om = read_map(args.map)
    write_pgm(out.file(args.out), om.astype(np.uint8) * 255)


def cmd_sweep(args, out: Outputs) -> None:
    suite = _suite(args)
    patch = parse_patch(args.patch)
    rows = []
    for raw in args.values:
        if args.param == "patch":
            cfg, p = suite.cfg, parse_patch(raw if "x" in raw else f"{raw}x{raw}")
        else:
            cfg, p = sweep_config(suite.cfg, args.param, raw), patch
        s = suite.with_config(cfg)
        report = s.evaluate()
        threshold = report.operating.point.threshold
        certs = s.certify(p, CATEGORIES, threshold, jobs=args.jobs)
        cr = recall_by_category(certs, s.dataset.n_objects())
        rows.append([args.param, raw, f"{report.base_ap:.6f}", f"{report.ap:.6f}", f"{report.far:.6f}",
                     repr(threshold)] + [f"{cr[c]:.6f}" for c in CATEGORIES])
        print(f"{args.param}={raw} AP={report.ap:.4f} FAR={report.far:.4f} "
              + " ".join(f"CR[{c}]={cr[c]:.4f}" for c in CATEGORIES))
    header = run_header(suite.cfg, args.data, args.model, base=args.base, patch=f"{patch[0]}x{patch[1]}",
                        sweep_param=args.param, sweep_values=" ".join(args.values))
    write_csv(out.file(args.out), header,
              ("param", "value", "base_ap", "ap", "far", "conf_threshold") + tuple(f"cr_{c}" for c in CATEGORIES), rows)


def sweep_config(cfg: RunConfig, param: str, raw: str) -> RunConfig:
    try:
        if param == "T":
            return dataclasses.replace(cfg, T=float(raw))
        if param == "window":
            w = [int(v) for v in raw.lower().split("x")]
            return dataclasses.replace(cfg, w_x=w[0], w_y=w[-1])
        if param == "eps":
            return dataclasses.replace(cfg, eps=float(raw))
        if param == "min_points":
            return dataclasses.replace(cfg, min_points=int(raw))
    except ValueError as exc:
        raise CliError(f"bad {param} value {raw!r}: {exc}") from None
    raise CliError(f"unknown sweep parameter {param!r}")


# --- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="detguard", description="Certified defense against patch hiding attacks.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the local classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    def common(p):
        p.add_argument("--data", required=True)
        p.add_argument("--model", required=True)
        p.add_argument("--base", default="perfect", help="perfect or external:PATH")
        p.add_argument("--config")

    p = sub.add_parser("detect", help="run the defended detector over the confidence grid")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--maps", help="directory for objectness map dumps")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("certify", help="certify every object against a patch size")
    common(p)
    p.add_argument("--patch", required=True, help="WxH in pixels")
    p.add_argument("--category", default="all", choices=CATEGORIES + ("all",),
                   help="'all' reports far, close and over separately")
    p.add_argument("--threshold", type=float, help="base-detector confidence threshold (default: recall anchor)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("attack-sim", help="attack certified objects; the violation log must stay empty")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--certificates", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attack_sim)

    p = sub.add_parser("eval", help="metrics from a verdict log")
    p.add_argument("--verdicts", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--anchor", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="objectness map dump to binary PGM")
    p.add_argument("--map", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("sweep", help="AP, FAR and CR across one hyper-parameter")
    common(p)
    p.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    p.add_argument("--values", required=True, nargs="+")
    p.add_argument("--patch", default="16x16")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Outputs()
    try:
        args.func(args, out)
    except (CliError, ConfigError, ValueError, KeyError, OSError, RuntimeError) as exc:
        out.cleanup()
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
