"""Command-line surface: batch ingestion, evaluation, mixing, weighting,
assignment diagnosis, and report conversion.

Every subcommand is a pure function of its inputs, flags, and seed: outputs
are written atomically (temp file + rename) and are byte-identical for any
`--threads` value. Exit codes: 0 ok, 1 usage error, 2 input integrity error,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from . import assignlab, cocoio, evalcore, synthetic
from .geometry import GeometryError, SlendernessBin
from .util import write_text_atomic

__all__ = ["RunConfig", "run", "main"]

SUBCOMMANDS = ("eval", "slenderness", "mix", "weights", "assign", "nms", "report")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INTEGRITY = 2
EXIT_INTERNAL = 3

THREADS_ENV = "SLENDEREVAL_THREADS"


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    """One batch run: a subcommand plus its resolved options."""

    subcommand: str
    options: Mapping[str, Any] = field(default_factory=dict)
    threads: int = 0
    seed: int = 0

    def opt(self, name: str, default=None):
        return self.options.get(name, default)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we use 1
        raise UsageError(message)


def _parse_iou_range(text: str) -> tuple[float, ...]:
    """`start:stop:step` (inclusive) or a single value; values are rounded to
    canonical decimals so 0.6 is exactly 0.6."""
    parts = text.split(":")
    try:
        if len(parts) == 1:
            return (round(float(parts[0]), 10),)
        if len(parts) == 3:
            start, stop, step = (float(p) for p in parts)
            if step <= 0:
                raise ValueError
            out = []
            k = 0
            while True:
                v = round(start + k * step, 10)
                if v > stop + 1e-9:
                    break
                out.append(v)
                k += 1
            if not out:
                raise ValueError
            return tuple(out)
    except ValueError:
        pass
    raise UsageError(f"bad --iou value {text!r}; expected THR or START:STOP:STEP")

_BIN_ALIASES = {
    "slenderness": "slenderness_bin",
    "aspect": "aspect_group",
    "area": "area_range",
    "category": "category",
}


def _parse_bins(text: str) -> frozenset[str]:
    out = set()
    for token in text.split(","):
        token = token.strip()
        if token not in _BIN_ALIASES:
            raise UsageError(
                f"unknown --bins entry {token!r}; choose from {', '.join(_BIN_ALIASES)}"
            )
        out.add(_BIN_ALIASES[token])
    return frozenset(out)


def _parse_rates(text: str) -> cocoio.SampleRates:
    parts = text.split(",")
    if len(parts) != 3:
        raise UsageError("--rates takes XS,S,R e.g. 10,5,1")
    try:
        return cocoio.SampleRates(*(float(p) for p in parts))
    except ValueError as e:
        raise UsageError(f"bad --rates: {e}")


def _require_input(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input file not found: {path}")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="slendereval", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")

    def common(p):
        p.add_argument("--threads", type=int,
                       default=int(os.environ.get(THREADS_ENV, "0")),
                       help="worker threads; 0 = auto (results never depend on this)")
        p.add_argument("--seed", type=int, default=0, help="seed for synthetic inputs")

    p = sub.add_parser("eval", help="match detections and report mAP/mAR per stratum")
    p.add_argument("--gt", required=True, help="COCO annotations JSON")
    p.add_argument("--dt", required=True, help="COCO results JSON")
    p.add_argument("--out", required=True, help="report JSON output")
    p.add_argument("--iou", default="0.5:0.95:0.05", help="IoU thresholds THR or A:B:STEP")
    p.add_argument("--max-dets", type=int, default=100, help="per-image detection cap")
    p.add_argument("--bins", default="slenderness,aspect,area,category",
                   help="strata: comma list of slenderness,aspect,area,category")
    p.add_argument("--ap-bins", default="category,aspect",
                   help="strata that also report AP (slenderness is refused)")
    p.add_argument("--csv", help="also write the flat CSV report here")
    p.add_argument("--svg", help="also write a per-bin AR bar chart here")
    common(p)

    p = sub.add_parser("slenderness", help="write the per-annotation slenderness CSV")
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True, help="CSV output")
    common(p)

    p = sub.add_parser("mix", help="mix slender images of an extra dataset into a base one")
    p.add_argument("--base", required=True)
    p.add_argument("--extra", required=True)
    p.add_argument("--out", required=True, help="mixed COCO JSON output")
    p.add_argument("--filter-bin", default="XS", choices=[b.name for b in SlendernessBin],
                   help="mix in images containing objects at least this slender")
    p.add_argument("--id-offset", type=int, default=None,
                   help="id shift for extra records; default: next power of ten")
    common(p)

    p = sub.add_parser("weights", help="write per-image oversampling weights")
    p.add_argument("--gt", required=True)
    p.add_argument("--rates", required=True, help="bin rates XS,S,R e.g. 10,5,1")
    p.add_argument("--out", required=True, help="CSV output")
    common(p)

    p = sub.add_parser("assign", help="diagnose label-assignment strategies per bin")
    p.add_argument("--gt", help="COCO annotations JSON to diagnose")
    p.add_argument("--synthetic", action="append", default=[],
                   help="synthetic scene spec kind:dims:count, repeatable")
    p.add_argument("--strategy", default="iou,inbox,nearest_center",
                   help="comma list of iou,inbox,nearest_center")
    p.add_argument("--out", required=True, help="report JSON output")
    p.add_argument("--csv", help="also write the CSV report here")
    p.add_argument("--image-size", default="800x800", help="synthetic image size WxH")
    p.add_argument("--pos-thr", type=float, default=0.5)
    p.add_argument("--neg-thr", type=float, default=0.4)
    p.add_argument("--force-match", action="store_true",
                   help="also force each object's best anchor positive")
    common(p)

    p = sub.add_parser("nms", help="apply NMS to a results file")
    p.add_argument("--gt", required=True, help="annotations JSON (validates ids)")
    p.add_argument("--dt", required=True)
    p.add_argument("--out", required=True, help="filtered results JSON output")
    p.add_argument("--iou-thr", type=float, default=0.5)
    p.add_argument("--class-agnostic", action="store_true")
    common(p)

    p = sub.add_parser("report", help="convert an eval report JSON to CSV/SVG")
    p.add_argument("--in", dest="in_path", required=True, help="report JSON from eval")
    p.add_argument("--out", required=True, help="CSV output")
    p.add_argument("--svg", help="also write a per-bin AR bar chart here")
    common(p)

    return parser


def _cmd_eval(cfg: RunConfig) -> str:
    ds = cocoio.load_ground_truth(_require_input(cfg.opt("gt")))
    dt = cocoio.load_detections(_require_input(cfg.opt("dt")), ds)
    ds = cocoio.annotate_slenderness(ds, cfg.threads)
    try:
        eval_cfg = evalcore.EvalConfig(
            iou_thresholds=_parse_iou_range(cfg.opt("iou")),
            max_dets=cfg.opt("max_dets"),
            strata=_parse_bins(cfg.opt("bins")),
            ap_strata=_parse_bins(cfg.opt("ap_bins")),
        )
    except ValueError as e:
        raise UsageError(str(e))
    report = evalcore.evaluate(ds, dt, eval_cfg, threads=cfg.threads)
    write_text_atomic(cfg.opt("out"), report.to_json())
    if cfg.opt("csv"):
        write_text_atomic(cfg.opt("csv"), report.to_csv())
    if cfg.opt("svg"):
        write_text_atomic(cfg.opt("svg"), report.svg_slenderness_ar())

    def show(v):
        return "n/a" if v is None else f"{v:.4f}"

    return f"eval: mAP={show(report.mAP)} mAR={show(report.mAR)} -> {cfg.opt('out')}"


def _cmd_slenderness(cfg: RunConfig) -> str:
    ds = cocoio.load_ground_truth(_require_input(cfg.opt("gt")))
    ds = cocoio.annotate_slenderness(ds, cfg.threads)
    text = cocoio.write_slenderness_csv(ds)
    write_text_atomic(cfg.opt("out"), text)
    rows = text.count("\n") - 1
    return f"slenderness: {rows} annotations -> {cfg.opt('out')}"


def _cmd_mix(cfg: RunConfig) -> str:
    base = cocoio.annotate_slenderness(
        cocoio.load_ground_truth(_require_input(cfg.opt("base"))), cfg.threads
    )
    extra = cocoio.annotate_slenderness(
        cocoio.load_ground_truth(_require_input(cfg.opt("extra"))), cfg.threads
    )
    mixed = cocoio.mix_datasets(
        base,
        extra,
        cocoio.MixConfig(
            filter_bin=SlendernessBin[cfg.opt("filter_bin")],
            id_offset=cfg.opt("id_offset"),
        ),
    )
    write_text_atomic(cfg.opt("out"), cocoio.dump_ground_truth(mixed))
    added = len(mixed.images) - len(base.images)
    return f"mix: {len(base.images)}+{added} images -> {cfg.opt('out')}"


def _cmd_weights(cfg: RunConfig) -> str:
    ds = cocoio.load_ground_truth(_require_input(cfg.opt("gt")))
    ds = cocoio.annotate_slenderness(ds, cfg.threads)
    weights = cocoio.sampling_weights(ds, _parse_rates(cfg.opt("rates")))
    write_text_atomic(cfg.opt("out"), cocoio.write_weights_csv(weights))
    return f"weights: {len(weights)} images -> {cfg.opt('out')}"


def _cmd_assign(cfg: RunConfig) -> str:
    specs = cfg.opt("synthetic") or []
    if bool(cfg.opt("gt")) == bool(specs):
        raise UsageError("assign needs exactly one of --gt or --synthetic")
    meta: dict[str, Any] = {}
    if specs:
        size_text = cfg.opt("image_size")
        try:
            w, h = (int(v) for v in size_text.split("x", 1))
        except ValueError:
            raise UsageError(f"bad --image-size {size_text!r}; expected WxH")
        try:
            ds = synthetic.generate_scenes(specs, (w, h), cfg.seed)
        except ValueError as e:
            raise UsageError(str(e))
        meta = {"seed": cfg.seed, "synthetic": list(specs), "image_size": size_text}
    else:
        ds = cocoio.load_ground_truth(_require_input(cfg.opt("gt")))
    ds = cocoio.annotate_slenderness(ds, cfg.threads)
    strategies = tuple(s.strip() for s in cfg.opt("strategy").split(",") if s.strip())
    pos_thr, neg_thr = cfg.opt("pos_thr"), cfg.opt("neg_thr")
    if not (0.0 < neg_thr <= pos_thr < 1.0):
        raise UsageError("need 0 < --neg-thr <= --pos-thr < 1")
    for strategy in strategies:
        if strategy not in assignlab.STRATEGIES:
            raise UsageError(
                f"unknown strategy {strategy!r}; known: {', '.join(assignlab.STRATEGIES)}"
            )
    report = assignlab.diagnose(
        ds,
        strategies,
        pos_thr=pos_thr,
        neg_thr=neg_thr,
        force_match=bool(cfg.opt("force_match")),
        threads=cfg.threads,
    )
    report.meta.update(meta)
    write_text_atomic(cfg.opt("out"), report.to_json())
    if cfg.opt("csv"):
        write_text_atomic(cfg.opt("csv"), report.to_csv())
    n_gt = sum(cell.count for cell in report.cells.values()) // max(len(strategies), 1)
    return f"assign: {','.join(strategies)} over {n_gt} objects -> {cfg.opt('out')}"


def _cmd_nms(cfg: RunConfig) -> str:
    ds = cocoio.load_ground_truth(_require_input(cfg.opt("gt")))
    dt = cocoio.load_detections(_require_input(cfg.opt("dt")), ds)
    iou_thr = cfg.opt("iou_thr")
    if not (0.0 < iou_thr < 1.0):
        raise UsageError(f"--iou-thr must lie in (0, 1), got {iou_thr}")
    kept = []
    for image_id in sorted(dt.by_image):
        kept.extend(
            evalcore.nms(dt.by_image[image_id], iou_thr, bool(cfg.opt("class_agnostic")))
        )
    payload = json.dumps(cocoio.detections_to_coco(kept), indent=2, sort_keys=True) + "\n"
    write_text_atomic(cfg.opt("out"), payload)
    return f"nms: kept {len(kept)}/{len(dt)} detections -> {cfg.opt('out')}"


def _cmd_report(cfg: RunConfig) -> str:
    path = _require_input(cfg.opt("in_path"))
    try:
        report = evalcore.EvalReport.from_dict(json.loads(path.read_bytes()))
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise cocoio.ParseError(f"not an eval report: {e}")
    write_text_atomic(cfg.opt("out"), report.to_csv())
    if cfg.opt("svg"):
        write_text_atomic(cfg.opt("svg"), report.svg_slenderness_ar())
    return f"report: {cfg.opt('in_path')} -> {cfg.opt('out')}"


_HANDLERS = {
    "eval": _cmd_eval,
    "slenderness": _cmd_slenderness,
    "mix": _cmd_mix,
    "weights": _cmd_weights,
    "assign": _cmd_assign,
    "nms": _cmd_nms,
    "report": _cmd_report,
}


def run(cfg: RunConfig) -> int:
    """Execute one subcommand; returns the process exit status."""
    try:
        summary = _HANDLERS[cfg.subcommand](cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except evalcore.SlendernessAPError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (cocoio.DatasetError, GeometryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INTEGRITY
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INTEGRITY
    except Exception as e:  # anything else is a broken invariant on our side
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    print(summary)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if not ns.subcommand:
            raise UsageError("missing subcommand")
        if ns.threads < 0:
            raise UsageError("--threads must be >= 0")
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    options = {k: v for k, v in vars(ns).items() if k not in ("subcommand", "threads", "seed")}
    cfg = RunConfig(ns.subcommand, options, threads=ns.threads, seed=ns.seed)
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
