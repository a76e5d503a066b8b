"""Command-line entry point: ``hierpose <command> [options]``.

Every command that writes files also writes ``<output>.manifest.json`` with
the resolved configuration, input and output digests and the package
version. A manifest can be passed back through ``--config`` to rerun the
command with the same settings.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

from . import __version__
from .bench import bench_decode, svg_chart
from .decoder import decode_people
from .encoder import encode_targets
from .errors import HierPoseError
from .evaluator import (
    evaluate_box_ap,
    evaluate_wholebody,
    face_boxes_from_keypoints,
    gt_face_boxes,
    load_sigmas,
    results_from_json,
    results_to_json,
)
from .gradcheck import check_all, check_maps
from .layout import HierarchyScheme, dump_dataset, load_dataset
from .maps import TargetMaps, load_maps, read_meta, save_maps
from .synth import NoiseSpec, SceneSpec, generate_scene, perfect_maps, perturb_maps

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_IO = 2

COMMANDS = ("synth", "encode", "decode", "eval", "bench", "gradcheck", "overlay")

PART_COLORS = {"body": "#1f77b4", "foot": "#2ca02c", "face": "#d62728", "hand": "#9467bd"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: str | Path, obj: Any) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _write_manifest(args: argparse.Namespace, inputs: Sequence[str], outputs: Sequence[str], extra: dict | None = None) -> None:
    if not outputs:
        return
    manifest = {
        "command": args.command,
        "config": _config_of(args),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
        "version": __version__,
    }
    if extra:
        manifest.update(extra)
    _write_json(f"{outputs[0]}.manifest.json", manifest)


def _config_of(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("handler", "config", "command")}


def _scheme(value: str) -> HierarchyScheme:
    try:
        return HierarchyScheme.parse(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _int_list(value: str) -> list[int]:
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}") from exc


# ---------------------------------------------------------------------------
# Commands


def _cmd_synth(args: argparse.Namespace) -> int:
    spec = SceneSpec(
        seed=args.seed,
        n_persons=args.persons,
        image_size=args.image_size,
        scale_range=(args.scale_min, args.scale_max),
        missing_foot_rate=args.missing_foot_rate,
        stride=args.stride,
    )
    scene = generate_scene(spec)
    dump_dataset({args.seed: scene}, args.out, form=args.format, image_size=(args.image_size, args.image_size))
    outputs = [args.out]
    if args.maps:
        maps = perfect_maps(scene, args.scheme, args.image_size, args.stride)
        noise = NoiseSpec(offset_fraction=args.noise_offset, heatmap_jitter=args.noise_jitter)
        seed = args.seed if args.noise_seed is None else args.noise_seed
        save_maps(args.maps, perturb_maps(maps, noise, seed), meta={"image_id": args.seed})
        outputs.append(args.maps)
    _write_manifest(args, [], outputs)
    print(f"wrote {len(scene)} persons to {args.out}")
    return EXIT_OK


def _pick_image(groups: dict, image_id: Any, path: str) -> tuple[Any, list]:
    if not groups:
        raise HierPoseError(f"{path}: no images")
    if image_id is None:
        image_id = next(iter(groups))
    for key in groups:
        if str(key) == str(image_id):
            return key, groups[key]
    raise HierPoseError(f"{path}: no image with id {image_id}")


def _cmd_encode(args: argparse.Namespace) -> int:
    groups = load_dataset(args.input, use_shipped_boxes=args.use_shipped_boxes)
    image_id, anns = _pick_image(groups, args.image_id, args.input)
    targets = encode_targets(
        anns, args.scheme, args.input_size, args.stride,
        min_overlap=args.min_overlap, keypoint_radius=args.keypoint_radius,
    )
    meta = {"image_id": image_id} if isinstance(image_id, (int, float)) else None
    save_maps(args.out, targets, meta=meta)
    diag = vars(targets.diagnostics).copy()
    _write_manifest(args, [args.input], [args.out], {"diagnostics": diag})
    print(json.dumps({"image_id": image_id, "diagnostics": diag}, sort_keys=True))
    return EXIT_OK


def _cmd_decode(args: argparse.Namespace) -> int:
    maps = load_maps(args.input, args.scheme, args.stride).as_prediction()
    image_id = args.image_id
    if image_id is None:
        stored = read_meta(args.input).get("image_id")
        image_id = int(stored) if stored is not None and float(stored).is_integer() else stored
    people = decode_people(
        maps,
        max_people=args.topk,
        center_threshold=args.center_thresh,
        keypoint_threshold=args.kp_thresh,
        fallback_factor=args.fallback_factor,
        box_margin=args.box_margin,
    )
    _write_json(args.out, results_to_json({image_id if image_id is not None else 0: people}))
    _write_manifest(args, [args.input], [args.out])
    print(f"decoded {len(people)} persons to {args.out}")
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    gts = load_dataset(args.gt)
    records = json.loads(Path(args.results).read_text())
    if not isinstance(records, list):
        raise HierPoseError(f"{args.results}: expected a JSON list of results")
    results = results_from_json(records)
    # Result image ids may have gone through JSON as strings or ints.
    by_key = {str(k): k for k in gts}
    results = {by_key.get(str(k), k): v for k, v in results.items()}
    sigmas = load_sigmas(args.sigmas)
    report = evaluate_wholebody(results, gts, sigmas, max_dets=args.max_dets)
    out = {"keypoints": report.to_dict()}
    if args.face_boxes:
        boxes = {k: [b for b in (face_boxes_from_keypoints(p) for p in v) if b is not None] for k, v in results.items()}
        out["face_box"] = evaluate_box_ap(boxes, gt_face_boxes(gts)).to_dict()
    print(report.to_table())
    inputs = [args.gt, args.results] + ([args.sigmas] if args.sigmas else [])
    if args.out:
        _write_json(args.out, out)
        _write_manifest(args, inputs, [args.out])
    return EXIT_OK


def _cmd_bench(args: argparse.Namespace) -> int:
    spec = SceneSpec(seed=args.seed, image_size=args.image_size, scale_range=(args.scale_min, args.scale_max))
    result = bench_decode(args.persons_list, spec, args.reps, scheme=args.scheme, warmup=args.warmup)
    for row in result.rows:
        flag = "  (flagged: timer resolution)" if row.flagged else ""
        print(f"n={row.n_persons:3d}  median {row.median_ms:8.3f} ms  p95 {row.p95_ms:8.3f} ms{flag}")
    print(f"normalized slope {result.normalized_slope():.4f} / person")
    outputs = []
    if args.csv:
        result.write_csv(args.csv)
        outputs.append(args.csv)
    if args.svg:
        Path(args.svg).write_text(svg_chart(result))
        outputs.append(args.svg)
    _write_manifest(args, [], outputs, {"result": result.to_dict()})
    return EXIT_OK


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    inputs = []
    if args.pred or args.target:
        if not (args.pred and args.target):
            raise HierPoseError("--pred and --target must be given together")
        target = load_maps(args.target)
        if not isinstance(target, TargetMaps):
            raise HierPoseError(f"{args.target}: not a target dump (no masks)")
        pred = load_maps(args.pred, target.scheme, target.stride).as_prediction()
        checks = check_maps(pred, target, args.points, args.seed, args.step, args.tol)
        inputs = [args.pred, args.target]
    else:
        checks = check_all(args.points, args.seed, args.step, args.tol)
    report = {"checks": [c.to_dict() for c in checks], "passed": all(c.passed for c in checks)}
    for c in checks:
        print(f"{c.loss:22s} {c.points:4d} pts  max rel err {c.max_rel_error:.3e}  {'pass' if c.passed else 'FAIL'}")
    if args.out:
        _write_json(args.out, report)
        _write_manifest(args, inputs, [args.out])
    return EXIT_OK if report["passed"] else EXIT_INVALID


def overlay_svg(people: Sequence, width: int, height: int, min_score: float = 0.0, radius: float = 1.5) -> str:
    """SVG with one circle per keypoint (133 per person), colored by part."""
    from .layout import part_name

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for i, p in enumerate(people):
        if p.score < min_score:
            continue
        x, y, w, h = p.box.xywh
        lines.append(f'<g class="person" data-index="{i}" data-score="{p.score:.4f}">')
        lines.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{w:.2f}" height="{h:.2f}" fill="none" stroke="#7f7f7f"/>')
        for k, (kx, ky, ks) in enumerate(p.keypoints):
            part = part_name(k)
            lines.append(
                f'<circle cx="{kx:.2f}" cy="{ky:.2f}" r="{radius}" fill="{PART_COLORS[part]}" '
                f'class="{part}" data-k="{k}" data-score="{ks:.3f}"/>'
            )
        lines.append("</g>")
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def _cmd_overlay(args: argparse.Namespace) -> int:
    records = json.loads(Path(args.input).read_text())
    if not isinstance(records, list):
        raise HierPoseError(f"{args.input}: expected a JSON list of results")
    results = results_from_json(records)
    if args.image_id is not None:
        results = {k: v for k, v in results.items() if str(k) == str(args.image_id)}
    people = [p for v in results.values() for p in v]
    Path(args.out).write_text(overlay_svg(people, args.width, args.height, args.min_score))
    _write_manifest(args, [args.input], [args.out])
    print(f"wrote {len(people)} persons to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file whose keys override flags (a run manifest also works)")

    parser = _Parser(prog="hierpose", description="Hierarchical whole-body pose tools")
    parser.add_argument("--version", action="version", version=f"hierpose {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def add(name: str, handler: Callable, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=help)
        p.set_defaults(handler=handler)
        return p

    p = add("synth", _cmd_synth, "generate a synthetic scene (and optionally its prediction maps)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--persons", type=int, default=3)
    p.add_argument("--image-size", type=int, default=512)
    p.add_argument("--scale-min", type=float, default=128.0)
    p.add_argument("--scale-max", type=float, default=320.0)
    p.add_argument("--missing-foot-rate", type=float, default=0.0)
    p.add_argument("--format", choices=("split", "flat"), default="split")
    p.add_argument("--out", default="scene.json")
    p.add_argument("--maps", help="also write perfect (optionally perturbed) prediction maps here")
    p.add_argument("--scheme", type=_scheme, default=HierarchyScheme.HM2)
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--noise-offset", type=float, default=0.0, help="offset noise as a fraction of anchor distance")
    p.add_argument("--noise-jitter", type=float, default=0.0, help="heatmap peak jitter in cells")
    p.add_argument("--noise-seed", type=int, default=None)

    p = add("encode", _cmd_encode, "encode one image's annotations into target maps")
    p.add_argument("--input", required=True)
    p.add_argument("--out", default="targets.hprt")
    p.add_argument("--image-id", default=None)
    p.add_argument("--scheme", type=_scheme, default=HierarchyScheme.HM2)
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--input-size", type=int, default=512)
    p.add_argument("--min-overlap", type=float, default=0.7)
    p.add_argument("--keypoint-radius", type=int, default=2)
    p.add_argument("--use-shipped-boxes", action="store_true")

    p = add("decode", _cmd_decode, "decode prediction maps into whole-body poses")
    p.add_argument("--input", required=True)
    p.add_argument("--out", default="results.json")
    p.add_argument("--image-id", default=None)
    p.add_argument("--scheme", type=_scheme, default=None)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--topk", type=int, default=100)
    p.add_argument("--center-thresh", type=float, default=0.1)
    p.add_argument("--kp-thresh", type=float, default=0.1)
    p.add_argument("--fallback-factor", type=float, default=0.5)
    p.add_argument("--box-margin", type=float, default=0.0)

    p = add("eval", _cmd_eval, "whole-body keypoint AP/AR of results against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--results", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--sigmas", default=None, help="JSON sigma table (default: bundled COCO-WholeBody constants)")
    p.add_argument("--max-dets", type=int, default=20)
    p.add_argument("--face-boxes", action="store_true", help="also report face-box AP from face keypoints")

    p = add("bench", _cmd_bench, "time decoding against person count")
    p.add_argument("--persons-list", type=_int_list, default=[1, 5, 10, 20, 30])
    p.add_argument("--reps", type=int, default=30)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=512)
    p.add_argument("--scale-min", type=float, default=64.0)
    p.add_argument("--scale-max", type=float, default=160.0)
    p.add_argument("--scheme", type=_scheme, default=HierarchyScheme.HM2)
    p.add_argument("--csv", default="bench.csv")
    p.add_argument("--svg", default="bench.svg")

    p = add("gradcheck", _cmd_gradcheck, "check analytic loss gradients against finite differences")
    p.add_argument("--points", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--pred", default=None, help="prediction dump (with --target: check on real maps)")
    p.add_argument("--target", default=None, help="target dump written by encode")
    p.add_argument("--out", default=None)

    p = add("overlay", _cmd_overlay, "draw decoded poses as SVG circles")
    p.add_argument("--input", required=True)
    p.add_argument("--out", default="overlay.svg")
    p.add_argument("--image-id", default=None)
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--height", type=int, default=512)
    p.add_argument("--min-score", type=float, default=0.0)
    return parser


def _config_path(argv: Sequence[str]) -> str | None:
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def _config_argv(path: str, command: str | None) -> tuple[list[str], dict]:
    """Flags equivalent to a config file; appended last so they win over the command line."""
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise HierPoseError(f"{path}: config must be a JSON object")
    if isinstance(data.get("config"), dict):
        if data.get("command") not in (None, command):
            raise HierPoseError(f"{path}: manifest is for command {data['command']!r}, not {command!r}")
        data = data["config"]
    extra: list[str] = []
    for key, value in data.items():
        flag = "--" + key.replace("_", "-")
        if value is None or value is False:
            continue
        if value is True:
            extra.append(flag)
        elif isinstance(value, list):
            extra += [flag, ",".join(str(v) for v in value)]
        else:
            extra += [flag, str(value)]
    return extra, data


def run(argv: Sequence[str] | None = None) -> int:
    """Run one command; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        config = _config_path(argv)
        data: dict = {}
        if config:
            command = next((a for a in argv if a in COMMANDS), None)
            extra, data = _config_argv(config, command)
            argv = argv + extra
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + f"hierpose: error: choose a command from {', '.join(COMMANDS)}")
        unknown = sorted(k for k in data if k.replace("-", "_") not in vars(args))
        if unknown:
            raise HierPoseError(f"{config}: unknown keys for {args.command}: {', '.join(unknown)}")
        for key, value in data.items():
            if value is None or value is False:
                setattr(args, key.replace("-", "_"), value)
        return args.handler(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID
    except json.JSONDecodeError as exc:
        print(f"hierpose: invalid JSON: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (HierPoseError, ValueError) as exc:
        print(f"hierpose: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"hierpose: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> int:
    return run()


if __name__ == "__main__":
    sys.exit(main())
