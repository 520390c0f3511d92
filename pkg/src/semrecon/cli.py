"""``semrecon`` command-line driver.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 internal error. Every command writes under ``--out`` and finishes by
writing ``manifest.json``, which lists each primary artifact with its SHA-256.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np
from PIL import Image

from . import __version__, pipeline, synth
from .config import ConfigError, PipelineConfig, apply_overrides
from .evaluate import EvalReport, recon_error, semantic_scores, vertex_labels_from_samples
from .fusion import Mesh
from .ingest import DataError, SequenceConfig, load_detections, load_sequence, sequence_intrinsics
from .kernels import BACKEND
from .plyio import PlyError, read_ply, write_ply
from .semmap import CORRECTED, FROM_DETECTOR, NEW_OBJECT, SparseSemanticMap

log = logging.getLogger("semrecon")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
CHECKPOINT = "map_checkpoint.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --- helpers --------------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Outputs:
    """Collects artifacts; nothing touches disk until the first write."""

    def __init__(self, cfg: PipelineConfig, command: str):
        if not cfg.run.out:
            raise UsageError("--out is required")
        self.root = Path(cfg.run.out)
        self.cfg = cfg
        self.command = command
        self.artifacts: List[str] = []
        self.log_lines: List[str] = []

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def add(self, rel: str) -> Path:
        if rel not in self.artifacts:
            self.artifacts.append(rel)
        return self.path(rel)

    def note(self, msg: str) -> None:
        log.info(msg)
        self.log_lines.append(msg)

    def finish(self, extra: Optional[dict] = None) -> None:
        manifest = {
            "command": self.command,
            "version": __version__,
            "config_sha256": self.cfg.digest(),
            "config": self.cfg.to_dict(),
            "artifacts": {a: _sha256(self.root / a) for a in sorted(self.artifacts)},
            **(extra or {}),
        }
        manifest["config"]["run"].pop("out", None)
        self.path("run.log").write_text("\n".join(self.log_lines) + "\n")
        self.path("manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _dataset(cfg: PipelineConfig):
    if not cfg.dataset.path:
        raise UsageError("--dataset is required")
    root = Path(cfg.dataset.path)
    if not root.is_dir():
        raise DataError("dataset directory does not exist", root)
    seq_cfg = SequenceConfig(depth_scale=cfg.dataset.depth_scale,
                             pose_tolerance=cfg.dataset.pose_tolerance, load_rgb=False)
    K = sequence_intrinsics(root, seq_cfg)
    frames = list(load_sequence(root, seq_cfg))
    if not frames:
        raise DataError("dataset holds no usable frames", root / "associations.txt")
    return root, K, frames


def _keyframes(root: Path, frames, cfg: PipelineConfig):
    keys = frames[:: cfg.dataset.keyframe_stride]
    dets = [load_detections(root, fr.frame_id, fr.depth.shape) for fr in keys]
    return keys, dets


def _gt_samples(root: Path):
    path = root / "gt" / "mesh_samples.ply"
    if not path.exists():
        return None
    gt = read_ply(path)
    return gt.vertices, gt.classes


# --- commands -----------------------------------------------------------------------

def cmd_reconstruct(cfg: PipelineConfig) -> int:
    root, K, frames = _dataset(cfg)
    out = Outputs(cfg, "reconstruct")
    t0 = time.perf_counter()
    vol, mesh = pipeline.reconstruct(frames, K, cfg)
    out.note(f"config sha256 {cfg.digest()}")
    out.note(f"kernel backend {BACKEND}")
    out.note(f"integrated {len(frames)} frames into {vol.num_blocks} blocks "
             f"in {time.perf_counter() - t0:.2f} s")
    out.note(f"mesh: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces")
    write_ply(out.add("mesh.ply"), mesh)
    extra = {}
    gt = _gt_samples(root)
    if gt is not None and len(mesh.vertices):
        err = recon_error(mesh, gt[0], brute_force=cfg.run.brute_force_oracles)
        out.note(f"reconstruction error vs gt samples: {err:.4f} cm")
        extra["recon_error_cm"] = err
    out.finish(extra)
    return EXIT_OK


def _write_masks(out: Outputs, frame, cm) -> None:
    labels = cm.seg.labels
    if labels.max(initial=0) > 65535:
        raise RuntimeError("more than 65535 instances in one frame")
    Image.fromarray(labels.astype(np.uint16)).save(out.add(f"masks/{frame.frame_id}.png"))
    entries = [
        {"instance": k + 1, "class_id": inst.class_id, "probability": inst.probability,
         "pixels": inst.pixel_count, "provenance": prov, "object_id": oid}
        for k, (inst, prov, oid) in enumerate(zip(cm.seg.instances, cm.provenance, cm.object_ids))
    ]
    out.add(f"masks/{frame.frame_id}.json").write_text(json.dumps(entries, indent=1) + "\n")


def cmd_propagate(cfg: PipelineConfig, resume: bool = False, stop_after: Optional[int] = None) -> int:
    root, K, frames = _dataset(cfg)
    keys, dets = _keyframes(root, frames, cfg)
    out = Outputs(cfg, "propagate")
    ckpt_path = out.root / CHECKPOINT
    start, smap = 0, None
    if resume:
        if not ckpt_path.exists():
            raise DataError("no checkpoint to resume from", ckpt_path)
        ckpt = json.loads(ckpt_path.read_text())
        if ckpt.get("config_sha256") != cfg.digest():
            raise UsageError("checkpoint was written with a different configuration")
        start = int(ckpt["next_keyframe"])
        smap = SparseSemanticMap.from_dict(ckpt["map"])
        out.note(f"resuming at keyframe {start} of {len(keys)}")
    end = len(keys) if stop_after is None else min(len(keys), start + stop_after)
    out.note(f"config sha256 {cfg.digest()}")

    segs = pipeline.segment_keyframes(keys[start:end], dets[start:end], K, cfg)
    run = pipeline.propagate_sequence(
        keys[start:end], segs, K, cfg, smap,
        on_frame=lambda i, fr, cm, m: _write_masks(out, fr, cm))
    for fr, cm in zip(keys[start:end], run.masks):
        out.note(f"{fr.frame_id}: {cm.counts()}")

    ckpt = {"config_sha256": cfg.digest(), "next_keyframe": end, "map": run.smap.to_dict()}
    out.add(CHECKPOINT).write_text(json.dumps(ckpt) + "\n")
    # the summary covers every keyframe written so far, resumed or not
    per_frame, totals = {}, {FROM_DETECTOR: 0, CORRECTED: 0, NEW_OBJECT: 0}
    for fr in keys[:end]:
        rel = f"masks/{fr.frame_id}.json"
        entries = json.loads((out.root / rel).read_text())
        out.add(rel)
        out.add(f"masks/{fr.frame_id}.png")
        per_frame[fr.frame_id] = [e["provenance"] for e in entries]
        for e in entries:
            totals[e["provenance"]] += 1
    out.add("provenance.json").write_text(
        json.dumps({"keyframes": per_frame, "totals": totals}, indent=1, sort_keys=True) + "\n")
    out.finish({"complete": end == len(keys), "keyframes_done": end})
    return EXIT_OK


def cmd_semantic(cfg: PipelineConfig) -> int:
    root, K, frames = _dataset(cfg)
    stride = cfg.dataset.keyframe_stride
    dets_all = [None] * len(frames)
    for i in range(0, len(frames), stride):
        dets_all[i] = load_detections(root, frames[i].frame_id, frames[i].depth.shape)
    out = Outputs(cfg, "semantic")
    out.note(f"config sha256 {cfg.digest()}")
    mesh, vol, run = pipeline.semantic_pipeline(frames, dets_all, K, cfg)
    out.note(f"labeled {len(mesh.vertices)} vertices from {len(frames[::stride])} keyframes")
    write_ply(out.add("labeled_mesh.ply"), mesh)
    gt = _gt_samples(root)
    if gt is not None and gt[1] is not None and len(mesh.vertices):
        report = _report(mesh, gt[0], gt[1], cfg)
        out.add("report.json").write_text(report.to_json() + "\n")
        out.add("report.txt").write_text(report.table() + "\n")
        out.note("\n" + report.table())
    out.finish()
    return EXIT_OK


def _report(mesh: Mesh, gt_points, gt_classes, cfg: PipelineConfig) -> EvalReport:
    if np.array_equal(mesh.vertices, gt_points):
        # per-vertex labels; a nearest-sample lookup would be ambiguous at coincident points
        gt = np.asarray(gt_classes, dtype=np.int64)
    else:
        gt = vertex_labels_from_samples(mesh.vertices, gt_points, gt_classes, cfg.gt_max_dist)
    pred = mesh.classes if mesh.classes is not None else np.zeros(len(mesh.vertices), np.int64)
    num = max(cfg.semantic.num_classes, int(pred.max(initial=0)) + 1, int(gt.max(initial=0)) + 1)
    report = semantic_scores(pred, gt, num)
    report.recon_error_cm = recon_error(mesh, gt_points, brute_force=cfg.run.brute_force_oracles)
    report.metadata["recon_convention"] = "mean nearest-neighbour distance, vertices to gt samples"
    report.metadata["gt_label_max_dist_m"] = cfg.gt_max_dist
    return report


def cmd_eval(cfg: PipelineConfig, pred: str, gt: str) -> int:
    pred_mesh, gt_mesh = read_ply(pred), read_ply(gt)
    if len(pred_mesh.vertices) == 0 or len(gt_mesh.vertices) == 0:
        raise DataError("cannot evaluate an empty mesh", pred if len(pred_mesh.vertices) == 0 else gt)
    out = Outputs(cfg, "eval")
    if gt_mesh.classes is None:
        report = EvalReport(recon_error_cm=recon_error(pred_mesh, gt_mesh.vertices,
                                                       brute_force=cfg.run.brute_force_oracles))
    else:
        report = _report(pred_mesh, gt_mesh.vertices, gt_mesh.classes, cfg)
    out.add("report.json").write_text(report.to_json() + "\n")
    out.add("report.txt").write_text(report.table() + "\n")
    out.note(report.table())
    print(report.table())
    out.finish()
    return EXIT_OK


PRESETS = {"plane": synth.plane_scene, "three-object": synth.three_object_scene}


def cmd_synth(cfg: PipelineConfig, scene: str, frames: Optional[int], flip_prob: Optional[float],
              depth_sigma: Optional[float], png_masks: bool) -> int:
    if scene in PRESETS:
        spec = PRESETS[scene]()
    else:
        path = Path(scene)
        if not path.exists():
            raise UsageError(f"scene {scene!r} is neither a preset ({', '.join(PRESETS)}) nor a file")
        try:
            spec = synth.SceneSpec.load(path)
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"bad scene file ({exc})", path) from None
    spec.seed = cfg.run.seed
    if frames is not None:
        spec.frame_count = frames
    if flip_prob is not None:
        spec.noise.flip_prob = flip_prob
    if depth_sigma is not None:
        spec.noise.depth_sigma = depth_sigma
    spec.__post_init__()
    spec.noise.__post_init__()
    out = Outputs(cfg, "synth")
    out.note(f"config sha256 {cfg.digest()}")
    synth.write_dataset(spec, out.root, use_rle=not png_masks)
    for p in sorted(out.root.rglob("*")):
        if p.is_file() and p.name not in ("manifest.json", "run.log"):
            out.add(p.relative_to(out.root).as_posix())
    out.note(f"wrote {spec.frame_count} frames")
    out.finish()
    return EXIT_OK


# --- argument parsing -----------------------------------------------------------

def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="TOML configuration file")
    p.add_argument("--dataset", help="sequence directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--voxel-size", type=float)
    p.add_argument("--keyframe-stride", type=int)
    p.add_argument("--t-iou", type=float)
    p.add_argument("--t-p1", type=float)
    p.add_argument("--t-p2", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--brute-force-oracles", action="store_true", default=None,
                   help="use brute-force nearest neighbours instead of the k-d tree")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="semrecon", description="Semantic RGB-D reconstruction pipeline.")
    parser.add_argument("--version", action="version", version=f"semrecon {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("reconstruct", parents=[common], help="fuse depth frames into a mesh")
    pp = sub.add_parser("propagate", parents=[common], help="view-consistent masks via the semantic map")
    pp.add_argument("--resume", action="store_true", help="continue from the map checkpoint in --out")
    pp.add_argument("--stop-after", type=int, help="process at most N keyframes, then checkpoint")
    sp = sub.add_parser("semantic", parents=[common], help="labeled mesh and evaluation report")
    sp.add_argument("--no-propagation", action="store_true", help="vote raw filtered detections")
    ep = sub.add_parser("eval", parents=[common], help="score a mesh against ground truth")
    ep.add_argument("--pred", required=True, help="predicted PLY")
    ep.add_argument("--gt", required=True, help="ground-truth PLY (vertex 'class' property for labels)")
    yp = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    yp.add_argument("--scene", default="three-object", help=f"preset ({', '.join(PRESETS)}) or scene JSON")
    yp.add_argument("--frames", type=int)
    yp.add_argument("--flip-prob", type=float)
    yp.add_argument("--depth-sigma", type=float)
    yp.add_argument("--png-masks", action="store_true", help="store detection masks as PNG, not RLE")
    return parser


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if getattr(args, "no_propagation", False):
        cfg.semantic.propagation = False
    return apply_overrides(cfg, vars(args))


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _config(args)
        if not cfg.run.out:
            raise UsageError("--out is required")
        if args.command == "propagate" and args.stop_after is not None and args.stop_after < 1:
            raise UsageError("--stop-after must be >= 1")
        if args.command == "reconstruct":
            return cmd_reconstruct(cfg)
        if args.command == "propagate":
            return cmd_propagate(cfg, args.resume, args.stop_after)
        if args.command == "semantic":
            return cmd_semantic(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.pred, args.gt)
        return cmd_synth(cfg, args.scene, args.frames, args.flip_prob, args.depth_sigma, args.png_masks)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, PlyError, synth.SceneError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
