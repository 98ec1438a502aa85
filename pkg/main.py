#!/usr/bin/env python3
"""
hybridseg command line: local features, primitive fitting, spectral
segmentation, implicit-field samples, patch masks, evaluation and the
linear autoencoder checks.

Every command validates its inputs, writes its outputs plus
config.resolved.env and manifest.json under --out, prints a JSON summary on
stdout and exits nonzero with a one-line diagnostic on stderr on failure.
"""

import argparse
import sys
import time
import uuid
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from cloud_io import (dumps_json, file_digest, load_cloud, read_fmat, read_json, read_labels, save_cloud,
                      write_fmat, write_json)
from config import RESOLVED_CONFIG_NAME, TOOL_NAME, TOOL_VERSION, RunConfig, dump_run_config, load_run_config
from error_handlers import DegenerateInputError, GeometryError, NumericalError, ValidationError, handle_exception
from eval_metrics import evaluate, label_report
from hybrid_segmentation import (Segmentation, SegmentRecord, descriptor_features, read_segmentation,
                                 segment)
from implicit_fields import QueryMix, make_scene_sample
from linear_ae_lab import run_ae_verification, summarize
from local_features import Neighborhood, estimate_normals, feature_field
from logger_config import get_logger, setup_logging
from neighbor_index import NeighborIndex
from patch_masking import build_patches, farthest_point_sample, select_mask, split_points
from point_cloud import PointCloud, normalization_transform
from primitive_fitting import detect_primitives, fit_best_type, fit_primitive
from primitives import TypeLabel
from spectral_embedding import consistency_matrix, leading_eigs, smoothness_matrix

logger = get_logger(__name__)


class HybridSegPipeline:
    """One command run: resolved config, recorded inputs/outputs and the manifest."""

    def __init__(self, cfg: RunConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.run_id = uuid.uuid4().hex[:12]
        self.out_dir = Path(cfg.out)
        self.inputs: Dict[str, str] = {}
        self.outputs: List[str] = []
        self.transform: Optional[Dict[str, Any]] = None

    # ------------------------------------------------------------ plumbing

    def _record_input(self, path: Optional[str], field: str) -> Path:
        if not path:
            raise ValidationError(f"--{field.replace('_', '-')} is required for '{self.command}'", field=field)
        p = Path(path)
        if not p.is_file():
            raise ValidationError(f"{field} not found: {p}", field=field)
        self.inputs[str(p)] = file_digest(p)
        return p

    def _output(self, path: Path) -> Path:
        self.outputs.append(str(path))
        return path

    def _types(self) -> List[TypeLabel]:
        types = [TypeLabel.parse(t) for t in self.cfg.primitive_types.split(",") if t.strip()]
        if not types or TypeLabel.OTHER in types:
            raise ValidationError("primitive_types must list fittable types", field="primitive_types")
        return types

    def load_input(self) -> PointCloud:
        """Input cloud, translated to zero mean and unit diameter when ``normalize`` is on."""
        path = self._record_input(self.cfg.input, "input")
        cloud = load_cloud(path, self.cfg.format)
        if self.cfg.normalize and len(cloud) > 1:
            center, scale = normalization_transform(cloud)
            positions = (cloud.positions - center) * scale
            cloud = PointCloud(positions - positions.mean(axis=0), normals=cloud.normals,
                               labels=cloud.labels, attributes=cloud.attributes)
            self.transform = {"center": center.tolist(), "scale": scale}
        logger.set_context(n_points=len(cloud))
        return cloud

    def index_for(self, cloud: PointCloud) -> NeighborIndex:
        return NeighborIndex(cloud.positions, workers=self.cfg.threads)

    def neighborhood(self) -> Neighborhood:
        cfg = self.cfg
        if cfg.neighborhood == "knn":
            return Neighborhood.nearest(cfg.k_neighbors)
        if cfg.neighborhood == "adaptive":
            return Neighborhood.adaptive(cfg.k_neighbors)
        return Neighborhood.ball(cfg.radius, fallback_k=cfg.k_neighbors)

    def _gt_types(self, gt_path: Path) -> Optional[List[str]]:
        """Ground-truth segment types from the JSON sidecar next to the label file, if any."""
        sidecar = gt_path.with_suffix(".json")
        if not sidecar.is_file():
            return None
        self.inputs[str(sidecar)] = file_digest(sidecar)
        payload = read_json(sidecar)
        if "types" in payload:
            return [str(t) for t in payload["types"]]
        return [s["type"] for s in payload.get("segments", [])]

    def _extra_descriptors(self, n_points: int) -> Dict[str, np.ndarray]:
        """Externally computed per-point descriptors, keyed by file stem."""
        blocks: Dict[str, np.ndarray] = {}
        if not self.cfg.extra_descriptors:
            return blocks
        for raw in self.cfg.extra_descriptors.split(","):
            path = self._record_input(raw.strip(), "extra_descriptors")
            matrix = read_fmat(path)
            if matrix.shape[0] != n_points:
                raise ValidationError(f"{path.name} has {matrix.shape[0]} rows for {n_points} points",
                                      field="extra_descriptors")
            blocks[f"external:{path.stem}"] = matrix
        return blocks

    def write_manifest(self, summary: Dict[str, Any], elapsed_ms: float) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        config_path = dump_run_config(self.cfg, self.out_dir / RESOLVED_CONFIG_NAME)
        manifest = {
            "tool": TOOL_NAME,
            "version": TOOL_VERSION,
            "command": self.command,
            "run_id": self.run_id,
            "config": self.cfg.model_dump(),
            "seeds": {"seed": self.cfg.seed},
            "inputs": self.inputs,
            "normalization": self.transform,
            "outputs": self.outputs + [str(config_path)],
            "summary": summary,
            "elapsed_ms": elapsed_ms,
        }
        return write_json(self.out_dir / "manifest.json", manifest)

    # ------------------------------------------------------------ commands

    def cmd_features(self) -> Dict[str, Any]:
        """Normals and surface variations for every point."""
        cloud = self.load_input()
        index = self.index_for(cloud)
        field = feature_field(cloud, index, neighborhood=self.neighborhood(), orient_k=self.cfg.orient_k,
                              workers=self.cfg.threads)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._output(write_fmat(self.out_dir / "normals.fmat", field.normals))
        self._output(write_fmat(self.out_dir / "variations.fmat", field.variations[:, None]))
        annotated = cloud.with_normals(field.normals).with_attributes(
            variation=field.variations, degenerate=field.degenerate.astype(np.int64))
        self._output(save_cloud(annotated, self.out_dir / "features.ply", binary=True))
        return {"n_points": len(cloud), "neighborhood": field.neighborhood.describe(),
                "mean_variation": float(field.variations.mean()),
                "degenerate": int(field.degenerate.sum())}

    def cmd_fit(self) -> Dict[str, Any]:
        """Fit one primitive per labelled segment and report residuals."""
        cloud = self.load_input()
        if self.cfg.labels:
            labels = read_labels(self._record_input(self.cfg.labels, "labels"))
        elif cloud.labels is not None:
            labels = cloud.labels
        else:
            raise ValidationError("fit needs --labels or a labelled input cloud", field="labels")
        if len(labels) != len(cloud):
            raise ValidationError(f"{len(labels)} labels for {len(cloud)} points", field="labels")

        types = self._types()
        source_ids, dense = np.unique(labels, return_inverse=True)
        records: List[SegmentRecord] = []
        for j, source in enumerate(source_ids):
            ids = np.nonzero(dense == j)[0]
            try:
                if self.cfg.fit_type == "auto":
                    fit = fit_best_type(cloud, ids, types)
                else:
                    fit = fit_primitive(cloud, ids, TypeLabel.parse(self.cfg.fit_type))
            except DegenerateInputError as e:
                logger.warning("Segment not fitted", label=int(source), reason=e.message)
                records.append(SegmentRecord(TypeLabel.OTHER, None, int(ids.size)))
                continue
            if not fit.converged:
                logger.warning("Fit did not converge", label=int(source), type=fit.primitive.type.value)
            records.append(SegmentRecord(fit.primitive.type, fit.primitive, int(ids.size), fit.residual))

        result = Segmentation(labels=dense.astype(np.int64), segments=records)
        for path in result.write(self.out_dir, stem="fit"):
            self._output(path)
        return {"segments": [{"label": int(s), **r.to_dict()} for s, r in zip(source_ids, records)]}

    def cmd_segment(self) -> Dict[str, Any]:
        """Full pipeline: hypotheses, both adjacencies, descriptors, weighting, mean-shift."""
        cfg = self.cfg
        cloud = self.load_input()
        external = self._extra_descriptors(len(cloud))
        index = self.index_for(cloud)
        if not cloud.has_normals:
            field = estimate_normals(cloud, index, Neighborhood.nearest(cfg.segment_normal_k),
                                     orient_k=cfg.orient_k, workers=cfg.threads)
            cloud = cloud.with_normals(field.normals)

        types = self._types()
        with logger.stage("detect") as stage:
            detection = detect_primitives(cloud, types, inlier_tol=cfg.ransac_tol, iters=cfg.ransac_iters,
                                          seed=cfg.seed, min_points=cfg.detect_min_points,
                                          max_primitives=cfg.detect_max_primitives)
            stage["primitives"] = len(detection.detections)
        per_point = detection.per_point()

        with logger.stage("spectral") as stage:
            a_c = consistency_matrix(cloud, per_point, sigmas=cfg.type_sigmas(), seed=cfg.seed)
            a_s = smoothness_matrix(cloud, k=cfg.smooth_k, sigma_edge=cfg.sigma_edge, index=index)
            u_c = leading_eigs(a_c, d=cfg.d_c, max_dims=cfg.max_descriptor_dims)
            u_s = leading_eigs(a_s, d=cfg.d_s, max_dims=cfg.max_descriptor_dims)
            stage.update(d_c=u_c.dim, d_s=u_s.dim, sparse=a_c.is_sparse)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._output(write_fmat(self.out_dir / "descriptors_consistency.fmat", u_c.descriptors))
        self._output(write_fmat(self.out_dir / "descriptors_smoothness.fmat", u_s.descriptors))
        if cfg.export_adjacency:
            self._output(a_c.write_coordinate_list(self.out_dir / "adjacency_consistency.txt"))
            self._output(a_s.write_coordinate_list(self.out_dir / "adjacency_smoothness.txt"))

        blocks = {"consistency": u_c.descriptors, "smoothness": u_s.descriptors}
        blocks.update(external)
        features = descriptor_features(blocks, block_mode=cfg.block_mode)
        with logger.stage("cluster") as stage:
            result = segment(cloud, features, per_point_types=[t for t, _ in per_point],
                             bandwidth=cfg.bandwidth, bandwidth_scale=cfg.bandwidth_scale,
                             max_iter=cfg.mean_shift_iters, tol=cfg.mean_shift_tol, min_size=cfg.min_size,
                             merge_tol=cfg.merge_tol if cfg.merge_tol > 0 else None, types=types,
                             seed=cfg.seed, index=index)
            stage["segments"] = result.n_segments
        for path in result.write(self.out_dir):
            self._output(path)

        summary: Dict[str, Any] = {
            "n_points": len(cloud), "K": result.n_segments,
            "types": [s.type.value for s in result.segments],
            "detected": len(detection.detections), "d_c": u_c.dim, "d_s": u_s.dim,
            "sparse": a_c.is_sparse, "features": list(blocks), "weights": result.weights,
            "bandwidth": result.bandwidth,
        }
        if cfg.gt_labels:
            gt_path = self._record_input(cfg.gt_labels, "gt_labels")
            metrics = evaluate(cloud, result, read_labels(gt_path), self._gt_types(gt_path),
                               epsilon=cfg.epsilon_coverage)
            self._output(write_json(self.out_dir / "metrics.json", metrics))
            summary["metrics"] = metrics
        return summary

    def cmd_implicit(self) -> Dict[str, Any]:
        """Cropped input plus UDF-labelled queries against the full cloud."""
        cfg = self.cfg
        cloud = self.load_input()
        mix = QueryMix(cfg.query_uniform, cfg.query_near, cfg.query_sigma)
        partial, samples = make_scene_sample(cloud, cfg.query_count, mix, crop_ratio=cfg.crop_ratio,
                                             seed=cfg.seed, occupancy_tau=cfg.occupancy_tau,
                                             index=self.index_for(cloud))
        for path in samples.write(self.out_dir).values():
            self._output(path)
        self._output(save_cloud(partial, self.out_dir / "input.xyz"))
        return {"queries": len(samples), "input_points": len(partial), "target_points": len(cloud),
                "mean_udf": float(samples.udf.mean()), "occupancy_proxy": samples.occupancy_is_proxy}

    def cmd_mask(self) -> Dict[str, Any]:
        """FPS patch centers, k-NN patches and a seeded mask."""
        cfg = self.cfg
        cloud = self.load_input()
        centers = farthest_point_sample(cloud, cfg.patch_count, seed=cfg.seed)
        patches = build_patches(cloud, self.index_for(cloud), centers, k=cfg.patch_k)
        mask = select_mask(patches, cfg.mask_ratio, seed=cfg.seed)
        removed, visible = split_points(mask, len(cloud))
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._output(mask.write(self.out_dir / "mask.json"))
        self._output(self._visible_cloud(cloud, visible))
        return {"K": patches.count, "M": mask.n_masked, "k": patches.k,
                "removed_points": int(removed.size), "visible_points": int(visible.size),
                "coverage": patches.coverage(len(cloud))}

    def _visible_cloud(self, cloud: PointCloud, visible: np.ndarray) -> Path:
        kept = PointCloud(cloud.positions[visible],
                          normals=None if cloud.normals is None else cloud.normals[visible])
        return save_cloud(kept, self.out_dir / "visible.xyz")

    def cmd_eval(self) -> Dict[str, Any]:
        """Metrics of a predicted labelling against ground truth."""
        cfg = self.cfg
        pred_path = self._record_input(cfg.pred, "pred")
        gt_path = self._record_input(cfg.gt_labels, "gt_labels")
        gt = read_labels(gt_path)
        if cfg.input and pred_path.with_suffix(".json").is_file():
            cloud = self.load_input()
            self.inputs[str(pred_path.with_suffix(".json"))] = file_digest(pred_path.with_suffix(".json"))
            if len(gt) != len(cloud):
                raise ValidationError(f"{len(gt)} ground-truth labels for {len(cloud)} points",
                                      field="gt_labels")
            report = evaluate(cloud, read_segmentation(pred_path), gt, self._gt_types(gt_path),
                              epsilon=cfg.epsilon_coverage)
        else:
            report = label_report(read_labels(pred_path), gt)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._output(write_json(self.out_dir / "metrics.json", report))
        return report

    def cmd_ae_verify(self) -> Dict[str, Any]:
        """Randomized checks of the linear implicit autoencoder claims."""
        cfg = self.cfg
        report = run_ae_verification(n=cfg.ae_n, m=cfg.ae_m, N=cfg.ae_samples, noise_scale=cfg.ae_noise,
                                     trials=cfg.ae_trials, seed=cfg.seed)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._output(write_json(self.out_dir / "ae_report.json", report))
        logger.info(summarize(report))
        if not report["pass"]:
            raise NumericalError("linear autoencoder verification failed", solver="ae-verify",
                                 details={"max_fd_error": report["max_fd_error"]})
        return {"pass": report["pass"], "trials": len(report["trial_seeds"]),
                "max_deviation": max(report["deviations"]), "max_fd_error": report["max_fd_error"],
                "convergence_order": report["convergence_order"]}

    def run(self) -> Dict[str, Any]:
        handler = getattr(self, "cmd_" + self.command.replace("-", "_"))
        started = time.perf_counter()
        summary = handler()
        elapsed_ms = round(1000.0 * (time.perf_counter() - started), 3)
        self._output(self.write_manifest(summary, elapsed_ms))
        logger.info("Command finished", elapsed_ms=elapsed_ms, outputs=len(self.outputs))
        return summary


# ---------------------------------------------------------------- argument parsing

def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--input", help="Point cloud (.xyz or .ply)")
    common.add_argument("--config", help="key=value run configuration file")
    common.add_argument("--out", help="Output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--format", choices=("xyz", "ply"))
    common.add_argument("--log-level", dest="log_level", help="Overrides HYBRIDSEG_LOG")
    common.add_argument("--no-normalize", dest="normalize", action="store_const", const=False,
                        help="Keep input coordinates as read")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=TOOL_NAME, description="Point cloud primitive segmentation toolkit")
    parser.add_argument("--version", action="version", version=f"{TOOL_NAME} {TOOL_VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = [_common_flags()]

    p = sub.add_parser("features", parents=common, help="Normals and surface variation")
    p.add_argument("--radius", type=float)
    p.add_argument("--k", dest="k_neighbors", type=int)
    p.add_argument("--neighborhood", choices=("radius", "knn", "adaptive"))

    p = sub.add_parser("fit", parents=common, help="Per-segment primitive fitting")
    p.add_argument("--labels", help="One integer label per point")
    p.add_argument("--type", dest="fit_type", choices=("auto", "plane", "sphere", "cylinder", "cone"))

    p = sub.add_parser("segment", parents=common, help="Spectral + mean-shift segmentation")
    p.add_argument("--gt-labels", dest="gt_labels")
    p.add_argument("--bandwidth", type=float)
    p.add_argument("--d-c", dest="d_c", type=int)
    p.add_argument("--d-s", dest="d_s", type=int)
    p.add_argument("--block-mode", dest="block_mode", action="store_const", const=True)
    p.add_argument("--descriptors", dest="extra_descriptors",
                   help="Comma-separated FMAT files of external per-point descriptors")
    p.add_argument("--export-adjacency", dest="export_adjacency", action="store_const", const=True,
                   help="Also write both adjacencies as 'i j value' lists")

    p = sub.add_parser("implicit", parents=common, help="Crop and UDF query samples")
    p.add_argument("--count", dest="query_count", type=int)
    p.add_argument("--uniform", dest="query_uniform", type=float, help="Uniform fraction of the mix")
    p.add_argument("--crop-ratio", dest="crop_ratio", type=float)
    p.add_argument("--occupancy-tau", dest="occupancy_tau", type=float)

    p = sub.add_parser("mask", parents=common, help="FPS patches and mask")
    p.add_argument("--patches", dest="patch_count", type=int)
    p.add_argument("--patch-k", dest="patch_k", type=int)
    p.add_argument("--mask-ratio", dest="mask_ratio", type=float)

    p = sub.add_parser("eval", parents=common, help="Segmentation metrics")
    p.add_argument("--pred", help="Predicted labels (a .json sidecar adds primitive metrics)")
    p.add_argument("--gt", dest="gt_labels", help="Ground-truth labels")

    p = sub.add_parser("ae-verify", parents=common, help="Linear autoencoder checks")
    p.add_argument("--n", dest="ae_n", type=int)
    p.add_argument("--m", dest="ae_m", type=int)
    p.add_argument("--samples", dest="ae_samples", type=int)
    p.add_argument("--noise", dest="ae_noise", type=float)
    p.add_argument("--trials", dest="ae_trials", type=int)
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    values = {k: v for k, v in vars(args).items() if k in RunConfig.model_fields and v is not None}
    if args.command == "implicit" and "query_uniform" in values:
        values["query_near"] = 1.0 - values["query_uniform"]
    return values


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one command and return the process exit code."""
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    logger.set_context(command=args.command)
    try:
        cfg = load_run_config(args.config, _overrides(args))
        pipeline = HybridSegPipeline(cfg, args.command)
        logger.set_context(run_id=pipeline.run_id, seed=cfg.seed)
        summary = pipeline.run()
    except GeometryError as e:
        e.log()
        print(e.one_line(), file=sys.stderr)
        return e.exit_code
    except Exception as e:
        error = handle_exception(e)
        logger.exception("Command failed", error=error.to_dict())
        print(error.one_line(), file=sys.stderr)
        return error.exit_code
    finally:
        logger.clear_context()
    print(dumps_json(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
