"""Command line pipeline: detect, partition, surface, decompose, evaluate, bench.

Each stage reads and writes plain files so a run can be resumed or ablated
at any point. Reports are canonical JSON keyed by a config hash; timing
fields are zeroed unless --timing so repeated runs stay byte-identical.
Exit codes: 0 success, 2 validation/config error, 3 I/O error.
"""
from __future__ import annotations

import csv
import dataclasses
import functools
import hashlib
import json
import logging
import os
import resource
import sys
import time
import warnings
from pathlib import Path

import click
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .arrangement import (
    OrderingMode,
    arrangement_stats,
    build_arrangement,
    dump_arrangement,
    exhaustive_arrangement,
    rebuild_arrangement,
)
from .errors import CompodError, OpenMesh, ParseError
from .extraction import (
    aggregate_facets,
    export_decomposition,
    extract_surface,
    merge_siblings,
    merged_adjacency,
    simplify_cells,
)
from .ioutils import (
    canonical_json,
    load_mesh,
    load_point_cloud,
    load_primitives,
    save_primitives,
)
from .labelling import INSIDE, LabelConfig, label_cells_normal, label_cells_proxy
from .metrics import chamfer, hausdorff, normal_consistency, report_table, volumetric_iou
from .primitives import DetectionConfig, detect_planes, dilated_bbox, tolerance_for
from .synth import synthetic_plane_scene

log = logging.getLogger(__name__)

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

# file/flag keys with their defaults; flags override file values
_DEFAULTS = {
    "ordering": "dynamic",
    "basis": "points",
    "padding": 0.02,
    "label": "normal",
    "lambda": 0.5,
    "tau": "0",
    "remesh": True,
    "cell_merge": True,
    "samples": 100_000,
    "seed": 0,
    "threads": 1,
    "timing": False,
}

# artifact location and thread count must not change results
_UNHASHED = ("out", "threads")

_ORDERINGS = {
    "dynamic": "dynamic",
    "product-only": "product_only",
    "area-desc": "area_desc",
}


def _load_toml(path):
    if path is None:
        return {}
    with open(path, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ParseError(str(exc), path=path) from exc


def _effective(config_path, **flags):
    """Merged pipeline config: defaults <- TOML file <- non-None flags."""
    file_cfg = _load_toml(config_path)
    eff = dict(_DEFAULTS)
    for key in _DEFAULTS:
        if key in file_cfg:
            eff[key] = file_cfg[key]
    for key, value in flags.items():
        if value is not None:
            eff[key] = value
    det = dataclasses.asdict(DetectionConfig())
    for key, value in file_cfg.get("detect", {}).items():
        if key not in det:
            raise ParseError(f"unknown [detect] key {key!r}", path=config_path)
        det[key] = value
    eff["detect"] = det
    return eff


def _config_hash(cfg) -> str:
    hashed = {k: v for k, v in cfg.items() if k not in _UNHASHED}
    return hashlib.sha256(canonical_json(hashed).encode("ascii")).hexdigest()


def _ordering_mode(cfg) -> OrderingMode:
    ordering = str(cfg["ordering"]).replace("_", "-")
    if ordering not in _ORDERINGS:
        raise click.UsageError(
            f"--ordering must be one of {sorted(_ORDERINGS)}, got {ordering!r}"
        )
    basis = str(cfg["basis"]).replace("_", "-")
    hull_samples = 1_000_000
    if basis == "points":
        b = "inlier_points"
    elif basis == "hull-vertices":
        b = "hull_vertices"
    elif basis.startswith("hull-sampled"):
        b = "hull_sampled"
        _, _, arg = basis.partition("=")
        if arg:
            try:
                hull_samples = int(arg)
            except ValueError:
                raise click.UsageError(f"hull-sampled count must be an int, got {arg!r}")
            if hull_samples < 1:
                raise click.UsageError("hull-sampled count must be positive")
    else:
        raise click.UsageError(
            "--basis must be points, hull-vertices, or hull-sampled=N, "
            f"got {basis!r}"
        )
    return OrderingMode(
        ordering=_ORDERINGS[ordering], basis=b, hull_samples=hull_samples
    )


def _out_dir(out) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _peak_mb() -> float:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def _wrap_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except CompodError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        except OSError as exc:
            click.echo(f"io error: {exc}", err=True)
            sys.exit(3)

    return wrapper


def _compute_labels(tree, graph, cfg, primitives_path, cloud_path):
    method = str(cfg["label"])
    lcfg = LabelConfig(lam=float(cfg["lambda"]), seed=int(cfg["seed"]))
    if method == "normal":
        if primitives_path is None or cloud_path is None:
            raise click.UsageError("--label normal needs --primitives and --cloud")
        cloud = load_point_cloud(cloud_path)
        prims = load_primitives(primitives_path, n_points=len(cloud))
        return label_cells_normal(tree, graph, prims, cloud, lcfg)
    if method.startswith("proxy="):
        verts, faces = load_mesh(method.partition("=")[2])
        return label_cells_proxy(tree, verts, faces, lcfg)
    raise click.UsageError(
        f"--label must be 'normal' or 'proxy=<mesh>', got {method!r}"
    )


def _load_tree(arrangement_path):
    return rebuild_arrangement(_read_json(arrangement_path))


def _read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(str(exc), path=path, line=exc.lineno) from exc


def _resolve_tau(value, cells, lab) -> float:
    """Absolute volume threshold, or 'x%' of the total inside volume."""
    s = str(value).strip()
    try:
        if s.endswith("%"):
            frac = float(s[:-1]) / 100.0
            total = sum(c.volume() for cid, c in cells.items() if lab.get(cid) == INSIDE)
            tau = frac * total
        else:
            tau = float(s)
    except ValueError:
        raise click.UsageError(f"--tau must be a number or 'x%', got {value!r}")
    if tau < 0.0:
        raise click.UsageError("--tau must be non-negative")
    return tau


@click.group()
def main():
    """Concise plane arrangements: compact surfaces and convex decompositions."""
    level = _LOG_LEVELS.get(os.environ.get("COMPOD_LOG", "error").lower(), logging.ERROR)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.argument("cloud_path", metavar="CLOUD")
@click.option("--config", "config_path", default=None, help="TOML config file.")
@click.option("--out", "out", default=".", help="Output directory.")
@_wrap_errors
def detect(cloud_path, config_path, out):
    """Detect planar primitives in a point cloud (PLY); writes primitives.json."""
    cfg = _effective(config_path)
    try:
        det = DetectionConfig(**cfg["detect"])
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad [detect] config: {exc}", path=config_path)
    cloud = load_point_cloud(cloud_path)
    prims = detect_planes(cloud, det)
    path = _out_dir(out) / "primitives.json"
    save_primitives(prims, path)
    click.echo(f"{len(prims)} primitives -> {path}")


@main.command()
@click.argument("primitives_path", metavar="PRIMITIVES")
@click.option("--cloud", "cloud_path", default=None, help="Point cloud (PLY) the inlier indices refer to.")
@click.option("--config", "config_path", default=None, help="TOML config file.")
@click.option("--ordering", default=None, help="dynamic | product-only | area-desc")
@click.option("--basis", default=None, help="points | hull-vertices | hull-sampled=N")
@click.option("--padding", default=None, type=float, help="Bounding box dilation fraction.")
@click.option("--seed", default=None, type=int)
@click.option("--threads", default=None, type=int, help="Recorded only; must not change results.")
@click.option("--timing", is_flag=True, default=False, help="Keep real time/memory in the stats file.")
@click.option("--out", "out", default=".", help="Output directory.")
@_wrap_errors
def partition(primitives_path, cloud_path, config_path, ordering, basis,
              padding, seed, threads, timing, out):
    """Build the adaptive arrangement; writes arrangement.json + stats."""
    cfg = _effective(
        config_path, ordering=ordering, basis=basis, padding=padding,
        seed=seed, threads=threads, timing=timing or None,
    )
    if cloud_path is None:
        raise click.UsageError(
            "partition needs --cloud: every split basis starts from inlier points"
        )
    cloud = load_point_cloud(cloud_path)
    prims = load_primitives(primitives_path, n_points=len(cloud))
    mode = _ordering_mode(cfg)
    tree, graph = build_arrangement(
        prims, cloud, mode, padding_frac=float(cfg["padding"]), seed=int(cfg["seed"])
    )
    out_path = _out_dir(out)
    (out_path / "arrangement.json").write_text(
        dump_arrangement(tree, graph), encoding="ascii"
    )
    stats = arrangement_stats(tree, graph)
    if not cfg["timing"]:
        stats["wall_time_s"] = 0.0
        stats["peak_mem_mb"] = 0.0
    stats["config_hash"] = _config_hash(cfg)
    (out_path / "partition_stats.json").write_text(
        canonical_json(stats), encoding="ascii"
    )
    click.echo(f"{stats['cells']} cells -> {out_path / 'arrangement.json'}")


@main.command()
@click.argument("arrangement_path", metavar="ARRANGEMENT")
@click.option("--label", "label_method", default=None, help="normal | proxy=<mesh>")
@click.option("--primitives", "primitives_path", default=None, help="primitives.json (for --label normal).")
@click.option("--cloud", "cloud_path", default=None, help="Point cloud PLY (for --label normal).")
@click.option("--lambda", "lam", default=None, type=float, help="Smoothing weight in the label energy.")
@click.option("--seed", default=None, type=int)
@click.option("--no-remesh", is_flag=True, default=False, help="Skip facet aggregation.")
@click.option("--config", "config_path", default=None, help="TOML config file.")
@click.option("--out", "out", default=".", help="Output directory.")
@_wrap_errors
def surface(arrangement_path, label_method, primitives_path, cloud_path,
            lam, seed, no_remesh, config_path, out):
    """Extract the inside/outside interface mesh; writes surface.obj."""
    cfg = _effective(
        config_path, label=label_method, seed=seed,
        remesh=False if no_remesh else None, **{"lambda": lam},
    )
    tree, graph = _load_tree(arrangement_path)
    labels = _compute_labels(tree, graph, cfg, primitives_path, cloud_path)
    mesh = extract_surface(tree, graph, labels)
    out_path = _out_dir(out)
    mesh.save(out_path / "surface.obj")
    msg = f"{len(mesh.facets)} facets -> {out_path / 'surface.obj'}"
    if cfg["remesh"]:
        remeshed = aggregate_facets(mesh)
        remeshed.save(out_path / "surface_remeshed.obj")
        msg += f", {len(remeshed.facets)} after remeshing"
    click.echo(msg)


@main.command()
@click.argument("arrangement_path", metavar="ARRANGEMENT")
@click.option("--label", "label_method", default=None, help="normal | proxy=<mesh>")
@click.option("--primitives", "primitives_path", default=None, help="primitives.json (for --label normal).")
@click.option("--cloud", "cloud_path", default=None, help="Point cloud PLY (for --label normal).")
@click.option("--lambda", "lam", default=None, type=float, help="Smoothing weight in the label energy.")
@click.option("--tau", default=None, help="Merge tolerance: absolute volume or 'x%' of inside volume.")
@click.option("--no-cell-merge", is_flag=True, default=False, help="Skip the sibling merge pass.")
@click.option("--seed", default=None, type=int)
@click.option("--config", "config_path", default=None, help="TOML config file.")
@click.option("--out", "out", default=".", help="Output directory.")
@_wrap_errors
def decompose(arrangement_path, label_method, primitives_path, cloud_path,
              lam, tau, no_cell_merge, seed, config_path, out):
    """Convex decomposition of the inside volume; writes convexes.obj/.json."""
    cfg = _effective(
        config_path, label=label_method, tau=tau, seed=seed,
        cell_merge=False if no_cell_merge else None, **{"lambda": lam},
    )
    tree, graph = _load_tree(arrangement_path)
    labels = _compute_labels(tree, graph, cfg, primitives_path, cloud_path)
    if cfg["cell_merge"]:
        reduced, owner = merge_siblings(tree, labels)
        lab = reduced
        adj = merged_adjacency(graph, owner)
        cells = {nid: tree.node(nid).cell for nid in reduced}
        prov = {}
        for leaf, own in owner.items():
            prov.setdefault(own, []).append(leaf)
        prov = {nid: tuple(sorted(v)) for nid, v in prov.items()}
    else:
        lab = {lid: labels.labels[lid] for lid in tree.leaf_ids()}
        adj = graph
        cells = {lid: tree.node(lid).cell for lid in tree.leaf_ids()}
        prov = None
    tau_abs = _resolve_tau(cfg["tau"], cells, lab)
    decomp = simplify_cells(cells, adj, lab, tau_abs, tol=tree.tol, provenance=prov)
    out_path = _out_dir(out)
    export_decomposition(decomp, out_path / "convexes.obj", format="obj")
    export_decomposition(decomp, out_path / "convexes.json", format="json")
    click.echo(
        f"{decomp.n_cells} convex cells ({decomp.n_facets} facets, "
        f"tau={tau_abs:g}) -> {out_path / 'convexes.obj'}"
    )


@main.command()
@click.argument("recon_path", metavar="RECON")
@click.argument("gt_path", metavar="GROUND_TRUTH")
@click.option("--samples", default=None, type=int, help="Surface/volume sample count.")
@click.option("--seed", default=None, type=int)
@click.option("--exact", is_flag=True, default=False, help="Exact point-to-triangle distances.")
@click.option("--stats", "stats_path", default=None, help="partition_stats.json for the cell count.")
@click.option("--decomp", "decomp_path", default=None, help="convexes.json for volume counts.")
@click.option("--timing", is_flag=True, default=False, help="Keep real time/memory in the report.")
@click.option("--config", "config_path", default=None, help="TOML config file.")
@click.option("--out", "out", default=".", help="Output directory.")
@_wrap_errors
def evaluate(recon_path, gt_path, samples, seed, exact, stats_path,
             decomp_path, timing, config_path, out):
    """Compare a reconstruction to ground truth; writes report.json.

    CD and HD are normalized by the ground-truth bbox diagonal.
    """
    cfg = _effective(config_path, samples=samples, seed=seed, timing=timing or None)
    t0 = time.perf_counter()
    recon = load_mesh(recon_path)
    gt = load_mesh(gt_path)
    n = int(cfg["samples"])
    rng_seed = int(cfg["seed"])
    lo, hi = gt[0].min(axis=0), gt[0].max(axis=0)
    diag = float(np.linalg.norm(hi - lo))
    if diag <= 0.0:
        raise ParseError("ground-truth mesh has a degenerate bounding box", path=gt_path)
    cd = chamfer(recon, gt, n_samples=n, seed=rng_seed, exact=exact) / diag
    hd = hausdorff(recon, gt, n_samples=n, seed=rng_seed, exact=exact) / diag
    nc = normal_consistency(recon, gt, n_samples=n, seed=rng_seed)
    try:
        iou = volumetric_iou(recon, gt, n_samples=n, seed=rng_seed)
    except OpenMesh as exc:
        warnings.warn(f"IoU skipped: {exc}")
        iou = None
    cells = 0
    if stats_path is not None:
        stats = _read_json(stats_path)
        if "cells" not in stats:
            raise ParseError("stats file lacks a 'cells' count", path=stats_path)
        cells = int(stats["cells"])
    volume_cells = 0
    volume_facets = 0
    if decomp_path is not None:
        counts = _read_json(decomp_path).get("counts")
        if counts is None:
            raise ParseError("decomposition file lacks 'counts'", path=decomp_path)
        volume_cells = int(counts["C_V"])
        volume_facets = int(counts["F_V"])
    report = {
        "cells": cells,
        "surface_facets": len(recon[1]),
        "volume_cells": volume_cells,
        "volume_facets": volume_facets,
        "cd": cd,
        "hd": hd,
        "nc": nc,
        "iou": iou,
        "time_s": time.perf_counter() - t0 if cfg["timing"] else 0.0,
        "peak_mem_mb": _peak_mb() if cfg["timing"] else 0.0,
        "seed": rng_seed,
        "config_hash": _config_hash(cfg),
    }
    path = _out_dir(out) / "report.json"
    path.write_text(canonical_json(report), encoding="ascii")
    click.echo(report_table(report), nl=False)


@main.command()
@click.option("--levels", default="10,20,40", help="Comma-separated primitive counts.")
@click.option("--exhaustive-max", default=25, type=int, help="Run the exhaustive baseline up to this count.")
@click.option("--seed", default=None, type=int)
@click.option("--config", "config_path", default=None, help="TOML config file.")
@click.option("--out", "out", default=".", help="Output directory.")
@_wrap_errors
def bench(levels, exhaustive_max, seed, config_path, out):
    """Synthetic scaling benchmark; writes bench.csv (level,method,cells,...)."""
    cfg = _effective(config_path, seed=seed)
    try:
        level_list = [int(tok) for tok in levels.split(",") if tok.strip()]
    except ValueError:
        raise click.UsageError(f"--levels must be comma-separated ints, got {levels!r}")
    if not level_list or min(level_list) < 1:
        raise click.UsageError("--levels needs positive primitive counts")
    mode = _ordering_mode(cfg)
    base_seed = int(cfg["seed"])
    rows = []
    for level in level_list:
        cloud, prims = synthetic_plane_scene(level, seed=base_seed + level)
        t0 = time.perf_counter()
        tree, graph = build_arrangement(
            prims, cloud, mode, padding_frac=float(cfg["padding"]), seed=base_seed
        )
        dt = time.perf_counter() - t0
        rows.append((level, "dynamic", len(tree.leaf_ids()), dt, _peak_mb()))
        log.info("bench level %d: dynamic %d cells in %.3fs", level, rows[-1][2], dt)
        if level <= exhaustive_max:
            planes = np.array([p.plane for p in prims])
            domain = dilated_bbox(cloud.points, float(cfg["padding"]))
            tol = tolerance_for(cloud.points, float(cfg["padding"]))
            t0 = time.perf_counter()
            cells, _ = exhaustive_arrangement(planes, domain, tol)
            dt = time.perf_counter() - t0
            rows.append((level, "exhaustive", len(cells), dt, _peak_mb()))
            log.info("bench level %d: exhaustive %d cells in %.3fs", level, len(cells), dt)
    path = _out_dir(out) / "bench.csv"
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(["level", "method", "cells", "time_s", "peak_mem_mb"])
        for level, method, n_cells, dt, mem in rows:
            writer.writerow([level, method, n_cells, f"{dt:.6f}", f"{mem:.1f}"])
    click.echo(f"{len(rows)} rows -> {path}")


if __name__ == "__main__":
    main()
