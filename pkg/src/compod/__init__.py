"""Concise plane arrangements for compact surface and volume extraction."""
from __future__ import annotations

__version__ = "0.1.0"

from . import errors  # noqa: F401
from .arrangement import (  # noqa: F401
    BspNode,
    BspTree,
    OrderingMode,
    arrangement_stats,
    build_arrangement,
    dump_arrangement,
    exhaustive_arrangement,
    load_arrangement_dump,
    locate_leaf,
    rebuild_arrangement,
)
from .extraction import (  # noqa: F401
    ConvexDecomposition,
    SurfaceFacet,
    SurfaceMesh,
    aggregate_facets,
    export_decomposition,
    extract_surface,
    merge_siblings,
    merged_adjacency,
    simplify_cells,
)
from .geometry import (  # noqa: F401
    ConvexCell,
    ToleranceContext,
    cell_volume,
    classify_points,
    convex_hull_2d,
    convex_hull_3d,
    normalize_plane,
    signed_distance,
    split_cell,
)
from .ioutils import (  # noqa: F401
    load_mesh,
    load_point_cloud,
    load_primitives,
    save_mesh,
    save_point_cloud,
    save_primitives,
)
from .labelling import (  # noqa: F401
    INSIDE,
    OUTSIDE,
    LabelConfig,
    OccupancyLabels,
    label_cells_normal,
    label_cells_proxy,
    min_cut,
)
from .metrics import (  # noqa: F401
    chamfer,
    complexity_report,
    hausdorff,
    normal_consistency,
    sample_surface,
    volumetric_iou,
)
from .primitives import (  # noqa: F401
    DetectionConfig,
    PlanarPrimitive,
    PointCloud,
    detect_planes,
    estimate_normals,
    fit_plane,
)
from .synth import synthetic_plane_scene  # noqa: F401
from .triangulation import constrained_delaunay_2d, ear_clip  # noqa: F401
