"""Exception and warning types shared across the library."""


class CompodError(Exception):
    """Base class for all library errors."""


class GeometryError(CompodError):
    pass


class NoIntersection(GeometryError):
    """A cutting plane does not cross the cell interior."""


class DegenerateCut(GeometryError):
    """The cut exists but its interface polygon is below the area tolerance."""


class DegenerateCell(GeometryError):
    """A convex cell is unbounded, empty, or has fewer than 4 vertices."""


class DegenerateInput(GeometryError):
    """Input points are collinear/coplanar beyond recovery for the operation."""


class InvalidLoops(GeometryError):
    """Polygon loops are self-intersecting, overlapping, or wrongly nested."""


class InvalidPrimitive(CompodError):
    """A planar primitive is unusable (e.g. empty inlier set)."""


class MissingNormals(CompodError):
    """An operation requires per-point normals and the cloud has none."""


class NegativePairwise(CompodError):
    """Min-cut pairwise costs must be non-negative (submodular)."""


class OpenProxyMesh(CompodError):
    """Proxy mesh is not closed: some edge is not incident to exactly 2 facets."""


class OpenMesh(CompodError):
    """A closed mesh was required (volumetric tests) but edges are unmatched."""


class EmptyMesh(CompodError):
    """A metric was requested on a mesh without facets."""


class ParseError(CompodError):
    """File parsing failed; carries location context."""

    def __init__(self, message, path=None, line=None, offset=None):
        loc = []
        if path is not None:
            loc.append(str(path))
        if line is not None:
            loc.append(f"line {line}")
        if offset is not None:
            loc.append(f"byte {offset}")
        suffix = f" ({', '.join(loc)})" if loc else ""
        super().__init__(message + suffix)
        self.path = path
        self.line = line
        self.offset = offset


class UnsupportedFormat(CompodError):
    """File format not handled by the reader/writer."""


class EmptySurfaceWarning(UserWarning):
    """All cells carry the same label; the extracted surface is empty."""


class EmptyVotesWarning(UserWarning):
    """No occupancy votes were collected; labelling falls back to all-outside."""


class NonManifoldClusterWarning(UserWarning):
    """A coplanar facet cluster has a boundary vertex with >2 boundary edges."""
