"""Triangulation of the periodic unit cell and of tiled perforated domains.

The unit cell is the unit square with an optional disk inclusion; only the
fluid part is meshed.  Perforated domains are produced by tiling one cell
triangulation, so every cell carries an identical copy of the hole and no
triangle straddles a cell boundary.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay

from .errors import (
    InclusionTouchesBoundary,
    MeshGenerationFailure,
    ResolutionTooCoarse,
    ValidationError,
)

log = logging.getLogger(__name__)

GAMMA_INTERIOR = "GammaInterior"
OUTER_BOUNDARY = "OuterBoundary"

# Grid points closer to the inclusion circle than this fraction of the grid
# spacing are removed before triangulating, so no sliver survives between
# the background grid and the circle sampling.
_CLEARANCE = 0.4


@dataclass(frozen=True)
class DiskInclusion:
    center: tuple
    radius: float


@dataclass(frozen=True)
class UnitCellGeometry:
    """Unit square cell with an optional disk inclusion.

    Parameters
    ----------
    inclusion : DiskInclusion or None
        Solid part of the cell; None leaves the full square as fluid.
    target_h : float
        Requested mesh size in cell units.
    """

    inclusion: object
    target_h: float

    def validate(self):
        if not (self.target_h > 0):
            raise ValidationError("target_h must be positive", field="target_h")
        if self.inclusion is not None:
            cx, cy = self.inclusion.center
            r = self.inclusion.radius
            if r <= 0:
                raise ValidationError("inclusion radius must be positive",
                                      field="inclusion.radius")
            if cx - r <= 0 or cx + r >= 1 or cy - r <= 0 or cy + r >= 1:
                raise InclusionTouchesBoundary(
                    "disk of radius %g centered at (%g, %g) reaches the cell "
                    "boundary" % (r, cx, cy),
                    where="mesh.generate_unit_cell_mesh")
            if not (self.target_h < r / 2):
                raise ValidationError(
                    "target_h=%g does not resolve the interface; need "
                    "target_h < radius/2 = %g" % (self.target_h, r / 2),
                    field="target_h")

    @property
    def fluid_area(self):
        if self.inclusion is None:
            return 1.0
        return 1.0 - math.pi * self.inclusion.radius ** 2

    @property
    def interface_length(self):
        if self.inclusion is None:
            return 0.0
        return 2.0 * math.pi * self.inclusion.radius


@dataclass(frozen=True)
class PerforatedDomain:
    """Axis-aligned rectangle covered by an integer number of scaled cells.

    Parameters
    ----------
    eps : float
        Cell scale, the reciprocal of an integer.
    cell : UnitCellGeometry
        Cell geometry replicated in every tile (its target_h is ignored;
        the perforated mesh gets its own resolution).
    width, height : float
        Side lengths of the rectangle, anchored at the origin.
    """

    eps: float
    cell: UnitCellGeometry
    width: float = 1.0
    height: float = 1.0

    def validate(self):
        if not (0 < self.eps <= 1):
            raise ValidationError("eps must lie in (0, 1]", field="eps")
        k = round(1.0 / self.eps)
        if k < 1 or abs(self.eps * k - 1.0) > 1e-12:
            raise ValidationError("eps must be the reciprocal of an integer",
                                  field="eps")
        for name, side in (("width", self.width), ("height", self.height)):
            cells = round(side / self.eps)
            if cells < 1 or abs(cells * self.eps - side) > 1e-12:
                raise ValidationError(
                    "%s=%g is not an integer multiple of eps=%g"
                    % (name, side, self.eps), field=name)
        if self.cell.inclusion is not None:
            # Reuse the strict geometric check; resolution is checked later.
            UnitCellGeometry(self.cell.inclusion, 1e-9).validate()

    @property
    def cell_counts(self):
        return (round(self.width / self.eps), round(self.height / self.eps))


@dataclass
class TriMesh:
    """Conforming triangulation with boundary tags and periodic pairing.

    nodes : (N, 2) float array
    triangles : (M, 3) int array, counterclockwise
    boundary_edges : list of ((a, b), tag)
    periodic_pairs : (P, 2) int array of (master, slave) node ids
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: list
    periodic_pairs: np.ndarray
    # Construction record of tiled meshes (None elsewhere): scale, cell counts, the
    # unit-cell mesh that was tiled, per-node origin in that cell mesh and
    # per-triangle cell id.
    eps: float = None
    cell_counts: tuple = None
    cell_mesh: object = None
    node_cell_origin: np.ndarray = None
    triangle_cell: np.ndarray = None
    _caches: dict = field(default_factory=dict, repr=False)

    def validate(self):
        areas = triangle_areas(self)
        if np.any(areas <= 0):
            raise ValidationError("mesh contains a non-positively oriented "
                                  "or degenerate triangle")
        edge_count = {}
        for tri in self.triangles:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (min(a, b), max(a, b))
                edge_count[key] = edge_count.get(key, 0) + 1
        if any(c > 2 for c in edge_count.values()):
            raise ValidationError("mesh is not conforming: an edge is shared "
                                  "by more than two triangles")
        boundary = {k for k, c in edge_count.items() if c == 1}
        tagged = {(min(a, b), max(a, b)) for (a, b), _ in self.boundary_edges}
        if boundary != tagged:
            raise ValidationError("boundary edge tags do not cover the "
                                  "topological boundary exactly")
        gamma_degree = {}
        for (a, b), tag in self.boundary_edges:
            if tag == GAMMA_INTERIOR:
                gamma_degree[a] = gamma_degree.get(a, 0) + 1
                gamma_degree[b] = gamma_degree.get(b, 0) + 1
        if any(d != 2 for d in gamma_degree.values()):
            raise ValidationError("interior boundary edges do not form "
                                  "closed curves")
        if len(self.periodic_pairs):
            delta = (self.nodes[self.periodic_pairs[:, 1]]
                     - self.nodes[self.periodic_pairs[:, 0]])
            snapped = np.round(delta)
            if np.max(np.abs(delta - snapped)) > 1e-12:
                raise ValidationError("periodic pairs are not exact lattice "
                                      "translates")

    @property
    def num_nodes(self):
        return len(self.nodes)

    @property
    def num_triangles(self):
        return len(self.triangles)


def triangle_areas(mesh):
    p = mesh.nodes
    t = mesh.triangles
    d1 = p[t[:, 1]] - p[t[:, 0]]
    d2 = p[t[:, 2]] - p[t[:, 0]]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def mesh_area(mesh):
    """Total fluid area covered by the triangulation."""
    return float(np.sum(triangle_areas(mesh)))


def boundary_nodes(mesh, tag):
    out = set()
    for (a, b), t in mesh.boundary_edges:
        if t == tag:
            out.add(int(a))
            out.add(int(b))
    return sorted(out)


def count_interior_loops(mesh):
    """Number of closed inclusion boundaries (holes)."""
    adjacency = {}
    for (a, b), tag in mesh.boundary_edges:
        if tag == GAMMA_INTERIOR:
            adjacency.setdefault(int(a), []).append(int(b))
            adjacency.setdefault(int(b), []).append(int(a))
    seen = set()
    loops = 0
    for start in adjacency:
        if start in seen:
            continue
        loops += 1
        stack = [start]
        while stack:
            node = stack.pop()
            if node in seen:
                continue
            seen.add(node)
            stack.extend(adjacency[node])
    return loops


def periodic_canonical_map(mesh):
    """Canonical representative per node under periodic identification.

    Applying the map twice is the identity by construction (union-find
    with path compression, smallest index as root).
    """
    parent = np.arange(mesh.num_nodes)

    def find(i):
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    for master, slave in np.asarray(mesh.periodic_pairs, dtype=int):
        ra, rb = find(master), find(slave)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    return np.array([find(i) for i in range(mesh.num_nodes)])


def _structured_square(n):
    """Exact right-isoceles triangulation of the unit square, n x n cells."""
    xs = np.arange(n + 1) / n
    ii, jj = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    nodes = np.column_stack([xs[ii.ravel()], xs[jj.ravel()]])

    def nid(i, j):
        return i * (n + 1) + j

    tris = []
    for i in range(n):
        for j in range(n):
            a, b = nid(i, j), nid(i + 1, j)
            c, d = nid(i + 1, j + 1), nid(i, j + 1)
            tris.append((a, b, c))
            tris.append((a, c, d))
    return nodes, np.array(tris, dtype=int)


def _circle_point_count(radius, h):
    """Circle sampling count: multiple of 8 so octant seams get nodes."""
    return 8 * max(2, round(2.0 * math.pi * radius / (8.0 * h)))


def _snap(values, target, tol=1e-13):
    values = np.asarray(values, dtype=float).copy()
    values[np.abs(values - target) < tol] = target
    return values


def _triangulate_region(points, circle_ids):
    """Delaunay triangulation minus the triangles spanning the hole."""
    tri = Delaunay(points)
    simplices = tri.simplices
    in_circle = np.zeros(len(points), dtype=bool)
    in_circle[list(circle_ids)] = True
    keep = ~np.all(in_circle[simplices], axis=1)
    return simplices[keep]


def _orient_ccw(nodes, tris):
    d1 = nodes[tris[:, 1]] - nodes[tris[:, 0]]
    d2 = nodes[tris[:, 2]] - nodes[tris[:, 0]]
    flipped = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0] < 0
    tris = tris.copy()
    tris[flipped] = tris[flipped][:, [0, 2, 1]]
    return tris


def _merge_nodes(nodes, tris_list):
    """Deduplicate exactly coincident nodes and remap triangle indices."""
    key_of = {}
    order = []
    remap = np.empty(len(nodes), dtype=int)
    for idx, (x, y) in enumerate(nodes):
        key = (round(x, 12), round(y, 12))
        if key in key_of:
            remap[idx] = key_of[key]
        else:
            key_of[key] = len(order)
            remap[idx] = len(order)
            order.append(idx)
    merged = nodes[np.array(order)]
    out_tris = [remap[t] for t in tris_list]
    return merged, out_tris, remap


def _centered_disk_cell(n, radius):
    """Dihedrally symmetric fluid mesh of the cell with a centered disk.

    One octant (x >= 1/2, 1/2 <= y <= x) is triangulated, then reflected
    across the diagonal y = x (a coordinate swap, exact in floats), then
    across both cell midlines (1 - t is exact for t in [1/2, 1]), so the
    mesh carries every symmetry of the geometry bitwise and the discrete
    effective tensors inherit exact isotropy.  n must be even.
    """
    h = 1.0 / n
    half = n // 2
    xs = 0.5 + np.arange(half + 1) / n
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    grid = np.column_stack([gx.ravel(), gy.ravel()])
    grid = grid[grid[:, 1] <= grid[:, 0]]
    dist = np.hypot(grid[:, 0] - 0.5, grid[:, 1] - 0.5)
    on_outer = grid[:, 0] == xs[-1]
    keep = on_outer | (dist >= radius + _CLEARANCE * h)
    grid = grid[keep]

    m = _circle_point_count(radius, h)
    theta = 2.0 * math.pi * np.arange(m // 8 + 1) / m
    cx = 0.5 + radius * np.cos(theta)
    cy = _snap(0.5 + radius * np.sin(theta), 0.5)
    # Put the 45-degree point exactly on the diagonal so the reflection
    # seam merges bitwise.
    cx[-1] = cy[-1] = 0.5 + radius * math.sqrt(0.5)
    circle = np.column_stack([cx, cy])

    points = np.vstack([grid, circle])
    circle_ids = range(len(grid), len(points))
    tris = _triangulate_region(points, circle_ids)
    tris = _orient_ccw(points, tris)

    def merge_mirror(nodes, tris, reflected):
        all_nodes = np.vstack([nodes, reflected])
        flipped = tris[:, [0, 2, 1]] + len(nodes)
        merged, tris_out, _ = _merge_nodes(all_nodes, [tris, flipped])
        return merged, np.vstack(tris_out)

    nodes, tris = merge_mirror(points, tris, points[:, ::-1])
    for axis in (1, 0):
        reflected = nodes.copy()
        reflected[:, axis] = 1.0 - reflected[:, axis]
        nodes, tris = merge_mirror(nodes, tris, reflected)
    return nodes, tris


def _offcenter_disk_cell(n, center, radius):
    """Fluid mesh for an arbitrary interior disk (no symmetry guarantee)."""
    h = 1.0 / n
    nodes, _ = _structured_square(n)
    dist = np.hypot(nodes[:, 0] - center[0], nodes[:, 1] - center[1])
    on_outer = ((nodes[:, 0] == 0.0) | (nodes[:, 0] == 1.0)
                | (nodes[:, 1] == 0.0) | (nodes[:, 1] == 1.0))
    keep = on_outer | (dist >= radius + _CLEARANCE * h)
    grid = nodes[keep]

    m = _circle_point_count(radius, h)
    theta = 2.0 * math.pi * np.arange(m) / m
    circle = np.column_stack([center[0] + radius * np.cos(theta),
                              center[1] + radius * np.sin(theta)])
    points = np.vstack([grid, circle])
    circle_ids = range(len(grid), len(points))
    tris = _triangulate_region(points, circle_ids)
    return points, _orient_ccw(points, tris)


def _cell_node_count(h):
    n = max(int(math.ceil(1.0 / h - 1e-12)), 2)
    if n % 2:
        n += 1
    return n


def _build_cell(inclusion, target_h):
    """Nodes and triangles of the fluid part of one unit cell.

    Shared by the public unit-cell constructor and the perforated-domain
    tiler; geometry and resolution guards live in the callers.
    """
    if inclusion is None:
        n = max(int(math.ceil(1.0 / target_h - 1e-12)), 1)
        return _structured_square(n)
    n = _cell_node_count(target_h)
    if inclusion.center == (0.5, 0.5):
        nodes, tris = _centered_disk_cell(n, inclusion.radius)
    else:
        nodes, tris = _offcenter_disk_cell(n, inclusion.center,
                                           inclusion.radius)
    return nodes, tris


def _find_boundary_edges(nodes, tris, width=1.0, height=1.0):
    edge_count = {}
    for t in tris:
        for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
            key = (min(a, b), max(a, b))
            edge_count[key] = edge_count.get(key, 0) + 1
    out = []
    for (a, b), count in sorted(edge_count.items()):
        if count != 1:
            continue
        xa, ya = nodes[a]
        xb, yb = nodes[b]
        outer = all(
            min(abs(x), abs(x - width)) < 1e-9 or min(abs(y), abs(y - height)) < 1e-9
            for x, y in ((xa, ya), (xb, yb)))
        out.append(((int(a), int(b)),
                    OUTER_BOUNDARY if outer else GAMMA_INTERIOR))
    return out


def _match_faces(nodes, axis, low, high):
    """Pair nodes on two opposite faces by the complementary coordinate."""
    other = 1 - axis
    lows, highs = {}, {}
    for idx, point in enumerate(nodes):
        if abs(point[axis] - low) < 1e-9:
            lows[round(point[other], 12)] = idx
        elif abs(point[axis] - high) < 1e-9:
            highs[round(point[other], 12)] = idx
    if set(lows) != set(highs):
        raise MeshGenerationFailure(
            "periodic faces carry different node traces",
            where="mesh.generate_unit_cell_mesh")
    return [(lows[key], highs[key]) for key in sorted(lows)]


def _check_mesh_size(nodes, tris, target_h, where):
    p = nodes[tris]
    edges = np.concatenate([
        p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]])
    h_max = float(np.max(np.hypot(edges[:, 0], edges[:, 1])))
    if h_max > 3.0 * target_h:
        raise MeshGenerationFailure(
            "triangulation could not achieve mesh size %g (longest edge %g)"
            % (target_h, h_max), where=where)


def generate_unit_cell_mesh(geom):
    """Triangulate the fluid part of the unit cell.

    Returns a mesh with the inclusion boundary tagged GammaInterior, the
    four outer faces tagged OuterBoundary, and periodic node pairs in both
    coordinate directions.
    """
    geom.validate()
    nodes, tris = _build_cell(geom.inclusion, geom.target_h)
    _check_mesh_size(nodes, tris, geom.target_h,
                     where="mesh.generate_unit_cell_mesh")
    pairs = (_match_faces(nodes, 0, 0.0, 1.0)
             + _match_faces(nodes, 1, 0.0, 1.0))
    mesh = TriMesh(
        nodes=nodes,
        triangles=np.asarray(tris, dtype=int),
        boundary_edges=_find_boundary_edges(nodes, tris),
        periodic_pairs=np.asarray(pairs, dtype=int).reshape(-1, 2),
    )
    mesh.validate()
    log.debug("unit cell mesh: %d nodes, %d triangles, area %.6f",
              mesh.num_nodes, mesh.num_triangles, mesh_area(mesh))
    return mesh


def generate_perforated_mesh(dom, target_h):
    """Mesh the perforated rectangle by tiling one scaled cell mesh.

    Every cell carries an identical copy of the inclusion, duplicated face
    nodes are merged exactly, and the returned mesh remembers its cell
    decomposition (eps, cell counts, per-triangle cell id, per-node origin
    in the cell mesh).
    """
    dom.validate()
    if target_h > dom.eps / 4 + 1e-12:
        raise ResolutionTooCoarse(
            "target_h=%g exceeds eps/4=%g" % (target_h, dom.eps / 4),
            where="mesh.generate_perforated_mesh")
    h_cell = target_h / dom.eps
    cell_nodes, cell_tris = _build_cell(dom.cell.inclusion, h_cell)
    cell_pairs = (_match_faces(cell_nodes, 0, 0.0, 1.0)
                  + _match_faces(cell_nodes, 1, 0.0, 1.0))
    cell_mesh = TriMesh(
        nodes=cell_nodes,
        triangles=np.asarray(cell_tris, dtype=int),
        boundary_edges=_find_boundary_edges(cell_nodes, cell_tris),
        periodic_pairs=np.asarray(cell_pairs, dtype=int).reshape(-1, 2),
    )
    cell_mesh.validate()

    nx, ny = dom.cell_counts
    eps = dom.eps
    nc = len(cell_nodes)
    all_nodes = []
    all_tris = []
    origins = []
    tri_cell = []
    for cy in range(ny):
        for cx in range(nx):
            shifted = (cell_nodes + np.array([float(cx), float(cy)])) * eps
            all_nodes.append(shifted)
            offset = (cy * nx + cx) * nc
            all_tris.append(cell_tris + offset)
            origins.append(np.arange(nc))
            tri_cell.append(np.full(len(cell_tris), cy * nx + cx))
    stacked = np.vstack(all_nodes)
    merged, tris_out, remap = _merge_nodes(stacked, all_tris)

    origin_all = np.concatenate(origins)
    node_origin = np.empty(len(merged), dtype=int)
    node_origin[remap] = origin_all

    tris = np.vstack(tris_out)
    mesh = TriMesh(
        nodes=merged,
        triangles=tris,
        boundary_edges=_find_boundary_edges(merged, tris,
                                            width=dom.width,
                                            height=dom.height),
        periodic_pairs=np.empty((0, 2), dtype=int),
        eps=eps,
        cell_counts=(nx, ny),
        cell_mesh=cell_mesh,
        node_cell_origin=node_origin,
        triangle_cell=np.concatenate(tri_cell),
    )
    mesh.validate()
    log.debug("perforated mesh eps=%g: %d nodes, %d triangles, %d holes",
              eps, mesh.num_nodes, mesh.num_triangles,
              count_interior_loops(mesh))
    return mesh


def mesh_quality_report(mesh):
    """Shape statistics used by solvers to refuse degenerate meshes."""
    p = mesh.nodes[mesh.triangles]
    e0 = p[:, 2] - p[:, 1]
    e1 = p[:, 0] - p[:, 2]
    e2 = p[:, 1] - p[:, 0]
    lengths = np.stack([np.hypot(e0[:, 0], e0[:, 1]),
                        np.hypot(e1[:, 0], e1[:, 1]),
                        np.hypot(e2[:, 0], e2[:, 1])], axis=1)
    angles = []
    for out_a, out_b in ((e2, e1), (e0, e2), (e1, e0)):
        u, v = out_a, -out_b
        cross = np.abs(u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0])
        dot = u[:, 0] * v[:, 0] + u[:, 1] * v[:, 1]
        angles.append(np.degrees(np.arctan2(cross, dot)))
    angles = np.stack(angles, axis=1)
    return {
        "min_angle_deg": float(np.min(angles)),
        "max_aspect": float(np.max(np.max(lengths, axis=1)
                                   / np.min(lengths, axis=1))),
        "h_max": float(np.max(lengths)),
        "h_min": float(np.min(lengths)),
        "num_nodes": mesh.num_nodes,
        "num_triangles": mesh.num_triangles,
        "area": mesh_area(mesh),
    }
