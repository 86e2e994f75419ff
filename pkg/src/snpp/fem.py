"""Finite-element core: P1/Taylor-Hood assembly, constraints, solvers.

Scalars (potential, pressure, concentrations) use P1 elements; velocity
uses P2 on the same triangulation (Taylor-Hood pair).  Assembly is
vectorized over elements and accumulated via coordinate-format scatter.
"""

import logging

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import (
    DegenerateElement,
    FieldMeshMismatch,
    InconsistentConstraint,
    MaxIterationsExceeded,
    NoSolidPhase,
    PointOutsideFluidPart,
    SolverBreakdown,
)

log = logging.getLogger(__name__)

DIRECT_DOF_LIMIT = 50000
DEFAULT_TOL = 1e-10

# Degree-4 triangle quadrature (6 points); barycentric rows, weights sum 1.
_QP4 = np.array([
    [0.108103018168070, 0.445948490915965, 0.445948490915965],
    [0.445948490915965, 0.108103018168070, 0.445948490915965],
    [0.445948490915965, 0.445948490915965, 0.108103018168070],
    [0.816847572980459, 0.091576213509771, 0.091576213509771],
    [0.091576213509771, 0.816847572980459, 0.091576213509771],
    [0.091576213509771, 0.091576213509771, 0.816847572980459],
])
_QW4 = np.array([0.223381589678011] * 3 + [0.109951743655322] * 3)

_EDGE_LOCAL = ((1, 2), (2, 0), (0, 1))


class Field:
    """Discrete field: value array tied to a mesh and an element space.

    space is one of "p1" (nodal scalars, or (N, 2) nodal vectors) and
    "p2v" (vector velocity; values shaped (ndof_p2, 2)).
    """

    def __init__(self, mesh, space, values):
        self.mesh = mesh
        self.space = space
        self.values = np.asarray(values, dtype=float)
        expected = {"p1": mesh.num_nodes,
                    "p2v": p2_dof_count(mesh)}[space]
        if self.values.shape[0] != expected:
            raise FieldMeshMismatch(
                "field has %d rows, space %s on this mesh needs %d"
                % (self.values.shape[0], space, expected))


def _p1_data(mesh):
    cached = mesh._caches.get("p1")
    if cached is not None:
        return cached
    p = mesh.nodes
    t = mesh.triangles
    x = p[t, 0]
    y = p[t, 1]
    two_a = ((x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0])
             - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0]))
    areas = 0.5 * two_a
    if np.any(areas < 1e-14):
        raise DegenerateElement(
            "triangle area below 1e-14 (min %g)" % float(np.min(areas)),
            where="fem.assembly")
    grads = np.empty((len(t), 3, 2))
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        grads[:, i, 0] = (y[:, j] - y[:, k]) / two_a
        grads[:, i, 1] = (x[:, k] - x[:, j]) / two_a
    mesh._caches["p1"] = (areas, grads)
    return areas, grads


def triangle_data(mesh):
    """Areas (M,) and P1 basis gradients (M, 3, 2)."""
    return _p1_data(mesh)


def _scatter(rows, cols, data, shape):
    return sp.coo_matrix((data.ravel(), (rows.ravel(), cols.ravel())),
                         shape=shape).tocsr()


def assemble_stiffness(mesh, coeff=None):
    """Stiffness matrix of the bilinear form grad u . C grad v.

    coeff may be a scalar or a symmetric 2x2 tensor; None means identity.
    """
    areas, grads = _p1_data(mesh)
    if coeff is None:
        coeff = np.eye(2)
    coeff = np.asarray(coeff, dtype=float)
    if coeff.ndim == 0:
        coeff = float(coeff) * np.eye(2)
    t = mesh.triangles
    n = mesh.num_nodes
    cg = grads @ coeff.T  # (M, 3, 2)
    local = np.einsum("mid,mjd->mij", cg, grads) * areas[:, None, None]
    rows = np.repeat(t, 3, axis=1)
    cols = np.tile(t, (1, 3))
    return _scatter(rows, cols, local.reshape(len(t), 9), (n, n))


def assemble_mass(mesh, lumped=False):
    """Consistent P1 mass matrix, or its row-sum lumped diagonal."""
    areas, _ = _p1_data(mesh)
    t = mesh.triangles
    n = mesh.num_nodes
    if lumped:
        diag = np.zeros(n)
        np.add.at(diag, t.ravel(), np.repeat(areas / 3.0, 3))
        return sp.diags(diag).tocsr()
    base = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
    local = base[None, :, :] * areas[:, None, None]
    rows = np.repeat(t, 3, axis=1)
    cols = np.tile(t, (1, 3))
    return _scatter(rows, cols, local.reshape(len(t), 9), (n, n))


def element_means(mesh, values):
    """Elementwise mean of a nodal scalar/vector or a P2 velocity field."""
    if isinstance(values, Field):
        if values.mesh is not mesh:
            raise FieldMeshMismatch("field lives on a different mesh")
        if values.space == "p2v":
            _, tri_edges, _ = _p2_data(mesh)
            edge_vals = values.values[mesh.num_nodes:]
            return edge_vals[tri_edges].mean(axis=1)
        values = values.values
    values = np.asarray(values, dtype=float)
    return values[mesh.triangles].mean(axis=1)


def p1_element_gradients(mesh, values):
    """Piecewise-constant gradient of a P1 scalar, shape (M, 2)."""
    _, grads = _p1_data(mesh)
    v = np.asarray(values, dtype=float)[mesh.triangles]
    return np.einsum("mi,mid->md", v, grads)


def recover_nodal_gradient(mesh, values):
    """Area-weighted average of element gradients at the nodes, (N, 2)."""
    areas, _ = _p1_data(mesh)
    eg = p1_element_gradients(mesh, values)
    out = np.zeros((mesh.num_nodes, 2))
    weight = np.zeros(mesh.num_nodes)
    t = mesh.triangles
    for i in range(3):
        np.add.at(out, t[:, i], eg * areas[:, None])
        np.add.at(weight, t[:, i], areas)
    return out / weight[:, None]


def assemble_convection(mesh, velocity=None, drift=None, drift_tensor=None,
                        drift_sign=1.0):
    """Matrix B with (B c)_i = integral of c * w . grad(phi_i).

    The transporting field is w = velocity - drift_sign * T grad(drift)
    with T = drift_tensor (identity when None).  velocity may be an
    elementwise (M, 2) array, a nodal (N, 2) array, or a P2 velocity
    Field; drift is a nodal scalar.  Columns sum to zero (partition of
    unity), which is what conserves total content under no-flux stepping.
    """
    areas, grads = _p1_data(mesh)
    m = mesh.num_triangles
    n = mesh.num_nodes
    w = np.zeros((m, 2))
    if velocity is not None:
        if isinstance(velocity, Field) or np.asarray(velocity).shape[0] == n:
            w = w + element_means(mesh, velocity)
        else:
            vel = np.asarray(velocity, dtype=float)
            if vel.shape != (m, 2):
                raise FieldMeshMismatch(
                    "velocity shape %s matches neither nodes nor elements"
                    % (vel.shape,))
            w = w + vel
    if drift is not None:
        if isinstance(drift, Field):
            if drift.mesh is not mesh:
                raise FieldMeshMismatch("drift field lives on another mesh")
            drift = drift.values
        g = p1_element_gradients(mesh, drift)
        if drift_tensor is not None:
            tensor = np.asarray(drift_tensor, dtype=float)
            if tensor.ndim == 0:
                g = float(tensor) * g
            else:
                g = g @ tensor.T
        w = w - drift_sign * g
    wg = np.einsum("md,mid->mi", w, grads) * (areas / 3.0)[:, None]
    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1)
    cols = np.tile(t, (1, 3))
    data = np.repeat(wg, 3, axis=1)
    return _scatter(rows, cols, data, (n, n))


def boundary_edge_geometry(mesh, tag):
    """Per tagged edge: endpoints, length, unit normal outward of the fluid."""
    owner = {}
    for ti, tri in enumerate(mesh.triangles):
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            owner.setdefault((min(a, b), max(a, b)), []).append(ti)
    out = []
    for (a, b), etag in mesh.boundary_edges:
        if etag != tag:
            continue
        tris = owner[(min(a, b), max(a, b))]
        tri = mesh.triangles[tris[0]]
        third = [v for v in tri if v != a and v != b][0]
        pa, pb, pc = mesh.nodes[a], mesh.nodes[b], mesh.nodes[third]
        edge = pb - pa
        length = float(np.hypot(edge[0], edge[1]))
        normal = np.array([edge[1], -edge[0]]) / length
        mid = 0.5 * (pa + pb)
        if normal @ (pc - mid) > 0:
            normal = -normal
        out.append((int(a), int(b), length, normal))
    return out


def boundary_measure(mesh, tag):
    return sum(length for _, _, length, _ in boundary_edge_geometry(mesh, tag))


def assemble_boundary_load(mesh, tag, value):
    """Load vector of the surface term value * integral phi_i ds."""
    rhs = np.zeros(mesh.num_nodes)
    for a, b, length, _ in boundary_edge_geometry(mesh, tag):
        rhs[a] += value * length / 2.0
        rhs[b] += value * length / 2.0
    return rhs


def assemble_interface_normal_load(mesh, direction):
    """Load vector -integral (e_j . nu) phi_i ds over the inclusion boundary.

    nu is the unit normal pointing out of the fluid; this is the natural
    boundary datum of the periodic corrector problems, and it sums to zero
    over each closed interface (discretely, to rounding).
    """
    from .mesh import GAMMA_INTERIOR
    rhs = np.zeros(mesh.num_nodes)
    for a, b, length, normal in boundary_edge_geometry(mesh, GAMMA_INTERIOR):
        flux = -normal[direction] * length / 2.0
        rhs[a] += flux
        rhs[b] += flux
    return rhs


# ----------------------------------------------------------------------
# constraints


def canonical_from_pairs(n, pairs):
    """Union-find canonical representative for each of n dofs."""
    parent = np.arange(n)

    def find(i):
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    for a, b in pairs:
        ra, rb = find(int(a)), find(int(b))
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    return np.array([find(i) for i in range(n)])


def periodic_prolongation(n, pairs):
    """Sparse P mapping reduced (master) dofs to the full dof vector."""
    canon = canonical_from_pairs(n, pairs)
    masters = np.unique(canon)
    index = {m: i for i, m in enumerate(masters)}
    cols = np.array([index[c] for c in canon])
    p = sp.coo_matrix((np.ones(n), (np.arange(n), cols)),
                      shape=(n, len(masters))).tocsr()
    return p, masters


def apply_periodic(matrix, rhs, pairs):
    """Merge slave dofs into masters; returns (matrix, rhs, expand)."""
    n = matrix.shape[0]
    p, _ = periodic_prolongation(n, pairs)
    reduced = (p.T @ matrix @ p).tocsr()
    rhs_r = p.T @ rhs

    def expand(x):
        return p @ x

    return reduced, rhs_r, expand


def apply_dirichlet(matrix, rhs, nodes, values):
    """Symmetric elimination of prescribed dofs."""
    nodes = np.asarray(nodes, dtype=int)
    values = np.broadcast_to(np.asarray(values, dtype=float), nodes.shape)
    n = matrix.shape[0]
    keep = np.ones(n, dtype=bool)
    keep[nodes] = False
    full_values = np.zeros(n)
    full_values[nodes] = values
    rhs = rhs - matrix @ full_values
    rhs[nodes] = values
    mask = sp.diags(keep.astype(float))
    pin = sp.diags((~keep).astype(float))
    matrix = (mask @ matrix @ mask + pin).tocsr()
    return matrix, rhs


def apply_zero_mean(matrix, rhs, mass):
    """Append one Lagrange multiplier row/column enforcing zero mean.

    mass may be the P1 mass matrix or a precomputed weight vector; the
    constraint is weight . u = 0.  The augmented system is symmetric
    indefinite; solve it with the direct solver.
    """
    if sp.issparse(mass):
        weight = np.asarray(mass @ np.ones(mass.shape[0])).ravel()
    else:
        weight = np.asarray(mass, dtype=float)
    n = matrix.shape[0]
    col = sp.csr_matrix(weight.reshape(n, 1))
    aug = sp.bmat([[matrix, col], [col.T, None]], format="csr")
    return aug, np.concatenate([rhs, [0.0]])


def constrain_system(matrix, rhs, periodic_pairs=None, dirichlet=None,
                     zero_mean=None):
    """Compose the constraint operations in a fixed order.

    dirichlet is (dofs, values); zero_mean is the mass matrix or weight
    vector.  Requesting both dirichlet and zero-mean on the same scalar
    field is contradictory and raises InconsistentConstraint.  Returns
    (matrix, rhs, finish) where finish maps the solution of the returned
    system back to the full dof vector.
    """
    if dirichlet is not None and zero_mean is not None:
        raise InconsistentConstraint(
            "zero-mean and Dirichlet constraints requested together",
            where="fem.constrain_system")
    expand = None
    augmented = False
    if periodic_pairs is not None and len(periodic_pairs):
        n = matrix.shape[0]
        p, masters = periodic_prolongation(n, periodic_pairs)
        matrix = (p.T @ matrix @ p).tocsr()
        rhs = p.T @ rhs
        expand = p
        if dirichlet is not None:
            canon = canonical_from_pairs(n, periodic_pairs)
            index = {m: i for i, m in enumerate(masters)}
            dofs, values = dirichlet
            dirichlet = (np.array([index[canon[d]] for d in dofs]), values)
        if zero_mean is not None:
            if sp.issparse(zero_mean):
                zero_mean = np.asarray(
                    zero_mean @ np.ones(zero_mean.shape[0])).ravel()
            zero_mean = p.T @ zero_mean
    if dirichlet is not None:
        matrix, rhs = apply_dirichlet(matrix, rhs, *dirichlet)
    if zero_mean is not None:
        matrix, rhs = apply_zero_mean(matrix, rhs, zero_mean)
        augmented = True

    def finish(x):
        if augmented:
            x = x[:-1]
        if expand is not None:
            x = expand @ x
        return x

    return matrix, rhs, finish


# ----------------------------------------------------------------------
# solvers


def solve_direct(matrix, rhs):
    """Sparse LU solve; deterministic workhorse for non-SPD systems."""
    lu = splu(sp.csc_matrix(matrix))
    return lu.solve(np.asarray(rhs, dtype=float))


def solve_spd(matrix, rhs, tol=DEFAULT_TOL, max_iter=None,
              project_constant=False, mean_weight=None):
    """Jacobi-preconditioned conjugate gradients.

    project_constant removes the constant component from the residual at
    every step, which solves compatible singular Neumann systems; the
    returned iterate is then shifted to zero weighted mean when
    mean_weight is given.  Raises SolverBreakdown on indefinite input or
    residual stagnation and MaxIterationsExceeded past the budget.
    """
    matrix = sp.csr_matrix(matrix)
    n = matrix.shape[0]
    if max_iter is None:
        max_iter = 10 * n + 200
    b = np.asarray(rhs, dtype=float).copy()
    diag = matrix.diagonal()
    if np.any(diag <= 0):
        raise SolverBreakdown("nonpositive diagonal entry: matrix is not "
                              "positive definite", where="fem.solve_spd")
    inv_diag = 1.0 / diag
    ones = np.ones(n) / np.sqrt(n)
    if project_constant:
        b -= (ones @ b) * ones
    bnorm = float(np.linalg.norm(b))
    x = np.zeros(n)
    if bnorm == 0.0:
        return x
    r = b.copy()
    z = inv_diag * r
    p = z.copy()
    rz = float(r @ z)
    best = float(np.linalg.norm(r))
    best_iter = 0
    for it in range(1, max_iter + 1):
        ap = matrix @ p
        if project_constant:
            ap -= (ones @ ap) * ones
        pap = float(p @ ap)
        if pap <= 0.0:
            raise SolverBreakdown("nonpositive curvature: matrix is not "
                                  "positive definite", where="fem.solve_spd")
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        if project_constant:
            r -= (ones @ r) * ones
        res = float(np.linalg.norm(r))
        if res <= tol * bnorm:
            log.debug("solve_spd converged in %d iterations (rel %.2e)",
                      it, res / bnorm)
            break
        if res < best * (1.0 - 1e-6):
            best, best_iter = res, it
        elif it - best_iter > 100:
            raise SolverBreakdown(
                "residual stagnated at relative %.2e after %d iterations"
                % (res / bnorm, it), where="fem.solve_spd")
        z = inv_diag * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    else:
        raise MaxIterationsExceeded(
            "conjugate gradients: %d iterations, relative residual %.2e"
            % (max_iter, float(np.linalg.norm(r)) / bnorm),
            where="fem.solve_spd")
    if mean_weight is not None:
        w = np.asarray(mean_weight, dtype=float)
        x = x - (w @ x) / np.sum(w)
    return x


def step_implicit(mass, operator, state, dt, rhs=None):
    """One implicit Euler step: (M + dt A) c_new = M c + dt b."""
    b = mass @ state
    if rhs is not None:
        b = b + dt * rhs
    return solve_direct(mass + dt * operator, b)


def step_reacting_pair(mass, op_plus, op_minus, c_plus, c_minus, dt):
    """Coupled implicit step for two species exchanging through the
    reaction pair (-q, +q) with q = c_plus - c_minus.

    Both species and the reaction are advanced in one block solve, so the
    discrete total charge obeys Q_new = Q_old / (1 + 2 dt) exactly and
    the total mass is conserved whenever the operators have zero column
    sums (stiffness plus convection under no-flux conditions).
    """
    a11 = mass + dt * op_plus + dt * mass
    a22 = mass + dt * op_minus + dt * mass
    coupling = -dt * mass
    block = sp.bmat([[a11, coupling], [coupling, a22]], format="csc")
    rhs = np.concatenate([mass @ c_plus, mass @ c_minus])
    solution = splu(block).solve(rhs)
    n = mass.shape[0]
    return solution[:n], solution[n:]


# ----------------------------------------------------------------------
# P2 space and Stokes


def _p2_data(mesh):
    cached = mesh._caches.get("p2")
    if cached is not None:
        return cached
    edge_index = {}
    tri_edges = np.empty((mesh.num_triangles, 3), dtype=int)
    for ti, tri in enumerate(mesh.triangles):
        for k, (i, j) in enumerate(_EDGE_LOCAL):
            key = (min(tri[i], tri[j]), max(tri[i], tri[j]))
            if key not in edge_index:
                edge_index[key] = len(edge_index)
            tri_edges[ti, k] = edge_index[key]
    edges = np.array(sorted(edge_index, key=edge_index.get), dtype=int)
    mesh._caches["p2"] = (edges, tri_edges, len(edges))
    return mesh._caches["p2"]


def p2_dof_count(mesh):
    _, _, n_edges = _p2_data(mesh)
    return mesh.num_nodes + n_edges


def _p2_basis(lam):
    """Values (6,) of the P2 basis at one barycentric point."""
    out = np.empty(6)
    out[:3] = lam * (2 * lam - 1)
    for k, (i, j) in enumerate(_EDGE_LOCAL):
        out[3 + k] = 4 * lam[i] * lam[j]
    return out


def _p2_basis_gradients(lam, grads):
    """Gradients (M, 6, 2) of the P2 basis at one barycentric point."""
    m = grads.shape[0]
    out = np.empty((m, 6, 2))
    for i in range(3):
        out[:, i, :] = (4 * lam[i] - 1) * grads[:, i, :]
    for k, (i, j) in enumerate(_EDGE_LOCAL):
        out[:, 3 + k, :] = 4 * (lam[i] * grads[:, j, :]
                                + lam[j] * grads[:, i, :])
    return out


def _p2_global_dofs(mesh):
    _, tri_edges, _ = _p2_data(mesh)
    return np.hstack([mesh.triangles, mesh.num_nodes + tri_edges])


def assemble_p2_stiffness(mesh):
    """Scalar P2 stiffness (one velocity component of the viscous term)."""
    areas, grads = _p1_data(mesh)
    m = mesh.num_triangles
    local = np.zeros((m, 6, 6))
    for lam, w in zip(_QP4, _QW4):
        g = _p2_basis_gradients(lam, grads)
        local += w * np.einsum("mid,mjd->mij", g, g)
    local *= areas[:, None, None]
    dofs = _p2_global_dofs(mesh)
    rows = np.repeat(dofs, 6, axis=1)
    cols = np.tile(dofs, (1, 6))
    n2 = p2_dof_count(mesh)
    return _scatter(rows, cols, local.reshape(m, 36), (n2, n2))


def assemble_divergence(mesh):
    """P1-pressure rows of the constraint integral q * div(u).

    Returns (Bx, By) with shape (num_nodes, p2_dofs); the full constraint
    is Bx @ ux + By @ uy.
    """
    areas, grads = _p1_data(mesh)
    m = mesh.num_triangles
    local = np.zeros((m, 3, 6, 2))
    for lam, w in zip(_QP4, _QW4):
        g = _p2_basis_gradients(lam, grads)
        local += w * np.einsum("q,mjd->mqjd", lam, g)
    local *= areas[:, None, None, None]
    dofs = _p2_global_dofs(mesh)
    rows = np.repeat(mesh.triangles, 6, axis=1)
    cols = np.tile(dofs, (1, 3))
    n2 = p2_dof_count(mesh)
    shape = (mesh.num_nodes, n2)
    bx = _scatter(rows, cols, local[:, :, :, 0].reshape(m, 18), shape)
    by = _scatter(rows, cols, local[:, :, :, 1].reshape(m, 18), shape)
    return bx, by


def assemble_p2_load(mesh, forcing):
    """Load vector (p2_dofs, 2) for elementwise-constant vector forcing."""
    areas, _ = _p1_data(mesh)
    forcing = np.asarray(forcing, dtype=float)
    if forcing.ndim == 1:
        forcing = np.broadcast_to(forcing, (mesh.num_triangles, 2))
    _, tri_edges, _ = _p2_data(mesh)
    n2 = p2_dof_count(mesh)
    out = np.zeros((n2, 2))
    # Vertex P2 basis functions integrate to zero over the element; the
    # edge ones integrate to area/3.
    contrib = forcing * (areas / 3.0)[:, None]
    for k in range(3):
        np.add.at(out, mesh.num_nodes + tri_edges[:, k], contrib)
    return out


def _p2_boundary_dofs(mesh, tags):
    """Vertex and edge dofs lying on boundary edges with the given tags."""
    _, tri_edges, _ = _p2_data(mesh)
    edge_index = {}
    for ti, tri in enumerate(mesh.triangles):
        for k, (i, j) in enumerate(_EDGE_LOCAL):
            key = (min(tri[i], tri[j]), max(tri[i], tri[j]))
            edge_index[key] = tri_edges[ti, k]
    dofs = set()
    for (a, b), tag in mesh.boundary_edges:
        if tag in tags:
            dofs.add(int(a))
            dofs.add(int(b))
            dofs.add(mesh.num_nodes
                     + int(edge_index[(min(a, b), max(a, b))]))
    return sorted(dofs)


def _p2_periodic_pairs(mesh):
    """Periodic dof pairs for the P2 space (vertices plus face edges).

    Boundary edges whose endpoint canonical representatives coincide are
    translates of each other, so their midpoint dofs are identified by
    grouping edges on the canonical endpoint pair.
    """
    if not len(mesh.periodic_pairs):
        return []
    canon = canonical_from_pairs(mesh.num_nodes, mesh.periodic_pairs)
    _, tri_edges, _ = _p2_data(mesh)
    edge_index = {}
    for ti, tri in enumerate(mesh.triangles):
        for k, (i, j) in enumerate(_EDGE_LOCAL):
            key = (min(tri[i], tri[j]), max(tri[i], tri[j]))
            edge_index[key] = tri_edges[ti, k]
    pairs = [(int(a), int(b)) for a, b in mesh.periodic_pairs]
    groups = {}
    for (a, b), eid in edge_index.items():
        ca, cb = int(canon[a]), int(canon[b])
        groups.setdefault((min(ca, cb), max(ca, cb)), []).append(int(eid))
    for eids in groups.values():
        if len(eids) > 1:
            master = min(eids)
            for eid in eids:
                if eid != master:
                    pairs.append((mesh.num_nodes + master,
                                  mesh.num_nodes + eid))
    return pairs


class StokesOperator:
    """Taylor-Hood saddle-point operator with reusable factorization.

    bc is a dict with keys "no_slip_tags" (list of boundary tags) and
    "periodic" (bool).  The pressure is constrained to zero mean through
    a Lagrange multiplier.  Systems at or above DIRECT_DOF_LIMIT unknowns
    are solved by conjugate gradients on the pressure Schur complement
    (Uzawa) with a lumped pressure-mass preconditioner; smaller ones by a
    single sparse factorization.
    """

    def __init__(self, mesh, bc, viscosity=1.0):
        self.mesh = mesh
        self.viscosity = viscosity
        no_slip_tags = set(bc.get("no_slip_tags", ()))
        periodic = bool(bc.get("periodic", False))
        present = {tag for _, tag in mesh.boundary_edges}
        self.no_slip_dofs = _p2_boundary_dofs(mesh, no_slip_tags & present)
        self.periodic = periodic
        self._build()

    def _build(self):
        mesh = self.mesh
        n2 = p2_dof_count(mesh)
        n1 = mesh.num_nodes
        a = self.viscosity * assemble_p2_stiffness(mesh)
        bx, by = assemble_divergence(mesh)
        mass = assemble_mass(mesh)

        # Full block system over (ux, uy, p) in the symmetric form.
        zero = sp.csr_matrix((n2, n2))
        saddle = sp.bmat([
            [a, zero, -bx.T],
            [zero, a, -by.T],
            [-bx, -by, None],
        ], format="csr")

        nfull = 2 * n2 + n1
        pairs = []
        if self.periodic:
            p2_pairs = _p2_periodic_pairs(mesh)
            pairs.extend(p2_pairs)
            pairs.extend((a_ + n2, b_ + n2) for a_, b_ in p2_pairs)
            pairs.extend((int(a_) + 2 * n2, int(b_) + 2 * n2)
                         for a_, b_ in mesh.periodic_pairs)
        if pairs:
            self.prolong, masters = periodic_prolongation(nfull, pairs)
        else:
            self.prolong = sp.identity(nfull, format="csr")
            masters = np.arange(nfull)

        reduced = (self.prolong.T @ saddle @ self.prolong).tocsr()
        master_index = {m: i for i, m in enumerate(masters)}
        canon = (canonical_from_pairs(nfull, pairs) if pairs
                 else np.arange(nfull))
        fixed = set()
        for dof in self.no_slip_dofs:
            for comp in (0, n2):
                fixed.add(master_index[canon[dof + comp]])
        self.fixed = np.array(sorted(fixed), dtype=int)
        self.n2 = n2
        self.n1 = n1
        self.nred = reduced.shape[0]

        weight_full = np.zeros(nfull)
        weight_full[2 * n2:] = np.asarray(mass @ np.ones(n1)).ravel()
        self.pressure_weight = self.prolong.T @ weight_full

        keep = np.ones(self.nred, dtype=bool)
        keep[self.fixed] = False
        mask = sp.diags(keep.astype(float))
        pin = sp.diags((~keep).astype(float))
        self.matrix = (mask @ reduced @ mask + pin).tocsr()
        self.keep = keep

        columns = [self.pressure_weight]
        self.unconstrained = self.periodic and not self.no_slip_dofs
        if self.unconstrained:
            # No solid interface pins the velocity: constrain its mean in
            # both components so compatible (zero-mean) forcings remain
            # solvable and incompatible ones are rejected at solve time.
            unit = assemble_p2_load(mesh, (1.0, 0.0))[:, 0]
            wx = np.concatenate([unit, np.zeros(n2), np.zeros(n1)])
            wy = np.concatenate([np.zeros(n2), unit, np.zeros(n1)])
            columns.append(self.prolong.T @ wx)
            columns.append(self.prolong.T @ wy)
        self.n_multipliers = len(columns)

        total = self.nred + self.n_multipliers
        if total < DIRECT_DOF_LIMIT or self.unconstrained:
            cols = sp.csr_matrix(np.column_stack(columns))
            aug = sp.bmat([[self.matrix, cols], [cols.T, None]],
                          format="csc")
            self._lu = splu(aug)
            self._mode = "direct"
        else:
            self._prepare_uzawa()
            self._mode = "uzawa"
        log.debug("stokes operator: %d reduced dofs, mode=%s",
                  self.nred, self._mode)

    def _prepare_uzawa(self):
        # Split the reduced, no-slip-pinned matrix into velocity and
        # pressure blocks.  Reduced dof layout follows the master order of
        # the full layout (ux, uy, p), so classify masters by origin.
        marker = np.zeros(2 * self.n2 + self.n1)
        marker[2 * self.n2:] = 1.0
        is_pressure = (self.prolong.T @ marker) > 0
        self.u_ids = np.where(~is_pressure)[0]
        self.p_ids = np.where(is_pressure)[0]
        mat = self.matrix.tocsr()
        self.a_uu = mat[self.u_ids][:, self.u_ids].tocsc()
        self.b_pu = mat[self.p_ids][:, self.u_ids].tocsr()
        self._lu_a = splu(self.a_uu)
        wp = self.pressure_weight[self.p_ids]
        self.wp = wp / np.linalg.norm(wp)
        # Lumped pressure mass on the reduced pressure dofs.
        mass_diag = np.asarray(
            assemble_mass(self.mesh, lumped=True).diagonal()).ravel()
        full = np.zeros(2 * self.n2 + self.n1)
        full[2 * self.n2:] = mass_diag
        self.p_mass = (self.prolong.T @ full)[self.p_ids]

    def solve(self, forcing):
        """Velocity and pressure for elementwise-constant forcing."""
        if self.unconstrained:
            areas, _ = _p1_data(self.mesh)
            forcing_arr = np.asarray(forcing, dtype=float)
            if forcing_arr.ndim == 1:
                mean = forcing_arr * np.sum(areas)
            else:
                mean = areas @ forcing_arr
            if np.linalg.norm(mean) > 1e-12:
                raise NoSolidPhase(
                    "periodic flow without a no-slip interface admits no "
                    "solution for mean forcing", where="fem.solve_stokes")
        load = assemble_p2_load(self.mesh, forcing)
        rhs_full = np.concatenate([load[:, 0], load[:, 1],
                                   np.zeros(self.n1)])
        rhs = self.prolong.T @ rhs_full
        rhs[self.fixed] = 0.0
        if self._mode == "direct":
            padded = np.concatenate([rhs, np.zeros(self.n_multipliers)])
            sol = self._lu.solve(padded)[:self.nred]
        else:
            sol = self._solve_uzawa(rhs)
        full = self.prolong @ sol
        vel = Field(self.mesh, "p2v",
                    np.column_stack([full[:self.n2],
                                     full[self.n2:2 * self.n2]]))
        pressure = full[2 * self.n2:]
        return vel, pressure

    def _solve_uzawa(self, rhs):
        fu = rhs[self.u_ids]
        fp = rhs[self.p_ids]
        ainv_f = self._lu_a.solve(fu)
        g = self.b_pu @ ainv_f - fp

        def schur(p):
            return self.b_pu @ self._lu_a.solve(self.b_pu.T @ p)

        def project(v):
            return v - (self.wp @ v) * self.wp

        p = np.zeros(len(self.p_ids))
        r = project(g)
        gnorm = float(np.linalg.norm(r))
        if gnorm > 0:
            z = r / self.p_mass
            d = z.copy()
            rz = float(r @ z)
            for it in range(1, 501):
                sd = project(schur(d))
                dsd = float(d @ sd)
                if dsd <= 0:
                    raise SolverBreakdown("Schur complement lost positivity",
                                          where="fem.solve_stokes")
                alpha = rz / dsd
                p += alpha * d
                r -= alpha * sd
                if float(np.linalg.norm(r)) <= DEFAULT_TOL * gnorm:
                    break
                z = r / self.p_mass
                rz_new = float(r @ z)
                d = z + (rz_new / rz) * d
                rz = rz_new
            else:
                raise MaxIterationsExceeded(
                    "Uzawa iteration exceeded 500 steps",
                    where="fem.solve_stokes")
        u = self._lu_a.solve(fu - self.b_pu.T @ p)
        sol = np.zeros(self.nred)
        sol[self.u_ids] = u
        sol[self.p_ids] = p
        # Shift pressure to zero weighted mean.
        wp_full = self.pressure_weight[self.p_ids]
        sol[self.p_ids] -= (wp_full @ p) / np.sum(wp_full)
        return sol


def solve_stokes(mesh, forcing, bc, viscosity=1.0):
    """Taylor-Hood Stokes solve; see StokesOperator for the contract.

    Raises NoSolidPhase when the velocity is unconstrained (periodic with
    no no-slip interface) and the forcing has a nonzero mean, which is
    the incompatible configuration.
    """
    op = StokesOperator(mesh, bc, viscosity=viscosity)
    vel, pressure = op.solve(forcing)
    return vel, Field(mesh, "p1", pressure)


def weak_divergence(mesh, vel):
    """Residual vector of the discrete incompressibility constraint.

    On periodic meshes the constraint is tested against the periodic
    pressure space, so paired rows are folded together.
    """
    bx, by = assemble_divergence(mesh)
    residual = bx @ vel.values[:, 0] + by @ vel.values[:, 1]
    if len(mesh.periodic_pairs):
        p, _ = periodic_prolongation(mesh.num_nodes, mesh.periodic_pairs)
        residual = p.T @ residual
    return residual


def integrate_p2(mesh, vel):
    """Integral of a P2 vector field over the mesh, shape (2,)."""
    areas, _ = _p1_data(mesh)
    means = element_means(mesh, vel)
    return areas @ means


# ----------------------------------------------------------------------
# interpolation


class PointLocator:
    """Barycentric point location with a centroid k-d tree."""

    def __init__(self, mesh):
        from scipy.spatial import cKDTree
        self.mesh = mesh
        areas, grads = _p1_data(mesh)
        self.centroids = mesh.nodes[mesh.triangles].mean(axis=1)
        self.tree = cKDTree(self.centroids)

    def locate(self, point, tol=-1e-8):
        point = np.asarray(point, dtype=float)
        for k in (8, 40):
            k = min(k, len(self.centroids))
            _, candidates = self.tree.query(point, k=k)
            candidates = np.atleast_1d(candidates)
            best, best_min = None, -np.inf
            for ti in candidates:
                lam = self._barycentric(int(ti), point)
                low = float(np.min(lam))
                if low > best_min:
                    best, best_min = (int(ti), lam), low
                if low >= 0:
                    return best
            if best_min >= tol:
                return best
        raise PointOutsideFluidPart(
            "point (%g, %g) lies outside the fluid part" % tuple(point),
            where="fem.PointLocator")

    def _barycentric(self, ti, point):
        tri = self.mesh.triangles[ti]
        a, b, c = self.mesh.nodes[tri]
        m = np.array([[b[0] - a[0], c[0] - a[0]],
                      [b[1] - a[1], c[1] - a[1]]])
        st = np.linalg.solve(m, point - a)
        return np.array([1.0 - st[0] - st[1], st[0], st[1]])


def p1_interpolate(mesh, values, points, locator=None):
    """Evaluate a P1 field at arbitrary points inside the fluid part."""
    if locator is None:
        locator = mesh._caches.get("locator")
        if locator is None:
            locator = PointLocator(mesh)
            mesh._caches["locator"] = locator
    values = np.asarray(values, dtype=float)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.empty(len(points))
    for i, point in enumerate(points):
        ti, lam = locator.locate(point)
        lam = np.clip(lam, 0.0, None)
        lam /= lam.sum()
        out[i] = lam @ values[mesh.triangles[ti]]
    return out


def l2_norm(mesh, values):
    """Mass-weighted L2 norm of nodal scalars or (N, k) vectors."""
    mass = mesh._caches.get("mass")
    if mass is None:
        mass = assemble_mass(mesh)
        mesh._caches["mass"] = mass
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        return float(np.sqrt(values @ (mass @ values)))
    return float(np.sqrt(sum(values[:, k] @ (mass @ values[:, k])
                             for k in range(values.shape[1]))))
