"""Regime classification and the upscaled macroscopic solver.

The scaling exponents (alpha, beta, gamma) and the electrostatic boundary
condition select one limit model: an elliptic potential equation or an
algebraic local closure, a Darcy law with or without electrostatic
forcing, and a transport equation with or without a drift term.  The
transient solver sweeps potential, velocity, and transport in a
Gauss-Seidel fashion with an inner fixed-point iteration per time step.
"""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import fem
from .errors import (
    FixedPointDivergence,
    InadmissibleScaling,
    IncompatibleSource,
    NegativeConcentration,
    ValidationError,
)

log = logging.getLogger(__name__)

NEUMANN = "neumann"
DIRICHLET = "dirichlet"
POTENTIAL_ELLIPTIC = "EllipticPoisson"
POTENTIAL_ALGEBRAIC = "AlgebraicLocal"
FORCING_ELECTRO = "WithElectrostatic"
FORCING_PLAIN = "Plain"
DRIFT_ON = "WithDrift"
DRIFT_OFF = "None"

FIXED_POINT_TOL = 1e-8
FIXED_POINT_MAX_ITER = 25
COMPATIBILITY_TOL = 1e-8


@dataclass(frozen=True)
class ScalingRegime:
    """Exponent triple and electrostatic boundary condition.

    bc_type is "neumann" (surface-charge sigma) or "dirichlet" (wall
    potential phi_d).
    """

    bc_type: str
    alpha: float
    beta: float
    gamma: float
    sigma: float = 0.0
    phi_d: float = 0.0

    def validate(self):
        if self.bc_type not in (NEUMANN, DIRICHLET):
            raise ValidationError("bc_type must be %r or %r"
                                  % (NEUMANN, DIRICHLET), field="bc_type")


@dataclass(frozen=True)
class MacroModelClass:
    """Structure of the limit model for one scaling regime."""

    potential_model: str
    darcy_forcing: str
    np_drift: str


@dataclass
class MacroState:
    """Snapshot of the macroscopic fields at one time."""

    mesh: object
    t: float
    c_plus: np.ndarray
    c_minus: np.ndarray
    phi: np.ndarray
    pressure: np.ndarray
    velocity: np.ndarray


@dataclass
class MacroProblem:
    """Complete description of one macroscopic run."""

    mesh: object
    coeffs: object
    regime: ScalingRegime
    c_plus: np.ndarray
    c_minus: np.ndarray
    t_end: float
    dt: float
    lam: float = 1.0
    snapshot_stride: int = 1

    def validate(self):
        self.regime.validate()
        for name, values in (("c_plus", self.c_plus),
                             ("c_minus", self.c_minus)):
            values = np.asarray(values)
            if values.shape != (self.mesh.num_nodes,):
                raise ValidationError("%s does not match the mesh" % name,
                                      field=name)
            if np.min(values) < 0 or np.max(values) > self.lam:
                raise ValidationError(
                    "%s outside [0, %g] nodewise" % (name, self.lam),
                    field=name)
        if not (self.dt > 0 and self.t_end > 0):
            raise ValidationError("dt and t_end must be positive")
        if self.regime.bc_type == NEUMANN:
            # The potential equation must be solvable for the initial data;
            # the same residual check runs again at every solve.
            mass = fem.assemble_mass(self.mesh)
            ones = np.ones(self.mesh.num_nodes)
            rhs = self.coeffs.porosity * np.asarray(
                mass @ (self.c_plus - self.c_minus)).ravel() \
                + self.coeffs.sigma_bar * np.asarray(mass @ ones).ravel()
            scale = max(1.0, float(np.abs(rhs).sum()))
            if abs(float(rhs.sum())) > COMPATIBILITY_TOL * scale:
                raise IncompatibleSource(
                    "initial charge %g is not balanced by the surface "
                    "charge" % float(rhs.sum()), where="macro.MacroProblem")


def classify_regime(regime):
    """Map a scaling regime onto the structure of its limit model.

    Raises InadmissibleScaling outside the ranges where the limit model
    exists (the a priori estimates fail there).
    """
    regime.validate()
    a, b, g = regime.alpha, regime.beta, regime.gamma
    if regime.bc_type == NEUMANN:
        if b - a < 0 or g - a < 0:
            raise InadmissibleScaling(
                "Neumann regime needs beta >= alpha and gamma >= alpha; "
                "got alpha=%g beta=%g gamma=%g" % (a, b, g),
                where="macro.classify_regime")
        return MacroModelClass(
            potential_model=POTENTIAL_ELLIPTIC,
            darcy_forcing=FORCING_ELECTRO if b == a else FORCING_PLAIN,
            np_drift=DRIFT_ON if g == a else DRIFT_OFF)
    if b - a + 1 < 0 or g - a + 1 < 0:
        raise InadmissibleScaling(
            "Dirichlet regime needs beta >= alpha - 1 and gamma >= "
            "alpha - 1; got alpha=%g beta=%g gamma=%g" % (a, b, g),
            where="macro.classify_regime")
    return MacroModelClass(
        potential_model=POTENTIAL_ALGEBRAIC,
        darcy_forcing=FORCING_PLAIN,
        np_drift=DRIFT_OFF)


class _Operators:
    """Assembled matrices and factorizations reused across time steps."""

    def __init__(self, mesh, coeffs):
        self.mesh = mesh
        self.coeffs = coeffs
        self.mass = fem.assemble_mass(mesh)
        self.lumped = fem.assemble_mass(mesh, lumped=True)
        self.weight = np.asarray(
            self.mass @ np.ones(mesh.num_nodes)).ravel()
        self.stiff_d = fem.assemble_stiffness(mesh, coeffs.diffusion)
        aug, _ = fem.apply_zero_mean(self.stiff_d,
                                     np.zeros(mesh.num_nodes), self.weight)
        self.lu_potential = splu(sp.csc_matrix(aug))
        if coeffs.permeability is not None:
            stiff_k = fem.assemble_stiffness(mesh, coeffs.permeability)
            aug_k, _ = fem.apply_zero_mean(
                stiff_k, np.zeros(mesh.num_nodes), self.weight)
            self.lu_darcy = splu(sp.csc_matrix(aug_k))
        else:
            self.lu_darcy = None


def _get_operators(state, coeffs):
    cached = state.mesh._caches.get("macro_ops")
    if cached is None or cached.coeffs is not coeffs:
        cached = _Operators(state.mesh, coeffs)
        state.mesh._caches["macro_ops"] = cached
    return cached


def solve_macro_poisson(state, coeffs):
    """Zero-mean potential driven by net charge and surface charge.

    Solves -div(D grad phi) = porosity (c+ - c-) + sigma_bar with the
    natural no-flux condition; raises IncompatibleSource when the source
    fails the solvability condition beyond tolerance.
    """
    ops = _get_operators(state, coeffs)
    charge = state.c_plus - state.c_minus
    source = coeffs.porosity * charge + coeffs.sigma_bar
    rhs = np.asarray(ops.mass @ source).ravel()
    scale = max(1.0, float(np.abs(rhs).sum()))
    residual = float(rhs.sum())
    if abs(residual) > COMPATIBILITY_TOL * scale:
        raise IncompatibleSource(
            "potential source integrates to %g; net charge is not "
            "balanced" % residual, where="macro.solve_macro_poisson")
    rhs = rhs - residual / ops.weight.sum() * ops.weight
    solution = ops.lu_potential.solve(np.concatenate([rhs, [0.0]]))
    return solution[:-1]


def eval_macro_potential_dirichlet(state, coeffs, regime):
    """Algebraic local closure of the averaged potential.

    The average is dirichlet_mean times the local net charge, shifted by
    porosity times the wall potential in the boundary-dominated case
    alpha = 2.
    """
    charge = state.c_plus - state.c_minus
    phi = coeffs.dirichlet_mean * charge
    if regime.alpha == 2:
        phi = phi + coeffs.porosity * regime.phi_d
    return phi


def solve_macro_darcy(state, coeffs, model, forcing=None):
    """Pressure and seepage velocity for the current potential/charge.

    The pressure solves div(K(grad p + f)) = 0 with f the electrostatic
    forcing (or zero), no-flux, zero mean; the velocity is the elementwise
    flux -K(grad p + f), which satisfies the discrete divergence-free
    property by construction.  A prescribed elementwise forcing replaces
    the electrostatic term when given.
    """
    mesh = state.mesh
    if coeffs.permeability is None:
        return np.zeros(mesh.num_nodes), np.zeros((mesh.num_triangles, 2))
    ops = _get_operators(state, coeffs)
    areas, grads = fem.triangle_data(mesh)
    if forcing is not None:
        forcing = np.asarray(forcing, dtype=float)
    elif model.darcy_forcing == FORCING_ELECTRO:
        charge_e = fem.element_means(mesh, state.c_plus - state.c_minus)
        forcing = charge_e[:, None] * fem.p1_element_gradients(
            mesh, state.phi)
    else:
        forcing = np.zeros((mesh.num_triangles, 2))
    kf = forcing @ np.asarray(coeffs.permeability).T
    rhs = np.zeros(mesh.num_nodes)
    contrib = -np.einsum("md,mid->mi", kf, grads) * areas[:, None]
    np.add.at(rhs, mesh.triangles.ravel(), contrib.ravel())
    imbalance = abs(float(rhs.sum()))
    if imbalance > 1e-10 * max(1.0, float(np.abs(rhs).sum())):
        raise IncompatibleSource(
            "divergence-form flow source integrates to %g" % imbalance,
            where="macro.solve_macro_darcy")
    pressure = ops.lu_darcy.solve(np.concatenate([rhs, [0.0]]))[:-1]
    velocity = -(fem.p1_element_gradients(mesh, pressure) + forcing) \
        @ np.asarray(coeffs.permeability).T
    return pressure, velocity


def _np_operators(mesh, coeffs, model, velocity, phi, stiff_d):
    ops = []
    for sign in (1.0, -1.0):
        drift = phi if model.np_drift == DRIFT_ON else None
        conv = fem.assemble_convection(
            mesh, velocity=velocity, drift=drift,
            drift_tensor=coeffs.diffusion, drift_sign=sign)
        ops.append(stiff_d - conv)
    return ops


def step_macro_np(state, coeffs, model, dt):
    """One implicit transport-reaction step for both species.

    The convection and drift operators are built from the current
    velocity and potential (semi-implicit linearization) and applied
    implicitly; the reaction pair is advanced in the same block solve, so
    total mass is conserved and the total charge decays by the exact
    factor 1/(1 + 2 dt).
    """
    ops = _get_operators(state, coeffs)
    op_plus, op_minus = _np_operators(
        state.mesh, coeffs, model, state.velocity, state.phi, ops.stiff_d)
    scaled_mass = coeffs.porosity * ops.lumped
    c_plus, c_minus = fem.step_reacting_pair(
        scaled_mass, op_plus, op_minus, state.c_plus, state.c_minus, dt)
    low = min(float(np.min(c_plus)), float(np.min(c_minus)))
    if low < -1e-8:
        warnings.warn(NegativeConcentration(
            "concentration dipped to %g; the time step is too large "
            "for this mesh" % low))
    return c_plus, c_minus


def _update_fields(state, coeffs, regime, model):
    if model.potential_model == POTENTIAL_ELLIPTIC:
        state.phi = solve_macro_poisson(state, coeffs)
    else:
        state.phi = eval_macro_potential_dirichlet(state, coeffs, regime)
    state.pressure, state.velocity = solve_macro_darcy(state, coeffs, model)


def make_neutral(mesh, c_plus, c_minus):
    """Shift both species so the discrete net charge vanishes exactly.

    Half the charge excess is moved from one species to the other, which
    keeps the total content and makes the zero charge an exact discrete
    invariant of the reacting step.
    """
    mass = fem.assemble_mass(mesh)
    weight = np.asarray(mass @ np.ones(mesh.num_nodes)).ravel()
    excess = float(weight @ (c_plus - c_minus)) / weight.sum()
    log.debug("neutralizing initial charge excess %.3e", excess)
    return c_plus - excess / 2.0, c_minus + excess / 2.0


def run_macro(problem):
    """Advance the macroscopic system to t_end.

    Per step the potential, the velocity, and the transport are updated
    in sequence; when the regime couples them (electrostatic forcing or
    drift), the sweep is iterated to a fixed point of the new
    concentrations.  Returns (states, diagnostics) where diagnostics is
    one dict per step with keys t, mass, charge, min_c, max_c, fp_iters.
    """
    problem.validate()
    model = classify_regime(problem.regime)
    mesh = problem.mesh
    coeffs = problem.coeffs
    ops = _Operators(mesh, coeffs)
    mesh._caches["macro_ops"] = ops
    lumped = ops.lumped.diagonal()
    coupled = (model.darcy_forcing == FORCING_ELECTRO
               or model.np_drift == DRIFT_ON)

    state = MacroState(
        mesh=mesh, t=0.0,
        c_plus=np.asarray(problem.c_plus, dtype=float).copy(),
        c_minus=np.asarray(problem.c_minus, dtype=float).copy(),
        phi=np.zeros(mesh.num_nodes),
        pressure=np.zeros(mesh.num_nodes),
        velocity=np.zeros((mesh.num_triangles, 2)))
    _update_fields(state, coeffs, problem.regime, model)

    def diag_row(fp_iters):
        total = coeffs.porosity * float(
            lumped @ (state.c_plus + state.c_minus))
        charge = coeffs.porosity * float(
            lumped @ (state.c_plus - state.c_minus))
        return {
            "t": state.t,
            "mass": total,
            "charge": charge,
            "min_c": min(float(np.min(state.c_plus)),
                         float(np.min(state.c_minus))),
            "max_c": max(float(np.max(state.c_plus)),
                         float(np.max(state.c_minus))),
            "fp_iters": fp_iters,
        }

    def snapshot():
        return MacroState(mesh, state.t, state.c_plus.copy(),
                          state.c_minus.copy(), state.phi.copy(),
                          state.pressure.copy(), state.velocity.copy())

    states = [snapshot()]
    diagnostics = [diag_row(0)]
    num_steps = int(round(problem.t_end / problem.dt))
    if abs(num_steps * problem.dt - problem.t_end) > 1e-9 * problem.t_end:
        num_steps = int(np.ceil(problem.t_end / problem.dt - 1e-12))

    for step in range(1, num_steps + 1):
        c_plus_old = state.c_plus
        c_minus_old = state.c_minus
        previous = None
        iterations = 0
        while True:
            iterations += 1
            _update_fields(state, coeffs, problem.regime, model)
            base = MacroState(mesh, state.t, c_plus_old, c_minus_old,
                              state.phi, state.pressure, state.velocity)
            candidate = step_macro_np(base, coeffs, model, problem.dt)
            if not coupled:
                break
            if previous is not None:
                gap = max(
                    float(np.max(np.abs(candidate[0] - previous[0]))),
                    float(np.max(np.abs(candidate[1] - previous[1]))))
                scale = max(1.0, float(np.max(np.abs(candidate[0]))),
                            float(np.max(np.abs(candidate[1]))))
                if gap <= FIXED_POINT_TOL * scale:
                    break
            if iterations >= FIXED_POINT_MAX_ITER:
                raise FixedPointDivergence(
                    "inner iteration did not settle within %d sweeps at "
                    "t=%g" % (FIXED_POINT_MAX_ITER, state.t),
                    where="macro.run_macro")
            previous = candidate
            state.c_plus, state.c_minus = candidate
        state.c_plus, state.c_minus = candidate
        state.t = step * problem.dt
        _update_fields(state, coeffs, problem.regime, model)
        diagnostics.append(diag_row(iterations))
        if step == num_steps or (problem.snapshot_stride
                                 and step % problem.snapshot_stride == 0):
            states.append(snapshot())
    log.info("macro run finished: %d steps, final charge %.3e",
             num_steps, diagnostics[-1]["charge"])
    return states, diagnostics
