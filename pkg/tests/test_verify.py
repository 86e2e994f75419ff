"""Invariant suite and scale-convergence harness behavior."""

import numpy as np
import pytest

from snpp import fem, macro, micro, verify
from snpp.cell import (
    EffectiveCoefficients,
    compute_effective_coefficients,
    corrector_node_values,
)
from snpp.errors import (
    GridMisaligned,
    InadmissibleScaling,
    MalformedDiagnostics,
    NegativeConcentration,
    ValidationError,
)
from snpp.mesh import (
    DiskInclusion,
    PerforatedDomain,
    UnitCellGeometry,
    generate_perforated_mesh,
    generate_unit_cell_mesh,
)

DISK_CELL = UnitCellGeometry(DiskInclusion((0.5, 0.5), 0.25), 0.125)
PLAIN_CELL = UnitCellGeometry(None, 0.125)


def blob_plus(x, y):
    return 0.2 + 0.5 * np.exp(-25 * ((x - 0.35) ** 2 + (y - 0.45) ** 2))


def blob_minus(x, y):
    return 0.2 + 0.5 * np.exp(-25 * ((x - 0.7) ** 2 + (y - 0.6) ** 2))


def identity_coeffs(porosity=1.0, sigma_bar=0.0, k=0.02, m=0.05):
    return EffectiveCoefficients(
        porosity=porosity, diffusion=porosity * np.eye(2),
        permeability=None if k is None else k * np.eye(2),
        sigma_bar=sigma_bar, dirichlet_mean=m)


def coupled_macro_run(h=1 / 16, t_end=0.02, dt=5e-3):
    mesh = generate_unit_cell_mesh(UnitCellGeometry(None, h))
    regime = macro.ScalingRegime("neumann", 0, 0, 0)
    x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
    cp, cm = macro.make_neutral(mesh, blob_plus(x, y), blob_minus(x, y))
    problem = macro.MacroProblem(mesh, identity_coeffs(porosity=0.8), regime,
                                 cp, cm, t_end=t_end, dt=dt)
    states, diagnostics = macro.run_macro(problem)
    return states, diagnostics, regime


def test_invariant_suite_passes_on_coupled_macro_run():
    states, diagnostics, regime = coupled_macro_run()
    report = verify.run_invariant_suite(states, diagnostics, regime)
    assert report.passed
    assert report.failures() == []
    names = [check.name for check in report.checks]
    assert names == ["mass_conservation", "min_concentration",
                     "max_concentration", "potential_zero_mean",
                     "pressure_zero_mean", "velocity_divergence_free"]


def test_invariant_suite_passes_on_pore_scale_run():
    regime = macro.ScalingRegime("dirichlet", 2, 1, 1, phi_d=0.3)
    problem = micro.MicroProblem(
        PerforatedDomain(0.5, DISK_CELL), regime,
        blob_plus, blob_minus, t_end=0.01, dt=5e-3, target_h=1 / 16)
    states, diagnostics = micro.run_micro(problem)
    report = verify.run_invariant_suite(states, diagnostics, regime)
    assert report.passed
    names = [check.name for check in report.checks]
    assert "potential_zero_mean" not in names
    assert "velocity_divergence_free" in names


def test_invariant_suite_flags_convective_undershoot():
    # A sharp front pushed by a strong prescribed velocity undershoots
    # zero; the suite must record the failure instead of raising.
    h = 1 / 16
    mesh = generate_unit_cell_mesh(UnitCellGeometry(None, h))
    x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
    blob = np.exp(-200 * ((x - 0.3) ** 2 + (y - 0.5) ** 2))
    coeffs = identity_coeffs()
    coeffs.diffusion = 0.01 * np.eye(2)
    model = macro.MacroModelClass(macro.POTENTIAL_ELLIPTIC,
                                  macro.FORCING_PLAIN, macro.DRIFT_OFF)
    state = macro.MacroState(
        mesh=mesh, t=0.0, c_plus=blob.copy(), c_minus=np.zeros_like(blob),
        phi=np.zeros(mesh.num_nodes), pressure=np.zeros(mesh.num_nodes),
        velocity=np.tile([8.0, 0.0], (mesh.num_triangles, 1)))
    lumped = fem.assemble_mass(mesh, lumped=True).diagonal()

    def diag_row(c_plus, c_minus, t):
        return {"t": t,
                "mass": float(lumped @ (c_plus + c_minus)),
                "charge": float(lumped @ (c_plus - c_minus)),
                "min_c": min(float(c_plus.min()), float(c_minus.min())),
                "max_c": max(float(c_plus.max()), float(c_minus.max())),
                "fp_iters": 1}

    dt = 10 * h ** 2
    diagnostics = [diag_row(state.c_plus, state.c_minus, 0.0)]
    with pytest.warns(NegativeConcentration):
        state.c_plus, state.c_minus = macro.step_macro_np(
            state, coeffs, model, dt)
    state.t = dt
    diagnostics.append(diag_row(state.c_plus, state.c_minus, dt))
    assert diagnostics[-1]["min_c"] < -1e-3

    report = verify.run_invariant_suite([state], diagnostics,
                                        macro.ScalingRegime("neumann", 0, 1, 1))
    assert not report.passed
    failed = [check.name for check in report.failures()]
    assert "min_concentration" in failed
    assert "mass_conservation" not in failed


def test_invariant_suite_is_deterministic():
    states, diagnostics, regime = coupled_macro_run(t_end=0.01)
    first = verify.run_invariant_suite(states, diagnostics, regime)
    second = verify.run_invariant_suite(states, diagnostics, regime)
    assert first.checks == second.checks


def test_invariant_suite_runs_on_bare_diagnostics():
    _, diagnostics, _ = coupled_macro_run(t_end=0.01)
    report = verify.run_invariant_suite(None, diagnostics)
    assert report.passed
    names = [check.name for check in report.checks]
    assert names == ["mass_conservation", "min_concentration",
                     "max_concentration"]


def test_invariant_suite_rejects_malformed_input():
    states, diagnostics, regime = coupled_macro_run(t_end=0.01)
    with pytest.raises(MalformedDiagnostics):
        verify.run_invariant_suite(states, [], regime)
    with pytest.raises(MalformedDiagnostics):
        verify.run_invariant_suite(states, [{"t": 0.0, "mass": 1.0}], regime)
    broken = [dict(row) for row in diagnostics]
    broken[-1]["mass"] = np.nan
    with pytest.raises(MalformedDiagnostics):
        verify.run_invariant_suite(states, broken, regime)
    with pytest.raises(MalformedDiagnostics):
        verify.run_invariant_suite([], diagnostics, regime)


def test_cell_average_of_smooth_fields_matches_midpoints():
    mesh = generate_unit_cell_mesh(UnitCellGeometry(None, 1 / 32))
    x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
    ones = verify._macro_cell_average(mesh, np.ones_like(x), 0.25, 1 / 32)
    assert ones.shape == (4, 4)
    assert np.max(np.abs(ones - 1.0)) <= 1e-12
    # The full-cell mean of a linear field is its value at the cell
    # center, and the first grid index runs along y.
    centers = np.array([0.125, 0.375, 0.625, 0.875])
    gx = verify._macro_cell_average(mesh, x, 0.25, 1 / 32)
    gy = verify._macro_cell_average(mesh, y, 0.25, 1 / 32)
    assert np.max(np.abs(gx - centers[None, :])) <= 1e-12
    assert np.max(np.abs(gy - centers[:, None])) <= 1e-12
    both = verify._macro_cell_average(mesh, np.stack([x, y], axis=1),
                                      0.25, 1 / 32)
    assert both.shape == (4, 4, 2)
    assert np.max(np.abs(both[:, :, 0] - gx)) <= 1e-14
    with pytest.raises(GridMisaligned):
        verify._macro_cell_average(mesh, x, 0.125, 1 / 20)


def test_corrector_subtraction_cancels_synthetic_expansion():
    # Build a pore field that is exactly the first-order two-scale
    # expansion of a linear coarse field; subtracting the corrector term
    # must cancel it to rounding while the plain error stays finite.
    eps = 0.25
    mesh = generate_perforated_mesh(PerforatedDomain(eps, DISK_CELL),
                                    eps / 8.0)
    _, solutions = compute_effective_coefficients(DISK_CELL,
                                                  mesh=mesh.cell_mesh)
    macro_mesh = generate_unit_cell_mesh(UnitCellGeometry(None, 1 / 32))
    g = np.array([0.7, -0.4])
    macro_phi = macro_mesh.nodes @ g
    corrector = corrector_node_values(mesh, solutions["scalar"])
    micro_phi = mesh.nodes @ g + eps * (corrector @ g)

    plain, enhanced = verify.corrector_enhanced_error(
        mesh, micro_phi, macro_mesh, macro_phi, solutions["scalar"],
        eps, alpha=0)
    expected_plain = eps * fem.l2_norm(mesh, corrector @ g)
    assert expected_plain > 1e-4
    assert abs(plain - expected_plain) <= 1e-12
    assert enhanced <= 1e-12


def test_corrector_is_inert_without_inclusion():
    eps = 0.5
    mesh = generate_perforated_mesh(PerforatedDomain(eps, PLAIN_CELL),
                                    eps / 8.0)
    _, solutions = compute_effective_coefficients(PLAIN_CELL,
                                                  mesh=mesh.cell_mesh)
    macro_mesh = generate_unit_cell_mesh(UnitCellGeometry(None, 1 / 32))
    g = np.array([0.3, 0.9])
    macro_phi = macro_mesh.nodes @ g
    micro_phi = mesh.nodes @ g + 0.01 * np.sin(np.pi * mesh.nodes[:, 0])
    plain, enhanced = verify.corrector_enhanced_error(
        mesh, micro_phi, macro_mesh, macro_phi, solutions["scalar"],
        eps, alpha=0)
    assert plain > 1e-4
    assert abs(enhanced - plain) <= 1e-12


def test_zero_charge_study_matches_upscaled_fields():
    def shared(x, y):
        return 0.4 + 0.2 * np.exp(-10 * ((x - 0.5) ** 2 + (y - 0.5) ** 2))

    study = verify.run_convergence_study(
        macro.ScalingRegime("neumann", 0, 0, 0), DISK_CELL, shared, shared,
        eps_list=(0.5, 0.25), t_end=0.02, dt=5e-3, macro_h=1 / 32)
    # With no charge the potential and the flow vanish on both scales, so
    # those errors sit at rounding level.  The concentration errors only
    # reflect the fluid-part versus full-cell averaging mismatch of the
    # shared smooth data, which is small but not monotone in general.
    assert all(err <= 1e-8 for err in study.errors["phi"])
    assert all(err <= 1e-8 for err in study.errors["v"])
    assert all(err <= 2e-2 for err in study.errors["c_plus"])
    assert all(err <= 2e-2 for err in study.errors["c_minus"])


def test_charged_study_decays_and_corrector_improves():
    regime = macro.ScalingRegime("neumann", 0, 0, 0)
    study = verify.run_convergence_study(
        regime, DISK_CELL, blob_plus, blob_minus,
        eps_list=(0.5, 0.25), t_end=0.02, dt=5e-3, macro_h=1 / 32)
    assert study.flags == []
    assert study.monotone
    assert study.h_list == [0.5 / 8.0, 0.25 / 8.0]
    for name in verify.STUDY_FIELDS:
        values = study.errors[name]
        assert values[1] < values[0]
        assert np.isnan(study.orders[name][0])
        assert study.orders[name][1] > 0.0
    for plain, enhanced in zip(study.corrector_plain,
                               study.corrector_enhanced):
        assert enhanced < plain
    report = verify.run_invariant_suite([study.macro_final],
                                        study.macro_diagnostics, regime)
    assert report.passed
    for eps in (0.5, 0.25):
        report = verify.run_invariant_suite(
            [study.micro_finals[eps]], study.micro_diagnostics[eps], regime)
        assert report.passed


def test_study_rejects_inadmissible_regime_before_running():
    with pytest.raises(InadmissibleScaling):
        verify.run_convergence_study(
            macro.ScalingRegime("neumann", 0, -1, 0), DISK_CELL,
            blob_plus, blob_minus)


def test_study_validates_scales_and_macro_mesh():
    regime = macro.ScalingRegime("neumann", 0, 0, 0)
    with pytest.raises(ValidationError):
        verify.run_convergence_study(regime, DISK_CELL, blob_plus,
                                     blob_minus, eps_list=(0.25, 0.5))
    with pytest.raises(ValidationError):
        verify.run_convergence_study(regime, DISK_CELL, blob_plus,
                                     blob_minus, eps_list=(0.3,))
    with pytest.raises(GridMisaligned):
        verify.run_convergence_study(regime, DISK_CELL, blob_plus,
                                     blob_minus, eps_list=(0.5,),
                                     macro_h=0.15)


def test_study_validate_rejects_bad_records():
    regime = macro.ScalingRegime("neumann", 0, 0, 0)

    def build(eps_list, errors):
        return verify.ConvergenceStudy(
            regime=regime, geometry=DISK_CELL, eps_list=eps_list,
            h_list=[eps / 8 for eps in eps_list], macro_h=1 / 64,
            t_end=0.1, dt=2e-3, coeffs=None, errors=errors, orders={},
            corrector_plain=[], corrector_enhanced=[], flags=[],
            monotone=True)

    with pytest.raises(ValidationError):
        build([0.25, 0.5], {"c_plus": [0.1, 0.2]}).validate()
    with pytest.raises(ValidationError):
        build([0.5, 0.25], {"c_plus": [0.1, np.nan]}).validate()
