"""Writers and readers for the on-disk run artifacts.

Tables are CSV with a header row and CRLF line endings; fields go out as
legacy ASCII VTK; effective coefficients as a flat key=value file.  All
floating-point values are printed with 17 significant digits so 64-bit
numbers round-trip exactly and a rerun with the same configuration
rewrites byte-identical tables.
"""

import csv
import json

import numpy as np

from . import fem
from .errors import MalformedDiagnostics, ValidationError
from .verify import DIAGNOSTIC_KEYS

FLOAT_FORMAT = "%.17g"
COEFFICIENT_KEYS = ("porosity", "D11", "D12", "D22", "K11", "K12", "K22",
                    "sigma_bar", "dirichlet_mean")
STUDY_COLUMNS = ("eps", "h", "e_c_plus", "e_c_minus", "e_phi", "e_v",
                 "observed_order")


def _fmt(value):
    return FLOAT_FORMAT % float(value)


def coefficient_rows(coeffs):
    """The nine named scalar entries of one coefficient set, in file order.

    Quantities the geometry does not define (permeability and the wall
    closure mean without an inclusion) appear as nan.
    """
    d = np.asarray(coeffs.diffusion, dtype=float)
    k = coeffs.permeability
    k = np.full((2, 2), np.nan) if k is None else np.asarray(k, dtype=float)
    m = np.nan if coeffs.dirichlet_mean is None else coeffs.dirichlet_mean
    values = (coeffs.porosity, d[0, 0], d[0, 1], d[1, 1],
              k[0, 0], k[0, 1], k[1, 1], coeffs.sigma_bar, m)
    return list(zip(COEFFICIENT_KEYS, values))


def write_coefficients(path, coeffs):
    """Write one coefficient set as a flat key=value file."""
    with open(path, "w") as handle:
        for key, value in coefficient_rows(coeffs):
            handle.write("%s=%s\n" % (key, _fmt(value)))


def read_coefficients(path):
    """Read a key=value coefficient file back into a plain dict."""
    out = {}
    with open(path) as handle:
        for line in handle:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, text = line.partition("=")
            out[key] = float(text)
    return out


def write_diagnostics_csv(path, diagnostics):
    """One CSV row per time step with the solver's scalar time series."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(DIAGNOSTIC_KEYS)
        for row in diagnostics:
            writer.writerow(["%d" % row[key] if key == "fp_iters"
                             else _fmt(row[key]) for key in DIAGNOSTIC_KEYS])


def read_diagnostics_csv(path):
    """Read a diagnostics table back into the solver's row-dict form."""
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            raise MalformedDiagnostics("diagnostics file %s is empty" % path)
        rows = []
        for record in reader:
            row = {}
            for key, text in record.items():
                if key is None or text is None:
                    raise MalformedDiagnostics(
                        "ragged row in diagnostics file %s" % path)
                try:
                    row[key] = float(text)
                except ValueError:
                    raise MalformedDiagnostics(
                        "non-numeric entry %r in column %r of %s"
                        % (text, key, path))
            rows.append(row)
    if not rows:
        raise MalformedDiagnostics("diagnostics file %s has no rows" % path)
    return rows


def write_study_csv(path, study):
    """Study table: one row per scale with the per-field errors.

    The observed_order column reports the c_plus decay rate between
    successive scales; the first row has no predecessor and reads nan.
    """
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(STUDY_COLUMNS)
        for i, eps in enumerate(study.eps_list):
            writer.writerow([
                _fmt(eps), _fmt(study.h_list[i]),
                _fmt(study.errors["c_plus"][i]),
                _fmt(study.errors["c_minus"][i]),
                _fmt(study.errors["phi"][i]),
                _fmt(study.errors["v"][i]),
                _fmt(study.orders["c_plus"][i]),
            ])


def _cell_velocity(mesh, velocity):
    if isinstance(velocity, fem.Field):
        return fem.element_means(mesh, velocity)
    velocity = np.asarray(velocity, dtype=float)
    if velocity.shape != (mesh.num_triangles, 2):
        raise ValidationError("velocity shape %s does not match the mesh"
                              % (velocity.shape,), field="velocity")
    return velocity


def write_vtk(path, mesh, state, title="snpp fields"):
    """Write one solution state as a legacy ASCII VTK unstructured grid.

    Concentrations, potential, and pressure go out as point scalars; the
    velocity as a per-triangle cell vector (elementwise means for the
    quadratic flow space).
    """
    points = mesh.nodes
    tris = mesh.triangles
    scalars = (("c_plus", state.c_plus), ("c_minus", state.c_minus),
               ("phi", state.phi), ("pressure", state.pressure))
    velocity = _cell_velocity(mesh, state.velocity)
    with open(path, "w") as handle:
        handle.write("# vtk DataFile Version 3.0\n")
        handle.write("%s t=%s\n" % (title, _fmt(state.t)))
        handle.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        handle.write("POINTS %d double\n" % len(points))
        for x, y in points:
            handle.write("%s %s 0\n" % (_fmt(x), _fmt(y)))
        handle.write("CELLS %d %d\n" % (len(tris), 4 * len(tris)))
        for a, b, c in tris:
            handle.write("3 %d %d %d\n" % (a, b, c))
        handle.write("CELL_TYPES %d\n" % len(tris))
        for _ in range(len(tris)):
            handle.write("5\n")
        handle.write("POINT_DATA %d\n" % len(points))
        for name, values in scalars:
            handle.write("SCALARS %s double 1\nLOOKUP_TABLE default\n" % name)
            for value in np.asarray(values, dtype=float):
                handle.write("%s\n" % _fmt(value))
        handle.write("CELL_DATA %d\n" % len(tris))
        handle.write("VECTORS velocity double\n")
        for vx, vy in velocity:
            handle.write("%s %s 0\n" % (_fmt(vx), _fmt(vy)))


def write_manifest(path, payload):
    """Write the run manifest (config echo, tool version, wall time)."""
    with open(path, "w") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")
