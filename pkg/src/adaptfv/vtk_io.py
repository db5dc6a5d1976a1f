"""Legacy ASCII VTK export of meshes, fluxes, and potentials.

Polygonal meshes are emitted through their fan subtriangles with a
``parent_cell`` integer array, so any VTK reader can consume them.
"""

from __future__ import annotations

import numpy as np

from .mesh import PolytopalMesh, SimplicialMesh


def _fmt(v):
    return f"{v:.17g}"


def write_vtk(path, mesh, *, cell_potential=None, flux_fields=None,
              point_potential=None, cell_estimator=None, title="adaptfv"):
    """Write an UNSTRUCTURED_GRID legacy VTK file.

    ``flux_fields`` is a list of per-(sub)triangle RT0 fields (one per
    cell for polytopal meshes, a single RT0Field for simplicial ones);
    the flux is sampled at triangle centroids and stored as CELL_DATA
    vectors plus magnitudes.  ``point_potential`` holds one value per
    mesh vertex.
    """
    simplicial = isinstance(mesh, SimplicialMesh)
    if simplicial:
        points = mesh.vertices
        tris = [tuple(c) for c in mesh.cells]
        parents = list(range(mesh.n_cells))
    else:
        pts = [mesh.vertices]
        tris, parents = [], []
        nid = mesh.n_vertices
        for k in range(mesh.n_cells):
            sub = mesh.submeshes[k]
            loop = mesh.loops[k]
            if sub.has_center:
                center_id = nid
                pts.append(sub.points[-1][None])
                nid += 1
            for t in sub.tris:
                idx = [center_id if (sub.has_center and i == len(loop))
                       else int(loop[i]) for i in t]
                tris.append(tuple(idx))
                parents.append(k)
        points = np.vstack(pts)

    lines = ["# vtk DataFile Version 3.0", title, "ASCII",
             "DATASET UNSTRUCTURED_GRID",
             f"POINTS {len(points)} double"]
    for p in points:
        lines.append(f"{_fmt(p[0])} {_fmt(p[1])} 0")
    lines.append(f"CELLS {len(tris)} {4 * len(tris)}")
    for t in tris:
        lines.append("3 " + " ".join(str(i) for i in t))
    lines.append(f"CELL_TYPES {len(tris)}")
    lines.extend(["5"] * len(tris))

    cell_arrays = []
    if not simplicial or cell_potential is not None or flux_fields is not None \
            or cell_estimator is not None:
        lines.append(f"CELL_DATA {len(tris)}")
    if not simplicial:
        cell_arrays.append(("parent_cell", "int", [str(p) for p in parents]))
        lines.append("SCALARS parent_cell int")
        lines.append("LOOKUP_TABLE default")
        lines.extend(str(p) for p in parents)
    if cell_potential is not None:
        vals = [cell_potential[p] for p in parents]
        lines.append("SCALARS potential double")
        lines.append("LOOKUP_TABLE default")
        lines.extend(_fmt(v) for v in vals)
    if cell_estimator is not None:
        vals = [cell_estimator[p] for p in parents]
        lines.append("SCALARS estimator double")
        lines.append("LOOKUP_TABLE default")
        lines.extend(_fmt(v) for v in vals)
    if flux_fields is not None:
        vec = _sample_fluxes(mesh, flux_fields, simplicial)
        lines.append("SCALARS flux_magnitude double")
        lines.append("LOOKUP_TABLE default")
        lines.extend(_fmt(np.hypot(v[0], v[1])) for v in vec)
        lines.append("VECTORS flux double")
        lines.extend(f"{_fmt(v[0])} {_fmt(v[1])} 0" for v in vec)

    if point_potential is not None:
        lines.append(f"POINT_DATA {len(points)}")
        lines.append("SCALARS potential double")
        lines.append("LOOKUP_TABLE default")
        vals = list(point_potential)
        vals += [0.0] * (len(points) - len(vals))
        lines.extend(_fmt(v) for v in vals)

    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _sample_fluxes(mesh, flux_fields, simplicial):
    out = []
    if simplicial:
        field = flux_fields
        cents = field.tris.mean(axis=1)
        for k in range(len(field.c)):
            out.append(field.eval_piece(k, cents[k][None])[0])
    else:
        for k in range(mesh.n_cells):
            field = flux_fields[k]
            cents = field.tris.mean(axis=1)
            for t in range(len(field.c)):
                out.append(field.eval_piece(t, cents[t][None])[0])
    return out
