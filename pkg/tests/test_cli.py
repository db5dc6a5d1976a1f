import os
import subprocess
import sys

import numpy as np
import pytest

from adaptfv import cli
from adaptfv.mesh import read_mesh2d, triangle_grid, write_mesh2d


def run_cli(args):
    return cli.main(args)


class TestStudy:
    def test_rows_and_effectivity(self, tmp_path, capsys):
        code = run_cli(["study", "--problem", "peak", "--mesh", "tri:4",
                        "--levels", "3", "--scheme", "tpfa",
                        "--estimator", "p2", "--output", str(tmp_path)])
        assert code == 0
        lines = (tmp_path / "study.csv").read_text().strip().splitlines()
        assert len(lines) == 4  # header + 3 rows
        for ln in lines[1:]:
            i_eff = float(ln.split(",")[-1])
            assert i_eff >= 1.0 - 1e-8

    def test_deterministic_rerun(self, tmp_path):
        args = ["study", "--problem", "lshape_linear", "--mesh", "lshape-tri:4",
                "--levels", "2", "--estimator", "p2"]
        run_cli(args + ["--output", str(tmp_path / "a")])
        run_cli(args + ["--output", str(tmp_path / "b")])
        a = (tmp_path / "a" / "study.csv").read_bytes()
        b = (tmp_path / "b" / "study.csv").read_bytes()
        assert a == b


class TestSolve:
    def test_vtk_and_mesh_outputs(self, tmp_path):
        code = run_cli(["solve", "--problem", "peak", "--mesh", "rect:4",
                        "--scheme", "hmfe", "--estimator", "matrix",
                        "--vtk", "--output", str(tmp_path)])
        assert code == 0
        vtk = (tmp_path / "solution.vtk").read_text()
        assert vtk.startswith("# vtk DataFile Version 3.0")
        assert "DATASET UNSTRUCTURED_GRID" in vtk
        assert "CELL_DATA" in vtk and "POINT_DATA" in vtk
        assert "flux_magnitude" in vtk
        m = read_mesh2d((tmp_path / "mesh.m2d").read_text())
        assert m.n_cells == 16

    def test_mesh_file_input(self, tmp_path):
        mesh_path = tmp_path / "m.m2d"
        mesh_path.write_text(write_mesh2d(triangle_grid(3)))
        code = run_cli(["solve", "--problem", "peak",
                        "--mesh", str(mesh_path), "--estimator", "p2",
                        "--output", str(tmp_path / "out")])
        assert code == 0

    def test_nonlinear_solve(self, tmp_path):
        code = run_cli(["solve", "--problem", "smooth_nonlinear",
                        "--mesh", "rect:4", "--nl-C", "50",
                        "--output", str(tmp_path)])
        assert code == 0


class TestAdapt:
    def test_adaptive_run(self, tmp_path):
        code = run_cli(["adapt", "--problem", "lshape_linear",
                        "--mesh", "lshape-rect:4", "--scheme", "hmfe",
                        "--estimator", "matrix", "--levels", "3",
                        "--delta-ref", "0.7", "--output", str(tmp_path)])
        assert code == 0
        lines = (tmp_path / "adapt.csv").read_text().strip().splitlines()
        assert len(lines) == 4
        cells = [int(ln.split(",")[2]) for ln in lines[1:]]
        # marked fraction below one after the first level: growth factor
        # stays well below uniform quadrisection
        assert cells[1] < 4 * cells[0]
        assert cells[2] < 4 * cells[1]
        assert (tmp_path / "mesh_level2.m2d").exists()


class TestConfigAndErrors:
    def test_config_file(self, tmp_path):
        cfgf = tmp_path / "run.cfg"
        cfgf.write_text("problem = lshape_linear\nmesh = lshape-tri:4\n"
                        "estimator = p2\n")
        code = run_cli(["study", "--levels", "1", "--config", str(cfgf),
                        "--output", str(tmp_path)])
        assert code == 0
        row = (tmp_path / "study.csv").read_text().splitlines()[1]
        assert int(row.split(",")[2]) == 104  # lshape-tri:4 cell count

    def test_flags_beat_config(self, tmp_path):
        cfgf = tmp_path / "run.cfg"
        cfgf.write_text("mesh = tri:8\n")
        code = run_cli(["study", "--problem", "peak", "--mesh", "tri:2",
                        "--levels", "1", "--estimator", "p2",
                        "--config", str(cfgf), "--output", str(tmp_path)])
        assert code == 0
        row = (tmp_path / "study.csv").read_text().splitlines()[1]
        assert int(row.split(",")[2]) == 10  # tri:2, not tri:8

    def test_unknown_problem_exit_code(self, tmp_path, capsys):
        code = run_cli(["solve", "--problem", "nope",
                        "--output", str(tmp_path)])
        assert code == 1

    def test_bad_mesh_spec(self, tmp_path):
        code = run_cli(["solve", "--problem", "peak", "--mesh", "hex:3",
                        "--output", str(tmp_path)])
        assert code == 1


class TestVerifyCommand:
    def test_select_fast_criterion(self, capsys):
        code = run_cli(["verify", "--select", "11"])
        out = capsys.readouterr().out
        assert code == 0
        assert "[PASS] 11 scheme oracles" in out


class TestEntryPoint:
    def test_module_invocation(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "adaptfv.cli", "study", "--problem",
             "peak", "--mesh", "tri:2", "--levels", "1", "--estimator", "p2",
             "--output", str(tmp_path)],
            capture_output=True, text=True, cwd="/")
        assert proc.returncode == 0
        assert "level,ndof" in proc.stdout
