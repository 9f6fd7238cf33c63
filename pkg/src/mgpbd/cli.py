"""Command-line driver, mesh export and the residual power spectrum.

Outputs of ``mgpbd run`` (all CSVs have a header row):

* ``manifest.json``: resolved configuration, argv, seed and source revision.
* ``stats.csv``: frame, iterations_used, final_rel_dual_residual, setup_performed, wall_time.
* ``residuals.csv``: frame, iteration, rel_dual_residual (outer loop, iteration 0 = 1).
* ``pcg_residuals.csv``: frame, outer_iteration, pcg_iteration, rel_residual (global solvers only).
* ``hierarchy.txt``: AMG level report after every setup (``--diagnostics``).
* ``spectrum.csv``: bin, frequency, power, count for the final residual (``--spectrum``, cloth only).
* ``mesh/frame_NNNN.obj``: vertex positions at the end of frame NNNN, with faces (``--export-mesh``).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import subprocess
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .amg_solve import SMOOTHERS
from .constraints import rhs
from .scenes import PRESETS, MeshFormatError, SceneFormatError, load_scene_file, preset
from .sim import SOLVERS, FrameStats, SimConfig, Simulator, SolverAbort, default_amg_config

log = logging.getLogger("mgpbd")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_UNKNOWN_PRESET = 3
EXIT_CONFIG = 4
EXIT_OUTPUT = 5
EXIT_SOLVER = 6


@dataclass
class Spectrum:
    freqs: np.ndarray  # bin centres, cycles per sample
    power: np.ndarray  # mean |FFT|^2 / size per bin, NaN where a bin is empty
    counts: np.ndarray
    dc: float

    def nonzero_bins(self):
        return np.flatnonzero(self.counts > 0)


def grid_residual_fields(residual, N):
    """Split per-constraint values of an N x N cloth into horizontal and vertical edge lattices."""
    residual = np.asarray(residual, dtype=np.float64)
    nh = (N + 1) * N
    if len(residual) < 2 * nh:
        raise ValueError("residual does not cover the grid edges")
    return residual[:nh].reshape(N + 1, N), residual[nh:2 * nh].reshape(N, N + 1)


def residual_spectrum(residual, N, n_bins=None) -> Spectrum:
    """Radially averaged power spectrum of a cloth residual, averaged over both edge families."""
    fields = grid_residual_fields(residual, N)
    n_bins = n_bins or max(N // 2, 1)
    edges = np.linspace(0.0, np.sqrt(0.5), n_bins + 1)
    power = np.zeros(n_bins)
    counts = np.zeros(n_bins)
    dc = 0.0
    for f in fields:
        P = np.abs(np.fft.fft2(f)) ** 2 / f.size
        ky, kx = np.meshgrid(np.fft.fftfreq(f.shape[0]), np.fft.fftfreq(f.shape[1]), indexing="ij")
        r = np.hypot(kx, ky).ravel()
        P = P.ravel()
        dc += P[r == 0].sum() / len(fields)
        nz = r > 0
        idx = np.clip(np.searchsorted(edges, r[nz], side="right") - 1, 0, n_bins - 1)
        power += np.bincount(idx, weights=P[nz], minlength=n_bins)
        counts += np.bincount(idx, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(counts > 0, power / counts, np.nan)
    return Spectrum(0.5 * (edges[1:] + edges[:-1]), mean, counts.astype(np.int64), float(dc))


def write_obj(path, x, faces):
    with open(path, "w") as f:
        for v in x:
            f.write("v " + " ".join(repr(float(c)) for c in v) + "\n")
        for t in faces if faces is not None else ():
            f.write("f " + " ".join(str(int(i) + 1) for i in t) + "\n")


def read_obj(path):
    verts, faces = [], []
    with open(path) as f:
        for line in f:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "v":
                verts.append([float(t) for t in tok[1:4]])
            elif tok[0] == "f":
                faces.append([int(t.split("/")[0]) - 1 for t in tok[1:]])
    return np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64)


def export_mesh_sequence(states, faces, directory):
    """Write one OBJ per position array, named frame_0000.obj, frame_0001.obj, ..."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, x in enumerate(states):
        p = directory / f"frame_{k:04d}.obj"
        write_obj(p, x, faces)
        paths.append(p)
    return paths


def source_revision():
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"mgpbd-{__version__}"


def build_parser():
    p = argparse.ArgumentParser(prog="mgpbd", description="Multigrid-preconditioned global XPBD solver")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a preset or scene file")
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", help=f"one of: {', '.join(sorted(PRESETS))}")
    src.add_argument("--scene", type=Path, help="INI scene file")
    r.add_argument("--solver", choices=SOLVERS)
    r.add_argument("--frames", type=int)
    r.add_argument("--maxiter", type=int)
    r.add_argument("--tol", type=float)
    r.add_argument("--dt", type=float)
    r.add_argument("--stiffness", type=float)
    r.add_argument("--setup-interval", type=int)
    r.add_argument("--omega", type=float, help="position relaxation factor")
    r.add_argument("--seed", type=int)
    r.add_argument("--time-budget", type=float, help="seconds per frame")
    r.add_argument("--smoother", choices=SMOOTHERS)
    r.add_argument("--deterministic", action="store_true",
                   help="ignore time budgets and record zero wall times")
    r.add_argument("--export-mesh", action="store_true")
    r.add_argument("--diagnostics", action="store_true", help="write hierarchy.txt")
    r.add_argument("--spectrum", action="store_true", help="write spectrum.csv (cloth only)")
    r.add_argument("--output-dir", type=Path, default=Path("mgpbd_out"))
    r.add_argument("-v", "--verbose", action="store_true")

    rp = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    rp.add_argument("manifest", type=Path)
    rp.add_argument("--output-dir", type=Path, required=True)

    sub.add_parser("presets", help="list preset scenes")
    return p


def _resolve(args):
    if args.preset is not None:
        scene, overrides = preset(args.preset)
    else:
        scene, overrides = load_scene_file(args.scene)
    if args.stiffness is not None:
        scene.set_stiffness(args.stiffness)
    cli = {"solver": args.solver, "frames": args.frames, "maxiter": args.maxiter, "tol": args.tol,
           "dt": args.dt, "setup_interval": args.setup_interval, "omega_relax": args.omega,
           "seed": args.seed, "time_budget": args.time_budget}
    overrides.update({k: v for k, v in cli.items() if v is not None})
    overrides["deterministic"] = args.deterministic
    amg = default_amg_config(scene.constraints.kind)
    if args.smoother:
        amg.smoother = args.smoother
    amg.seed = overrides.get("seed", 0)
    return scene, SimConfig(amg=amg, **overrides)


def _csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_run(args, argv):
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        scene, cfg = _resolve(args)
    except KeyError as e:
        print(f"error: {e.args[0]}", file=sys.stderr)
        return EXIT_UNKNOWN_PRESET
    except (SceneFormatError, MeshFormatError, ValueError, TypeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.spectrum and scene.grid is None:
        print("error: --spectrum needs a cloth grid scene", file=sys.stderr)
        return EXIT_CONFIG

    out = args.output_dir
    try:
        out.mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise PermissionError(f"{out} is not writable")
        manifest = {
            "program": "mgpbd", "version": __version__, "source_revision": source_revision(),
            "argv": argv, "scene": scene.name, "n_vertices": int(len(scene.x)),
            "n_constraints": int(scene.constraints.m), "constraint_kind": scene.constraints.kind,
            "stiffness": scene.stiffness, "seed": cfg.seed, "config": dataclasses.asdict(cfg),
            "outputs": ["stats.csv", "residuals.csv"]
                       + (["pcg_residuals.csv"] if cfg.solver != "xpbd_jacobi" else [])
                       + (["hierarchy.txt"] if args.diagnostics else [])
                       + (["spectrum.csv"] if args.spectrum else [])
                       + (["mesh/"] if args.export_mesh else []),
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        print(f"error: cannot write to output directory: {e}", file=sys.stderr)
        return EXIT_OUTPUT

    sim = Simulator(scene, cfg)
    frames_x = [] if args.export_mesh else None
    stats, reports = [], []
    try:
        for _ in range(cfg.frames):
            st = sim.step()
            stats.append(st)
            if args.diagnostics and st.setup_performed:
                reports.append(f"# frame {st.frame}\n{sim.cache.hierarchy.report()}")
            if frames_x is not None:
                frames_x.append(sim.state.x.copy())
    except SolverAbort as e:
        print(f"error: solver aborted: {e}", file=sys.stderr)
        status = EXIT_SOLVER
    else:
        status = EXIT_OK

    try:
        _csv(out / "stats.csv", FrameStats.CSV_HEADER, [s.csv_row() for s in stats])
        _csv(out / "residuals.csv", ("frame", "iteration", "rel_dual_residual"),
             [(s.frame, k, repr(float(r))) for s in stats for k, r in enumerate(s.residual_history)])
        if cfg.solver != "xpbd_jacobi":
            _csv(out / "pcg_residuals.csv", ("frame", "outer_iteration", "pcg_iteration", "rel_residual"),
                 [(f, o, k, repr(float(r))) for s in stats for o, rep in enumerate(s.solve_reports)
                  for f, o, k, r in rep.csv_rows(s.frame, o)])
        if args.diagnostics:
            (out / "hierarchy.txt").write_text("".join(reports))
        if args.spectrum and stats:
            spec = residual_spectrum(rhs(sim.cs), scene.grid)
            rows = [("dc", 0.0, repr(spec.dc), 1)]
            rows += [(i, repr(float(f)), repr(float(pw)), int(c))
                     for i, (f, pw, c) in enumerate(zip(spec.freqs, spec.power, spec.counts)) if c > 0]
            _csv(out / "spectrum.csv", ("bin", "frequency", "power", "count"), rows)
        if frames_x is not None:
            export_mesh_sequence(frames_x, scene.faces, out / "mesh")
    except OSError as e:
        print(f"error: writing outputs failed: {e}", file=sys.stderr)
        return EXIT_OUTPUT
    if stats:
        last = stats[-1]
        print(f"{scene.name}: {len(stats)} frames, solver {cfg.solver}, "
              f"last frame {last.iterations_used} iterations, "
              f"rel. dual residual {last.final_rel_dual_residual:.3e} -> {out}")
    return status


def cmd_replay(args):
    try:
        manifest = json.loads(args.manifest.read_text())
        argv = list(manifest["argv"])
    except (OSError, ValueError, KeyError) as e:
        print(f"error: cannot read manifest: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if "--output-dir" in argv:
        i = argv.index("--output-dir")
        del argv[i:i + 2]
    return main(argv + ["--output-dir", str(args.output_dir)])


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    if args.command == "presets":
        for name in sorted(PRESETS):
            print(name)
        return EXIT_OK
    if args.command == "replay":
        return cmd_replay(args)
    return cmd_run(args, argv)


if __name__ == "__main__":
    sys.exit(main())
