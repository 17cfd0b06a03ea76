"""Command-line harness: ``cluster-ba {simulate,solve,nees,bench}``.

Exit codes: 0 success, 1 input error, 2 the solver did not converge.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .ba_problem import assemble
from .errors import ClusterBAError, FormatError, NoConstraintsError, SolverStalled
from .io import RunReport, read_poses, read_scene, write_poses, write_scene
from .simulator import (GENERATOR, PERTURB_PRESETS, PRESETS, add_noise, build_preset,
                        gen_random_planes_scene, perturb_trajectory, scene_to_problem,
                        seeds_for)
from .solver import SolverOptions, Termination, gauge_reduce, solve, solve_damped
from .uncertainty import align_to_first, normalized_nees, pose_covariance, pose_error
from .voxel_assoc import VoxelParams

EXIT_OK, EXIT_INPUT, EXIT_NOCONV = 0, 1, 2
SIGMA_GRID = tuple(round(0.05 * k, 2) for k in range(1, 21))
BENCH_VALUES = (10, 20, 40, 80, 160)


def occupied_cells(points, cell=0.1):
    """Number of distinct closed-low grid cells of edge ``cell`` hit by points."""
    if not cell > 0:
        raise ValueError("cell size must be positive")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return 0
    k = np.floor(pts / cell).astype(np.int64)
    k -= k.min(axis=0)
    return int(len(np.unique(np.ravel_multi_index(k.T, k.max(axis=0) + 1))))


def trajectory_rmse(est_poses, gt_poses):
    """Rotation (rad) and translation (m) RMSE after pinning pose 0 to ground truth."""
    al = align_to_first(est_poses, gt_poses)
    e = np.array([pose_error(a, g) for a, g in zip(al[1:], gt_poses[1:])]).reshape(-1, 6)
    if len(e) == 0:
        return 0.0, 0.0
    rot = float(np.sqrt(np.mean(np.sum(e[:, :3] ** 2, axis=1))))
    trans = float(np.sqrt(np.mean(np.sum(e[:, 3:] ** 2, axis=1))))
    return rot, trans


def resolve_threads(arg):
    if arg is not None:
        return max(1, int(arg))
    env = os.environ.get("CLUSTER_BA_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise SystemExit(f"CLUSTER_BA_THREADS must be an integer, got {env!r}") from None
    return 1


def _voxel_params(args):
    return VoxelParams(root_size=args.voxel_size, max_layer=args.max_layer,
                       min_points=args.min_points, gamma=args.gamma)


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args):
    noisy, init, cfg = build_preset(args.preset, args.seed, sigma_p=args.sigma_p)
    manifest = {"preset": args.preset, "seed": args.seed, "generator": GENERATOR,
                "sigma_p": cfg["sigma_p"], "init": cfg["init"], "version": __version__}
    write_scene(args.out, noisy, init, manifest)
    print(f"wrote {noisy.num_poses} scans ({noisy.num_points} points) to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# solve


def _load_solve_inputs(args):
    if args.scene:
        scene, init, manifest = read_scene(args.scene)
        if args.init:
            init = read_poses(args.init)
        if init is None:
            init = list(scene.gt_poses)
        if len(init) != scene.num_poses:
            raise FormatError(args.init or args.scene, 0, "pose count does not match scan count")
        has_gt = manifest.get("has_gt", True)
        return scene, init, has_gt, {"scene": str(args.scene)}
    noisy, init, cfg = build_preset(args.preset, args.seed, sigma_p=args.sigma_p)
    return noisy, init, True, {"preset": args.preset, "seed": args.seed, "sigma_p": cfg["sigma_p"]}


def run_solve(scene, init, assoc="gt", voxel=None, opts=None, has_gt=True, cell=0.1):
    """Associate, solve and measure.  Returns ``(poses, report, exit_code)``."""
    opts = opts or SolverOptions()
    rep = RunReport()
    t0 = time.perf_counter()
    problem, _ = scene_to_problem(scene, use_gt_association=(assoc == "gt"),
                                  poses=init, voxel_params=voxel)
    rep.metrics["time_cluster_build"] = time.perf_counter() - t0
    rep.metrics["num_features"] = problem.num_features
    code = EXIT_OK
    try:
        poses, sr = solve(problem, init, opts)
    except SolverStalled as exc:
        poses, sr, code = exc.poses, exc.report, EXIT_NOCONV
        rep.metrics["termination"] = "Stalled"
    else:
        rep.metrics["termination"] = sr.termination.value
        if sr.termination != Termination.STEP_TOL:
            code = EXIT_NOCONV
    rep.metrics.update(iterations=sr.iterations, accepted=sr.accepted, rejected=sr.rejected,
                       initial_cost=sr.cost_trace[0] if sr.cost_trace else None,
                       final_cost=sr.final_cost, time_derivatives=sr.time_derivatives,
                       time_linear_solve=sr.time_linear_solve, time_cost=sr.time_cost,
                       eigengap_drops=sr.gap_drops)
    if has_gt:
        r0, t0_ = trajectory_rmse(init, scene.gt_poses)
        r1, t1 = trajectory_rmse(poses, scene.gt_poses)
        rep.metrics.update(rmse_rot_init=r0, rmse_trans_init=t0_, rmse_rot=r1, rmse_trans=t1)
    rep.metrics["occupied_cells_init"] = occupied_cells(scene.world_points(init), cell)
    rep.metrics["occupied_cells_solved"] = occupied_cells(scene.world_points(poses), cell)
    rep.add_table("cost_trace", ["accepted_step", "cost"], list(enumerate(sr.cost_trace)))
    return poses, rep, code


def cmd_solve(args):
    scene, init, has_gt, src = _load_solve_inputs(args)
    opts = SolverOptions(max_iters=args.max_iters, threads=resolve_threads(args.threads))
    voxel = _voxel_params(args)
    poses, rep, code = run_solve(scene, init, args.assoc, voxel, opts, has_gt)
    rep.config.update(src)
    rep.config.update(assoc=args.assoc, voxel_size=voxel.root_size, max_layer=voxel.max_layer,
                      min_points=voxel.min_points, gamma=voxel.gamma, max_iters=opts.max_iters,
                      threads=opts.threads, generator=GENERATOR, version=__version__)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_poses(out / "poses.txt", poses)
    rep.write(out / "report.txt")
    m = rep.metrics
    print(f"{m['termination']}: {m['iterations']} iterations ({m['accepted']} accepted), "
          f"cost {m['initial_cost']:.6g} -> {m['final_cost']:.6g}")
    return code


# ---------------------------------------------------------------------------
# nees


NEES_COLUMNS = ["sigma_p", "runs", "ok_runs", "failed_runs", "mean_nees", "rmse_rot",
                "rmse_trans", "runtime_s"]


def nees_run(preset, seed, sigma_p, opts=None):
    """One Monte Carlo run: ``(normalized_nees, errors (M-1, 6))``."""
    noisy, init, _ = build_preset(preset, seed, sigma_p=sigma_p)
    problem, noises = scene_to_problem(noisy)
    poses, _ = solve(problem, init, opts or SolverOptions())
    al = align_to_first(poses, noisy.gt_poses)
    err = np.array([pose_error(a, g) for a, g in zip(al[1:], noisy.gt_poses[1:])])
    if sigma_p == 0:
        return float("nan"), err
    cov = pose_covariance(problem, al, noises)
    return normalized_nees(al, noisy.gt_poses, cov), err


def nees_sweep(preset, sigmas, runs, seed=0, opts=None):
    rows = []
    for s in sigmas:
        t0 = time.perf_counter()
        vals, errs, failed = [], [], 0
        for r in range(runs):
            try:
                v, e = nees_run(preset, seed + r, s, opts)
            except (ClusterBAError, np.linalg.LinAlgError):
                failed += 1
                continue
            vals.append(v)
            errs.append(e)
        ok = len(errs)
        if ok:
            E = np.concatenate(errs)
            rr = float(np.sqrt(np.mean(np.sum(E[:, :3] ** 2, axis=1))))
            rt = float(np.sqrt(np.mean(np.sum(E[:, 3:] ** 2, axis=1))))
        else:
            rr = rt = float("nan")
        mean = float(np.mean(vals)) if ok and s > 0 else None
        rows.append([s, runs, ok, failed, mean, rr, rt, time.perf_counter() - t0])
    return rows


def _csv_cell(x):
    if x is None:
        return "undefined"
    if isinstance(x, float):
        return "%.17g" % x
    return str(x)


def _write_csv(path, header, rows, comments=()):
    lines = [f"# {c}" for c in comments]
    lines.append(",".join(header))
    lines += [",".join(_csv_cell(x) for x in r) for r in rows]
    text = "\n".join(lines) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def cmd_nees(args):
    if args.runs < 1:
        raise ValueError("--runs must be at least 1")
    opts = SolverOptions(max_iters=args.max_iters, threads=resolve_threads(args.threads))
    sigmas = args.sigmas if args.sigmas else ([args.sigma_p] if args.sigma_p is not None
                                              else list(SIGMA_GRID))
    rows = nees_sweep(args.preset, sigmas, args.runs, args.seed, opts)
    comments = [
        f"preset={args.preset} runs={args.runs} seed={args.seed} generator={GENERATOR}",
        "mean_nees: mean over runs of e^T Sigma^-1 e / (6 (M_p - 1)); 'undefined' when sigma_p = 0",
        "rmse_rot [rad], rmse_trans [m]: over poses 2..M_p of all runs after pinning pose 1",
        "failed_runs: runs whose solve or covariance raised an error",
    ]
    out = Path(args.out) / "nees.csv" if args.out else None
    _write_csv(out, NEES_COLUMNS, rows, comments)
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


BENCH_COLUMNS = ["axis", "value", "M_f", "M_p", "N", "iterations", "accepted",
                 "t_cluster_build", "t_derivatives", "t_linear_solve", "t_deriv_plus_solve",
                 "t_solve_total", "rmse_rot", "rmse_trans"]


def _prepare_point(M_f, M_p, N, seed, sigma_p, opts):
    """Build and solve one scene; returns the row metrics and the timing kernels."""
    s_scene, s_noise, s_init = seeds_for(seed)
    scene = add_noise(gen_random_planes_scene(M_f, M_p, N, s_scene), sigma_p, s_noise)
    init = perturb_trajectory(scene.gt_poses, *PERTURB_PRESETS["paper-init"], s_init)
    t0 = time.perf_counter()
    problem, _ = scene_to_problem(scene)
    t_build = time.perf_counter() - t0
    t0 = time.perf_counter()
    poses, sr = solve(problem, init, opts)
    t_total = time.perf_counter() - t0
    bundle = assemble(problem, poses, threads=opts.threads)
    Jr, Hr = gauge_reduce(bundle.J, bundle.H)
    rr, rt = trajectory_rmse(poses, scene.gt_poses)
    row = {"M_f": M_f, "M_p": M_p, "N": N, "iterations": sr.iterations,
           "accepted": sr.accepted, "t_cluster_build": t_build, "t_solve_total": t_total,
           "rmse_rot": rr, "rmse_trans": rt}
    kernels = (lambda: assemble(problem, poses, threads=opts.threads),
               lambda: solve_damped(Hr, Jr, opts.mu0))
    return row, kernels


def _interleaved_min_times(kernels, repeats):
    """Fastest of ``repeats`` timings per kernel, timed round-robin so that
    background load spreads over all kernels alike."""
    for fn in kernels:
        fn()  # warm-up
    best = [float("inf")] * len(kernels)
    for _ in range(repeats):
        for i, fn in enumerate(kernels):
            t0 = time.perf_counter()
            fn()
            best[i] = min(best[i], time.perf_counter() - t0)
    return best


def _finish_row(row, t_der, t_lin):
    row.update(t_derivatives=t_der, t_linear_solve=t_lin, t_deriv_plus_solve=t_der + t_lin)
    return row


def bench_point(M_f, M_p, N, seed=0, sigma_p=0.05, repeats=5, opts=None):
    """Accuracy and per-phase timings for one scene size.

    ``t_derivatives`` and ``t_linear_solve`` are the fastest of ``repeats``
    evaluations of one derivative assembly and one damped solve at the
    converged poses.
    """
    row, kernels = _prepare_point(M_f, M_p, N, seed, sigma_p, opts or SolverOptions())
    return _finish_row(row, *_interleaved_min_times(kernels, repeats))


def bench_axis(axis, values, seed=0, sigma_p=0.05, repeats=5, opts=None, nominal=40):
    """Timing rows along one size axis; kernels of all sizes are timed in
    interleaved rounds."""
    if axis not in ("poses", "features", "points"):
        raise ValueError(f"unknown axis {axis!r}")
    if any(v < 1 for v in values):
        raise ValueError("bench values must be positive")
    opts = opts or SolverOptions()
    prepared = []
    for v in values:
        size = {"M_f": nominal, "M_p": nominal, "N": nominal}
        size[{"poses": "M_p", "features": "M_f", "points": "N"}[axis]] = int(v)
        prepared.append(_prepare_point(size["M_f"], size["M_p"], size["N"], seed, sigma_p, opts))
    times = _interleaved_min_times([k for _, ks in prepared for k in ks], repeats)
    rows = []
    for i, (v, (row, _)) in enumerate(zip(values, prepared)):
        r = _finish_row(row, times[2 * i], times[2 * i + 1])
        rows.append([axis, int(v)] + [r[c] for c in BENCH_COLUMNS[2:]])
    return rows


def loglog_slope(x, y):
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def cmd_bench(args):
    opts = SolverOptions(max_iters=args.max_iters, threads=resolve_threads(args.threads))
    sigma = 0.05 if args.sigma_p is None else args.sigma_p
    rows = bench_axis(args.axis, args.values, args.seed, sigma, args.repeats, opts)
    comments = [
        f"axis={args.axis} seed={args.seed} sigma_p={sigma} repeats={args.repeats}",
        "times in seconds; t_derivatives / t_linear_solve: fastest single evaluation "
        "at the solution; t_solve_total: whole solve",
    ]
    out = Path(args.out) / f"bench_{args.axis}.csv" if args.out else None
    _write_csv(out, BENCH_COLUMNS, rows, comments)
    return EXIT_OK


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _common(p, preset="virtual-nominal"):
    p.add_argument("--preset", default=preset, choices=sorted(PRESETS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma-p", type=float, default=None, help="per-point noise [m]")
    p.add_argument("--max-iters", type=int, default=50)
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: $CLUSTER_BA_THREADS or 1)")
    p.add_argument("--out", default=None, help="output directory")


def build_parser():
    ap = _Parser(prog="cluster-ba", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a synthetic scene")
    _common(p)

    p = sub.add_parser("solve", help="optimize poses of a scene")
    _common(p)
    p.add_argument("--scene", default=None, help="scene directory (default: generate --preset)")
    p.add_argument("--init", default=None, help="initial pose file")
    p.add_argument("--assoc", choices=("gt", "voxel"), default="gt")
    p.add_argument("--voxel-size", type=float, default=1.0)
    p.add_argument("--max-layer", type=int, default=3)
    p.add_argument("--min-points", type=int, default=20)
    p.add_argument("--gamma", type=float, default=1.0 / 25.0)

    p = sub.add_parser("nees", help="Monte Carlo consistency sweep")
    _common(p, preset="desk")
    p.add_argument("--runs", type=int, default=30)
    p.add_argument("--sigmas", type=float, nargs="+", default=None)

    p = sub.add_parser("bench", help="timing and accuracy versus problem size")
    _common(p)
    p.add_argument("--axis", choices=("poses", "features", "points"), required=True)
    p.add_argument("--values", type=int, nargs="+", default=list(BENCH_VALUES))
    p.add_argument("--repeats", type=int, default=5)
    return ap


COMMANDS = {"simulate": cmd_simulate, "solve": cmd_solve, "nees": cmd_nees, "bench": cmd_bench}


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command in ("simulate", "solve") and args.out is None:
        print(f"cluster-ba {args.command}: error: --out is required", file=sys.stderr)
        return EXIT_INPUT
    try:
        return COMMANDS[args.command](args)
    except (FormatError, NoConstraintsError, ValueError, KeyError, OSError) as exc:
        print(f"cluster-ba {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SolverStalled as exc:
        print(f"cluster-ba {args.command}: {exc}", file=sys.stderr)
        return EXIT_NOCONV


if __name__ == "__main__":
    sys.exit(main())
