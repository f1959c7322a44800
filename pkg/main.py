"""
shapeopt - Main Application
Shape optimization of the inner boundary of an annulus in Stokes flow.

Commands:
    run       optimize one configuration (or an alpha sweep)
    validate  three-way shape-gradient check on the initial mesh
    mesh      write the initial mesh of a case
    converge  manufactured-solution convergence table
"""

import argparse
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent))

from config.settings import CONVERGENCE_MESHES, DEFAULTS, TARGET_RADIUS  # noqa: E402
from src.errors import ConfigError, MeshQualityAbort, ShapeOptError  # noqa: E402
from src.experiment_config import parse_config, parse_sweep  # noqa: E402
from src.mesh import mean_inner_radius, radius_rms_error  # noqa: E402
from src.mesh_loader import save_mesh  # noqa: E402
from src.models import OptConfig  # noqa: E402
from src.optimizer import ShapeProblem, default_perturbations, initial_mesh, optimize  # noqa: E402
from src.report_generator import ReportGenerator  # noqa: E402
from src.shape_calculus import gradient_check, tangential_field  # noqa: E402
from src.stokes_fem import manufactured_convergence  # noqa: E402

logger = logging.getLogger("shapeopt")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_STOPPED = 2
GRADIENT_AGREEMENT = 0.05


def run_experiment(config: OptConfig) -> int:
    """
    Optimize one configuration and write summary.txt next to the run artifacts.

    Returns:
        0 on max_iters/grad_tol/stagnation, 2 on line-search failure or
        quality abort, 1 on configuration or I/O errors
    """
    start = time.perf_counter()
    report = ReportGenerator(config.output_dir, config.emit_vtk)
    try:
        state = optimize(config, report)
    except MeshQualityAbort as e:
        print(f"\n✗ Mesh quality abort: {e}")
        return EXIT_STOPPED
    except (OSError, ShapeOptError) as e:
        print(f"\n❌ Error: {e}")
        return EXIT_ERROR

    summary = {
        'final_cost': float(state.cost),
        'final_mean_inner_radius': mean_inner_radius(state.mesh),
        'radius_rms_error': radius_rms_error(state.mesh, TARGET_RADIUS),
        'iterations': state.k,
        'step_cap': float(config.step_cap),
        'stop_reason': state.stop_reason,
        'total_wall_seconds': time.perf_counter() - start,
    }
    report.write_summary(summary)
    print(ReportGenerator.generate_console_report(state, summary))

    if state.stop_reason == "line_search_failed":
        print("✗ Line search failed")
        return EXIT_STOPPED
    print(f"✓ Results written to {report.output_dir}")
    return EXIT_OK


def _sweep_worker(config_dict: dict) -> int:
    return run_experiment(OptConfig.from_dict(config_dict))


def run_sweep(config: OptConfig, alphas: List[float]) -> int:
    """One independent optimization per alpha, in alpha_<value>/ subdirectories."""
    root = Path(config.output_dir)
    root.mkdir(exist_ok=True)
    logger.info("Sweeping alpha over %s", alphas)
    configs = []
    for alpha in alphas:
        item = config.to_dict()
        item['alpha'] = alpha
        item['output_dir'] = str(root / f"alpha_{alpha:g}")
        configs.append(item)

    with ProcessPoolExecutor(max_workers=len(configs)) as pool:
        codes = list(pool.map(_sweep_worker, configs))

    for alpha, code in zip(alphas, codes):
        mark = "✓" if code == EXIT_OK else "✗"
        print(f"{mark} alpha={alpha:g}: exit {code}")
    return max(codes)


def cmd_run(args) -> int:
    config = parse_config(args.config, _overrides(args))
    if args.sweep:
        return run_sweep(config, parse_sweep(args.sweep))
    return run_experiment(config)


def cmd_validate(args) -> int:
    config = parse_config(args.config, _overrides(args))
    report = ReportGenerator(config.output_dir)
    report.prepare()
    mesh = initial_mesh(config)
    problem = ShapeProblem.manufactured(config.alpha)
    fields = default_perturbations(mesh)
    fields['tangential'] = tangential_field(mesh)
    table = gradient_check(mesh, config.alpha, fields, problem.f, problem.g,
                           problem.y_d, config.fd_step, config.recovery)
    report.write_gradient_check(table)
    print(table.to_string(index=False))

    checked = table[table['field'] != 'tangential']
    worst = float(checked[['boundary_vs_fd', 'distributed_vs_fd',
                           'boundary_vs_distributed']].to_numpy().max())
    if worst <= GRADIENT_AGREEMENT:
        print(f"\n✓ Gradient forms agree (worst relative difference {worst:.3e})")
        return EXIT_OK
    print(f"\n✗ Gradient forms disagree (worst relative difference {worst:.3e})")
    return EXIT_STOPPED


def cmd_mesh(args) -> int:
    config = parse_config(None, {'case': args.case, 'n_theta': args.n_theta, 'n_r': args.n_r})
    mesh = initial_mesh(config)
    save_mesh(mesh, args.out)
    print(f"✓ Wrote {config.case} mesh ({mesh.n_nodes} nodes, {mesh.n_triangles} triangles) "
          f"to {args.out}")
    return EXIT_OK


def cmd_converge(args) -> int:
    config = parse_config(args.config, _overrides(args))
    report = ReportGenerator(config.output_dir)
    report.prepare()
    table = manufactured_convergence(config.alpha, CONVERGENCE_MESHES)
    report.write_convergence(table)
    print(table.to_string(index=False))
    print(f"\n✓ Convergence table written to {report.output_dir}")
    return EXIT_OK


def _overrides(args) -> dict:
    return {
        'case': getattr(args, 'case', None),
        'alpha': getattr(args, 'alpha', None),
        'n_theta': getattr(args, 'n_theta', None),
        'n_r': getattr(args, 'n_r', None),
        'max_iters': getattr(args, 'max_iters', None),
        'step_cap': getattr(args, 'step_cap', None),
        'descent': getattr(args, 'descent', None),
        'output_dir': getattr(args, 'output_dir', None),
        'emit_vtk': getattr(args, 'emit_vtk', None),
        'fd_check': True if getattr(args, 'fd_check', False) else None,
    }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shapeopt", description="Stokes shape optimization of an annular domain.")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    def add_common(sub):
        sub.add_argument("--config", help="key = value configuration file")
        sub.add_argument("--case", help="circle_04, ellipse, target or file:<path>")
        sub.add_argument("--alpha", type=float)
        sub.add_argument("--n-theta", type=int)
        sub.add_argument("--n-r", type=int)
        sub.add_argument("--output-dir")

    run = commands.add_parser("run", help="run the shape optimization")
    add_common(run)
    run.add_argument("--max-iters", type=int)
    run.add_argument("--step-cap", type=float)
    run.add_argument("--descent", help="h1 or raw_normal")
    run.add_argument("--fd-check", action="store_true",
                     help="three-way gradient check before iterating")
    run.add_argument("--emit-vtk", dest="emit_vtk", action="store_true", default=None)
    run.add_argument("--no-vtk", dest="emit_vtk", action="store_false", default=None)
    run.add_argument("--sweep", help="alpha=LIST, e.g. alpha=1,0.1,0.01,0.001")
    run.set_defaults(handler=cmd_run)

    validate = commands.add_parser("validate", help="three-way gradient check only")
    add_common(validate)
    validate.set_defaults(handler=cmd_validate)

    mesh = commands.add_parser("mesh", help="write the initial mesh of a case")
    mesh.add_argument("--case", default=DEFAULTS['case'])
    mesh.add_argument("--n-theta", type=int)
    mesh.add_argument("--n-r", type=int)
    mesh.add_argument("--out", required=True)
    mesh.set_defaults(handler=cmd_mesh)

    converge = commands.add_parser("converge", help="manufactured-solution convergence table")
    add_common(converge)
    converge.set_defaults(handler=cmd_converge)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point of the application."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except ConfigError as e:
        print(f"\n❌ Configuration error: {e}")
        return EXIT_ERROR
    except (OSError, ShapeOptError) as e:
        print(f"\n❌ Error: {e}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
