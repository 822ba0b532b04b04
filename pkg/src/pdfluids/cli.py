"""Command-line entry points.

Subcommands:
    simulate         run a scene with plain pressure projection
    guide            run the guided smoke pipeline
    upres            upsample a saved coarse velocity sequence and rerun fine
    compare-methods  run PD and ADMM side by side on one scene
    dam              run the liquid scene with a selectable wall treatment

Each takes an optional JSON config plus flag overrides.  Exit codes: 0 on
success, 2 for configuration errors, 3 when a solver fails to converge.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from .config import ConfigError, RunConfig, thread_cap
from .fileio import read_grid, render_pgm, write_convergence_csv, write_grid
from .guiding import default_guiding_params
from .optim import AdmmParams, PdParams
from .pressure import PoissonConvergenceError
from .scenes import (SCENE_NAMES, SceneSpec, build_scene,
                     ceiling_contact_cells, liquid_step, smoke_step,
                     upsampled_target)


class SolverFailure(RuntimeError):
    pass


def _build_config(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.load(args.config)
    else:
        if not args.scene:
            raise ConfigError("either --config or --scene is required")
        cfg = RunConfig(scene=SceneSpec(args.scene))
    overrides = {
        "frames": args.frames, "out_dir": args.out, "seed": args.seed,
        "method": getattr(args, "method", None),
        "bc_mode": getattr(args, "bc", None),
        "save_velocity": True if getattr(args, "save_velocity", False) else None,
        "save_pgm": True if getattr(args, "save_pgm", False) else None,
        "save_logs": True if getattr(args, "save_logs", False) else None,
        "upres_factor": getattr(args, "factor", None),
        "coarse_dir": getattr(args, "coarse_dir", None),
    }
    scene_overrides = {
        "name": args.scene, "nx": args.nx, "ny": args.ny,
        "w_left": getattr(args, "w_left", None),
        "w_right": getattr(args, "w_right", None),
        "radius_left": getattr(args, "radius_left", None),
        "radius_right": getattr(args, "radius_right", None),
        "seed": args.seed,
    }
    data = cfg.to_dict()
    for k, v in overrides.items():
        if v is not None:
            data[k] = v
    for k, v in scene_overrides.items():
        if v is not None:
            data["scene"][k] = v
    return RunConfig.from_dict(data)


def _solver_params(cfg: RunConfig, w_bar: float) -> tuple[PdParams, AdmmParams]:
    pd_default, admm_default = default_guiding_params(w_bar)
    pd = PdParams(
        tau=cfg.tau if cfg.tau is not None else pd_default.tau,
        sigma=cfg.sigma if cfg.sigma is not None else pd_default.sigma,
        theta=cfg.theta if cfg.theta is not None else pd_default.theta,
        max_iters=cfg.max_iters, eps_abs=cfg.eps_abs, eps_rel=cfg.eps_rel)
    admm = AdmmParams(
        rho=cfg.rho if cfg.rho is not None else admm_default.rho,
        max_iters=cfg.max_iters, eps_abs=cfg.eps_abs, eps_rel=cfg.eps_rel)
    return pd, admm


def _frame_outputs(cfg: RunConfig, state, tag: str):
    if cfg.save_pgm and state.density is not None:
        render_pgm(state.density, os.path.join(cfg.out_dir,
                                               f"{tag}_{state.frame:04d}.pgm"))
    if cfg.save_velocity:
        write_grid(os.path.join(cfg.out_dir, f"vel_{state.frame:04d}.grid"),
                   state.vel)
    if cfg.save_logs and state.last_log is not None and len(state.last_log):
        write_convergence_csv(state.last_log,
                              os.path.join(cfg.out_dir,
                                           f"conv_{tag}_{state.frame:04d}.csv"))


def _write_summary(path, rows, header):
    lines = [header] + [",".join(str(v) for v in r) for r in rows]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def cmd_simulate(cfg: RunConfig) -> int:
    state, _ = build_scene(cfg.scene)
    os.makedirs(cfg.out_dir, exist_ok=True)
    rows = []
    for _ in range(cfg.frames):
        if cfg.scene.is_liquid:
            liquid_step(state, mode=cfg.bc_mode, cg=cfg.cg)
        else:
            smoke_step(state, None, cg=cfg.cg)
        log = state.last_log
        rows.append((state.frame, len(log) if log else 0,
                     log.total_cg_iters if log else 0))
        _frame_outputs(cfg, state, cfg.scene.name)
    _write_summary(os.path.join(cfg.out_dir, "summary.csv"), rows,
                   "frame,iterations,cg_iters")
    return 0


def cmd_guide(cfg: RunConfig, target_override=None) -> int:
    state, guide_cfg = build_scene(cfg.scene)
    if guide_cfg is None and target_override is None:
        raise ConfigError(f"scene {cfg.scene.name!r} defines no guiding target")
    os.makedirs(cfg.out_dir, exist_ok=True)
    pd, admm = _solver_params(
        cfg, guide_cfg.w_bar if guide_cfg is not None else 1.0)
    rows = []
    for frame in range(cfg.frames):
        if target_override is not None:
            guide_cfg = target_override(frame, state)
        guide_cfg = guide_cfg.with_current(state.vel)
        smoke_step(state, guide_cfg, method=cfg.method, pd_params=pd,
                   admm_params=admm, cg=cfg.cg, exact_prox=cfg.exact_prox)
        log = state.last_log
        if not log.converged and cfg.method in ("pd", "admm"):
            raise SolverFailure(f"{cfg.method} did not converge at frame "
                                f"{state.frame} (residual {log.final_residual:.3e})")
        rows.append((state.frame, len(log), log.total_cg_iters))
        _frame_outputs(cfg, state, cfg.scene.name)
    _write_summary(os.path.join(cfg.out_dir, "summary.csv"), rows,
                   "frame,iterations,cg_iters")
    return 0


def cmd_upres(cfg: RunConfig) -> int:
    if not cfg.coarse_dir:
        raise ConfigError("upres needs --coarse-dir with saved velocity grids")

    def target(frame, state):
        path = os.path.join(cfg.coarse_dir, f"vel_{frame + 1:04d}.grid")
        if not os.path.exists(path):
            raise ConfigError(f"missing coarse velocity frame {path}")
        coarse = read_grid(path)
        return upsampled_target(coarse, cfg.upres_factor, cfg.scene, state)

    f = cfg.upres_factor
    fine_scene = dataclasses.replace(
        cfg.scene, nx=cfg.scene.nx * f, ny=cfg.scene.ny * f,
        nz=cfg.scene.nz if cfg.scene.nz == 1 else cfg.scene.nz * f,
        h=cfg.scene.h / f)
    fine_cfg = dataclasses.replace(cfg, scene=fine_scene)
    return cmd_guide(fine_cfg, target_override=target)


def cmd_compare(cfg: RunConfig) -> int:
    os.makedirs(cfg.out_dir, exist_ok=True)
    summary = []
    for method in ("pd", "admm"):
        state, guide_cfg = build_scene(cfg.scene)
        if guide_cfg is None:
            raise ConfigError(f"scene {cfg.scene.name!r} defines no guiding target")
        pd, admm = _solver_params(cfg, guide_cfg.w_bar)
        rows = []
        for _ in range(cfg.frames):
            guide_cfg = guide_cfg.with_current(state.vel)
            smoke_step(state, guide_cfg, method=method, pd_params=pd,
                       admm_params=admm, cg=cfg.cg)
            log = state.last_log
            rows.append((state.frame, len(log), log.total_cg_iters))
        _write_summary(os.path.join(cfg.out_dir, f"compare_{method}.csv"),
                       rows, "frame,iterations,cg_iters")
        mean_iters = float(np.mean([r[1] for r in rows]))
        mean_cg = float(np.mean([r[2] for r in rows]))
        summary.append((method, f"{mean_iters:.17g}", f"{mean_cg:.17g}"))
        print(f"{method}: mean iterations {mean_iters:.2f}, "
              f"mean CG iterations {mean_cg:.1f}")
    _write_summary(os.path.join(cfg.out_dir, "summary.csv"), summary,
                   "method,mean_iterations,mean_cg_iters")
    return 0


def cmd_dam(cfg: RunConfig) -> int:
    state, _ = build_scene(cfg.scene)
    if not cfg.scene.is_liquid:
        raise ConfigError("dam expects a liquid scene")
    os.makedirs(cfg.out_dir, exist_ok=True)
    rows = []
    for _ in range(cfg.frames):
        liquid_step(state, mode=cfg.bc_mode, cg=cfg.cg)
        log = state.last_log
        rows.append((state.frame, ceiling_contact_cells(state.flags),
                     len(log) if log else 0,
                     log.total_cg_iters if log else 0))
        if cfg.save_pgm:
            render_pgm(state.flags, os.path.join(
                cfg.out_dir, f"flags_{state.frame:04d}.pgm"))
        if cfg.save_velocity:
            write_grid(os.path.join(cfg.out_dir,
                                    f"vel_{state.frame:04d}.grid"), state.vel)
    _write_summary(os.path.join(cfg.out_dir, "ceiling_contact.csv"), rows,
                   "frame,ceiling_cells,iterations,cg_iters")
    return 0


def _add_common(p):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--scene", choices=list(SCENE_NAMES), help="scene name")
    p.add_argument("--frames", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--nx", type=int)
    p.add_argument("--ny", type=int)
    p.add_argument("--save-velocity", action="store_true", dest="save_velocity")
    p.add_argument("--save-pgm", action="store_true", dest="save_pgm")
    p.add_argument("--save-logs", action="store_true", dest="save_logs")


def _add_guiding_flags(p):
    p.add_argument("--method", choices=["pd", "admm", "iop", "direct"])
    p.add_argument("--w-left", type=float, dest="w_left")
    p.add_argument("--w-right", type=float, dest="w_right")
    p.add_argument("--radius-left", type=float, dest="radius_left")
    p.add_argument("--radius-right", type=float, dest="radius_right")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pdfluids",
        description="Grid fluid solver with a proximal-splitting pressure stage")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="plain (unguided) scene run")
    _add_common(p)

    p = sub.add_parser("guide", help="guided smoke run")
    _add_common(p)
    _add_guiding_flags(p)

    p = sub.add_parser("upres", help="guided resimulation from coarse grids")
    _add_common(p)
    _add_guiding_flags(p)
    p.add_argument("--coarse-dir", dest="coarse_dir",
                   help="directory with vel_%%04d.grid frames")
    p.add_argument("--factor", type=int, help="refinement factor")

    p = sub.add_parser("compare-methods", help="PD vs ADMM on one scene")
    _add_common(p)
    _add_guiding_flags(p)

    p = sub.add_parser("dam", help="liquid run with selectable wall treatment")
    _add_common(p)
    p.add_argument("--bc", choices=["regular", "separating-standard",
                                    "separating-accelerated"])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        thread_cap()
        cfg = _build_config(args)
        handler = {"simulate": cmd_simulate, "guide": cmd_guide,
                   "upres": cmd_upres, "compare-methods": cmd_compare,
                   "dam": cmd_dam}[args.command]
        return handler(cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (SolverFailure, PoissonConvergenceError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
