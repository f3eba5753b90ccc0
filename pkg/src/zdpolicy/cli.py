"""Command-line harness: construct, train, simulate, roa, verify.

Exit codes: 0 success, 2 validation error, 3 numerical failure,
4 verification failure. Set ZDP_LOG_LEVEL (e.g. INFO) for progress logs.
"""

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import persistence
from .config import ExperimentConfig, dumps as dump_config, load as load_config
from .dynamics import ControlAffineSystem, annihilation_residual, system_of, zero_dynamics_rhs
from .errors import AllBelowFloor, Diverged, NumericalError, ValidationError, ZdpError
from .learning import TrainConfig, invariance_residual, loss_batch, pretrain, train
from .linalg import GainMatrix, linearize_about_origin, physical_to_aux_gain, place_poles
from .linear_zdp import (P_RUNTIME_TOL, build_e_matrix, build_linear_zdp, check_relative_degree_nonlinear,
                         select_invariant_subspace)
from .mlp import init_mlp, mlp_forward
from .ocp import OptimalControl, lqr_controller_gain
from .runtime import (LinearStateFeedback, TrackingController, ZeroController, annotate,
                      fit_exponential_envelope, relative_degree_scalar, roa_sweep, simulate)

log = logging.getLogger("zdpolicy")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_VERIFY = 0, 2, 3, 4


def _out_dir(cfg: ExperimentConfig, args) -> Path:
    out = Path(args.out or cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, run=replace(cfg.run, seed=args.seed))
    return cfg


def _round(x, digits=12):
    return float(np.format_float_positional(x, precision=digits, unique=False, fractional=False)) \
        if np.isfinite(x) else float(x)


# --------------------------------------------------------------------------
# construct
# --------------------------------------------------------------------------


def construct(cfg: ExperimentConfig):
    """Linear ZDP from placed poles (or an explicit gain), plus the LQR-subspace ZDP.

    Returns ``(model document, report dict)``.
    """
    nf = cfg.normal_form()
    lm = linearize_about_origin(nf)
    if cfg.construct.gain:
        k = GainMatrix(np.array(cfg.construct.gain, dtype=float))
    else:
        k = place_poles(lm, np.array(cfg.construct.poles, dtype=float))
    a_cl = lm.a - np.outer(lm.b, k.k)
    sub = select_invariant_subspace(a_cl, nf.gamma, nf.nz, prefer=cfg.construct.selection)
    zdp = build_linear_zdp(sub, lm, k)
    rep = build_e_matrix(zdp, a_cl, nf.gamma)
    p_nonlinear = check_relative_degree_nonlinear(nf, lambda z: sub.s_eta[:, 0], np.zeros(nf.n))
    report = {
        "p": zdp.p,
        "p_valid": bool(abs(zdp.p) > P_RUNTIME_TOL),
        "p_nonlinear_origin": p_nonlinear,
        "gain": k.k,
        "closed_loop_eigenvalues": np.sort(np.linalg.eigvals(a_cl).real),
        "chosen_eigenvalues": sub.chosen_eigenvalues,
        "subspace_residual": sub.residual(a_cl),
        "output_kernel_residual": float(np.max(np.abs(zdp.c @ sub.s))),
        "ladder": rep.ladder,
        "e_rank": rep.rank,
        "e_pattern_error": float(np.max(np.abs(rep.e - rep.pattern))),
        "psi_lin_is_zero": bool(np.max(np.abs(sub.s_eta)) < 1e-12),
        "s_eta": sub.s_eta,
    }
    lqr_zdp = None
    try:
        cost = cfg.quadratic_cost()
        k_phys = lqr_controller_gain(nf, cost)
        k_aux = physical_to_aux_gain(nf, k_phys.k)
        a_lqr = lm.a - np.outer(lm.b, k_aux.k)
        lqr_sub = select_invariant_subspace(a_lqr, nf.gamma, nf.nz, prefer=cfg.construct.lqr_selection)
        lqr_zdp = build_linear_zdp(lqr_sub, lm, k_aux)
        report["lqr"] = {"gain_physical": k_phys.k, "p": lqr_zdp.p, "chosen_eigenvalues": lqr_sub.chosen_eigenvalues,
                         "subspace_residual": lqr_sub.residual(a_lqr)}
    except ZdpError as exc:
        report["lqr"] = {"error": f"{type(exc).__name__}: {exc}"}
    meta = {"config": dump_config(cfg)}
    return persistence.model_document(zdp, lqr_zdp, report, meta), report


def cmd_construct(cfg: ExperimentConfig, args) -> int:
    doc, report = construct(cfg)
    out = _out_dir(cfg, args)
    persistence.write_json(out / "model.json", doc)
    persistence.write_json(out / "construct_report.json", report)
    print(f"p = {report['p']:.6g} (valid: {report['p_valid']})")
    print(f"chosen eigenvalues: {np.round(report['chosen_eigenvalues'], 6).tolist()}")
    print(f"subspace residual: {report['subspace_residual']:.3e}")
    print(f"psi_lin is zero: {report['psi_lin_is_zero']}")
    return EXIT_OK


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def _pretrain_target(cfg: ExperimentConfig, model_doc: dict):
    key = "lqr_zdp" if cfg.training.pretrain_target == "lqr" else "linear_zdp"
    entry = model_doc.get(key)
    if entry is None:
        raise ValidationError(f"model file has no {key} entry to pretrain on")
    return key, persistence.linear_zdp_from_dict(entry)


def run_training(cfg: ExperimentConfig, model_doc: dict, jobs: int = 1):
    """Pretrain then train; returns (params, history, checkpoint document)."""
    nf = cfg.normal_form()
    cost = cfg.quadratic_cost()
    ilqr_cfg = cfg.ilqr_config()
    tcfg = cfg.train_config(jobs)
    key, target = _pretrain_target(cfg, model_doc)
    init = init_mlp(nf.nz, nf.gamma, cfg.training.hidden_widths, cfg.training.activation, seed=cfg.run.seed)
    pre, mse = pretrain(init, target.sub.s_eta.T, tcfg, return_mse=True)
    solver = OptimalControl(nf, cost, ilqr_cfg)
    eval_z = tcfg.sample(np.random.default_rng(cfg.run.seed + 1), 256)
    before = loss_batch(nf, pre, cost, ilqr_cfg, eval_z, jobs=jobs, solver=solver)
    params, history = train(nf, pre, cost, tcfg, ilqr_cfg)
    after = loss_batch(nf, params, cost, ilqr_cfg, eval_z, jobs=jobs, solver=solver)
    window = min(tcfg.smoothing_window, max(len(history.steps), 1))
    smooth = history.smoothed(window) if history.steps else np.array([np.nan])
    psi0 = np.linalg.norm(mlp_forward(params, np.zeros(params.input_dim)))
    training = {
        "steps": tcfg.steps,
        "seed": cfg.run.seed,
        "learning_rate": tcfg.learning_rate,
        "batch_size": tcfg.batch_size,
        "sample_box": tcfg.sample_box,
        "eval_mean_residual_initial": before.mean_residual,
        "eval_mean_residual_final": after.mean_residual,
        "smoothed_loss_final": float(smooth[-1]),
        "smoothed_loss_ratio": float(smooth[-1] / before.mean_residual),
        "psi_at_zero_norm": float(psi0),
    }
    pretrain_info = {"target": key, "mse": mse, "s": target.sub.s, "s_eta": target.sub.s_eta,
                     "chosen_eigenvalues": target.sub.chosen_eigenvalues}
    doc = persistence.checkpoint_document(params, pretrain_info, training, {"config": dump_config(cfg)})
    return params, history, doc


def cmd_train(cfg: ExperimentConfig, args) -> int:
    model_doc = persistence.load_any(args.model[0]) if args.model else None
    if model_doc is None:
        model_doc, _ = construct(cfg)
    elif model_doc["format"] != persistence.MODEL_FORMAT:
        raise ValidationError("train needs a model file from 'construct'")
    params, history, doc = run_training(cfg, model_doc, args.jobs)
    out = _out_dir(cfg, args)
    persistence.write_json(out / "checkpoint.json", doc)
    history.to_csv(out / "loss_history.csv")
    t = doc["training"]
    print(f"pretrain mse = {doc['pretrain']['mse']:.3e}")
    print(f"eval mean residual: {t['eval_mean_residual_initial']:.4g} -> {t['eval_mean_residual_final']:.4g}")
    print(f"smoothed batch loss {t['smoothed_loss_final']:.4g} = {t['smoothed_loss_ratio']:.3f} x pretrained value")
    print(f"|psi(0)| = {t['psi_at_zero_norm']:.3e}")
    return EXIT_OK


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------


def _controller(cfg: ExperimentConfig, nf, name: str, doc):
    if name == "lqr":
        return LinearStateFeedback(lqr_controller_gain(nf, cfg.quadratic_cost()), name="lqr")
    if doc is None:
        raise ValidationError(f"controller {name!r} needs --model")
    if name == "zdp-linear" and doc["format"] != persistence.MODEL_FORMAT:
        raise ValidationError("zdp-linear needs a model file from 'construct'")
    psi = persistence.psi_from_document(doc)
    if psi.gamma != nf.gamma or psi.nz != nf.nz:
        raise ValidationError("model dimensions do not match the configured system")
    return TrackingController(nf, psi, cfg.gains(), name=name)


def cmd_simulate(cfg: ExperimentConfig, args) -> int:
    nf = cfg.normal_form()
    doc = persistence.load_any(args.model[0]) if args.model else None
    ctrl = _controller(cfg, nf, args.controller, doc)
    init = np.array([float(x) for x in args.init.split(",")]) if args.init else np.array(cfg.simulate.init)
    if init.shape != (nf.n,):
        raise ValidationError(f"init needs {nf.n} entries")
    zeta0 = nf.to_nz(init)
    s = cfg.simulate
    traj = simulate(nf, ctrl, zeta0, s.t_final_s, s.dt_s, s.escape_bound)
    psi = ctrl.psi if isinstance(ctrl, TrackingController) else (persistence.psi_from_document(doc) if doc else None)
    summary = {"controller": ctrl.name, "status": traj.status, "final_state_norm": float(np.linalg.norm(traj.states[-1])),
               "initial_state": init}
    if psi is not None:
        annotate(traj, nf, psi)
        for key in ("e_norm", "z_norm"):
            try:
                fit = fit_exponential_envelope(traj, key)
                summary[f"lambda_{key[0]}"] = fit.lam
                summary[f"m_{key[0]}"] = fit.envelope_m
            except AllBelowFloor:
                summary[f"lambda_{key[0]}"] = None
    out = _out_dir(cfg, args)
    names = [f"eta{i + 1}" for i in range(nf.gamma)] + [f"z{i + 1}" for i in range(nf.nz)]
    traj.to_csv(out / f"trajectory_{ctrl.name}.csv", names)
    persistence.write_json(out / f"simulate_{ctrl.name}.json", summary)
    line = " ".join(f"{k}={_fmt_summary(v)}" for k, v in summary.items() if k != "initial_state")
    print(line)
    return EXIT_OK


def _fmt_summary(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


# --------------------------------------------------------------------------
# roa
# --------------------------------------------------------------------------


def cmd_roa(cfg: ExperimentConfig, args) -> int:
    nf = cfg.normal_form()
    ctrls = [_controller(cfg, nf, "lqr", None)]
    for path in args.model or []:
        doc = persistence.load_any(path)
        name = "zdp" if doc["format"] == persistence.CHECKPOINT_FORMAT else "zdp-linear"
        if any(c.name == name for c in ctrls):
            raise ValidationError(f"two models map to controller {name!r}")
        ctrls.append(_controller(cfg, nf, name, doc))
    result = roa_sweep(nf, ctrls, cfg.roa_grid(), cfg.settle_config(), jobs=args.jobs)
    out = _out_dir(cfg, args)
    result.to_csv(out / "roa.csv")
    counts = {n: result.count(n) for n in result.controllers}
    summary = {"cells": int(result.thetas.size * result.theta_dots.size), "success_counts": counts}
    for name in result.controllers:
        if name == "lqr":
            continue
        gained = result.gained_cells(name, "lqr")
        lost = result.gained_cells("lqr", name)
        summary[f"{name}_minus_lqr"] = counts[name] - counts["lqr"]
        summary[f"{name}_gained_cells"] = gained
        summary[f"{name}_lost_cells"] = lost
        for th, thd in gained:
            log.info("%s succeeds where lqr fails: theta=%.4f theta_dot=%.4f", name, th, thd)
    persistence.write_json(out / "roa_summary.json", summary)
    for name, c in counts.items():
        print(f"{name}: {c}/{summary['cells']} cells stabilised")
    for name in result.controllers:
        if name != "lqr":
            print(f"{name} - lqr = {summary[f'{name}_minus_lqr']} "
                  f"({len(summary[f'{name}_gained_cells'])} gained, {len(summary[f'{name}_lost_cells'])} lost)")
    return EXIT_OK


# --------------------------------------------------------------------------
# verify
# --------------------------------------------------------------------------


def _grid(v):
    th = np.linspace(-v.theta_max_rad, v.theta_max_rad, v.n_grid)
    pm = np.linspace(-v.momentum_max, v.momentum_max, v.n_grid)
    return np.array([[a, b] for a in th for b in pm])


def verify(cfg: ExperimentConfig, doc: dict) -> list:
    """List of (name, passed, value, threshold) for the ZDP hypotheses near the origin."""
    nf = cfg.normal_form()
    v = cfg.verify
    psi = persistence.psi_from_document(doc)
    checks = []
    rng = np.random.default_rng(cfg.run.seed)

    sys_phys = system_of(nf)
    xs = rng.uniform(-2.0, 2.0, size=(v.annihilation_samples, nf.n))
    ann = max(annihilation_residual(nf, sys_phys, x) for x in xs)
    checks.append(("annihilation", ann < 1e-6, ann, 1e-6))

    zs = _grid(v) if nf.nz == 2 else rng.uniform(-v.theta_max_rad, v.theta_max_rad, size=(v.n_grid**2, nf.nz))
    p_min = min(abs(relative_degree_scalar(nf, psi, np.concatenate([psi.value(z), z]))) for z in zs)
    checks.append(("relative_degree", p_min > v.relative_degree_tol, p_min, v.relative_degree_tol))

    # invariance of M_psi under the reference controller of the model
    if doc["format"] == persistence.MODEL_FORMAT:
        k = persistence.linear_zdp_from_dict(doc["linear_zdp"]).k

        def u_ref(zeta):
            from .dynamics import feedback_linearize

            return feedback_linearize(nf, zeta, k(zeta))
    else:
        oc = OptimalControl(nf, cfg.quadratic_cost(), cfg.ilqr_config())

        def u_ref(zeta):
            return oc.query(zeta)[0]

    params = psi.params
    worst = 0.0
    for z in zs:
        if np.linalg.norm(z) == 0.0:
            continue
        zeta = np.concatenate([psi.value(z), z])
        try:
            u = u_ref(zeta)
        except Diverged:
            worst = np.inf  # no reference input: invariance cannot hold
            break
        r = invariance_residual(nf, params, u, z)
        vel = np.linalg.norm(nf.rhs(zeta, u))
        worst = max(worst, float(np.linalg.norm(r) / max(vel, 1e-12)))
    checks.append(("invariance", worst < v.invariance_rel_tol, worst, v.invariance_rel_tol))

    zd = ControlAffineSystem(nf.nz, lambda z: zero_dynamics_rhs(nf, psi, z), lambda z: np.zeros(nf.nz), "zero dynamics")
    lam_min = np.inf
    for i in range(v.n_directions):
        ang = 2 * np.pi * i / v.n_directions
        direction = np.zeros(nf.nz)
        direction[0] = np.cos(ang)
        direction[min(1, nf.nz - 1)] += np.sin(ang)
        z0 = v.zero_dynamics_radius * direction / np.linalg.norm(direction)
        traj = simulate(zd, ZeroController(), z0, v.t_final_s, v.dt_s, escape_bound=10.0, strict=False)
        if traj.status != "ok":
            lam_min = -np.inf
            break
        lam_min = min(lam_min, fit_exponential_envelope(traj, "state").lam)
    checks.append(("zero_dynamics_stable", bool(lam_min > 0.0), float(lam_min), 0.0))
    return [(n, bool(ok), float(val), float(thr)) for n, ok, val, thr in checks]


def cmd_verify(cfg: ExperimentConfig, args) -> int:
    if not args.model:
        raise ValidationError("verify needs --model")
    doc = persistence.load_any(args.model[0])
    checks = verify(cfg, doc)
    out = _out_dir(cfg, args)
    persistence.write_json(out / "verify_report.json",
                           {"checks": [{"name": n, "passed": ok, "value": val, "threshold": thr}
                                       for n, ok, val, thr in checks]})
    for n, ok, val, thr in checks:
        print(f"{'PASS' if ok else 'FAIL'} {n}: {val:.4g} (threshold {thr:g})")
    return EXIT_OK if all(ok for _, ok, _, _ in checks) else EXIT_VERIFY


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

COMMANDS = {"construct": cmd_construct, "train": cmd_train, "simulate": cmd_simulate, "roa": cmd_roa,
            "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zdp", description="Zero dynamics policy experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI experiment configuration")
        p.add_argument("--out", help="output directory (default: [run] output_dir)")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--jobs", type=int, default=1, help="worker threads")
        p.add_argument("--model", action="append", help="model or checkpoint file (repeatable for roa)")
        if name == "simulate":
            p.add_argument("--controller", choices=("zdp", "lqr", "zdp-linear"), default="zdp")
            p.add_argument("--init", help="comma-separated physical initial state")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("ZDP_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        cfg = _load_config(args)
        return COMMANDS[args.command](cfg, args)
    except ValidationError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
