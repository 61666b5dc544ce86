"""Command-line entry point: ``raepinn {train,reference,evaluate,diagnose,export-points}``.

Every verb resolves the same experiment config (preset, then ``--config``
file, then flags) and writes its artifacts into ``--out``.
"""

import argparse
import os
import sys

from .runtime import pin_threads

pin_threads(1)  # before numpy is imported anywhere

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_MISMATCH, EXIT_ABORT = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _parse_value(text):
    from .config import tomllib

    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _set_path(tree, dotted, value):
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value


def overrides_from_args(args):
    over = {}
    if args.preset is not None:
        over["preset"] = args.preset
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out"] = args.out
    if args.weighting is not None:
        _set_path(over, "weighting.mode", args.weighting)
    if args.stride is not None:
        _set_path(over, "weighting.stride", args.stride)
    if args.log_every is not None:
        _set_path(over, "logging.log_every", args.log_every)
    for item in args.set or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        _set_path(over, k.strip(), _parse_value(v.strip()))
    return over


def resolve_config(args):
    """Preset/file/flags; evaluate and diagnose fall back to the run's saved config."""
    from .config import build_config, load_config

    over = overrides_from_args(args)
    run = getattr(args, "run", None) or args.out
    if args.config is None and args.preset is None and run and args.command in ("evaluate", "diagnose"):
        saved = _run_dir_config(run)["config"]
        saved.setdefault("out", run)
        over.setdefault("out", run)
        return build_config(saved, over)
    return load_config(args.config, over)


def reference_path(cfg):
    """Explicit ``reference.path`` or a cache file keyed by problem and resolution."""
    from .io_utils import stable_hash

    r = cfg["reference"]
    if r["path"]:
        return r["path"]
    key = stable_hash({"problem": cfg.problem.to_dict(), "n": r["n"], "dt": r["dt"],
                       "snapshots": r["snapshots"]})
    root = os.environ.get("RAEPINN_REFERENCE_CACHE") or os.path.join(
        os.path.dirname(os.path.abspath(cfg.out)), "references")
    return os.path.join(root, f"{cfg.problem.name}-n{r['n']}-{key[:16]}.npz")


def solve_reference(cfg, path, log=print):
    import numpy as np

    from .spectral import save_solution, spectral_solve

    r = cfg["reference"]
    spec = cfg.problem
    times = np.linspace(0.0, spec.horizon, r["snapshots"])
    log(f"solving reference {spec.name}: n={r['n']} dt={r['dt']} snapshots={r['snapshots']}")
    grid = spectral_solve(spec, r["n"], r["dt"], times)
    save_solution(path, grid, cfg.hash)
    log(f"reference written to {path}")
    return grid


def obtain_reference(cfg, solve_if_missing=True, log=print):
    from .spectral import load_solution

    path = reference_path(cfg)
    if os.path.exists(path):
        grid = load_solution(path)
    elif solve_if_missing:
        grid = solve_reference(cfg, path, log)
    else:
        raise CliError(f"reference solution not found: {path} (run `raepinn reference` first)",
                       EXIT_MISSING)
    if grid.spec.to_dict() != cfg.problem.to_dict():
        raise CliError(f"reference {path} was solved for a different problem spec", EXIT_MISMATCH)
    return grid


def _run_dir_config(run_dir):
    import json

    path = os.path.join(run_dir, "config.json")
    if not os.path.exists(path):
        raise CliError(f"{path} not found; is {run_dir} a training output directory?", EXIT_MISSING)
    with open(path) as fh:
        return json.load(fh)


def _locate_checkpoint(args, cfg):
    ckpt = args.checkpoint or os.path.join(cfg.out, "checkpoint_final.bin")
    if not os.path.exists(ckpt):
        raise CliError(f"checkpoint not found: {ckpt}", EXIT_MISSING)
    return ckpt


def _check_checkpoint_problem(ckpt, cfg):
    """The run that wrote ``ckpt`` must have trained on ``cfg.problem``."""
    from .problems import ProblemSpec

    saved = _run_dir_config(os.path.dirname(os.path.abspath(ckpt)))
    problem = ProblemSpec.from_dict(saved["config"]["problem"])
    if problem.to_dict() != cfg.problem.to_dict():
        raise CliError(f"checkpoint {ckpt} was trained on problem {problem.name!r}, "
                       f"which differs from the configured {cfg.problem.name!r}", EXIT_MISMATCH)
    return saved


# ------------------------------------------------------------------ verbs


def cmd_train(args, cfg):
    from .training import TrainingAborted, train

    grid = None if args.no_reference else obtain_reference(cfg)
    try:
        res = train(cfg, grid, cfg.out, verbose=not args.quiet)
    except TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.checkpoint:
            print(f"last good parameters: {exc.checkpoint}", file=sys.stderr)
        return EXIT_ABORT
    s = res.summary
    print(f"done: stop={s['stop_reason']} loss={s['final_loss']:.4e} "
          + " ".join(f"{k}={v:.4e}" for k, v in s.items() if k.startswith("final_rel_l2")))
    return EXIT_OK


def cmd_reference(args, cfg):
    path = reference_path(cfg)
    if os.path.exists(path) and not args.force:
        print(f"reference already present: {path}")
        return EXIT_OK
    solve_reference(cfg, path)
    if args.csv:
        from .io_utils import provenance
        from .spectral import export_snapshots_csv, load_solution

        export_snapshots_csv(load_solution(path), args.csv, comments=provenance(cfg.hash))
    return EXIT_OK


def cmd_evaluate(args, cfg):
    import numpy as np

    from .io_utils import provenance, write_csv, write_json
    from .metrics import relative_l2
    from .network import load_checkpoint
    from .training import Evaluator

    ckpt = _locate_checkpoint(args, cfg)
    _check_checkpoint_problem(ckpt, cfg)
    grid = obtain_reference(cfg, solve_if_missing=not args.no_solve)
    arch, params, ckpt_hash = load_checkpoint(ckpt)
    ev = Evaluator(arch, grid, args.eval_stride or cfg["logging"]["eval_stride"],
                   args.eval_time_stride or cfg["logging"]["eval_time_stride"])
    pred = ev.predict(params)
    errs = {nm: relative_l2(pred[nm], ref) for nm, (_, ref) in ev.columns.items()}
    os.makedirs(cfg.out, exist_ok=True)
    report = {"checkpoint": os.path.abspath(ckpt), "checkpoint_config_hash": ckpt_hash,
              "config_hash": cfg.hash, "problem": cfg.problem.name, "n_points": int(len(ev.points)),
              "relative_l2": errs}
    write_json(os.path.join(cfg.out, "evaluation.json"), report)
    d = cfg.problem.space_dim
    names = ["x", "y"][:d] + ["t"]
    u_ref = ev.columns["u"][1]
    err = np.abs(pred["u"] - u_ref)
    rows = [[*map(float, p), float(a), float(b), float(e)]
            for p, a, b, e in zip(ev.points, pred["u"], u_ref, err)]
    write_csv(os.path.join(cfg.out, "pointwise_error.csv"), names + ["u_pred", "u_ref", "abs_error"],
              rows, provenance(cfg.hash))
    print(" ".join(f"rel_l2_{k}={v:.4e}" for k, v in errs.items()))
    return EXIT_OK


def cmd_diagnose(args, cfg):
    import numpy as np

    from .io_utils import read_csv, write_json
    from .metrics import scaling_fit, theory_training_error
    from .network import load_checkpoint
    from .sampling import sample_problem_points
    from .training import read_trainlog

    run_dir = args.run or cfg.out
    saved = _run_dir_config(run_dir)
    log_path = os.path.join(run_dir, "trainlog.csv")
    if not os.path.exists(log_path):
        raise CliError(f"{log_path} not found", EXIT_MISSING)
    _, cols = read_trainlog(log_path)
    out = {"run": os.path.abspath(run_dir), "config_hash": saved["config_hash"]}
    try:
        fit = scaling_fit(cols["total"], cols["rel_l2_u"], cols["iteration"], decades=args.decades)
        out["scaling_fit"] = fit.to_dict()
    except (KeyError, ValueError) as exc:
        out["scaling_fit"] = {"error": str(exc)}

    ckpt = args.checkpoint or os.path.join(run_dir, "checkpoint_final.bin")
    if not os.path.exists(ckpt):
        raise CliError(f"checkpoint not found: {ckpt}", EXIT_MISSING)
    _check_checkpoint_problem(ckpt, cfg)
    arch, params, _ = load_checkpoint(ckpt)
    rc = saved["config"]
    ps = sample_problem_points(cfg.problem, rc["counts"], rc["seed"])
    lam = None
    wpath = os.path.join(run_dir, "rae_weights.csv")
    if os.path.exists(wpath):
        _, _, rows = read_csv(wpath)
        lam = np.array([r[1] for r in rows], dtype=np.float64)
    grid = None if args.no_reference else obtain_reference(cfg, solve_if_missing=True)
    report = theory_training_error(cfg.problem, arch, params, ps, lam, grid)
    out["theory_error"] = report.to_dict()
    dest = os.path.join(run_dir, "diagnose.json")
    write_json(dest, out)
    sf = out["scaling_fit"]
    print(f"E_T^2={report.e_t_sq:.4e} slope={sf.get('slope', float('nan')):.4f} -> {dest}")
    return EXIT_OK


def cmd_export_points(args, cfg):
    from .io_utils import provenance
    from .sampling import sample_problem_points

    ps = sample_problem_points(cfg.problem, cfg["counts"], cfg.seed)
    path = args.path or os.path.join(cfg.out, "points.csv")
    ps.export_csv(path, provenance(cfg.hash))
    print(f"{len(ps.interior)} interior, {len(ps.sb_p)} periodic pairs, "
          f"{len(ps.initial)} initial points -> {path}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "reference": cmd_reference,
    "evaluate": cmd_evaluate,
    "diagnose": cmd_diagnose,
    "export-points": cmd_export_points,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("experiment config")
    g.add_argument("--config", help="TOML experiment file")
    g.add_argument("--preset", help="built-in preset: ac1d_i1, ac1d_i2, ac2d, ch1d, ch2d")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", help="output directory")
    g.add_argument("--weighting", choices=("rae", "vanilla"))
    g.add_argument("--stride", type=int, help="RAE weight recomputation stride")
    g.add_argument("--log-every", type=int, dest="log_every")
    g.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config leaf, e.g. --set optimizer.adam_iters=5000")

    p = argparse.ArgumentParser(prog="raepinn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", parents=[common], help="train a PINN")
    t.add_argument("--no-reference", action="store_true", help="skip error logging against a reference")
    t.add_argument("--quiet", action="store_true")
    r = sub.add_parser("reference", parents=[common], help="solve and cache the spectral reference")
    r.add_argument("--force", action="store_true", help="re-solve even if cached")
    r.add_argument("--csv", help="also export snapshots as CSV")
    e = sub.add_parser("evaluate", parents=[common], help="relative L2 of a checkpoint")
    e.add_argument("--checkpoint")
    e.add_argument("--no-solve", action="store_true", help="fail instead of solving a missing reference")
    e.add_argument("--eval-stride", type=int)
    e.add_argument("--eval-time-stride", type=int)
    d = sub.add_parser("diagnose", parents=[common], help="scaling fit and training-error report")
    d.add_argument("--run", help="training output directory (default: --out)")
    d.add_argument("--checkpoint")
    d.add_argument("--decades", type=float, default=2.0)
    d.add_argument("--no-reference", action="store_true")
    x = sub.add_parser("export-points", parents=[common], help="write the collocation points")
    x.add_argument("--path")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    from .config import ConfigError
    from .runtime import tune_allocator

    tune_allocator()
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
