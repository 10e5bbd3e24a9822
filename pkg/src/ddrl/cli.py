"""Command-line driver: ``ddrl {train,oracle,probe,simulate,compare}``.

Every subcommand resolves an environment from ``--preset`` or ``--config``
(TOML), applies ``--set section.key=value`` overrides, writes its outputs
under ``--out`` and records a ``run.json`` sufficient to repeat the run.

Exit codes: 0 ok, 1 usage or configuration error, 2 numeric failure,
3 tolerance failure (``compare``).
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import analysis
from .diffcore import NumericError, UsageError
from .envsim import PRESETS, env_from_dict, env_to_dict, lift_static, preset
from .oracle import GridSpec, ProbeRegion, compare_policy, dp_solve, load_solution, save_solution
from .policy import FULL_HIDDEN, Architecture, load_checkpoint, save_checkpoint
from .trainer import DESK_HIDDEN, TrainConfig, train

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("ddrl")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_TOLERANCE = 0, 1, 2, 3

ENV_SECTIONS = ("alpha", "risk", "cost", "statics", "lw_init_range")


class ToleranceFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- configuration --------------------------------------------------------------


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(cfg: dict, assignments) -> dict:
    """Apply ``section.key[.sub]=value`` strings to a nested dict (values parsed as TOML)."""
    for item in assignments or ():
        key, sep, raw = item.partition("=")
        parts = key.strip().split(".")
        if not sep or len(parts) < 2 or not all(parts):
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        node = cfg
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise UsageError(f"--set {key}: {p!r} is not a section")
        node[parts[-1]] = _parse_value(raw.strip())
    return cfg


def _base_config(args) -> dict:
    if args.config and args.preset:
        raise UsageError("give either --preset or --config, not both")
    if args.config:
        try:
            with open(args.config, "rb") as fh:
                return tomllib.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc.strerror}") from None
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"config {args.config}: {exc}") from None
    if not args.preset:
        raise UsageError(f"give --preset ({', '.join(PRESETS)}) or --config")
    return env_to_dict(preset(args.preset))


def _section(cfg: dict, name: str, cls, defaults):
    """Build a dataclass from ``cfg[name]`` on top of ``defaults``; unknown keys are errors."""
    given = dict(cfg.get(name, {}))
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise UsageError(f"unknown key(s) {', '.join(f'{name}.{k}' for k in unknown)}")
    merged = {**asdict(defaults), **given}
    try:
        return cls(**merged)
    except TypeError as exc:
        raise UsageError(f"[{name}]: {exc}") from None


def resolve(args) -> tuple:
    """(env, train config, grid spec, full resolved dict) from the common options."""
    cfg = apply_overrides(_base_config(args), args.set)
    unknown = sorted(set(cfg) - set(ENV_SECTIONS) - {"train", "grid"})
    if unknown:
        raise UsageError(f"unknown config section(s) {unknown}")
    env = env_from_dict({k: cfg[k] for k in ENV_SECTIONS if k in cfg})
    base = TrainConfig.desk() if getattr(args, "desk", False) else TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg.setdefault("train", {})["seed"] = args.seed
    tcfg = _section(cfg, "train", TrainConfig, base)
    grid = _section(cfg, "grid", GridSpec, GridSpec())
    resolved = {**env_to_dict(env), "train": tcfg.to_dict(), "grid": asdict(grid)}
    return env, tcfg, grid, resolved


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _axis(text: str) -> np.ndarray:
    """``lo:hi:n`` to a linspace."""
    try:
        lo, hi, n = text.split(":")
        return np.linspace(float(lo), float(hi), int(n))
    except ValueError:
        raise UsageError(f"expected lo:hi:n, got {text!r}") from None


def _statics(items) -> dict | None:
    if not items:
        return None
    out = {}
    for item in items:
        k, sep, v = item.partition("=")
        if not sep:
            raise UsageError(f"--static expects name=value, got {item!r}")
        try:
            out[k.strip()] = float(v)
        except ValueError:
            raise UsageError(f"--static {k.strip()}: {v!r} is not a number") from None
    return out


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def write_metadata(out: Path, args, resolved: dict, env, extra: dict | None = None) -> None:
    from . import __version__

    meta = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config": resolved,
        "seed": resolved["train"]["seed"],
        "env_hash": env.spec_hash(),
        "versions": {
            "ddrl": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
        **(extra or {}),
    }
    (out / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _load_policy(args, env):
    try:
        params, meta = load_checkpoint(args.checkpoint)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {args.checkpoint}: {exc.strerror}") from None
    want = lift_static(env).input_dim
    if params.arch.input_dim != want:
        raise UsageError(f"checkpoint expects {params.arch.input_dim} features but the env provides {want}")
    return params, meta


# -- subcommands ----------------------------------------------------------------


def cmd_train(args) -> int:
    env, tcfg, _, resolved = resolve(args)
    hidden = tuple(int(h) for h in _floats(args.hidden)) if args.hidden else (DESK_HIDDEN if args.desk else FULL_HIDDEN)
    arch = Architecture(lift_static(env).input_dim, hidden)
    out = _out_dir(args)
    params, curve = train(env, arch, tcfg)
    save_checkpoint(out / "policy.ckpt", params, {"env": env_to_dict(env), "train": tcfg.to_dict()})
    curve.to_csv(out / "curve.csv")
    write_metadata(out, args, resolved, env, {"hidden": list(hidden), "n_params": arch.n_params})
    print(f"trained {arch.n_params} parameters; final batch mean CR {curve.mean_cr[-1]:.4f}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    env, _, grid, resolved = resolve(args)
    dp = dp_solve(env, grid, args.horizon)
    out = _out_dir(args)
    dp.to_csv(out / "solution.csv")
    save_solution(out / "solution.npz", dp)
    bands = analysis.extract_bands(dp, env, _floats(args.lw), dp.alpha_grid, args.eps)
    bands.to_csv(out / "bands.csv")
    write_metadata(out, args, resolved, env, {"horizon": args.horizon})
    for lw, up, lo in zip(bands.lw, bands.upper, bands.lower):
        print(f"lw={lw:+.3f}  upper={up:+.4f}  lower={lo:+.4f}")
    return EXIT_OK


def cmd_probe(args) -> int:
    env, _, _, resolved = resolve(args)
    params, _ = _load_policy(args, env)
    fixed = _statics(args.static)
    out = _out_dir(args)
    what = {w.strip() for w in args.what.split(",")}
    bad = what - {"curves", "bands", "heatmap"}
    if bad:
        raise UsageError(f"unknown probe output(s) {sorted(bad)}")
    axis = _axis(args.alpha)
    lws = _floats(args.lw)
    if "curves" in what:
        analysis.probe_action_curve(params, env, lws, axis, fixed=fixed).to_csv(out / "action_curves.csv")
    if "bands" in what:
        analysis.extract_bands(params, env, lws, axis, args.eps, fixed=fixed).to_csv(out / "bands.csv")
    if "heatmap" in what:
        short = _axis(args.short_term)
        hm = analysis.no_trade_heatmap(params, env, axis, short, args.heatmap_lw, args.eps, fixed=fixed)
        hm.to_csv(out / "heatmap.csv")
    write_metadata(out, args, resolved, env, {"checkpoint": str(args.checkpoint), "statics": fixed})
    return EXIT_OK


def cmd_simulate(args) -> int:
    env, _, _, resolved = resolve(args)
    params, _ = _load_policy(args, env)
    fixed = _statics(args.static)
    out = _out_dir(args)
    traj = analysis.simulate_trajectory(params, env, args.steps, args.seed or 0, args.burn_in, fixed)
    traj.to_csv(out / "trajectory.csv")
    corr = analysis.correlation_matrix(traj, env.alpha.components + ("weight", "trade"))
    corr.to_csv(out / "correlations.csv")
    write_metadata(out, args, resolved, env, {"checkpoint": str(args.checkpoint), "statics": fixed})
    if corr.low_sample:
        print(f"warning: {corr.n} samples; correlations are low-sample", file=sys.stderr)
    return EXIT_OK


def cmd_compare(args) -> int:
    env, _, grid, resolved = resolve(args)
    params, _ = _load_policy(args, env)
    if args.oracle:
        if not Path(args.oracle).exists():
            raise UsageError(f"oracle file {args.oracle} does not exist")
        dp = load_solution(args.oracle)
        if dp.env != env:
            raise UsageError("oracle solution was computed for a different environment")
    else:
        dp = dp_solve(env, grid, args.horizon)
    res = compare_policy(params, dp, ProbeRegion(), args.steps, args.burn_in, args.paths, args.seed or 12345)
    out = _out_dir(args)
    report = {**asdict(res), "ratio": res.ratio, "min_ratio": args.min_ratio, "max_rms": args.max_rms}
    ok = res.ratio >= args.min_ratio and res.action_rms <= args.max_rms
    report["pass"] = ok
    (out / "compare.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_metadata(out, args, resolved, env, {"checkpoint": str(args.checkpoint)})
    print(f"action RMS {res.action_rms:.4f}  reward ratio {res.ratio:.4f}  ({res.reward_policy:.4f} / {res.reward_dp:.4f})")
    if not ok:
        raise ToleranceFailure(f"ratio >= {args.min_ratio} and RMS <= {args.max_rms} required")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--preset", help=f"one of: {', '.join(PRESETS)}")
    common.add_argument("--config", help="environment/run TOML file")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default="runs/latest")
    common.add_argument("--threads", type=int, help="cap BLAS worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    with_ckpt = _Parser(add_help=False)
    with_ckpt.add_argument("--checkpoint", required=True)
    with_ckpt.add_argument("--static", action="append", metavar="NAME=VALUE", help="value for a static parameter")

    p = _Parser(prog="ddrl", description="Differentiable RL for trading with transaction costs.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", parents=[common], help="train a policy")
    t.add_argument("--desk", action="store_true", help="500k samples x 5 epochs instead of 10M x 50")
    t.add_argument("--hidden", help="comma-separated hidden widths")
    t.set_defaults(func=cmd_train)

    o = sub.add_parser("oracle", parents=[common], help="solve the mono-scale DP")
    o.add_argument("--horizon", type=int, default=50)
    o.add_argument("--lw", default="-4,-3,-2,-1,0,1,2,3,4")
    o.add_argument("--eps", type=float, default=analysis.DEFAULT_EPS)
    o.set_defaults(func=cmd_oracle)

    pr = sub.add_parser("probe", parents=[common, with_ckpt], help="action curves, bands, heat-map")
    pr.add_argument("--what", default="curves,bands")
    pr.add_argument("--lw", default="-4,-2,0,2,4")
    pr.add_argument("--alpha", default="-8:8:321", help="alpha axis lo:hi:n (slow axis for heat-maps)")
    pr.add_argument("--short-term", default="-12:12:241", help="short-term alpha axis for heat-maps")
    pr.add_argument("--heatmap-lw", type=float, default=0.0)
    pr.add_argument("--eps", type=float, default=analysis.DEFAULT_EPS)
    pr.set_defaults(func=cmd_probe)

    s = sub.add_parser("simulate", parents=[common, with_ckpt], help="trajectory and correlations")
    s.add_argument("--steps", type=int, default=100_000)
    s.add_argument("--burn-in", type=int, default=1_000)
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("compare", parents=[common, with_ckpt], help="policy vs DP oracle")
    c.add_argument("--oracle", help="solution.npz from the oracle subcommand (solved afresh if omitted)")
    c.add_argument("--horizon", type=int, default=50)
    c.add_argument("--steps", type=int, default=20_000)
    c.add_argument("--burn-in", type=int, default=1_000)
    c.add_argument("--paths", type=int, default=64)
    c.add_argument("--min-ratio", type=float, default=0.97)
    c.add_argument("--max-rms", type=float, default=0.15)
    c.set_defaults(func=cmd_compare)
    return p


def _run(args) -> int:
    if args.threads is None:
        return args.func(args)
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=args.threads):
        return args.func(args)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return _run(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ToleranceFailure as exc:
        print(f"tolerance failure: {exc}", file=sys.stderr)
        return EXIT_TOLERANCE


if __name__ == "__main__":
    sys.exit(main())
