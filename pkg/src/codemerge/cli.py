"""Command-line interface.

Every subcommand prints one machine-readable line on stdout and writes
diagnostics to stderr.  Exit codes: 0 ok, 2 format/storage error, 3 bad
parameter, 4 missing checkpoint reference, 5 checked tolerance failed.

Any subcommand accepts ``--config FILE`` with ``key = value`` lines (keys are
flag names with ``-`` or ``_``); explicit flags win over file values.  When the
``CODEMERGE_SEED`` environment variable is set it overrides ``--seed``.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .codebook import codebook_load, codebook_save, fingerprint_matrix
from .errors import (
    CodeMergeError,
    FormatError,
    MissingReferenceError,
    ParameterError,
    StorageError,
)
from .fingerprint import compute_fingerprint, make_projection, pool_features
from .merging import SignPolicy, sign_consistent_merge, weighted_average_merge
from .scoring import (
    ScoringConfig,
    ema_weights,
    make_merge_plan,
    mos_weights,
    ridge_leverage_scores,
)
from .sim.loop import METHODS, SimConfig, default_schedule, run_method
from .sim.probes import (
    fingerprint_weight_correlation,
    hessian_rls_check,
    lmc_barrier,
    sgd_pair_barrier,
)
from .sim.stream import Shift, StreamConfig
from .tensor_store import Checkpoint, Tensor, checkpoint_load, checkpoint_save, flatten

log = logging.getLogger("codemerge")

EXIT_OK = 0
EXIT_FORMAT = 2
EXIT_PARAMETER = 3
EXIT_MISSING_REF = 4
EXIT_TOLERANCE = 5

SEED_ENV = "CODEMERGE_SEED"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ParameterError(f"{self.prog}: {message}")


class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


def _emit(obj) -> None:
    line = obj if isinstance(obj, str) else json.dumps(obj)
    sys.stdout.write(line + "\n")


# ---------------------------------------------------------------------------
# config file handling


def read_config_file(path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot read config ({exc.strerror})", path) from exc
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _apply_config(parser: argparse.ArgumentParser, path) -> None:
    """Install config-file values as defaults of a subcommand parser."""
    values = read_config_file(path)
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None or key in ("help", "config"):
            raise ParameterError(f"{path}: unknown key {key!r}")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            try:
                defaults[key] = action.type(raw)
            except (TypeError, ValueError) as exc:
                raise ParameterError(f"{path}: bad value for {key!r}: {raw!r}") from exc
        else:
            defaults[key] = raw
        if action.choices is not None and defaults[key] not in action.choices:
            raise ParameterError(f"{path}: {key} must be one of {list(action.choices)}")
        action.required = False
    parser.set_defaults(**defaults)


def _config_path(argv) -> str | None:
    for i, arg in enumerate(argv):
        if arg == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if arg.startswith("--config="):
            return arg.split("=", 1)[1]
    return None


def _seed(ns) -> int:
    env = os.environ.get(SEED_ENV)
    seed = ns.seed
    if env is not None and env.strip():
        try:
            seed = int(env)
        except ValueError as exc:
            raise ParameterError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    if not 0 <= seed < 2**64:
        raise ParameterError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def parse_schedule(text: str) -> tuple[Shift, ...]:
    """``"10:mean_shift:0.5, 20:feature_dropout:0.3"`` -> shifts; ``none`` for empty."""
    text = text.strip()
    if text.lower() in ("", "none"):
        return ()
    out = []
    for item in text.split(","):
        parts = [p.strip() for p in item.split(":")]
        if len(parts) != 3:
            raise ParameterError(f"bad schedule item {item!r}; expected start:kind:magnitude")
        try:
            out.append(Shift(int(parts[0]), parts[1], float(parts[2])))
        except ValueError as exc:
            raise ParameterError(f"bad schedule item {item!r}") from exc
    return tuple(out)


def format_schedule(schedule) -> str:
    return ", ".join(f"{s.start}:{s.kind}:{s.magnitude:g}" for s in schedule) or "none"


# ---------------------------------------------------------------------------
# shared option groups

_SIM_DEFAULT = SimConfig()
_SCORE_DEFAULT = ScoringConfig()


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="key = value file providing defaults")
    p.add_argument("--seed", type=int, default=0, help=f"random seed (overridden by ${SEED_ENV})")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _add_scoring(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("scoring / merging")
    g.add_argument("--k", "--top-k", dest="k", type=int, default=_SCORE_DEFAULT.top_k,
                   help="number of checkpoints to merge")
    g.add_argument("--lambda", dest="lam", type=float, default=_SCORE_DEFAULT.lam,
                   help="ridge regulariser of the leverage scores")
    g.add_argument("--divisor-mode", choices=("row_count", "fixed"),
                   default=_SCORE_DEFAULT.divisor_mode,
                   help="covariance divisor: number of rows, or the fixed K")
    g.add_argument("--beta", type=float, default=None,
                   help="EMA decay in (0, 1); required by merge --method ema, "
                   "simulations use 0.99 when unset")
    g.add_argument("--jitter", type=float, default=_SCORE_DEFAULT.kernel_jitter,
                   help="diagonal jitter added to the synergy kernel")
    g.add_argument("--clamp-negative", action="store_true",
                   help="zero negative synergy weights and renormalise")
    g.add_argument("--tie-break", choices=("highest_score_sign", "zero"),
                   default="highest_score_sign", help="sign election on even splits")
    g.add_argument("--renormalize", action="store_true",
                   help="rescale surviving weights to sum to 1 per coordinate")


def _add_sim(p: argparse.ArgumentParser) -> None:
    s = _SIM_DEFAULT
    g = p.add_argument_group("simulation")
    g.add_argument("--d-raw", type=int, default=s.stream.d_raw, help="raw input dimension")
    g.add_argument("--d", type=int, default=s.d, help="feature dimension")
    g.add_argument("--d-prime", type=int, default=s.d_prime, help="fingerprint dimension")
    g.add_argument("--batch-size", type=int, default=s.stream.batch_size, help="samples per batch")
    g.add_argument("--n-steps", type=int, default=s.stream.n_steps, help="number of stream batches")
    g.add_argument("--label-noise-sigma", type=float, default=s.stream.label_noise_sigma,
                   help="label noise standard deviation")
    g.add_argument("--shift-schedule", default=format_schedule(default_schedule()),
                   help="comma-separated start:kind:magnitude items, or 'none'")
    g.add_argument("--lr", type=float, default=s.lr, help="head learning rate")
    g.add_argument("--n-grad-steps", type=int, default=s.n_grad_steps,
                   help="gradient steps per batch")
    g.add_argument("--head-lambda", type=float, default=s.head_lambda,
                   help="ridge penalty of the head objective")
    g.add_argument("--label-mode", choices=("noisy_truth", "pseudo_label"), default=s.label_mode,
                   help="train on noisy ground truth or on the merged model's own predictions")
    g.add_argument("--evaluate", choices=("merged", "latest"), default=s.evaluate,
                   help="which model the reported loss is measured on")
    g.add_argument("--no-anchor-latest", dest="anchor_latest", action="store_false",
                   help="do not reserve a merge slot for the newest checkpoint")


def _scoring_config(ns, k=None) -> ScoringConfig:
    return ScoringConfig(
        lam=ns.lam,
        divisor_mode=ns.divisor_mode,
        top_k=ns.k if k is None else k,
        ema_beta=0.99 if ns.beta is None else ns.beta,
        kernel_jitter=ns.jitter,
        clamp_negative_mos=ns.clamp_negative,
    )


def _sim_config(ns, seed: int) -> SimConfig:
    stream = StreamConfig(
        d_raw=ns.d_raw,
        batch_size=ns.batch_size,
        n_steps=ns.n_steps,
        shift_schedule=parse_schedule(ns.shift_schedule),
        label_noise_sigma=ns.label_noise_sigma,
        seed=seed,
    )
    return SimConfig(
        stream=stream,
        d=ns.d,
        d_prime=ns.d_prime,
        model_seed=seed,
        projection_seed=seed,
        head_lambda=ns.head_lambda,
        lr=ns.lr,
        n_grad_steps=ns.n_grad_steps,
        label_mode=ns.label_mode,
        evaluate=ns.evaluate,
        anchor_latest=ns.anchor_latest,
    )


# ---------------------------------------------------------------------------
# commands


def cmd_fingerprint(ns) -> int:
    seed = _seed(ns)
    src = checkpoint_load(ns.features)
    if "features" not in src.entries:
        raise FormatError(f"{ns.features}: no tensor named 'features'")
    pooled = pool_features(src["features"])
    proj = make_projection(pooled.size, ns.d_prime, seed)
    step = src.step if ns.step is None else ns.step
    fp = compute_fingerprint(pooled, proj, step)
    checkpoint_save(Checkpoint(step, {"fingerprint": Tensor((fp.values.size,), fp.values)}), ns.out)
    norm = float(np.linalg.norm(fp.values.astype(np.float64)))
    _emit({"step": step, "d": proj.d, "d_prime": proj.d_prime, "seed": seed, "norm": norm})
    return EXIT_OK


def _plan_line(method, steps, weights, raw_scores=None) -> dict:
    return {
        "method": method,
        "steps": [int(s) for s in steps],
        "raw_scores": None if raw_scores is None else [float(s) for s in raw_scores],
        "weights": [float(w) for w in weights],
        "weight_sum": math.fsum(weights),
    }


def cmd_merge(ns) -> int:
    cb = codebook_load(ns.codebook)
    entries = cb.snapshot()
    if not entries:
        raise ParameterError(f"{ns.codebook}: codebook is empty")
    if ns.k < 1:
        raise ParameterError("--k must be >= 1")
    if ns.method == "ema":
        if ns.beta is None:
            raise ParameterError("--method ema requires --beta")
        if not 0 < ns.beta < 1:
            raise ParameterError("--beta must lie in (0, 1)")
    cfg = _scoring_config(ns)
    steps = [e.step for e in entries]
    by_step = {e.step: e for e in entries}

    if ns.method in ("codemerge", "average"):
        scores = ridge_leverage_scores(fingerprint_matrix(entries), cfg)
        plan = make_merge_plan(scores, steps, ns.k)
        ckpts = [by_step[s].resolve() for s in plan.selected_steps]
        if ns.method == "codemerge":
            policy = SignPolicy(ns.tie_break, ns.renormalize)
            merged = sign_consistent_merge(ckpts, plan.weights, policy)
            line = _plan_line(ns.method, plan.selected_steps, plan.weights, plan.raw_scores)
        else:
            w = [1.0 / len(ckpts)] * len(ckpts)
            merged = weighted_average_merge(ckpts, w)
            line = _plan_line(ns.method, plan.selected_steps, w, plan.raw_scores)
    elif ns.method == "ema":
        # entries are treated as consecutive EMA steps 0..n-1
        w = ema_weights(len(entries) - 1, ns.beta)
        ckpts = [e.resolve() for e in entries]
        merged = weighted_average_merge(ckpts, w)
        line = _plan_line(ns.method, steps, w)
    else:
        # no model is available to run, so flattened weights stand in for model
        # outputs and stored fingerprints for features
        buf = entries[-ns.k :]
        ckpts = [e.resolve() for e in buf]
        if len(ckpts) == 1:
            w = np.array([1.0])
        else:
            w = mos_weights(
                [flatten(c) for c in ckpts],
                [e.fingerprint.values for e in buf],
                ns.jitter,
                ns.clamp_negative,
            )
        merged = weighted_average_merge(ckpts, w)
        line = _plan_line(ns.method, [e.step for e in buf], w)
    checkpoint_save(merged, ns.out)
    _emit(line)
    return EXIT_OK


def cmd_simulate(ns) -> int:
    seed = _seed(ns)
    cfg = _sim_config(ns, seed)
    trace = run_method(cfg, ns.method, _scoring_config(ns), SignPolicy(ns.tie_break, ns.renormalize))
    trace.write(ns.trace_out)
    if ns.codebook_out:
        codebook_save(trace.codebook, ns.codebook_out)
    _emit({
        "method": ns.method,
        "seed": seed,
        "steps": len(trace.records),
        "mean_post_shift_loss": trace.mean_post_shift_loss(),
        "final_post_merge_loss": trace.records[-1].post_merge_loss,
    })
    return EXIT_OK


def _quadratic_barriers(seed: int, trials: int, grid: int) -> list[float]:
    rng = np.random.default_rng([seed, 0x9A])
    out = []
    for _ in range(trials):
        dim = int(rng.integers(2, 12))
        A = rng.normal(size=(dim, dim))
        H = A @ A.T + 0.1 * np.eye(dim)
        center = rng.normal(size=dim)

        def loss(c: Checkpoint, H=H, center=center) -> float:
            v = flatten(c) - center
            return float(0.5 * v @ H @ v)

        a = Checkpoint.from_arrays(0, {"theta": rng.normal(size=dim)})
        b = Checkpoint.from_arrays(1, {"theta": rng.normal(size=dim)})
        out.append(lmc_barrier(a, b, loss, grid).max_deviation)
    return out


def cmd_lmc_check(ns) -> int:
    seed = _seed(ns)
    if ns.mode == "quadratic":
        devs = _quadratic_barriers(seed, ns.trials, ns.grid_points)
        barrier = max(devs)
        limit = 1e-9 if ns.max_barrier is None else ns.max_barrier
        _emit({"mode": "quadratic", "barrier": barrier, "trials": ns.trials,
               "grid_points": ns.grid_points, "limit": limit})
        return EXIT_OK if barrier <= limit else EXIT_TOLERANCE
    cfg = _sim_config(ns, seed)
    rep = sgd_pair_barrier(cfg, ns.grid_points)
    _emit({"mode": "sgd", "barrier": rep.max_deviation, "grid_points": ns.grid_points,
           "endpoint_losses": [float(rep.losses[0]), float(rep.losses[-1])],
           "curve": [float(v) for v in rep.losses]})
    if not math.isfinite(rep.max_deviation):
        return EXIT_TOLERANCE
    if ns.max_barrier is not None and rep.max_deviation > ns.max_barrier:
        return EXIT_TOLERANCE
    return EXIT_OK


def cmd_correlate(ns) -> int:
    if ns.codebook:
        cb = codebook_load(ns.codebook)
    else:
        seed = _seed(ns)
        trace = run_method(_sim_config(ns, seed), "codemerge", _scoring_config(ns),
                           SignPolicy(ns.tie_break, ns.renormalize))
        cb = trace.codebook
    rep = fingerprint_weight_correlation(cb)
    _emit(rep.summary())
    if rep.degenerate:
        log.warning("zero-variance distances; correlations reported as 0")
    ok = rep.pearson_r >= ns.min_pearson and rep.kendall_tau >= ns.min_kendall
    return EXIT_OK if ok else EXIT_TOLERANCE


def cmd_hessian_check(ns) -> int:
    seed = _seed(ns)
    rng = np.random.default_rng([seed, 0x4E])
    worst = 0.0
    for _ in range(ns.trials):
        n = ns.n or int(rng.integers(1, 65))
        dp = ns.d_prime or int(rng.integers(1, 65))
        lam = ns.lam if ns.lam is not None else float(10 ** rng.uniform(-2, 1))
        Z = rng.normal(size=(n, dp))
        worst = max(worst, hessian_rls_check(Z, lam))
    _emit({"max_rel_err": worst, "trials": ns.trials, "tol": ns.tol})
    return EXIT_OK if worst <= ns.tol else EXIT_TOLERANCE


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="codemerge", description=__doc__, formatter_class=_Formatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fingerprint", formatter_class=_Formatter,
                       help="project pooled features to a fingerprint")
    _add_common(p)
    p.add_argument("--features", required=True, help="CMCK file with a tensor named 'features'")
    p.add_argument("--d-prime", type=int, required=True, help="fingerprint dimension")
    p.add_argument("--step", type=int, default=None, help="fingerprint step (default: input step)")
    p.add_argument("--out", required=True, help="output CMCK file")
    p.set_defaults(func=cmd_fingerprint)

    p = sub.add_parser("merge", formatter_class=_Formatter,
                       help="score a codebook and merge its checkpoints",
                       description="average: uniform weights over the top-k leverage selection; "
                       "mos: last k entries, flattened weights as outputs and fingerprints as "
                       "features; ema: all entries as steps 0..n-1.")
    _add_common(p)
    p.add_argument("--codebook", required=True, help="CMIX index file")
    p.add_argument("--method", choices=("codemerge", "ema", "mos", "average"), default="codemerge",
                   help="weighting scheme")
    p.add_argument("--out", required=True, help="merged CMCK file")
    _add_scoring(p)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("simulate", formatter_class=_Formatter, help="run the toy adaptation loop")
    _add_common(p)
    p.add_argument("--method", choices=METHODS, default="codemerge", help="adaptation method")
    p.add_argument("--trace-out", required=True, help="line-delimited JSON trace")
    p.add_argument("--codebook-out", default=None, help="also save the final codebook (CMIX)")
    _add_scoring(p)
    _add_sim(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("lmc-check", formatter_class=_Formatter,
                       help="loss barrier along a linear interpolation path")
    _add_common(p)
    p.add_argument("--mode", choices=("sgd", "quadratic"), default="sgd",
                   help="fine-tuned toy heads, or random convex quadratics")
    p.add_argument("--grid-points", type=int, default=11, help="points on the interpolation path")
    p.add_argument("--trials", type=int, default=50, help="quadratic mode: random pairs")
    p.add_argument("--max-barrier", type=float, default=None,
                   help="fail (exit 5) above this; quadratic mode defaults to 1e-9")
    _add_sim(p)
    p.set_defaults(func=cmd_lmc_check)

    p = sub.add_parser("correlate", formatter_class=_Formatter,
                       help="fingerprint vs weight distance correlation")
    _add_common(p)
    p.add_argument("--codebook", default=None, help="CMIX index; default runs a fresh simulation")
    p.add_argument("--min-pearson", type=float, default=0.5, help="fail (exit 5) below this r")
    p.add_argument("--min-kendall", type=float, default=0.4, help="fail (exit 5) below this tau")
    _add_scoring(p)
    _add_sim(p)
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("hessian-check", formatter_class=_Formatter,
                       help="compare z^T H^-1 z with half the leverage score")
    _add_common(p)
    p.add_argument("--trials", type=int, default=100, help="random instances")
    p.add_argument("--n", type=int, default=None, help="rows (default: random in 1..64)")
    p.add_argument("--d-prime", type=int, default=None, help="columns (default: random in 1..64)")
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="regulariser (default: log-uniform in [0.01, 10])")
    p.add_argument("--tol", type=float, default=1e-8, help="fail (exit 5) above this error")
    p.set_defaults(func=cmd_hessian_check)
    return parser


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, MissingReferenceError):
        return EXIT_MISSING_REF
    if isinstance(exc, (FormatError, StorageError)):
        return EXIT_FORMAT
    return EXIT_PARAMETER


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        config = _config_path(argv)
        if config is not None:
            subparsers = parser._subparsers._group_actions[0].choices
            command = next((a for a in argv if a in subparsers), None)
            if command is not None:
                _apply_config(subparsers[command], config)
        ns = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        return ns.func(ns)
    except CodeMergeError as exc:
        print(f"codemerge: error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
