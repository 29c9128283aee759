"""Command-line entry point.

Exit codes: 0 success, 1 usage or input error, 2 program validation
failure, 3 proposer backend failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_BACKEND = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _layout(arg: str):
    from .env import BUILTIN_LAYOUTS, LayoutError, load_layout

    try:
        if arg in BUILTIN_LAYOUTS:
            return load_layout(arg)
        path = Path(arg)
        if path.is_file():
            return load_layout(path.read_text(), name=path.stem)
    except LayoutError as exc:
        raise UsageError(f"bad layout {arg!r}: {exc}") from None
    raise UsageError(f"unknown layout {arg!r}; built-ins: {', '.join(sorted(BUILTIN_LAYOUTS))}")


def _read(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# subcommands


def cmd_search_run(args) -> int:
    from .search import OutputExists, SearchConfig, run_search

    try:
        config = SearchConfig.load(args.config)
    except OSError as exc:
        raise UsageError(f"cannot read {args.config}: {exc.strerror}") from None
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad config {args.config}: {exc}") from None
    if args.output:
        config.output = str(Path(args.output).resolve())
    try:
        res = run_search(config, force=args.force, jobs=args.jobs)
    except OutputExists as exc:
        raise UsageError(str(exc)) from None
    print((res.out_dir / "report.txt").read_text(), end="")
    print(f"best: {res.best.id} J={res.best.J_hat:.4f}  archive: {res.out_dir / 'archive.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .diagnostics import diagnose
    from .dsl import check
    from .mappo import TrainConfig, evaluate_sparse, train_candidate

    layout = _layout(args.layout)
    program = None
    if args.program:
        report, program = check(_read(args.program))
        if not report.valid:
            print(f"{args.program}: {report.repair_trace}", file=sys.stderr)
            return EXIT_INVALID
    kw = {"seed": args.seed}
    if args.iterations:
        kw["iterations"] = args.iterations
    cfg = TrainConfig(**kw)
    res = train_candidate(layout, program, cfg, curve_path=args.curve)
    ev = evaluate_sparse(res.policy, layout, args.episodes, seed=args.seed, program=program, gamma=cfg.gamma)
    if args.trace:
        from .diagnostics import write_trace

        write_trace(args.trace, ev.traces)
    diag = diagnose(ev.traces, ev.J_hat, cfg.gamma)
    out = {"layout": layout.name, "env_steps": res.env_steps, **ev.summary(), "diagnostics": diag.to_dict()}
    out["diagnostics"].pop("per_episode")
    if args.json:
        print(_dump(out))
    else:
        print(f"layout        {layout.name}")
        print(f"env steps     {res.env_steps}")
        print(f"J (disc.)     {ev.J_hat:.3f} ± {ev.J_std:.3f}")
        print(f"return        {ev.J_undiscounted:.1f} ± {ev.J_undiscounted_std:.1f}")
        print(f"deliveries    {ev.deliveries_mean:.2f}")
        print(f"invalid       {ev.invalid_deliveries_mean:.2f}")
        print(f"delta/rho/nmi {diag.delta:.4f} / {diag.rho:.4f} / {diag.nmi:.4f}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    from .diagnostics import diagnose, read_trace
    from .mappo import discounted_return

    try:
        traces = read_trace(args.trace)
    except OSError as exc:
        raise UsageError(f"cannot read {args.trace}: {exc.strerror}") from None
    except (ValueError, KeyError) as exc:
        raise UsageError(f"bad trace {args.trace}: {exc}") from None
    if not traces:
        raise UsageError(f"{args.trace} holds no steps")
    J = float(np.mean([discounted_return(t.sparse, args.gamma) for t in traces]))
    d = diagnose(traces, J, args.gamma, args.eps).to_dict()
    if not args.per_episode:
        d.pop("per_episode")
    print(_dump(d))
    return EXIT_OK


def cmd_rollout(args) -> int:
    from .env import Overcooked
    from .mappo import random_policy

    layout = _layout(args.layout)
    env = Overcooked(layout)
    rng = np.random.default_rng(args.seed)
    act = random_policy(rng, env.n_agents)
    steps = min(args.steps or env.horizon, env.horizon)
    s = env.reset(args.seed)
    total, deliveries = 0.0, 0
    if args.render:
        print(env.render(s) + "\n")
    for t in range(steps):
        a = act(None)
        out = env.step(s, a)
        s = out.next_state
        total += out.sparse_reward
        deliveries += int(sum(out.features["delivery"]))
        if args.render:
            print(f"actions={[int(x) for x in a]} reward={out.sparse_reward:g}\n{env.render(s)}\n")
    print(_dump({"layout": layout.name, "steps": steps, "return": total, "deliveries": deliveries}))
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import render_table, report_data
    from .search import load_archive

    try:
        _, records = load_archive(args.archive)
    except OSError as exc:
        raise UsageError(f"cannot read archive {args.archive}: {exc.strerror}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"bad archive {args.archive}: {exc}") from None
    if args.json:
        print(_dump(report_data(records)))
    else:
        print(render_table(records), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rewardsearch", description="Reward-program search for cooperative MARL.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("search", help="run a reward search")
    ssub = s.add_subparsers(dest="action", required=True, parser_class=_Parser)
    run = ssub.add_parser("run", help="execute a search from a JSON run config")
    run.add_argument("--config", required=True)
    run.add_argument("--output", help="override the config's output directory")
    run.add_argument("--force", action="store_true", help="overwrite an existing output directory")
    run.add_argument("--jobs", type=int, default=1, help="candidates trained in parallel")
    run.set_defaults(func=cmd_search_run)

    e = sub.add_parser("eval", help="train and evaluate one program")
    e.add_argument("--program", help="reward program (.rwd); omit for the no-shaping baseline")
    e.add_argument("--layout", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--episodes", type=int, default=20)
    e.add_argument("--iterations", type=int, help="override the training iteration count")
    e.add_argument("--curve", help="write the learning curve (NDJSON) here")
    e.add_argument("--trace", help="write the evaluation trace (NDJSON) here")
    e.add_argument("--json", action="store_true")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("diagnose", help="diagnostics of a rollout trace")
    d.add_argument("--trace", required=True)
    d.add_argument("--gamma", type=float, default=0.99)
    d.add_argument("--eps", type=float, default=1e-8)
    d.add_argument("--per-episode", action="store_true")
    d.set_defaults(func=cmd_diagnose)

    r = sub.add_parser("rollout", help="play an episode and optionally print frames")
    r.add_argument("--layout", required=True)
    r.add_argument("--policy", choices=["random"], default="random")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--steps", type=int)
    r.add_argument("--render", action="store_true")
    r.set_defaults(func=cmd_rollout)

    rep = sub.add_parser("report", help="summary table of a search archive")
    rep.add_argument("--archive", required=True, help="archive.json or its directory")
    rep.add_argument("--json", action="store_true")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    from .proposer import ProposerError
    from .search import NoValidCandidates

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NoValidCandidates as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ProposerError as exc:
        print(f"backend error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
