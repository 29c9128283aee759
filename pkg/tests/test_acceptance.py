"""Acceptance criteria, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line with its tolerance and the
measured quantity, then asserts. Run directly (``python tests/test_acceptance.py``)
to get just the nine lines.
"""

from __future__ import annotations

import json
import random
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import (  # noqa: E402
    central_difference,
    discounted_sum,
    gae_double_sum,
    imbalance,
    mean_pairwise,
    nmi_joint_table,
    rel_err,
    textbook_pearson,
)
from rewardsearch.diagnostics import (  # noqa: E402
    RolloutTrace,
    action_coupling,
    diagnose,
    incentive_alignment,
    payoff_imbalance,
    shaping_return,
)
from rewardsearch.dsl import DEFAULT_CLIP, Verdict, check, compile_program, probe_features  # noqa: E402
from rewardsearch.env import (  # noqa: E402
    BUILTIN_LAYOUTS,
    COOK_TIME,
    DELIVERY_REWARD,
    FEATURE_SCHEMA,
    POT_CAPACITY,
    Cell,
    Overcooked,
)
from rewardsearch.mappo import (  # noqa: E402
    TrainConfig,
    actor_loss,
    compute_gae,
    critic_loss,
    evaluate_sparse,
    log_softmax,
    train_candidate,
)
from rewardsearch.nn import MLP  # noqa: E402
from rewardsearch.proposer import builtin_fixture_dir  # noqa: E402
from rewardsearch.search import (  # noqa: E402
    CandidateRecord,
    SearchConfig,
    candidate_seed,
    load_archive,
    run_search,
    select_best,
    strip_timing,
)

CORPUS = Path(__file__).parent / "corpus"
MASTER_SEEDS = (0, 1, 2, 3, 4)
BUDGET = 33_600
RESULT_LINES: list[str] = []
_SEARCHES: dict = {}
_TMP: list[Path] = []


def _line(n: int, title: str, ok: bool, detail: str) -> str:
    return f"{'PASS' if ok else 'FAIL'}  [{n}] {title}: {detail}"


def _search(layout: str, seed: int, tag: str = "a"):
    key = (layout, seed, tag)
    if not _TMP:
        _TMP.append(Path(tempfile.mkdtemp(prefix="acceptance-")))
    if key not in _SEARCHES:
        cfg = SearchConfig(
            layout=layout,
            seed=seed,
            backend={"kind": "scripted", "fixtures": f"builtin:{layout}"},
            output=str(_TMP[0] / f"{layout}-s{seed}-{tag}"),
        )
        _SEARCHES[key] = run_search(cfg)
    return _SEARCHES[key]


# ---------------------------------------------------------------------------
# 1


def authored_traces(count=100):
    """Small hand-patterned traces: ties, constant streams, mirrored agents, skewed actions."""
    out = []
    for t in range(count):
        rng = np.random.default_rng(1000 + t)
        n, T = 2 + t % 3, 3 + t % 10
        kind = t % 5
        if kind == 0:
            sh = rng.uniform(-1, 1, (T, n))
        elif kind == 1:
            sh = rng.integers(-2, 3, (T, n)).astype(float)
        elif kind == 2:
            sh = rng.uniform(0, 1, (T, n))
            sh[:, 0] = 0.25  # one constant stream
        elif kind == 3:
            col = rng.normal(size=(T, 1))
            sh = np.hstack([m * col for m in (1.0, -1.0, 2.0, -0.5)[:n]])
        else:
            sh = np.zeros((T, n))
            sh[rng.integers(0, T), rng.integers(0, n)] = 1.0
        if t % 4 == 0:
            acts = np.repeat(rng.integers(0, 6, (T, 1)), n, axis=1)
        elif t % 4 == 1:
            acts = np.zeros((T, n), dtype=int)
            acts[:, 1:] = rng.integers(0, 6, (T, n - 1))
        else:
            acts = rng.integers(0, 6, (T, n))
        out.append(RolloutTrace(sh, acts, np.zeros(T)))
    return out


def criterion_1():
    tol, gamma, eps = 1e-9, 0.99, 1e-8
    t0 = time.perf_counter()
    worst = 0.0
    for tr in authored_traces():
        cols = [list(tr.shaping[:, i]) for i in range(tr.n_agents)]
        S = [discounted_sum(c, gamma) for c in cols]
        ref_delta = imbalance(S, eps)
        ref_rho = mean_pairwise(cols, textbook_pearson)
        ref_nmi = mean_pairwise([[int(a) for a in tr.actions[:, i]] for i in range(tr.n_agents)], nmi_joint_table)
        d = diagnose([tr], 0.0, gamma, eps)
        worst = max(worst, abs(d.delta - ref_delta), abs(d.rho - ref_rho), abs(d.nmi - ref_nmi))
    dt = time.perf_counter() - t0
    ok = worst <= tol and dt < 10
    return ok, _line(1, "diagnostics oracle equivalence", ok, f"100 traces, max |err| {worst:.2e} (tol 1e-9), {dt:.2f}s (limit 10s)")


# ---------------------------------------------------------------------------
# 2


def criterion_2():
    tol = 1e-12
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    in_range = True
    perm_err = scale_rho = scale_delta = scale_delta_eps0 = 0.0
    for _ in range(10_000):
        n, T = int(rng.integers(2, 4)), int(rng.integers(2, 40))
        sh = rng.uniform(-1, 1, (T, n)) * rng.choice([0.1, 1.0])
        if rng.random() < 0.1:
            sh[:, int(rng.integers(0, n))] = float(rng.normal())
        acts = rng.integers(0, int(rng.integers(1, 7)), (T, n))
        tr = RolloutTrace(sh, acts, np.zeros(T))
        S = shaping_return(tr)[0]
        delta, rho, nmi = payoff_imbalance(S), incentive_alignment(tr), action_coupling(tr)
        in_range &= 0.0 <= delta <= 1.0 and -1.0 <= rho <= 1.0 and 0.0 <= nmi <= 1.0

        p = rng.permutation(n)
        sw = tr.swapped(p)
        perm_err = max(
            perm_err,
            abs(payoff_imbalance(shaping_return(sw)[0]) - delta),
            abs(incentive_alignment(sw) - rho),
            abs(action_coupling(sw) - nmi),
        )

        c = float(np.exp(rng.uniform(np.log(0.1), np.log(10.0))))
        scaled = RolloutTrace(c * sh, acts, np.zeros(T))
        Sc = shaping_return(scaled)[0]
        scale_delta = max(scale_delta, abs(payoff_imbalance(Sc) - delta))
        scale_delta_eps0 = max(scale_delta_eps0, abs(payoff_imbalance(Sc, 0.0) - payoff_imbalance(S, 0.0)) if np.abs(S).sum() else 0.0)
        scale_rho = max(scale_rho, abs(incentive_alignment(scaled) - rho))
    dt = time.perf_counter() - t0
    ok = in_range and perm_err <= tol and scale_delta <= tol and scale_rho <= tol and dt < 60
    detail = (
        f"10^4 traces, ranges {'ok' if in_range else 'VIOLATED'}, permutation max |diff| {perm_err:.1e}, "
        f"scaling max |diff| delta {scale_delta:.1e} rho {scale_rho:.1e} (tol 1e-12; delta at eps=0: {scale_delta_eps0:.1e}), "
        f"{dt:.1f}s (limit 60s)"
    )
    return ok, _line(2, "range/symmetry fuzz", ok, detail)


# ---------------------------------------------------------------------------
# 3


def _jitter(net, rng):
    for k, v in net.params.items():
        if k.startswith("b"):
            v += rng.normal(0, 0.1, v.shape)
    return net


def _fd_worst(net, loss_fn, grads, rng, coords=10):
    worst = 0.0
    for _ in range(coords):
        key = str(rng.choice(sorted(net.params)))
        P = net.params[key]
        idx = tuple(int(rng.integers(0, s)) for s in P.shape)
        num = central_difference(loss_fn, P, idx)
        worst = max(worst, rel_err(grads[key][idx], num, floor=1e-6))
    return worst


def criterion_3():
    rng = np.random.default_rng(3)
    actor_worst = critic_worst = 0.0
    for _ in range(20):
        d, N = int(rng.integers(3, 12)), int(rng.integers(8, 40))
        net = _jitter(MLP((d, *rng.integers(4, 24, 2), 6), rng, out_gain=float(rng.uniform(0.5, 2))), rng)
        obs, actions = rng.normal(size=(N, d)), rng.integers(0, 6, N)
        old = log_softmax(net(obs))[np.arange(N), actions] + rng.normal(0, 0.3, N)
        args = (obs, actions, old, rng.normal(size=N), 0.2, 0.01)
        _, grads, _ = actor_loss(net, *args)
        actor_worst = max(actor_worst, _fd_worst(net, lambda: actor_loss(net, *args, grad=False)[0], grads, rng))

        cnet = _jitter(MLP((d, *rng.integers(4, 24, 2), 1), rng), rng)
        x, y = rng.normal(size=(N, d)), rng.normal(size=N)
        _, cgrads = critic_loss(cnet, x, y)
        critic_worst = max(critic_worst, _fd_worst(cnet, lambda: critic_loss(cnet, x, y, grad=False)[0], cgrads, rng))

    gae_worst = 0.0
    for _ in range(200):
        T = int(rng.integers(1, 60))
        r, v = rng.normal(size=T), rng.normal(size=T)
        done = (rng.random(T) < 0.1).astype(float)
        last = float(rng.normal())
        adv, _ = compute_gae(r, v, done, 0.99, 0.95, last)
        ref = gae_double_sum(list(r), list(v), list(done), 0.99, 0.95, last)
        gae_worst = max(gae_worst, float(np.max(np.abs(adv - np.asarray(ref)))))
    ok = actor_worst < 1e-4 and critic_worst < 1e-4 and gae_worst <= 1e-10
    detail = (
        f"20 nets x 10 coords, max rel err actor {actor_worst:.1e} critic {critic_worst:.1e} (tol 1e-4); "
        f"GAE max |err| {gae_worst:.1e} (tol 1e-10)"
    )
    return ok, _line(3, "gradient and GAE check", ok, detail)


# ---------------------------------------------------------------------------
# 4

_LABELS = {"parse": Verdict.PARSE_ERROR, "schema": Verdict.SCHEMA_ERROR, "bound": Verdict.BOUND_ERROR}


def criterion_4():
    files = sorted(CORPUS.glob("*/*.rwd"))
    wrong = []
    valid = []
    for p in files:
        expected = Verdict.VALID if p.parent.name == "valid" else _LABELS[p.stem.split("_")[0]]
        report, prog = check(p.read_text())
        if report.verdict != expected:
            wrong.append(p.name)
        elif prog is not None:
            valid.append(prog)

    rng = np.random.default_rng(4)
    vectors = [{}, {n: (0.0, 0.0) for n in FEATURE_SCHEMA.per_agent_names} | {n: 0.0 for n in FEATURE_SCHEMA.global_names}]
    while len(vectors) < 10_000:
        vectors.append(probe_features(FEATURE_SCHEMA, rng, float(rng.choice([0.0, 0.2, 0.6, 1.0]))))
    sparse = rng.choice([0.0, DELIVERY_REWARD], len(vectors))
    worst, identical = 0.0, True
    for prog in valid:
        for x, rs in zip(vectors, sparse):
            a, b = prog(x, rs), prog(x, rs)
            identical &= a.tobytes() == b.tobytes()
            worst = max(worst, float(np.max(np.abs(a))) if np.all(np.isfinite(a)) else np.inf)
    ok = len(files) == 40 and not wrong and worst <= DEFAULT_CLIP and identical
    detail = (
        f"{len(files)} programs, {len(wrong)} misclassified{' ' + str(wrong) if wrong else ''}; "
        f"{len(valid)} valid x 10^4 vectors, max |r| {worst:.3g} (C = {DEFAULT_CLIP:g}), "
        f"double evaluation {'bit-identical' if identical else 'DIFFERS'}"
    )
    return ok, _line(4, "validity envelope", ok, detail)


# ---------------------------------------------------------------------------
# 5


def _rec(g, k, J, verdict="Valid", diag=None):
    return CandidateRecord(g, k, "", "", "", verdict, J_hat=J, diagnostics=diag)


def criterion_5():
    stub = select_best([_rec(1, k + 1, J) for k, J in enumerate([3.0, 1.0, 4.0, 1.0])]).id == "g1k3"
    tie = select_best([_rec(2, 1, 4.0), _rec(1, 4, 4.0), _rec(1, 2, 1.0)]).id == "g1k4"
    rng = random.Random(5)
    changed = 0
    trials = 1000
    for _ in range(trials):
        n = rng.randint(1, 9)
        recs = []
        for i in range(n):
            verdict = rng.choice(["Valid"] * 4 + ["ParseError", "SchemaError"])
            J = float(rng.choice([0.0, 1.0, 2.0, rng.uniform(-3, 30)])) if verdict == "Valid" else None
            recs.append(_rec(1 + i // 4, 1 + i % 4, J, verdict, {"J_hat": J, "delta": 0.3, "rho": 0.2, "nmi": 0.1}))
        if not any(r.scored and r.verdict == "Valid" for r in recs):
            continue
        best = select_best(recs).id
        scrambled = [
            replace(
                r,
                diagnostics={
                    "J_hat": r.J_hat,
                    "delta": rng.random(),
                    "rho": rng.uniform(-1, 1),
                    "nmi": rng.random(),
                    "shaping_returns": [rng.uniform(-50, 50), rng.uniform(-50, 50)],
                },
            )
            for r in recs
        ]
        rng.shuffle(scrambled)
        changed += select_best(scrambled).id != best
    ok = stub and tie and changed == 0
    detail = (
        f"argmax stub {'ok' if stub else 'WRONG'}, tie-break {'ok' if tie else 'WRONG'}, "
        f"{changed}/{trials} archives changed winner after randomizing diagnostics (tol 0)"
    )
    return ok, _line(5, "objective-grounded selection", ok, detail)


# ---------------------------------------------------------------------------
# 6


def _archive_bytes(out_dir) -> bytes:
    doc, _ = load_archive(out_dir)
    return (json.dumps(strip_timing(doc), indent=2) + "\n").encode()


def criterion_6():
    a = _search("cramped_room", 0, "a")
    b = _search("cramped_room", 0, "b")
    # output paths differ by construction; everything else must match
    da, db = (json.loads(_archive_bytes(r.out_dir)) for r in (a, b))
    da["config"].pop("output")
    db["config"].pop("output")
    same = json.dumps(da, indent=2).encode() == json.dumps(db, indent=2).encode()
    same_files = all(
        (a.out_dir / rel).read_bytes() == (b.out_dir / rel).read_bytes()
        for rel in ["lineage.json", "prompts/gen1.txt", "prompts/gen2.txt"]
        + [r.curve_path for r in a.records if r.scored]
        + [r.trace_path for r in a.records if r.scored]
    )
    steps = sorted({r.env_steps for r in a.records + b.records if r.scored})
    ok = same and same_files and steps == [BUDGET]
    detail = (
        f"archives {'byte-identical' if same else 'DIFFER'} excluding timing, artifacts "
        f"{'identical' if same_files else 'DIFFER'}; env steps per candidate {steps} (required {BUDGET})"
    )
    return ok, _line(6, "budget and determinism", ok, detail)


# ---------------------------------------------------------------------------
# 7


def criterion_7():
    wins, rows = 0, []
    for seed in MASTER_SEEDS:
        res = _search("cramped_room", seed, "a")
        base = next(r for r in res.records if r.is_baseline)
        gen2 = select_best([r for r in res.records if r.generation == 2])
        win = gen2.J_undiscounted >= base.J_undiscounted
        wins += win
        rows.append(f"s{seed}:{base.J_undiscounted:.1f}->{gen2.J_undiscounted:.1f}({gen2.id})")
    ok = wins >= 4
    return ok, _line(7, "cramped room baseline -> Gen-2", ok, f"Gen-2 >= baseline on {wins}/5 seeds (need 4); " + " ".join(rows))


# ---------------------------------------------------------------------------
# 8


def criterion_8():
    layout = "coordination_ring"
    known_good = compile_program((builtin_fixture_dir(layout) / "gen2" / "cand1.rwd").read_text())
    wins, low_base, rows = 0, True, []
    for seed in MASTER_SEEDS:
        out = []
        for (g, k), prog in (((0, 0), None), ((2, 1), known_good)):
            res = train_candidate(layout, prog, TrainConfig(seed=candidate_seed(seed, g, k)))
            assert res.env_steps == BUDGET
            out.append(evaluate_sparse(res.policy, layout, 20, seed=seed, program=prog).deliveries_mean)
        base, good = out
        low_base &= base <= 1.0
        wins += good > base
        rows.append(f"s{seed}:{base:.2f}->{good:.2f}")
    ok = low_base and wins >= 3
    detail = (
        f"baseline <= 1 delivery on all seeds: {'yes' if low_base else 'NO'}; known-good > baseline on "
        f"{wins}/5 seeds (need 3); " + " ".join(rows)
    )
    return ok, _line(8, "coordination ring bottleneck", ok, detail)


# ---------------------------------------------------------------------------
# 9


def criterion_9():
    steps = 100_000
    bad = []
    delivered = 0
    for name in sorted(BUILTIN_LAYOUTS):
        env = Overcooked(name)
        rng = np.random.default_rng(9)
        s = env.reset()
        ep_reward = ep_deliv = 0.0
        for t in range(steps):
            out = env.step(s, rng.integers(0, 6, env.n_agents))
            nxt = out.next_state
            cells = [p[:2] for p in nxt.poses]
            if len(set(cells)) != len(cells) or any(env.layout.grid[r][c] != Cell.FLOOR for r, c in cells):
                bad.append(f"{name}@{t}: occupancy")
            if not all(0 <= n <= POT_CAPACITY and 0 <= k <= COOK_TIME for n, k in nxt.pots):
                bad.append(f"{name}@{t}: pot bounds")
            d = sum(out.features["delivery"])
            ep_reward += out.sparse_reward
            ep_deliv += d
            delivered += d
            if out.sparse_reward != DELIVERY_REWARD * d:
                bad.append(f"{name}@{t}: step reward")
            if out.done:
                if ep_reward != DELIVERY_REWARD * ep_deliv:
                    bad.append(f"{name}@{t}: episode return")
                ep_reward = ep_deliv = 0.0
                s = env.reset()
            else:
                s = nxt
    ok = not bad
    detail = f"4 layouts x 10^5 random steps, {len(bad)} violations{' ' + str(bad[:3]) if bad else ''}, {int(delivered)} deliveries seen"
    return ok, _line(9, "environment invariants", ok, detail)


# ---------------------------------------------------------------------------

CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7, criterion_8, criterion_9]


def _run(fn, capsys=None):
    ok, line = fn()
    RESULT_LINES.append(line)
    if capsys is not None:
        with capsys.disabled():
            print("\n" + line)
    else:
        print(line, flush=True)
    return ok, line


@pytest.mark.parametrize("fn", CRITERIA, ids=[f"criterion_{i}" for i in range(1, 10)])
def test_criterion(fn, capsys):
    ok, line = _run(fn, capsys)
    assert ok, line


if __name__ == "__main__":
    results = [_run(fn)[0] for fn in CRITERIA]
    sys.exit(0 if all(results) else 1)
