import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rewardsearch.dsl import (
    MAX_SOURCE_BYTES,
    BoundError,
    ParseError,
    SchemaError,
    SchemaMismatch,
    Verdict,
    check,
    compile_program,
    evaluate,
    parse,
    pretty,
    probe_features,
)
from rewardsearch.env import FEATURE_SCHEMA, FeatureVector, Overcooked

CORPUS = Path(__file__).parent / "corpus"
LABELS = {"parse": Verdict.PARSE_ERROR, "schema": Verdict.SCHEMA_ERROR, "bound": Verdict.BOUND_ERROR}


def corpus():
    for p in sorted(CORPUS.glob("*/*.rwd")):
        expected = Verdict.VALID if p.parent.name == "valid" else LABELS[p.stem.split("_")[0]]
        yield p, expected


def feats(**kw):
    base = {n: (0.0, 0.0) for n in FEATURE_SCHEMA.per_agent_names}
    base.update({n: 0.0 for n in FEATURE_SCHEMA.global_names})
    base.update(kw)
    return base


def test_corpus_size():
    labels = [e for _, e in corpus()]
    assert labels.count(Verdict.VALID) == 20 and len(labels) == 40


@pytest.mark.parametrize("path,expected", list(corpus()), ids=lambda v: getattr(v, "stem", None))
def test_corpus_classification(path, expected):
    report, program = check(path.read_text())
    assert report.verdict == expected, report.repair_trace
    assert (program is not None) == (expected == Verdict.VALID)
    assert report.valid == (not report.messages)


def test_parse_example_with_let():
    src = (
        "let prog = x.pot_fullness / 3.0;\n"
        "r[0] = clip(prog - 0.1*x.dist_to_nearest_pot[0], -1, 1);\n"
        "r[1] = clip(prog - 0.1*x.dist_to_nearest_pot[1], -1, 1);"
    )
    ast = parse(src)
    assert len(ast.let_bindings) == 1 and len(ast.agent_exprs) == 2


def test_missing_agent_expression():
    with pytest.raises(ParseError, match="expected 2 agent expressions"):
        parse("r[0] = 1;")


def test_parse_error_position():
    with pytest.raises(ParseError) as info:
        parse("let a = 1;\nr[i] = (a + ;")
    assert info.value.line == 2 and info.value.col > 1


def test_source_size_limit():
    with pytest.raises(ParseError):
        parse("r[i] = " + "1+" * MAX_SOURCE_BYTES + "1;")


def test_unknown_feature_names_identifier():
    report, _ = check("r[i] = x.nonexistent;")
    assert report.verdict == Verdict.SCHEMA_ERROR
    assert "nonexistent" in report.repair_trace


def test_non_finite_literal():
    report, _ = check("r[i] = 1e999;")
    assert report.verdict == Verdict.BOUND_ERROR


@pytest.mark.parametrize("clip", [0.0, -1.0, math.inf, math.nan])
def test_bad_clip_bound(clip):
    report, _ = check("r[i] = 1;", clip=clip)
    assert report.verdict == Verdict.BOUND_ERROR


def test_compile_program_raises():
    with pytest.raises(SchemaError):
        compile_program("r[i] = x.nope;")
    with pytest.raises(BoundError):
        compile_program("r[i] = 1e999;")
    with pytest.raises(ParseError):
        compile_program("r[i] =")


def test_sparse_substitution():
    prog = compile_program("r[i] = r_sparse / 20;")
    assert list(evaluate(prog, feats(), 20.0)) == [1.0, 1.0]


def test_clip_applies_per_agent():
    prog = compile_program("r[i] = 5 * x.delivery[i];")
    assert list(evaluate(prog, feats(delivery=(1, 0)))) == [1.0, 0.0]


def test_missing_feature_reads_zero():
    prog = compile_program("r[i] = 0.5 + x.pot_fullness;")
    f = feats()
    del f["pot_fullness"]
    assert list(prog(f)) == [0.5, 0.5]
    assert list(prog({})) == [0.5, 0.5]


def test_division_by_zero_is_zero():
    prog = compile_program("r[i] = 1 / x.pots_ready + 0.25;")
    assert list(prog(feats())) == [0.25, 0.25]


def test_operators():
    prog = compile_program(
        "let a = -x.pot_fullness;\n"
        "r[0] = (a < -1) + (a == -2) * 10 + max(a, -5, -7) / 100;\n"
        "r[1] = x.pots_ready ? abs(a) / 4 : clip(a, -0.3, 0.3);"
    )
    out = prog(feats(pot_fullness=2.0), 0.0)
    assert out[0] == 1.0  # clipped: 1 + 10 - 0.02
    assert out[1] == pytest.approx(-0.3)
    out = prog(feats(pot_fullness=2.0, pots_ready=1.0))
    assert out[1] == pytest.approx(0.5)
    prog = compile_program("r[i] = (1 < 2) - 0.5 * (3 <= 2) + 0.25 * (2 != 2);", clip=5.0)
    assert list(prog({})) == [1.0, 1.0]


def test_agent_index_binding():
    prog = compile_program("let own = x.holding_code[i];\nr[i] = own / 10 + i;", clip=5.0)
    assert list(prog(feats(holding_code=(1, 3)))) == pytest.approx([0.1, 1.3])


def test_nan_becomes_zero():
    prog = compile_program("r[i] = 1e300 * 1e300 - 1e300 * 1e300;")
    assert list(prog({})) == [0.0, 0.0]


def test_schema_mismatch():
    prog = compile_program("r[i] = 1;")
    fv = FeatureVector(feats())
    fv.schema_hash = "deadbeef"
    with pytest.raises(SchemaMismatch):
        evaluate(prog, fv)


def test_env_features_are_accepted():
    env = Overcooked("cramped_room")
    out = env.step(env.reset(), [5, 5])
    prog = compile_program("r[i] = x.useful_interact[i] - 0.1 * x.collision[i];")
    assert np.all(np.isfinite(evaluate(prog, out.features)))


VALID_SOURCES = [p.read_text() for p, e in corpus() if e == Verdict.VALID]


@pytest.mark.parametrize("src", VALID_SOURCES)
def test_pretty_round_trip(src):
    ast = parse(src)
    again = parse(pretty(ast))
    assert again == ast
    assert pretty(again) == pretty(ast)


# ---------------------------------------------------------------------------
# generated programs

NUMS = st.floats(-100, 100, allow_nan=False).map(lambda v: round(v, 3))
FEATURE_REFS = [f"x.{n}[{k}]" for n in FEATURE_SCHEMA.per_agent_names for k in ("0", "1", "i")] + [
    f"x.{n}" for n in FEATURE_SCHEMA.global_names
]
LEAVES = st.one_of(NUMS.map(repr), st.sampled_from(FEATURE_REFS + ["r_sparse", "i"]))


def _combine(children):
    bin_ops = st.tuples(children, st.sampled_from(["+", "-", "*", "/", "<", ">=", "=="]), children).map(
        lambda t: f"({t[0]} {t[1]} {t[2]})"
    )
    calls = st.one_of(
        st.lists(children, min_size=2, max_size=3).flatmap(
            lambda xs: st.sampled_from(["min", "max"]).map(lambda f: f"{f}({', '.join(xs)})")
        ),
        children.map(lambda e: f"abs({e})"),
        st.tuples(children, children, children).map(lambda t: f"clip({t[0]}, {t[1]}, {t[2]})"),
        st.tuples(children, children, children).map(lambda t: f"({t[0]} ? {t[1]} : {t[2]})"),
        children.map(lambda e: f"-{e}"),
    )
    return st.one_of(bin_ops, calls)


EXPRS = st.recursive(LEAVES, _combine, max_leaves=12)


@st.composite
def programs(draw):
    lets = draw(st.lists(EXPRS, max_size=2))
    lines = [f"let v{j} = {e};" for j, e in enumerate(lets)]
    names = [f"v{j}" for j in range(len(lets))]
    body = draw(EXPRS)
    if names:
        body = f"({body}) + {draw(st.sampled_from(names))}"
    lines.append(f"r[i] = {body};")
    return "\n".join(lines)


@settings(max_examples=150, deadline=None)
@given(programs(), st.floats(0.1, 10), st.integers(0, 2**31 - 1))
def test_generated_programs_are_bounded_and_pure(src, clip, seed):
    report, prog = check(src, clip=clip)
    assert report.verdict == Verdict.VALID, report.repair_trace
    rng = np.random.default_rng(seed)
    for missing in (0.0, 0.5, 1.0):
        x = probe_features(FEATURE_SCHEMA, rng, missing)
        r_sparse = float(rng.choice([0.0, 20.0, 1e308]))
        a = prog(x, r_sparse)
        b = prog(x, r_sparse)
        assert a.tobytes() == b.tobytes()
        assert np.all(np.isfinite(a)) and np.all(np.abs(a) <= clip)
    assert parse(pretty(prog.ast)) == prog.ast
