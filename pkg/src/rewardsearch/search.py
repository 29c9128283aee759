"""Generational reward search with selection on the task return alone.

Each generation builds a context from the archive, asks the proposer for K
programs, screens them (with repairs), trains every valid one from scratch
under the same step budget, scores it on the sparse return, computes its
incentive diagnostics and appends it to the archive. A no-shaping baseline
is trained first and archived as ``g0k0``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

from .diagnostics import DEFAULT_EPS, diagnose, write_trace
from .dsl import DEFAULT_CLIP, Verdict, check, parse, pretty
from .env import FEATURE_SCHEMA, load_layout
from .mappo import TrainConfig, evaluate_sparse, train_candidate
from .proposer import (
    DEFAULT_REPAIRS,
    CandidateSummary,
    EXCERPT_CHARS,
    build_context,
    make_backend,
    propose,
    screen,
    task_description,
    text_digest,
)

log = logging.getLogger(__name__)

TIMING_FIELDS = ("wall_clock_s",)


class NoValidCandidates(RuntimeError):
    pass


class OutputExists(FileExistsError):
    pass


def candidate_seed(seed: int, g: int, k: int) -> int:
    """Master seed XOR a stable 32-bit hash of the candidate id."""
    h = int.from_bytes(hashlib.sha256(f"{g}:{k}".encode()).digest()[:4], "little")
    return (int(seed) ^ h) & 0xFFFFFFFF


@dataclass(frozen=True)
class CandidateRecord:
    generation: int
    index: int
    source: str
    source_digest: str
    ast_digest: str
    verdict: str
    messages: tuple[str, ...] = ()
    repair_attempts: tuple = ()
    J_hat: float | None = None
    J_std: float | None = None
    J_undiscounted: float | None = None
    J_undiscounted_std: float | None = None
    deliveries: float | None = None
    invalid_deliveries: float | None = None
    diagnostics: dict | None = None
    context_digest: str = ""
    summarized: tuple[str, ...] = ()
    seed: int | None = None
    env_steps: int = 0
    curve_path: str = ""
    trace_path: str = ""
    wall_clock_s: float = 0.0

    @property
    def id(self) -> str:
        return f"g{self.generation}k{self.index}"

    @property
    def key(self) -> tuple[int, int]:
        return (self.generation, self.index)

    @property
    def is_baseline(self) -> bool:
        return self.generation == 0

    @property
    def scored(self) -> bool:
        return self.J_hat is not None

    def summary(self) -> CandidateSummary:
        d = self.diagnostics or {}
        excerpt = "(no shaping: task reward only)" if self.is_baseline else self.source[:EXCERPT_CHARS]
        return CandidateSummary(
            generation=self.generation,
            index=self.index,
            verdict=self.verdict,
            J_hat=self.J_hat,
            delta=d.get("delta"),
            rho=d.get("rho"),
            nmi=d.get("nmi"),
            excerpt=excerpt,
            failure="" if self.verdict == Verdict.VALID.value else "\n".join(self.messages),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["id"] = self.id
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CandidateRecord":
        names = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in names}
        for k in ("messages", "summarized", "repair_attempts"):
            kw[k] = tuple(kw.get(k, ()))
        return cls(**kw)


@dataclass
class SearchConfig:
    layout: str = "cramped_room"
    generations: int = 2
    candidates: int = 4
    eval_episodes: int = 20
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    backend: dict = field(default_factory=lambda: {"kind": "scripted", "fixtures": "builtin:cramped_room"})
    eps: float = DEFAULT_EPS
    clip: float = DEFAULT_CLIP
    max_repairs: int = DEFAULT_REPAIRS
    output: str = "runs/search"
    base_dir: str = "."

    def __post_init__(self):
        if self.generations < 1 or self.candidates < 1:
            raise ValueError("generations and candidates must be >= 1")
        if self.eval_episodes < 1:
            raise ValueError("eval_episodes must be >= 1")
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path = ".") -> "SearchConfig":
        d = dict(d)
        train = dict(d.pop("train", {}))
        if "shaping_scale" in d:
            train["shaping_scale"] = d.pop("shaping_scale")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d.setdefault("base_dir", str(base_dir))
        return cls(train=TrainConfig(**train), **d)

    @classmethod
    def load(cls, path: str | Path) -> "SearchConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), base_dir=path.parent)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"]["hidden"] = list(d["train"]["hidden"])
        d.pop("base_dir")
        return d


# ---------------------------------------------------------------------------
# selection


def _argmax_by_score(scored: Sequence[tuple[tuple[int, int], float]]) -> tuple[int, int]:
    # highest score; ties go to the lexicographically smallest id
    return min(scored, key=lambda item: (-item[1], item[0]))[0]


def select_best(records: Sequence[CandidateRecord]) -> CandidateRecord:
    """Highest task return among scored records; diagnostics are never read."""
    by_key = {r.key: r for r in records if r.scored and r.verdict == Verdict.VALID.value}
    if not by_key:
        raise NoValidCandidates("no valid, scored candidate in the archive")
    return by_key[_argmax_by_score([(k, r.J_hat) for k, r in by_key.items()])]


# ---------------------------------------------------------------------------
# training one candidate (top-level so worker processes can run it)


def _train_and_score(job: dict) -> dict:
    cfg = TrainConfig(**job["train"])
    program = None
    if job["source"] is not None:
        _, program = check(job["source"], FEATURE_SCHEMA, job["clip"])
    layout = load_layout(job["layout"]) if "\n" in job["layout"] else job["layout"]
    t0 = time.perf_counter()
    res = train_candidate(layout, program, cfg, curve_path=job["curve_path"])
    # the shaping trace of the baseline is identically zero
    ev = evaluate_sparse(res.policy, layout, job["episodes"], seed=job["eval_seed"], program=program, gamma=cfg.gamma)
    write_trace(job["trace_path"], ev.traces)
    diag = diagnose(ev.traces, ev.J_hat, cfg.gamma, job["eps"])
    return {
        "J_hat": ev.J_hat,
        "J_std": ev.J_std,
        "J_undiscounted": ev.J_undiscounted,
        "J_undiscounted_std": ev.J_undiscounted_std,
        "deliveries": ev.deliveries_mean,
        "invalid_deliveries": ev.invalid_deliveries_mean,
        "diagnostics": diag.to_dict(),
        "env_steps": res.env_steps,
        "wall_clock_s": time.perf_counter() - t0,
    }


# ---------------------------------------------------------------------------
# archive


class Archive:
    """Append-only record list mirrored to ``archive.json`` after each append."""

    def __init__(self, out_dir: Path, config: dict):
        self.out_dir = out_dir
        self.config = config
        self.records: list[CandidateRecord] = []
        self.contexts: dict[int, dict] = {}

    def append(self, rec: CandidateRecord) -> None:
        if any(r.key == rec.key for r in self.records):
            raise ValueError(f"duplicate record {rec.id}")
        self.records.append(rec)
        self.flush()

    def document(self, best: str | None = None) -> dict:
        return {
            "config": self.config,
            "contexts": {str(g): c for g, c in sorted(self.contexts.items())},
            "records": [r.to_dict() for r in self.records],
            "best": best,
        }

    def flush(self, best: str | None = None) -> None:
        path = self.out_dir / "archive.json"
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self.document(best), indent=2) + "\n")
        os.replace(tmp, path)


def load_archive(path: str | Path) -> tuple[dict, list[CandidateRecord]]:
    path = Path(path)
    if path.is_dir():
        path = path / "archive.json"
    doc = json.loads(path.read_text())
    return doc, [CandidateRecord.from_dict(r) for r in doc["records"]]


def strip_timing(doc: dict) -> dict:
    doc = json.loads(json.dumps(doc))
    for r in doc.get("records", []):
        for k in TIMING_FIELDS:
            r.pop(k, None)
    return doc


# ---------------------------------------------------------------------------
# the loop


@dataclass
class SearchResult:
    best: CandidateRecord
    records: list[CandidateRecord]
    out_dir: Path


def _ast_digest(source: str) -> str:
    try:
        return text_digest(pretty(parse(source)))[:16]
    except Exception:
        return ""


def run_search(config: SearchConfig, force: bool = False, jobs: int = 1, backend=None) -> SearchResult:
    out = Path(config.output)
    if not out.is_absolute():
        out = Path(config.base_dir) / out
    if out.exists() and any(out.iterdir()) and not force:
        raise OutputExists(f"output directory {out} exists; pass force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    (out / "candidates").mkdir(exist_ok=True)
    (out / "prompts").mkdir(exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n")

    if backend is None:
        backend = make_backend(config.backend, config.base_dir)
    layout = load_layout(config.layout)
    layout_arg = config.layout if "\n" not in config.layout else layout.to_text()
    archive = Archive(out, config.to_dict())
    task = task_description(layout.name, layout.horizon)
    train = config.train

    def job_for(g: int, k: int, source: str | None) -> dict:
        cdir = out / "candidates" / f"g{g}k{k}"
        cdir.mkdir(parents=True, exist_ok=True)
        if source is not None:
            (cdir / "program.rwd").write_text(source)
        seed = candidate_seed(config.seed, g, k)
        return {
            "layout": layout_arg,
            "source": source,
            "clip": config.clip,
            "eps": config.eps,
            "train": {**asdict(train), "seed": seed},
            "episodes": config.eval_episodes,
            "eval_seed": config.seed,
            "curve_path": str(cdir / "curve.ndjson"),
            "trace_path": str(cdir / "trace.ndjson"),
            "seed": seed,
        }

    def rel(p: str) -> str:
        return str(Path(p).relative_to(out))

    def run_jobs(batch: list[dict]) -> list[dict]:
        if jobs > 1 and len(batch) > 1:
            with ProcessPoolExecutor(max_workers=min(jobs, len(batch))) as pool:
                return list(pool.map(_train_and_score, batch))
        return [_train_and_score(j) for j in batch]

    def scored_record(g, k, source, job, res, **extra) -> CandidateRecord:
        return CandidateRecord(
            generation=g,
            index=k,
            source=source or "",
            source_digest=text_digest(source or ""),
            ast_digest=_ast_digest(source) if source else "",
            verdict=Verdict.VALID.value,
            seed=job["seed"],
            curve_path=rel(job["curve_path"]),
            trace_path=rel(job["trace_path"]),
            **res,
            **extra,
        )

    log.info("training baseline on %s", layout.name)
    job = job_for(0, 0, None)
    archive.append(scored_record(0, 0, None, job, run_jobs([job])[0]))

    for g in range(1, config.generations + 1):
        ctx = build_context(archive.records, g, task, config.candidates)
        prompt = ctx.render()
        (out / "prompts" / f"gen{g}.txt").write_text(prompt)
        archive.contexts[g] = {"digest": ctx.digest, "summarized": ctx.summarized_ids}
        proposals = propose(backend, ctx, config.candidates)
        log.info("generation %d: %d proposals", g, len(proposals))

        pending, records = [], {}
        for k, src in enumerate(proposals, start=1):
            sc = screen(backend, src, FEATURE_SCHEMA, config.clip, config.max_repairs)
            common = dict(
                context_digest=ctx.digest,
                summarized=tuple(ctx.summarized_ids),
                repair_attempts=tuple(sc.attempts),
            )
            if sc.valid:
                pending.append((k, sc.source.text, job_for(g, k, sc.source.text), common))
            else:
                records[k] = CandidateRecord(
                    generation=g,
                    index=k,
                    source=sc.source.text,
                    source_digest=text_digest(sc.source.text),
                    ast_digest=_ast_digest(sc.source.text),
                    verdict=sc.report.verdict.value,
                    messages=tuple(str(m) for m in sc.report.messages),
                    **common,
                )
        results = run_jobs([p[2] for p in pending])
        for (k, src, job, common), res in zip(pending, results):
            records[k] = scored_record(g, k, src, job, res, **common)
        for k in sorted(records):
            archive.append(records[k])
        if not any(r.scored for r in records.values()):
            log.warning("generation %d produced no valid candidate", g)

    candidates = [r for r in archive.records if not r.is_baseline]
    best = select_best(candidates)
    archive.flush(best.id)
    lineage = export_lineage(archive.records, best.id)
    (out / "lineage.json").write_text(json.dumps(lineage, indent=2) + "\n")
    (out / "lineage.dot").write_text(lineage_to_dot(lineage))
    from .report import render_table

    (out / "report.txt").write_text(render_table(archive.records))
    return SearchResult(best, list(archive.records), out)


# ---------------------------------------------------------------------------
# lineage


def export_lineage(records: Sequence[CandidateRecord], best: str | None = None) -> dict:
    """Conditioning graph: an edge u -> v means u was summarized in v's context."""
    if not records:
        raise ValueError("empty archive")
    by_id = {r.id: r for r in records}
    nodes = [
        {
            "id": r.id,
            "generation": r.generation,
            "index": r.index,
            "verdict": r.verdict,
            "J_hat": r.J_hat,
            "baseline": r.is_baseline,
        }
        for r in records
    ]
    edges = [{"source": s, "target": r.id} for r in records for s in r.summarized if s in by_id]

    # promotion path: from the selected record back through its best-scoring parent
    path = set()
    cur = by_id.get(best) if best else None
    while cur is not None:
        parents = [by_id[s] for s in cur.summarized if s in by_id and by_id[s].scored]
        if not parents:
            break
        top = select_best(parents)
        path.add((top.id, cur.id))
        cur = top
    for e in edges:
        e["best_path"] = (e["source"], e["target"]) in path
    return {"nodes": nodes, "edges": edges, "best": best}


def parse_lineage(text: str) -> dict:
    doc = json.loads(text)
    if not isinstance(doc, dict) or "nodes" not in doc or "edges" not in doc:
        raise ValueError("not a lineage document")
    ids = {n["id"] for n in doc["nodes"]}
    for e in doc["edges"]:
        if e["source"] not in ids or e["target"] not in ids:
            raise ValueError(f"dangling edge {e['source']} -> {e['target']}")
    return doc


def lineage_to_dot(doc: dict) -> str:
    lines = ["digraph lineage {", "  rankdir=LR;", '  node [shape=box, fontname="monospace"];']
    by_gen: dict[int, list[dict]] = {}
    for n in doc["nodes"]:
        by_gen.setdefault(n["generation"], []).append(n)
    for g in sorted(by_gen):
        lines.append(f"  subgraph gen{g} {{ rank=same;")
        for n in by_gen[g]:
            j = "n/a" if n["J_hat"] is None else f"{n['J_hat']:.2f}"
            name = "baseline" if n["baseline"] else n["id"]
            if n["id"] == doc.get("best"):
                style = ", style=bold"
            elif n["verdict"] != Verdict.VALID.value:
                style = ", style=dashed"
            else:
                style = ""
            lines.append(f'    {n["id"]} [label="{name}\\n{n["verdict"]}\\nJ={j}"{style}];')
        lines.append("  }")
    for e in doc["edges"]:
        attr = " [color=red, penwidth=2]" if e.get("best_path") else " [color=gray]"
        lines.append(f"  {e['source']} -> {e['target']}{attr};")
    lines.append("}")
    return "\n".join(lines) + "\n"
