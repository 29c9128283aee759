"""Candidate proposal: prompt contexts, backends and the repair loop.

A backend turns a rendered context into up to K program sources. Two
backends exist: a scripted one that replays a fixture directory
(``gen<g>/cand<k>.rwd`` plus a ``repairs.json`` digest map) and a remote
one that talks to a chat-style HTTP completion endpoint.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from .dsl import GRAMMAR, ProgramSource, ValidityReport, Verdict, check
from .env import FEATURE_SCHEMA, FeatureSchema

log = logging.getLogger(__name__)

SUMMARY_BUDGET = 16 * 1024
EXCERPT_CHARS = 600
DEFAULT_REPAIRS = 2
DEFAULT_TOKEN_ENV = "REWARDSEARCH_API_TOKEN"
REPAIRABLE = (Verdict.PARSE_ERROR, Verdict.SCHEMA_ERROR)


class ProposerError(RuntimeError):
    pass


class BackendUnreachable(ProposerError):
    pass


class ExtractionEmpty(ProposerError):
    pass


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# context


@dataclass(frozen=True)
class CandidateSummary:
    generation: int
    index: int
    verdict: str
    J_hat: float | None = None
    delta: float | None = None
    rho: float | None = None
    nmi: float | None = None
    excerpt: str = ""
    failure: str = ""

    @property
    def id(self) -> str:
        return f"g{self.generation}k{self.index}"

    def render(self) -> str:
        def num(v):
            return "n/a" if v is None else f"{v:.4f}"

        head = f"[{self.id}] verdict={self.verdict} J={num(self.J_hat)}"
        if self.J_hat is not None:
            head += f" delta={num(self.delta)} rho={num(self.rho)} nmi={num(self.nmi)}"
        body = [head]
        if self.excerpt:
            body += ["```rwd", self.excerpt.rstrip(), "```"]
        if self.failure:
            body += ["failure:", self.failure.rstrip()]
        return "\n".join(body) + "\n"


def _sort_key(s: CandidateSummary):
    # best first; summaries without a score trail in id order
    return (s.J_hat is None, -(s.J_hat or 0.0), s.generation, s.index)


@dataclass(frozen=True)
class Context:
    task_description: str
    feature_schema: tuple[tuple[str, str], ...]
    schema_text: str
    dsl_grammar: str
    archive_summaries: tuple[CandidateSummary, ...]
    generation: int
    k: int = 4

    @property
    def summarized_ids(self) -> list[str]:
        return [s.id for s in self.archive_summaries]

    def render(self) -> str:
        parts = [
            "## Task",
            self.task_description.strip(),
            "",
            "## Feature schema",
            self.schema_text,
            "",
            "## Reward program grammar",
            self.dsl_grammar,
            "",
            "## Output contract",
            f"Emit exactly {self.k} programs fenced and numbered. Write each as a line"
            " 'Program <n>:' followed by a fenced ```rwd block holding one complete"
            " program. Nothing outside the fences is read.",
            "",
            f"## Previously evaluated candidates (generation {self.generation})",
        ]
        if self.archive_summaries:
            parts.append(
                "J is the discounted task return of the policy trained with the program;"
                " delta, rho and nmi describe the shaping incentives and action coupling."
            )
            parts += [s.render() for s in self.archive_summaries]
        else:
            parts.append("none")
        return "\n".join(parts).rstrip() + "\n"

    @property
    def digest(self) -> str:
        return text_digest(self.render())[:16]


def build_context(
    archive: Iterable,
    g: int,
    task_spec: str,
    k: int = 4,
    schema: FeatureSchema = FEATURE_SCHEMA,
    budget: int = SUMMARY_BUDGET,
) -> Context:
    """Context for generation ``g`` from archived records (or summaries).

    Summaries are sorted best-first and dropped from the tail once their
    rendered size would exceed ``budget`` bytes.
    """
    summaries = [r if isinstance(r, CandidateSummary) else r.summary() for r in archive]
    summaries.sort(key=_sort_key)
    kept, used = [], 0
    for s in summaries:
        size = len(s.render().encode("utf-8"))
        if used + size > budget:
            break
        kept.append(s)
        used += size
    return Context(
        task_description=task_spec,
        feature_schema=tuple(schema.per_agent) + tuple(schema.global_),
        schema_text=schema.describe(),
        dsl_grammar=GRAMMAR,
        archive_summaries=tuple(kept),
        generation=g,
        k=k,
    )


def task_description(layout_name: str, horizon: int = 200) -> str:
    return (
        f"Two cooperating agents share the Overcooked kitchen '{layout_name}'. Each soup needs"
        " three onions in a pot, cooks for 20 steps, is ladled into a dish and served at the"
        f" serving window for a team reward of +20. Episodes last {horizon} steps. Write a"
        " per-step shaping program that gives each agent an auxiliary reward which helps"
        " short MAPPO training discover frequent deliveries. The shaping value is clipped to"
        " [-1, 1] and scaled down before being added to the task reward."
    )


# ---------------------------------------------------------------------------
# extraction

_FENCE_RE = re.compile(r"```[^\n`]*\n(.*?)```", re.DOTALL)


def extract_programs(text: str) -> list[str]:
    return [m.strip() + "\n" for m in _FENCE_RE.findall(text) if m.strip()]


# ---------------------------------------------------------------------------
# backends


class ProposerBackend(Protocol):
    kind: str

    def propose(self, context: Context, k: int) -> list[ProgramSource]: ...

    def repair(self, source: ProgramSource, report: ValidityReport) -> ProgramSource | None: ...


def builtin_fixture_dir(name: str) -> Path:
    return Path(str(resources.files("rewardsearch") / "fixtures" / name))


class ScriptedBackend:
    """Replays fixture programs; fully deterministic."""

    kind = "scripted"

    def __init__(self, fixture_dir: str | Path):
        self.fixture_dir = Path(fixture_dir)
        if not self.fixture_dir.is_dir():
            raise BackendUnreachable(f"fixture directory not found: {self.fixture_dir}")
        repairs = self.fixture_dir / "repairs.json"
        self.repairs: dict[str, str] = json.loads(repairs.read_text()) if repairs.exists() else {}
        self.propose_calls = 0
        self.repair_calls = 0

    def programs_for(self, g: int) -> list[Path]:
        gen = self.fixture_dir / f"gen{g}"
        if not gen.is_dir():
            return []
        files = [p for p in gen.glob("cand*.rwd")]

        def idx(p: Path):
            m = re.fullmatch(r"cand(\d+)\.rwd", p.name)
            return (int(m.group(1)) if m else 1 << 30, p.name)

        return sorted(files, key=idx)

    def propose(self, context: Context, k: int) -> list[ProgramSource]:
        self.propose_calls += 1
        files = self.programs_for(context.generation)[:k]
        return [
            ProgramSource(p.read_text(), {"proposer": "scripted", "generation": context.generation, "candidate": j + 1})
            for j, p in enumerate(files)
        ]

    def repair(self, source: ProgramSource, report: ValidityReport) -> ProgramSource | None:
        self.repair_calls += 1
        fixed = self.repairs.get(text_digest(source.text))
        if fixed is None:
            return None
        return ProgramSource(fixed, {**source.meta, "repaired": True})


def _response_text(payload) -> str:
    if isinstance(payload, dict):
        choices = payload.get("choices")
        if choices:
            msg = choices[0].get("message") or {}
            if isinstance(msg.get("content"), str):
                return msg["content"]
            if isinstance(choices[0].get("text"), str):
                return choices[0]["text"]
        content = payload.get("content")
        if isinstance(content, str):
            return content
        if isinstance(content, list):
            return "".join(c.get("text", "") for c in content if isinstance(c, dict))
        msg = payload.get("message")
        if isinstance(msg, dict) and isinstance(msg.get("content"), str):
            return msg["content"]
    raise ExtractionEmpty("response carries no message content")


class RemoteBackend:
    """Chat-style completion endpoint; bearer token read from an environment variable."""

    kind = "remote"

    def __init__(
        self,
        endpoint: str,
        model: str,
        temperature: float = 0.7,
        token_env: str = DEFAULT_TOKEN_ENV,
        timeout: float = 120.0,
        retries: int = 3,
        backoff: float = 2.0,
        client=None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.temperature = float(temperature)
        self.token_env = token_env
        self.timeout = timeout
        self.retries = max(1, int(retries))
        self.backoff = backoff
        self._client = client
        self.propose_calls = 0
        self.repair_calls = 0

    def _post(self, prompt: str) -> str:
        import httpx

        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
        }
        client = self._client or httpx.Client(timeout=self.timeout)
        last = None
        try:
            for attempt in range(self.retries):
                try:
                    resp = client.post(self.endpoint, json=body, headers=headers)
                except httpx.HTTPError as exc:
                    last = f"{type(exc).__name__}: {exc}"
                else:
                    if resp.status_code == 200:
                        try:
                            return _response_text(resp.json())
                        except ValueError as exc:
                            raise ExtractionEmpty(f"response is not JSON: {exc}") from None
                    last = f"HTTP {resp.status_code}"
                    if resp.status_code < 500 and resp.status_code != 429:
                        break
                log.warning("backend attempt %d/%d failed: %s", attempt + 1, self.retries, last)
                if attempt + 1 < self.retries and self.backoff > 0:
                    time.sleep(self.backoff * (attempt + 1))
        finally:
            if self._client is None:
                client.close()
        raise BackendUnreachable(f"{self.endpoint}: {last}")

    def propose(self, context: Context, k: int) -> list[ProgramSource]:
        self.propose_calls += 1
        blocks = extract_programs(self._post(context.render()))
        if not blocks:
            raise ExtractionEmpty("no fenced program blocks in the response")
        return [
            ProgramSource(b, {"proposer": f"remote:{self.model}", "generation": context.generation, "candidate": j + 1})
            for j, b in enumerate(blocks[:k])
        ]

    def repair(self, source: ProgramSource, report: ValidityReport) -> ProgramSource | None:
        self.repair_calls += 1
        prompt = (
            "The reward program below was rejected.\n\n```rwd\n"
            + source.text.rstrip()
            + "\n```\n\nError trace:\n"
            + report.repair_trace
            + "\n\nGrammar:\n"
            + GRAMMAR
            + "\n\nReply with exactly one corrected program in a single fenced ```rwd block."
        )
        blocks = extract_programs(self._post(prompt))
        if not blocks:
            raise ExtractionEmpty("no fenced program block in the repair response")
        return ProgramSource(blocks[0], {**source.meta, "repaired": True})


def make_backend(cfg: dict, base_dir: str | Path = ".") -> ProposerBackend:
    """Backend from a run-config block: ``{"kind": "scripted", "fixtures": ...}`` or remote."""
    kind = cfg.get("kind", "scripted")
    if kind == "scripted":
        fx = str(cfg.get("fixtures", "cramped_room"))
        if fx.startswith("builtin:"):
            path = builtin_fixture_dir(fx.split(":", 1)[1])
        else:
            path = Path(fx)
            if not path.is_absolute():
                path = Path(base_dir) / path
        return ScriptedBackend(path)
    if kind == "remote":
        return RemoteBackend(
            endpoint=cfg["endpoint"],
            model=cfg["model"],
            temperature=cfg.get("temperature", 0.7),
            token_env=cfg.get("token_env", DEFAULT_TOKEN_ENV),
            timeout=cfg.get("timeout", 120.0),
            retries=cfg.get("retries", 3),
            backoff=cfg.get("backoff", 2.0),
        )
    raise ValueError(f"unknown backend kind {kind!r}")


# ---------------------------------------------------------------------------
# module-level operations


def propose(backend: ProposerBackend, context: Context, k: int) -> list[ProgramSource]:
    if k < 1:
        raise ValueError("k must be >= 1")
    out = list(backend.propose(context, k))[:k]
    if len(out) < k:
        log.warning("generation %d: backend returned %d of %d programs", context.generation, len(out), k)
    return out


def repair(
    backend: ProposerBackend, source: ProgramSource, report: ValidityReport, attempts_left: int
) -> ProgramSource | None:
    if attempts_left <= 0 or report.verdict not in REPAIRABLE:
        return None
    return backend.repair(source, report)


@dataclass
class Screened:
    """Outcome of validating one proposal, including any repairs."""

    source: ProgramSource
    report: ValidityReport
    program: object = None
    attempts: list[dict] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return self.report.valid


def screen(
    backend: ProposerBackend,
    source: ProgramSource,
    schema: FeatureSchema = FEATURE_SCHEMA,
    clip: float = 1.0,
    max_repairs: int = DEFAULT_REPAIRS,
) -> Screened:
    """Validate, repairing static failures at most ``max_repairs`` times."""
    report, program = check(source, schema, clip)
    attempts = []
    left = max_repairs
    while not report.valid:
        fixed = repair(backend, source, report, left)
        if report.verdict in REPAIRABLE and left > 0:
            left -= 1
            attempts.append({"verdict": report.verdict.value, "trace": report.repair_trace, "repaired": fixed is not None})
        if fixed is None:
            break
        source = fixed
        report, program = check(source, schema, clip)
    return Screened(source, report, program, attempts)
