"""Incentive diagnostics computed from evaluation rollouts.

For a candidate shaping program the diagnostic tuple is
``(J_hat, delta, rho, nmi)``:

* ``delta`` -- payoff imbalance of the per-agent discounted shaping returns,
* ``rho``   -- mean pairwise Pearson correlation of per-step shaping streams,
* ``nmi``   -- mean pairwise normalized mutual information of agent actions.

Only ``J_hat`` depends on the task reward; the other three read shaping
values and actions exclusively.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .env import N_ACTIONS

DEFAULT_EPS = 1e-8


@dataclass
class RolloutTrace:
    """One episode: shaping (T, n), joint actions (T, n) and sparse rewards (T,)."""

    shaping: np.ndarray
    actions: np.ndarray
    sparse: np.ndarray

    def __post_init__(self):
        self.shaping = np.asarray(self.shaping, dtype=np.float64).reshape(len(self.sparse), -1)
        self.actions = np.asarray(self.actions, dtype=np.int64).reshape(len(self.sparse), -1)
        self.sparse = np.asarray(self.sparse, dtype=np.float64)
        if self.shaping.shape != self.actions.shape:
            raise ValueError(f"shaping {self.shaping.shape} and actions {self.actions.shape} disagree")

    @property
    def n_agents(self) -> int:
        return self.shaping.shape[1]

    def __len__(self) -> int:
        return len(self.sparse)

    def swapped(self, perm: Sequence[int]) -> "RolloutTrace":
        perm = list(perm)
        return RolloutTrace(self.shaping[:, perm], self.actions[:, perm], self.sparse)


def write_trace(path: str | Path, traces: Iterable[RolloutTrace]) -> None:
    with open(path, "w") as fh:
        for ep, tr in enumerate(traces):
            for t in range(len(tr)):
                rec = {
                    "episode": ep,
                    "t": t,
                    "shaping": [float(v) for v in tr.shaping[t]],
                    "actions": [int(a) for a in tr.actions[t]],
                    "sparse": float(tr.sparse[t]),
                }
                fh.write(json.dumps(rec) + "\n")


def read_trace(path: str | Path) -> list[RolloutTrace]:
    episodes: dict[int, list[dict]] = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                episodes.setdefault(int(rec["episode"]), []).append(rec)
    out = []
    for ep in sorted(episodes):
        rows = sorted(episodes[ep], key=lambda r: r["t"])
        out.append(
            RolloutTrace(
                shaping=[r["shaping"] for r in rows],
                actions=[r["actions"] for r in rows],
                sparse=[r["sparse"] for r in rows],
            )
        )
    return out


# ---------------------------------------------------------------------------
# the four quantities


def shaping_return(traces: RolloutTrace | Sequence[RolloutTrace], gamma: float = 0.99) -> np.ndarray:
    """Discounted shaping return per episode and agent, shape (episodes, n)."""
    if isinstance(traces, RolloutTrace):
        traces = [traces]
    rows = []
    for tr in traces:
        disc = gamma ** np.arange(len(tr))
        rows.append(disc @ tr.shaping)
    return np.asarray(rows, dtype=np.float64)


def payoff_imbalance(S: Sequence[float], eps: float = DEFAULT_EPS) -> float:
    """Sum of all-pairs |S_i - S_j| over (n - 1) * sum |S_k| + eps; lies in [0, 1]."""
    S = np.asarray(S, dtype=np.float64)
    n = len(S)
    if n < 2:
        raise ValueError("payoff imbalance needs at least two agents")
    num = sum(abs(S[i] - S[j]) for i, j in combinations(range(n), 2))
    return float(num / ((n - 1) * np.abs(S).sum() + eps))


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    # a constant stream carries no evidence of alignment
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0
    dx = x - x.mean()
    dy = y - y.mean()
    r = float(dx @ dy / np.sqrt((dx @ dx) * (dy @ dy)))
    return min(1.0, max(-1.0, r))


def _mean_pairwise_corr(shaping: np.ndarray) -> float:
    pairs = list(combinations(range(shaping.shape[1]), 2))
    return float(sum(pearson(shaping[:, i], shaping[:, j]) for i, j in pairs) / len(pairs))


def incentive_alignment(traces: RolloutTrace | Sequence[RolloutTrace]) -> float:
    """Per-episode mean pairwise Pearson correlation, averaged over episodes."""
    if isinstance(traces, RolloutTrace):
        traces = [traces]
    return float(np.mean([_mean_pairwise_corr(tr.shaping) for tr in traces]))


def incentive_alignment_pooled(traces: Sequence[RolloutTrace]) -> float:
    return _mean_pairwise_corr(np.concatenate([tr.shaping for tr in traces]))


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def normalized_mutual_information(a: np.ndarray, b: np.ndarray, n_values: int = N_ACTIONS) -> float:
    """Plug-in NMI (natural log) of two discrete samples; 0 when either is constant."""
    counts = np.zeros((n_values, n_values), dtype=np.int64)
    np.add.at(counts, (np.asarray(a), np.asarray(b)), 1)
    total = counts.sum()
    # marginals from integer counts so a constant stream has exactly zero entropy
    joint = counts / total
    pa, pb = counts.sum(axis=1) / total, counts.sum(axis=0) / total
    ha, hb = _entropy(pa), _entropy(pb)
    if ha == 0.0 or hb == 0.0:
        return 0.0
    nz = joint > 0
    mi = float((joint[nz] * np.log(joint[nz] / np.outer(pa, pb)[nz])).sum())
    return min(1.0, max(0.0, mi / np.sqrt(ha * hb)))


def _mean_pairwise_nmi(actions: np.ndarray) -> float:
    pairs = list(combinations(range(actions.shape[1]), 2))
    return float(sum(normalized_mutual_information(actions[:, i], actions[:, j]) for i, j in pairs) / len(pairs))


def action_coupling(traces: RolloutTrace | Sequence[RolloutTrace]) -> float:
    """Mean pairwise NMI over actions pooled across all supplied steps."""
    if isinstance(traces, RolloutTrace):
        traces = [traces]
    return _mean_pairwise_nmi(np.concatenate([tr.actions for tr in traces]))


# ---------------------------------------------------------------------------


@dataclass
class DiagnosticTuple:
    J_hat: float
    delta: float
    rho: float
    nmi: float
    shaping_returns: list[float]
    rho_pooled: float = 0.0
    per_episode: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiagnosticTuple":
        return cls(**d)


def diagnose(
    traces: Sequence[RolloutTrace], J_hat: float, gamma: float = 0.99, eps: float = DEFAULT_EPS
) -> DiagnosticTuple:
    """Full diagnostic record; ``delta`` uses the episode-mean shaping returns."""
    if not traces:
        raise ValueError("diagnose needs at least one episode")
    S = shaping_return(traces, gamma)
    S_mean = S.mean(axis=0)
    return DiagnosticTuple(
        J_hat=float(J_hat),
        delta=payoff_imbalance(S_mean, eps),
        rho=incentive_alignment(traces),
        nmi=action_coupling(traces),
        shaping_returns=[float(v) for v in S_mean],
        rho_pooled=incentive_alignment_pooled(traces),
        per_episode={
            "shaping_returns": [[float(v) for v in row] for row in S],
            "delta": [payoff_imbalance(row, eps) for row in S],
            "rho": [_mean_pairwise_corr(tr.shaping) for tr in traces],
            "nmi": [_mean_pairwise_nmi(tr.actions) for tr in traces],
        },
    )
