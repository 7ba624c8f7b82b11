"""Bradley-Terry ranking from pairwise preferences, fitted by MM iteration.

Strengths p are updated with Hunter's minorization-maximization step

    p_i <- W_i / sum_j n_ij / (p_i + p_j)

where W_i counts wins of i and n_ij counts comparisons between i and j.
Reported scores are log-strengths shifted to sum to zero.
"""

from __future__ import annotations

import csv
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

import numpy as np


class RankingError(ValueError):
    pass


@dataclass(frozen=True)
class ComparisonRecord:
    winner: Hashable
    loser: Hashable

    def __post_init__(self):
        if self.winner == self.loser:
            raise RankingError(f"item {self.winner!r} cannot be compared with itself")


@dataclass
class BtResult:
    scores: dict
    iterations: int
    converged: bool
    log_likelihood: list[float] = field(default_factory=list)

    def probability(self, i, j) -> float:
        """P(i beats j) under the fitted model."""
        si, sj = self.scores[i], self.scores[j]
        return 1.0 / (1.0 + math.exp(sj - si))

    def to_json(self) -> str:
        return json.dumps(
            {"scores": {str(k): v for k, v in self.scores.items()}, "converged": self.converged, "iterations": self.iterations},
            indent=2,
        )


def _components(adj: list[set[int]]) -> list[list[int]]:
    seen = [False] * len(adj)
    comps = []
    for start in range(len(adj)):
        if seen[start]:
            continue
        seen[start] = True
        comp, queue = [], deque([start])
        while queue:
            u = queue.popleft()
            comp.append(u)
            for v in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    queue.append(v)
        comps.append(sorted(comp))
    return comps


def _reachable(adj: list[set[int]], start: int) -> set[int]:
    seen = {start}
    queue = deque([start])
    while queue:
        for v in adj[queue.popleft()]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return seen


def win_matrix(records: Iterable[ComparisonRecord], items: Sequence | None = None) -> tuple[list, np.ndarray]:
    """Sorted item list and matrix M with M[i, j] = times item i beat item j."""
    records = list(records)
    found = {r.winner for r in records} | {r.loser for r in records}
    labels = sorted(found | set(items or ()), key=lambda x: (str(type(x)), x))
    index = {k: i for i, k in enumerate(labels)}
    wins = np.zeros((len(labels), len(labels)))
    for r in records:
        wins[index[r.winner], index[r.loser]] += 1
    return labels, wins


def log_likelihood(wins: np.ndarray, strengths: np.ndarray) -> float:
    total = strengths[:, None] + strengths[None, :]
    active = wins > 0
    return float((wins[active] * (np.log(np.broadcast_to(strengths[:, None], wins.shape)[active]) - np.log(total[active]))).sum())


def bt_fit(
    records: Iterable[ComparisonRecord],
    tolerance: float = 1e-10,
    max_iter: int = 10_000,
    items: Sequence | None = None,
) -> BtResult:
    """Maximum-likelihood Bradley-Terry scores.

    Raises RankingError when some item never appears, the comparison graph is
    disconnected, or the directed win graph is not strongly connected (then
    some group never beats the rest and the likelihood has no finite maximum).
    """
    labels, wins = win_matrix(records, items)
    k = len(labels)
    if k < 2:
        raise RankingError("need at least two items")
    games = wins + wins.T
    idle = [labels[i] for i in range(k) if games[i].sum() == 0]
    if idle:
        raise RankingError(f"items with zero wins and zero losses: {idle}")
    undirected = [set(np.flatnonzero(games[i])) for i in range(k)]
    comps = _components(undirected)
    if len(comps) > 1:
        named = [[labels[i] for i in c] for c in comps]
        raise RankingError(f"comparison graph is disconnected; components: {named}")
    beats = [set(np.flatnonzero(wins[i])) for i in range(k)]
    beaten_by = [set(np.flatnonzero(wins[:, i])) for i in range(k)]
    if len(_reachable(beats, 0)) < k or len(_reachable(beaten_by, 0)) < k:
        raise RankingError("win graph is not strongly connected; no finite maximum-likelihood scores exist")

    won = wins.sum(axis=1)
    p = np.full(k, 1.0 / k)
    history = [log_likelihood(wins, p)]
    log_p = np.log(p)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        denom = (games / (p[:, None] + p[None, :])).sum(axis=1)
        p = won / denom
        p /= p.sum()
        history.append(log_likelihood(wins, p))
        new_log_p = np.log(p)
        change = np.abs((new_log_p - new_log_p.mean()) - (log_p - log_p.mean())).max()
        log_p = new_log_p
        if change < tolerance:
            converged = True
            break
    scores = log_p - log_p.mean()
    return BtResult({lab: float(s) for lab, s in zip(labels, scores)}, it, converged, history)


def read_pairs_csv(path) -> list[ComparisonRecord]:
    """Rows of ``winner_id,loser_id``; a header row with those names is optional."""
    records = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            if [c.strip() for c in row[:2]] == ["winner_id", "loser_id"]:
                continue
            if len(row) < 2:
                raise RankingError(f"malformed pair row: {row}")
            records.append(ComparisonRecord(row[0].strip(), row[1].strip()))
    return records
