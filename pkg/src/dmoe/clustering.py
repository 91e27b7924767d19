"""Balanced language clustering: min-pairwise intra-group similarity, greedy and exhaustive solvers."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from math import comb
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .probe import SimilarityMatrix

MAX_EXHAUSTIVE = 10


@dataclass
class GroupAssignment:
    num_groups: int
    group_of: dict[str, int]

    def __post_init__(self):
        self.group_of = {str(k): int(v) for k, v in self.group_of.items()}
        if self.num_groups < 1:
            raise ValueError("num_groups must be >= 1")
        labels = set(self.group_of.values())
        if labels != set(range(self.num_groups)):
            raise ValueError(f"group labels {sorted(labels)} must be exactly 0..{self.num_groups - 1} (no empty group)")

    @property
    def groups(self) -> list[list[str]]:
        out: list[list[str]] = [[] for _ in range(self.num_groups)]
        for code in sorted(self.group_of):
            out[self.group_of[code]].append(code)
        return out

    @property
    def sizes(self) -> list[int]:
        return [len(g) for g in self.groups]

    @property
    def languages(self) -> list[str]:
        return sorted(self.group_of)

    def is_balanced(self) -> bool:
        s = self.sizes
        return max(s) - min(s) <= 1

    def partition(self) -> frozenset[frozenset[str]]:
        """Label-free view, for comparing assignments up to relabelling."""
        return frozenset(frozenset(g) for g in self.groups)

    @classmethod
    def from_groups(cls, groups: Sequence[Iterable[str]]) -> "GroupAssignment":
        return cls(len(groups), {c: k for k, g in enumerate(groups) for c in g})

    def to_json(self, path: Path, objective_value: float | None = None, matrix_sha256: str = "") -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "num_groups": self.num_groups,
            "group_of": dict(sorted(self.group_of.items())),
            "groups": self.groups,
            "objective": objective_value,
            "matrix_sha256": matrix_sha256,
        }
        path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, path: Path) -> "GroupAssignment":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"assignment file not found: {path}")
        payload = json.loads(path.read_text(encoding="utf-8"))
        return cls(payload["num_groups"], payload["group_of"])


def group_sizes(n: int, k: int) -> list[int]:
    """Target sizes: the first n % k groups hold one extra language."""
    base, extra = divmod(n, k)
    return [base + 1] * extra + [base] * (k - extra)


def intra_group_similarity(matrix: SimilarityMatrix, group: Iterable[str]) -> float:
    """Minimum pairwise similarity within the group; 1.0 for a singleton."""
    idx = [matrix.index(c) for c in group]
    if not idx:
        raise ValueError("group must contain at least one language")
    if len(idx) == 1:
        return 1.0
    sub = matrix.values[np.ix_(idx, idx)]
    iu = np.triu_indices(len(idx), k=1)
    return float(sub[iu].min())


def objective(matrix: SimilarityMatrix, assignment: GroupAssignment) -> float:
    """Sum of intra-group similarities over all groups."""
    unknown = set(assignment.group_of) - set(matrix.languages)
    if unknown:
        raise KeyError(f"unknown language codes: {sorted(unknown)}")
    return float(sum(intra_group_similarity(matrix, g) for g in assignment.groups))


def greedy_cluster(matrix: SimilarityMatrix, k: int) -> GroupAssignment:
    """Greedy balanced clustering.

    Each group starts from the most similar remaining pair and grows with the
    candidate that keeps the minimum pairwise similarity highest, until it
    reaches its target size. Equal gains fall back to the candidate's own worst
    similarity to the group, then to code order.
    """
    codes = sorted(matrix.languages)
    n = len(codes)
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= K <= {n}, got K={k}")
    S = matrix.values
    ix = {c: matrix.index(c) for c in codes}
    remaining = list(codes)
    groups: list[list[str]] = []
    for size in group_sizes(n, k):
        if size == 1 or len(remaining) == size:
            if len(remaining) == size:
                group = list(remaining)
            else:
                group = [remaining[0]]
            for c in group:
                remaining.remove(c)
            groups.append(group)
            continue
        best_pair = None
        best_val = -np.inf
        for a, b in itertools.combinations(remaining, 2):
            v = S[ix[a], ix[b]]
            if v > best_val:
                best_val, best_pair = v, (a, b)
        group = list(best_pair)
        current = best_val
        for c in group:
            remaining.remove(c)
        while len(group) < size:
            best = None
            best_key = None
            for m in remaining:
                worst = min(S[ix[m], ix[g]] for g in group)
                key = (min(current, worst), worst)
                if best_key is None or key > best_key:
                    best_key, best = key, m
            group.append(best)
            remaining.remove(best)
            current = best_key[0]
        groups.append(group)
    return GroupAssignment.from_groups(groups)


def _balanced_partitions(items: list[str], sizes: list[int]) -> Iterator[list[list[str]]]:
    """Each unordered balanced partition exactly once; groups are led by their smallest item."""
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for size in sorted(set(sizes), reverse=True):
        left = list(sizes)
        left.remove(size)
        for comp in itertools.combinations(rest, size - 1):
            group = [first, *comp]
            taken = set(comp)
            remaining = [x for x in rest if x not in taken]
            for tail in _balanced_partitions(remaining, left):
                yield [group, *tail]


def count_balanced_partitions(n: int, k: int) -> int:
    sizes = group_sizes(n, k)
    total = 1
    left = n
    for s in sizes:
        total *= comb(left, s)
        left -= s
    for s in set(sizes):
        for r in range(2, sizes.count(s) + 1):
            total //= r
    return total


def exhaustive_cluster(matrix: SimilarityMatrix, k: int) -> GroupAssignment:
    """Exact maximiser of the objective over all balanced partitions (N <= 10)."""
    codes = sorted(matrix.languages)
    n = len(codes)
    if n > MAX_EXHAUSTIVE:
        raise ValueError(f"exhaustive search is limited to {MAX_EXHAUSTIVE} languages, got {n}")
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= K <= {n}, got K={k}")
    best = None
    best_val = -np.inf
    best_key = None
    for part in _balanced_partitions(codes, group_sizes(n, k)):
        val = sum(intra_group_similarity(matrix, g) for g in part)
        key = tuple(tuple(g) for g in sorted(part))
        if val > best_val + 1e-15 or (abs(val - best_val) <= 1e-15 and key < best_key):
            best, best_val, best_key = part, val, key
    ordered = sorted(best, key=lambda g: (-len(g), g))
    return GroupAssignment.from_groups(ordered)


def random_balanced_assignment(codes: Sequence[str], k: int, rng: np.random.Generator) -> GroupAssignment:
    codes = list(codes)
    perm = [codes[i] for i in rng.permutation(len(codes))]
    groups = []
    pos = 0
    for s in group_sizes(len(codes), k):
        groups.append(perm[pos : pos + s])
        pos += s
    return GroupAssignment.from_groups(groups)


def adjusted_rand_index(labels_a: Mapping[str, int], labels_b: Mapping[str, int]) -> float:
    """ARI between two labellings of the same items."""
    keys = sorted(labels_a)
    if sorted(labels_b) != keys:
        raise ValueError("labellings cover different items")
    a = np.array([labels_a[k] for k in keys])
    b = np.array([labels_b[k] for k in keys])
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ua.size, ub.size), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)

    def pairs(x):
        return (x * (x - 1) // 2).sum()

    n = len(keys)
    index = pairs(table)
    sa, sb = pairs(table.sum(axis=1)), pairs(table.sum(axis=0))
    total = n * (n - 1) // 2
    expected = sa * sb / total if total else 0.0
    max_index = 0.5 * (sa + sb)
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))
