"""Joint sets, skeletal edges and the row-normalized adjacency used by the GNN."""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import tomli


@dataclass(frozen=True)
class Skeleton:
    joint_names: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]
    root_index: int

    def __post_init__(self):
        n = len(self.joint_names)
        if n == 0:
            raise ValueError("skeleton needs at least one joint")
        if len(set(self.joint_names)) != n:
            raise ValueError("duplicate joint names")
        if not 0 <= self.root_index < n:
            raise ValueError(f"root index {self.root_index} out of range")
        seen = set()
        for i, j in self.edges:
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise ValueError(f"invalid edge ({i}, {j}) for {n} joints")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValueError(f"duplicate edge {key}")
            seen.add(key)
        if not _connected(n, self.edges):
            raise ValueError("skeleton graph is not connected")

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    def index(self, name: str) -> int:
        return self.joint_names.index(name)

    def to_dict(self) -> dict:
        return {
            "joints": list(self.joint_names),
            "edges": [[self.joint_names[i], self.joint_names[j]] for i, j in self.edges],
            "root": self.joint_names[self.root_index],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        names = tuple(d["joints"])
        lookup = {n: i for i, n in enumerate(names)}
        try:
            edges = tuple((lookup[a], lookup[b]) for a, b in d["edges"])
            root = lookup[d["root"]]
        except KeyError as e:
            raise ValueError(f"unknown joint name {e.args[0]!r} in skeleton definition") from None
        return cls(names, edges, root)

    def permuted(self, perm) -> "Skeleton":
        """Relabel joints so new joint k is old joint perm[k]."""
        inv = {old: new for new, old in enumerate(perm)}
        return Skeleton(tuple(self.joint_names[p] for p in perm),
                        tuple((inv[i], inv[j]) for i, j in self.edges),
                        inv[self.root_index])


def _connected(n: int, edges) -> bool:
    nbrs = [[] for _ in range(n)]
    for i, j in edges:
        nbrs[i].append(j)
        nbrs[j].append(i)
    seen, stack = {0}, [0]
    while stack:
        for k in nbrs[stack.pop()]:
            if k not in seen:
                seen.add(k)
                stack.append(k)
    return len(seen) == n


def load_skeleton(path: str | Path) -> Skeleton:
    with open(path, "rb") as f:
        return Skeleton.from_dict(tomli.load(f))


def default_skeleton() -> Skeleton:
    with resources.files("hdnet.data").joinpath("skeleton16.toml").open("rb") as f:
        return Skeleton.from_dict(tomli.load(f))


def build_adjacency(skel: Skeleton) -> np.ndarray:
    """Symmetric 0/1 adjacency with unit diagonal (self-loops keep the self term alive)."""
    a = np.eye(skel.num_joints)
    for i, j in skel.edges:
        a[i, j] = a[j, i] = 1.0
    return a


def normalize_adjacency(a: np.ndarray) -> np.ndarray:
    """L1-normalize each row."""
    a = np.asarray(a, dtype=np.float64)
    rows = a.sum(axis=1, keepdims=True)
    if np.any(rows <= 0):
        raise ValueError(f"adjacency rows {np.flatnonzero(rows[:, 0] <= 0).tolist()} sum to zero")
    return a / rows
