"""Effective distances on a travel network.

An edge carrying transition probability p gets length ``1 - log p``; the
effective distance between two nodes is the shortest directed path under
those lengths, averaged over both directions. Node distances can then be
aggregated to groups (for example airports to countries).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from .core import DissimilarityData
from .io import FormatError

AGGREGATES = ("min", "mean")


class NetworkError(ValueError):
    pass


@dataclass
class TravelNetwork:
    """Directed graph with transition probabilities on its edges.

    ``edges`` maps ``(source, target)`` node names to probabilities in (0, 1].
    The probabilities leaving any node may sum to at most one.
    """

    nodes: Sequence[str]
    edges: Mapping[tuple, float]

    def __post_init__(self):
        self.nodes = [str(node) for node in self.nodes]
        if len(set(self.nodes)) != len(self.nodes):
            raise NetworkError("node names must be unique")
        index = self.index
        outflow = np.zeros(len(self.nodes))
        for (a, b), p in self.edges.items():
            if a not in index or b not in index:
                raise NetworkError(f"edge {a}->{b} refers to an unknown node")
            if a == b:
                raise NetworkError(f"self edge at {a}")
            if not (0.0 < p <= 1.0):
                raise NetworkError(f"edge {a}->{b} has probability {p}, outside (0, 1]")
            outflow[index[a]] += p
        over = [self.nodes[i] for i in np.flatnonzero(outflow > 1.0 + 1e-12)]
        if over:
            raise NetworkError(f"outgoing probabilities exceed one at: {', '.join(over)}")

    @property
    def index(self) -> dict:
        return {node: i for i, node in enumerate(self.nodes)}

    def lengths(self) -> csr_matrix:
        index = self.index
        n = len(self.nodes)
        rows, cols, vals = [], [], []
        for (a, b), p in self.edges.items():
            rows.append(index[a])
            cols.append(index[b])
            vals.append(1.0 - np.log(p))
        return csr_matrix((vals, (rows, cols)), shape=(n, n))


def directed_effective_distances(network: TravelNetwork) -> np.ndarray:
    """All-pairs shortest paths under edge length ``1 - log p``."""
    return shortest_path(network.lengths(), method="D", directed=True)


def effective_distance(network: TravelNetwork, groups: Optional[Mapping[str, str]] = None, aggregate: str = "min") -> DissimilarityData:
    """Symmetrised effective distances, optionally aggregated to groups.

    With ``groups`` each group distance is the minimum (or mean) of the node
    distances over member pairs drawn from the two groups.
    """
    dist = directed_effective_distances(network)
    n = len(network.nodes)
    off = ~np.eye(n, dtype=bool)
    unreachable = np.argwhere(~np.isfinite(dist) & off)
    if unreachable.size:
        shown = ", ".join(f"{network.nodes[i]}->{network.nodes[j]}" for i, j in unreachable[:10])
        more = f" (and {len(unreachable) - 10} more)" if len(unreachable) > 10 else ""
        raise NetworkError(f"no path for: {shown}{more}")
    sym = 0.5 * (dist + dist.T)
    if groups is None:
        return DissimilarityData(np.where(off, sym, 0.0), off, network.nodes)
    return _aggregate(sym, network.nodes, groups, aggregate)


def _aggregate(sym, nodes, groups, aggregate) -> DissimilarityData:
    if aggregate not in AGGREGATES:
        raise NetworkError(f"aggregate must be one of {AGGREGATES}")
    missing = [node for node in nodes if node not in groups]
    if missing:
        raise NetworkError(f"nodes without a group: {', '.join(missing[:10])}")
    labels = sorted({groups[node] for node in nodes})
    member = {g: [i for i, node in enumerate(nodes) if groups[node] == g] for g in labels}
    k = len(labels)
    out = np.zeros((k, k))
    for a in range(k):
        for b in range(a):
            block = sym[np.ix_(member[labels[a]], member[labels[b]])]
            out[a, b] = out[b, a] = block.min() if aggregate == "min" else block.mean()
    return DissimilarityData(out, ~np.eye(k, dtype=bool), labels)


def read_edges_csv(path) -> TravelNetwork:
    """CSV with header ``source,target,probability``; nodes are taken from the edges."""
    nodes, edges = [], {}
    seen = set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"source", "target", "probability"} <= set(reader.fieldnames):
            raise FormatError(f"{path}: header must contain source,target,probability")
        for lineno, row in enumerate(reader, 2):
            a, b = row["source"].strip(), row["target"].strip()
            try:
                p = float(row["probability"])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad probability {row['probability']!r}") from None
            if (a, b) in edges:
                raise FormatError(f"{path}:{lineno}: duplicate edge {a}->{b}")
            edges[(a, b)] = p
            for node in (a, b):
                if node not in seen:
                    seen.add(node)
                    nodes.append(node)
    return TravelNetwork(nodes, edges)


def read_groups_csv(path) -> dict:
    """CSV with header ``node,group``."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"node", "group"} <= set(reader.fieldnames):
            raise FormatError(f"{path}: header must contain node,group")
        return {row["node"].strip(): row["group"].strip() for row in reader}
