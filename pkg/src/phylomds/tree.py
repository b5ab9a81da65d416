"""Rooted bifurcating phylogenies and Newick input/output."""

from __future__ import annotations

from typing import Iterable, Optional

import numpy as np


class NewickError(ValueError):
    pass


class Phylogeny:
    """A rooted, bifurcating tree with branch lengths.

    Nodes are integers ``0 .. n_nodes - 1``. ``parent[root] == -1`` and the
    root carries no branch. Tips are the nodes without children; their labels
    must be unique. A single tip on its own is a valid (branchless) tree.

    Parameters
    ----------
    parent : sequence of int
        Parent index of every node, ``-1`` for the root.
    branch_length : sequence of float
        Length of the branch above each node; the root entry is ignored.
    labels : sequence of str or None
        Label per node. Tips need one, internal nodes may have ``None``.
    allow_zero_lengths : bool
        Permit zero-length branches. Only meaningful for simulation in the
        deterministic limit; densities need strictly positive lengths.
    """

    def __init__(self, parent, branch_length, labels, allow_zero_lengths=False):
        self.parent = np.asarray(parent, dtype=np.int64)
        self.branch_length = np.asarray(branch_length, dtype=np.float64).copy()
        self.labels = list(labels)
        n = self.parent.size
        if self.branch_length.size != n or len(self.labels) != n:
            raise ValueError("parent, branch_length and labels must have equal length")
        roots = np.flatnonzero(self.parent < 0)
        if roots.size != 1:
            raise ValueError(f"a tree needs exactly one root, found {roots.size}")
        self.root = int(roots[0])
        self.branch_length[self.root] = 0.0
        self.children: list[list[int]] = [[] for _ in range(n)]
        for node, par in enumerate(self.parent):
            if par >= 0:
                if par >= n:
                    raise ValueError(f"node {node} has unknown parent {par}")
                self.children[par].append(node)
        self.postorder = self._postorder()
        if len(self.postorder) != n:
            raise ValueError("parent pointers do not form a single tree")
        self.tips = [node for node in range(n) if not self.children[node]]
        for node in range(n):
            kids = len(self.children[node])
            if kids not in (0, 2):
                raise ValueError(f"node {node} has {kids} children; trees must be bifurcating")
        nonroot = np.arange(n) != self.root
        lengths = self.branch_length[nonroot]
        if not np.all(np.isfinite(lengths)):
            raise ValueError("branch lengths must be finite")
        if allow_zero_lengths:
            if np.any(lengths < 0.0):
                raise ValueError("branch lengths cannot be negative")
        elif np.any(lengths <= 0.0):
            raise ValueError("branch lengths must be positive")
        tip_labels = [self.labels[t] for t in self.tips]
        if any(label is None or label == "" for label in tip_labels):
            raise ValueError("every tip needs a label")
        if len(set(tip_labels)) != len(tip_labels):
            raise ValueError("tip labels must be unique")
        self._flat = None

    def _postorder(self) -> list[int]:
        order = []
        stack = [(self.root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
            else:
                stack.append((node, True))
                for child in reversed(self.children[node]):
                    stack.append((child, False))
        return order

    @property
    def n_nodes(self) -> int:
        return self.parent.size

    @property
    def tip_count(self) -> int:
        return len(self.tips)

    @property
    def tip_labels(self) -> list[str]:
        return [self.labels[t] for t in self.tips]

    def root_depths(self) -> np.ndarray:
        """Path length from the root to every node."""
        depth = np.zeros(self.n_nodes)
        for node in reversed(self.postorder):
            par = self.parent[node]
            if par >= 0:
                depth[node] = depth[par] + self.branch_length[node]
        return depth

    def flat(self):
        """Arrays consumed by the pruning kernel, computed once per tree."""
        if self._flat is None:
            n = self.n_nodes
            left = np.full(n, -1, dtype=np.int64)
            right = np.full(n, -1, dtype=np.int64)
            for node, kids in enumerate(self.children):
                if kids:
                    left[node], right[node] = kids
            tip_slot = np.full(n, -1, dtype=np.int64)
            for slot, tip in enumerate(self.tips):
                tip_slot[tip] = slot
            self._flat = (np.asarray(self.postorder, dtype=np.int64), left, right, self.branch_length, tip_slot)
        return self._flat

    def to_newick(self) -> str:
        def render(node):
            label = _quote(self.labels[node]) if self.labels[node] else ""
            kids = self.children[node]
            text = "(" + ",".join(render(k) for k in kids) + ")" + label if kids else label
            if node != self.root:
                text += ":" + repr(float(self.branch_length[node]))
            return text

        return render(self.root) + ";"

    def __repr__(self):
        return f"Phylogeny(tips={self.tip_count})"


_DELIMS = set("(),:;[")


def _quote(label: str) -> str:
    if any(c in label for c in "(),:;[]' \t"):
        return "'" + label.replace("'", "''") + "'"
    return label


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def error(self, message):
        raise NewickError(f"{message} at position {self.pos}")

    def skip(self):
        text = self.text
        while self.pos < len(text):
            c = text[self.pos]
            if c.isspace():
                self.pos += 1
            elif c == "[":
                end = text.find("]", self.pos)
                if end < 0:
                    self.error("unterminated comment")
                self.pos = end + 1
            else:
                break

    def peek(self):
        self.skip()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def label(self) -> Optional[str]:
        self.skip()
        text = self.text
        if self.pos < len(text) and text[self.pos] == "'":
            out = []
            self.pos += 1
            while True:
                end = text.find("'", self.pos)
                if end < 0:
                    self.error("unterminated quoted label")
                out.append(text[self.pos:end])
                self.pos = end + 1
                if self.pos < len(text) and text[self.pos] == "'":
                    out.append("'")
                    self.pos += 1
                else:
                    return "".join(out)
        start = self.pos
        while self.pos < len(text) and text[self.pos] not in _DELIMS and not text[self.pos].isspace():
            self.pos += 1
        return text[start:self.pos] or None

    def length(self) -> Optional[float]:
        if self.peek() != ":":
            return None
        self.pos += 1
        self.skip()
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos] not in _DELIMS and not self.text[self.pos].isspace():
            self.pos += 1
        try:
            return float(self.text[start:self.pos])
        except ValueError:
            self.error(f"bad branch length {self.text[start:self.pos]!r}")

    def parse(self):
        parent, lengths, labels = [], [], []

        def node(par):
            idx = len(parent)
            parent.append(par)
            lengths.append(0.0)
            labels.append(None)
            if self.peek() == "(":
                self.pos += 1
                node(idx)
                while self.peek() == ",":
                    self.pos += 1
                    node(idx)
                if self.peek() != ")":
                    self.error("expected ')'")
                self.pos += 1
            labels[idx] = self.label()
            length = self.length()
            if par >= 0:
                if length is None:
                    self.error(f"branch length missing for node {labels[idx] or idx}")
                lengths[idx] = length
            return idx

        node(-1)
        if self.peek() != ";":
            self.error("expected ';'")
        self.pos += 1
        return parent, lengths, labels


def parse_newick(text: str, allow_zero_lengths: bool = False) -> Phylogeny:
    """Parse one Newick tree. Branch lengths are required on every non-root node."""
    parent, lengths, labels = _Parser(text.strip()).parse()
    try:
        return Phylogeny(parent, lengths, labels, allow_zero_lengths=allow_zero_lengths)
    except ValueError as exc:
        raise NewickError(str(exc)) from exc


def read_newick_file(path) -> list[Phylogeny]:
    """One tree per non-empty line; several lines form a tree mixture."""
    trees = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                trees.append(parse_newick(line))
            except NewickError as exc:
                raise NewickError(f"{path}:{lineno}: {exc}") from exc
    if not trees:
        raise NewickError(f"{path}: no trees found")
    return trees


def write_newick_file(path, trees: Iterable[Phylogeny]):
    with open(path, "w") as fh:
        for tree in trees:
            fh.write(tree.to_newick() + "\n")


def random_coalescent_tree(labels, rng: np.random.Generator, scale: float = 1.0) -> Phylogeny:
    """Ultrametric tree from a Kingman coalescent with time unit ``scale``."""
    labels = list(labels)
    n = len(labels)
    if n == 1:
        return Phylogeny([-1], [0.0], labels)
    parent = [-1] * (2 * n - 1)
    height = [0.0] * (2 * n - 1)
    node_labels = labels + [None] * (n - 1)
    active = list(range(n))
    now = 0.0
    for new in range(n, 2 * n - 1):
        k = len(active)
        now += rng.exponential(scale / (k * (k - 1) / 2))
        a, b = sorted(rng.choice(k, size=2, replace=False))
        left, right = active[a], active[b]
        parent[left] = parent[right] = new
        height[new] = now
        active = [node for idx, node in enumerate(active) if idx not in (a, b)] + [new]
    lengths = [0.0 if parent[v] < 0 else height[parent[v]] - height[v] for v in range(2 * n - 1)]
    return Phylogeny(parent, lengths, node_labels)


def path_length(tree: Phylogeny, u: int, w: int) -> float:
    """Length of the path between two nodes, by walking both to the root."""
    ancestors = {}
    node, acc = u, 0.0
    while node >= 0:
        ancestors[node] = acc
        acc += tree.branch_length[node]
        node = tree.parent[node]
    node, acc = w, 0.0
    while node not in ancestors:
        acc += tree.branch_length[node]
        node = tree.parent[node]
    return acc + ancestors[node]
