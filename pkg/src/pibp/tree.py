"""Rooted trees with edge lengths.

Objects live at the leaves. Every root-to-leaf path must have total length
one, so the marginal probability of a feature at any leaf equals the
column parameter of the change process run down the tree.

Nodes are stored in flat arrays so the message-passing kernels can walk
them without touching Python objects: leaves take indices ``0..N-1`` in
order of first appearance, internal nodes follow, and ``postorder`` lists
every node after all of its children.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

DEPTH_TOL = 1e-9


class NewickError(ValueError):
    """Malformed Newick text."""

    def __init__(self, message, position=None):
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)
        self.position = position


class TreeValidationError(ValueError):
    """A tree that violates the unit-depth or structural invariants."""


@dataclass(frozen=True, eq=False)
class PhyloTree:
    """Immutable rooted tree; leaves are the modelled objects.

    ``parent[v]`` is -1 for the root, ``length[v]`` is the length of the
    edge from ``v`` to its parent (0 for the root).
    """

    parent: np.ndarray
    length: np.ndarray
    leaf_names: tuple
    node_labels: tuple = ()
    root: int = field(init=False)
    postorder: np.ndarray = field(init=False, repr=False)
    child_ptr: np.ndarray = field(init=False, repr=False)
    child_idx: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        parent = np.asarray(self.parent, dtype=np.int64).copy()
        length = np.asarray(self.length, dtype=np.float64).copy()
        n_nodes = parent.shape[0]
        n_leaves = len(self.leaf_names)
        if length.shape != (n_nodes,):
            raise TreeValidationError("parent and length arrays differ in size")
        if n_leaves < 1:
            raise TreeValidationError("a tree needs at least one leaf")
        if len(set(self.leaf_names)) != n_leaves:
            raise TreeValidationError("leaf names must be unique")
        roots = np.flatnonzero(parent < 0)
        if roots.size != 1:
            raise TreeValidationError(f"expected exactly one root, found {roots.size}")
        root = int(roots[0])
        if np.any(parent >= n_nodes):
            raise TreeValidationError("parent index out of range")
        if np.any(length < 0) or not np.all(np.isfinite(length)):
            raise TreeValidationError("edge lengths must be finite and non-negative")
        length[root] = 0.0

        counts = np.bincount(parent[parent >= 0], minlength=n_nodes)
        is_leaf = counts == 0
        if not np.array_equal(np.flatnonzero(is_leaf), np.arange(n_leaves)):
            raise TreeValidationError("leaves must occupy indices 0..N-1")
        order = np.argsort(parent[parent >= 0], kind="stable")
        child_idx = np.flatnonzero(parent >= 0)[order]
        child_ptr = np.zeros(n_nodes + 1, dtype=np.int64)
        np.cumsum(counts, out=child_ptr[1:])

        # iterative DFS; also catches cycles and unreachable nodes
        post = []
        stack = [(root, False)]
        seen = np.zeros(n_nodes, dtype=bool)
        while stack:
            v, expanded = stack.pop()
            if expanded:
                post.append(v)
                continue
            if seen[v]:
                raise TreeValidationError("cycle detected")
            seen[v] = True
            stack.append((v, True))
            for c in child_idx[child_ptr[v]:child_ptr[v + 1]][::-1]:
                stack.append((int(c), False))
        if not seen.all():
            raise TreeValidationError("tree is not connected")

        for name, value in (
            ("parent", parent),
            ("length", length),
            ("postorder", np.array(post, dtype=np.int64)),
            ("child_ptr", child_ptr),
            ("child_idx", child_idx.astype(np.int64)),
        ):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "root", root)
        object.__setattr__(self, "leaf_names", tuple(self.leaf_names))
        object.__setattr__(self, "node_labels", tuple(self.node_labels))
        self._check_depths()

    def _check_depths(self):
        depths = self.depths()
        for i in range(self.n_leaves):
            if abs(depths[i] - 1.0) > DEPTH_TOL:
                raise TreeValidationError(
                    f"leaf {self.leaf_names[i]!r} is at depth {depths[i]:.12g}, expected 1"
                )

    @property
    def n_leaves(self):
        return len(self.leaf_names)

    @property
    def n_nodes(self):
        return self.parent.shape[0]

    @property
    def max_degree(self):
        return int(np.diff(self.child_ptr).max(initial=0))

    def children(self, v):
        return self.child_idx[self.child_ptr[v]:self.child_ptr[v + 1]]

    def depths(self):
        """Distance from the root to every node."""
        depth = np.zeros(self.n_nodes)
        for v in self.postorder[::-1]:
            p = self.parent[v]
            if p >= 0:
                depth[v] = depth[p] + self.length[v]
        return depth

    def leaf_index(self, name):
        try:
            return self.leaf_names.index(name)
        except ValueError:
            raise KeyError(f"unknown leaf {name!r}") from None

    def path_to_root(self, v):
        """Nodes from ``v`` up to and including the root."""
        path = [int(v)]
        while self.parent[path[-1]] >= 0:
            path.append(int(self.parent[path[-1]]))
        return path

    def to_newick(self):
        def render(v):
            if v < self.n_leaves:
                label = _quote(self.leaf_names[v])
            else:
                kids = ",".join(render(int(c)) for c in self.children(v))
                label = f"({kids})"
                if self.node_labels and self.node_labels[v]:
                    label += _quote(self.node_labels[v])
            if v == self.root:
                return label
            return f"{label}:{float(self.length[v])!r}"

        return render(self.root) + ";"

    def to_dict(self):
        nodes = []
        for v in range(self.n_nodes):
            nodes.append({
                "id": v,
                "name": self.leaf_names[v] if v < self.n_leaves else None,
                "parent": int(self.parent[v]) if v != self.root else None,
                "length": float(self.length[v]),
            })
        return {"n_leaves": self.n_leaves, "root": self.root, "nodes": nodes}

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)


def _quote(name):
    if any(ch in name for ch in "():;,[]' \t\n"):
        return "'" + name.replace("'", "''") + "'"
    return name


def total_edge_length(tree):
    return float(tree.length.sum())


@dataclass(frozen=True)
class MinimalSubtreeView:
    """Union of the root paths of a set of leaves plus one new leaf."""

    included_nodes: frozenset
    pendant_length: float
    rest_length: float


def minimal_subtree(tree, prior_leaves, new_leaf):
    """Split the minimal subtree spanning ``prior_leaves + new_leaf``.

    ``pendant_length`` is the length of the path joining ``new_leaf`` to the
    subtree already spanned by ``prior_leaves`` (the root is always part of
    that subtree); ``rest_length`` is the total length of the latter.
    """
    n = tree.n_leaves
    prior = {int(v) for v in prior_leaves}
    new_leaf = int(new_leaf)
    for v in prior | {new_leaf}:
        if not 0 <= v < n:
            raise KeyError(f"unknown leaf id {v}")
    if new_leaf in prior:
        raise ValueError("new_leaf must not be among prior_leaves")

    view = {tree.root}
    for leaf in prior:
        v = leaf
        while v not in view:
            view.add(v)
            v = int(tree.parent[v])
    rest = sum(float(tree.length[v]) for v in view)

    pendant = 0.0
    v = new_leaf
    path = []
    while v not in view:
        path.append(v)
        pendant += float(tree.length[v])
        v = int(tree.parent[v])
    return MinimalSubtreeView(frozenset(view | set(path)), pendant, rest)


def star_tree(n, names=None):
    """``n`` leaves hanging off the root by unit-length edges."""
    if n < 1:
        raise ValueError("star_tree needs n >= 1")
    if names is None:
        names = [f"t{i}" for i in range(n)]
    parent = np.full(n + 1, n, dtype=np.int64)
    parent[n] = -1
    length = np.ones(n + 1)
    length[n] = 0.0
    return PhyloTree(parent, length, tuple(names))


# --- Newick ---------------------------------------------------------------


class _NewickParser:
    def __init__(self, text):
        self.text = text
        self.pos = 0
        # nodes in creation order; leaves renumbered afterwards
        self.parent = []
        self.length = []
        self.label = []
        self.is_leaf = []

    def error(self, message):
        raise NewickError(message, self.pos)

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self):
        self.skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def new_node(self, leaf):
        self.parent.append(-1)
        self.length.append(None)
        self.label.append("")
        self.is_leaf.append(leaf)
        return len(self.parent) - 1

    def parse(self):
        root = self.subtree()
        if self.peek() == ":":
            self.pos += 1
            self.number()  # root edge length carries no information
        if self.peek() != ";":
            self.error("expected ';'")
        self.pos += 1
        if self.peek():
            self.error("unexpected text after ';'")
        return root

    def subtree(self):
        if self.peek() == "(":
            self.pos += 1
            node = self.new_node(False)
            while True:
                child = self.subtree()
                self.parent[child] = node
                self.edge_length(child)
                ch = self.peek()
                if ch == ",":
                    self.pos += 1
                elif ch == ")":
                    self.pos += 1
                    break
                else:
                    self.error("expected ',' or ')'")
            self.label[node] = self.name(required=False)
            return node
        node = self.new_node(True)
        self.label[node] = self.name(required=True)
        return node

    def edge_length(self, child):
        if self.peek() != ":":
            what = self.label[child] or "internal node"
            self.error(f"missing branch length for {what!r}")
        self.pos += 1
        self.length[child] = self.number()

    def name(self, required):
        ch = self.peek()
        if ch == "'":
            start = self.pos
            self.pos += 1
            out = []
            while True:
                if self.pos >= len(self.text):
                    self.pos = start
                    self.error("unterminated quoted name")
                c = self.text[self.pos]
                if c == "'":
                    if self.text[self.pos + 1:self.pos + 2] == "'":
                        out.append("'")
                        self.pos += 2
                        continue
                    self.pos += 1
                    break
                out.append(c)
                self.pos += 1
            return "".join(out)
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos] not in "():;,[]'" \
                and not self.text[self.pos].isspace():
            self.pos += 1
        label = self.text[start:self.pos]
        if required and not label:
            self.error("expected a leaf name")
        return label

    def number(self):
        self.skip_ws()
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos] in "0123456789+-.eE":
            self.pos += 1
        token = self.text[start:self.pos]
        try:
            value = float(token)
        except ValueError:
            self.pos = start
            self.error(f"invalid branch length {token!r}")
        if value < 0:
            self.pos = start
            self.error("negative branch length")
        return value


def parse_newick(text):
    """Parse Newick text with mandatory branch lengths into a PhyloTree."""
    parser = _NewickParser(text.strip())
    root = parser.parse()
    leaves = [v for v, leaf in enumerate(parser.is_leaf) if leaf]
    internal = [v for v, leaf in enumerate(parser.is_leaf) if not leaf]
    order = leaves + internal
    new_id = {old: new for new, old in enumerate(order)}
    parent = np.array(
        [new_id[parser.parent[v]] if v != root else -1 for v in order], dtype=np.int64
    )
    length = np.array([parser.length[v] or 0.0 for v in order])
    names = tuple(parser.label[v] for v in leaves)
    labels = tuple(parser.label[v] if not parser.is_leaf[v] else "" for v in order)
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise TreeValidationError(f"duplicate leaf names: {', '.join(dupes)}")
    if not internal:
        raise TreeValidationError(f"leaf {names[0]!r} is at depth 0, expected 1")
    return PhyloTree(parent, length, names, labels)


def read_newick(path):
    with open(path) as fh:
        return parse_newick(fh.read())
