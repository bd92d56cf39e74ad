"""Concept taxonomy: a rooted DAG of hypernym edges with depth, closure,
lowest-common-ancestor queries and pixel-frequency information content.

Ancestor and descendant sets are held as Python ints used as bitsets, which
keeps closure and LCA queries cheap for graphs of a few thousand nodes.
"""

from __future__ import annotations

import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

ROOT_NAME = "entity"


class TaxonomyError(ValueError):
    """Raised when edge records do not describe a valid rooted DAG."""


def _bits(mask: int):
    while mask:
        low = mask & -mask
        yield low.bit_length() - 1
        mask ^= low


@dataclass(frozen=True, eq=False)
class ConceptGraph:
    """Validated concept DAG. Ids are dense, sorted by (depth, name); id 0 is the root."""

    names: tuple[str, ...]
    parents: tuple[frozenset, ...]
    children: tuple[frozenset, ...]
    depth: np.ndarray
    # bitsets: ancestors / descendants exclude the node itself
    ancestor_bits: tuple[int, ...] = field(repr=False)
    descendant_bits: tuple[int, ...] = field(repr=False)
    _level_bits: dict = field(repr=False, default_factory=dict)
    _lca_cache: dict = field(repr=False, default_factory=dict)

    root: int = 0

    def __len__(self):
        return len(self.names)

    @property
    def index(self) -> dict[str, int]:
        idx = self.__dict__.get("_index")
        if idx is None:
            idx = {n: i for i, n in enumerate(self.names)}
            object.__setattr__(self, "_index", idx)
        return idx

    def id_of(self, name: str) -> int:
        try:
            return self.index[name]
        except KeyError:
            raise KeyError(f"unknown concept {name!r}") from None

    @property
    def edges(self) -> list[tuple[int, int]]:
        """(parent, child) pairs in id order."""
        return [(p, c) for c in range(len(self)) for p in sorted(self.parents[c])]

    @property
    def leaves(self) -> list[int]:
        return [v for v in range(len(self)) if not self.children[v]]

    def ancestors(self, v: int, include_self: bool = False) -> list[int]:
        mask = self.ancestor_bits[v] | ((1 << v) if include_self else 0)
        return list(_bits(mask))

    def descendants(self, v: int, include_self: bool = False) -> list[int]:
        mask = self.descendant_bits[v] | ((1 << v) if include_self else 0)
        return list(_bits(mask))

    def is_ancestor(self, a: int, v: int, strict: bool = False) -> bool:
        if a == v:
            return not strict
        return bool(self.ancestor_bits[v] >> a & 1)

    def lca(self, l: int, p: int) -> int:
        """Deepest common ancestor of ``l`` and ``p`` (each node is its own ancestor).

        Ties between equally deep candidates go to the smallest id.
        """
        l, p = int(l), int(p)
        key = (l, p) if l <= p else (p, l)
        hit = self._lca_cache.get(key)
        if hit is not None:
            return hit
        common = (self.ancestor_bits[l] | 1 << l) & (self.ancestor_bits[p] | 1 << p)
        # ids are sorted by depth, so the highest set bit has maximal depth
        top = common.bit_length() - 1
        same_level = common & self._level_bits[int(self.depth[top])]
        out = (same_level & -same_level).bit_length() - 1
        self._lca_cache[key] = out
        return out

    def transitive_closure(self) -> set[tuple[int, int]]:
        return transitive_closure(self)


def _find_cycle(nodes: set[str], parents: Mapping[str, set[str]]) -> list[str]:
    # every node in ``nodes`` has a parent inside ``nodes``; walking up must revisit
    start = min(nodes)
    seen: dict[str, int] = {}
    path: list[str] = []
    cur = start
    while cur not in seen:
        seen[cur] = len(path)
        path.append(cur)
        cur = min(p for p in parents[cur] if p in nodes)
    cyc = path[seen[cur]:]
    return list(reversed(cyc)) + [cyc[-1]]


def build_graph(edge_records: Iterable[tuple[str, str]]) -> ConceptGraph:
    """Validate ``(child, parent)`` records and build the concept DAG.

    With no records at all the result is the single-node graph ``entity``.
    """
    parents: dict[str, set[str]] = defaultdict(set)
    names: set[str] = set()
    any_edge = False
    for child, parent in edge_records:
        child, parent = child.strip(), parent.strip()
        if not child or not parent:
            raise TaxonomyError(f"empty concept name in edge ({child!r}, {parent!r})")
        if parent in parents[child]:
            raise TaxonomyError(f"duplicate edge: {child!r} -> {parent!r}")
        parents[child].add(parent)
        names.update((child, parent))
        any_edge = True
    if not any_edge:
        names = {ROOT_NAME}

    roots = sorted(n for n in names if not parents.get(n))
    if len(roots) > 1:
        raise TaxonomyError(f"multiple roots: {', '.join(roots)}")
    if not roots:
        cyc = _find_cycle(_trim_to_cycles(names, parents), parents)
        raise TaxonomyError("cycle detected: " + " -> ".join(cyc) + " (no root)")
    if roots[0] != ROOT_NAME:
        raise TaxonomyError(f"root must be named {ROOT_NAME!r}, found {roots[0]!r}")

    children: dict[str, set[str]] = defaultdict(set)
    for c, ps in parents.items():
        for p in ps:
            children[p].add(c)

    # Kahn's algorithm; longest-path depth
    depth = {ROOT_NAME: 1}
    pending = {n: len(parents.get(n, ())) for n in names}
    frontier = [ROOT_NAME]
    order = []
    while frontier:
        n = frontier.pop()
        order.append(n)
        for c in children.get(n, ()):
            depth[c] = max(depth.get(c, 0), depth[n] + 1)
            pending[c] -= 1
            if pending[c] == 0:
                frontier.append(c)
    stuck = names - set(order)
    if stuck:
        stuck_with_cycle = {n for n in stuck if parents[n] & stuck}
        # a stuck node either sits on a cycle or below one
        cyc = _find_cycle(_trim_to_cycles(stuck_with_cycle, parents), parents)
        raise TaxonomyError(
            "cycle detected: " + " -> ".join(cyc)
            + f" (unreachable from root: {', '.join(sorted(stuck))})"
        )

    ordered = sorted(names, key=lambda n: (depth[n], n))
    idx = {n: i for i, n in enumerate(ordered)}
    par = tuple(frozenset(idx[p] for p in parents.get(n, ())) for n in ordered)
    chi = tuple(frozenset(idx[c] for c in children.get(n, ())) for n in ordered)
    dep = np.array([depth[n] for n in ordered], dtype=np.int64)
    dep.setflags(write=False)

    anc = [0] * len(ordered)
    for v in range(len(ordered)):  # parents precede children in id order
        for p in par[v]:
            anc[v] |= anc[p] | (1 << p)
    desc = [0] * len(ordered)
    for v in reversed(range(len(ordered))):
        for c in chi[v]:
            desc[v] |= desc[c] | (1 << c)
    levels: dict[int, int] = defaultdict(int)
    for v, d in enumerate(dep):
        levels[int(d)] |= 1 << v

    return ConceptGraph(
        names=tuple(ordered), parents=par, children=chi, depth=dep,
        ancestor_bits=tuple(anc), descendant_bits=tuple(desc),
        _level_bits=dict(levels),
    )


def _trim_to_cycles(nodes: set[str], parents: Mapping[str, set[str]]) -> set[str]:
    # repeatedly drop nodes none of whose parents remain; what is left lies on cycles
    nodes = set(nodes)
    changed = True
    while changed:
        changed = False
        for n in list(nodes):
            if not parents[n] & nodes:
                nodes.discard(n)
                changed = True
    return nodes


def transitive_closure(graph: ConceptGraph) -> set[tuple[int, int]]:
    """All ``(ancestor, descendant)`` pairs joined by a directed path."""
    return {(u, v) for v in range(len(graph)) for u in _bits(graph.ancestor_bits[v])}


def closure_array(graph: ConceptGraph) -> np.ndarray:
    """Closure as a sorted ``(P, 2)`` int array, for training."""
    pairs = sorted(transitive_closure(graph))
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def lca(graph: ConceptGraph, l: int, p: int) -> int:
    return graph.lca(l, p)


@dataclass(frozen=True, eq=False)
class InformationContentTable:
    """Subtree pixel frequency and its information content (nats)."""

    frequency: np.ndarray
    information: np.ndarray
    unobserved: tuple[int, ...] = ()


def information_content(graph: ConceptGraph, own_pixel_counts: Mapping[str, float]) -> InformationContentTable:
    """Frequency of a concept = own count plus the own counts of every descendant,
    each descendant counted once, over the total count.

    Concepts with zero frequency get the information of the rarest observed
    concept plus ln 2, so downstream log ratios stay finite.
    """
    own = np.zeros(len(graph), dtype=np.float64)
    for name, count in own_pixel_counts.items():
        if count < 0:
            raise TaxonomyError(f"negative pixel count for {name!r}: {count}")
        if name not in graph.index:
            raise TaxonomyError(f"pixel count given for unknown concept {name!r}")
        own[graph.index[name]] = count
    total = own.sum()
    freq = np.zeros(len(graph), dtype=np.float64)
    if total > 0:
        for v in range(len(graph)):
            sub = own[v] + sum(own[d] for d in _bits(graph.descendant_bits[v]))
            freq[v] = sub / total
    freq[graph.root] = 1.0

    info = np.zeros(len(graph), dtype=np.float64)
    observed = freq > 0
    info[observed] = -np.log(freq[observed])
    info[graph.root] = 0.0
    missing = tuple(int(v) for v in np.flatnonzero(~observed))
    if missing:
        sentinel = float(info[observed].max()) + math.log(2.0)
        info[~observed] = sentinel
        warnings.warn(
            f"{len(missing)} concept(s) have zero frequency; information set to {sentinel:.4f} nats "
            f"(e.g. {', '.join(graph.names[v] for v in missing[:5])})",
            stacklevel=2,
        )
    freq.setflags(write=False)
    info.setflags(write=False)
    return InformationContentTable(frequency=freq, information=info, unobserved=missing)


def build_taxonomy(edge_records, own_pixel_counts=None) -> tuple[ConceptGraph, InformationContentTable]:
    graph = build_graph(edge_records)
    return graph, information_content(graph, own_pixel_counts or {})


def read_taxonomy_tsv(path) -> list[tuple[str, str]]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise TaxonomyError(f"{path}:{lineno}: expected 'child<TAB>parent', got {line!r}")
            records.append((parts[0], parts[1]))
    return records


def write_taxonomy_tsv(graph: ConceptGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# child\tparent\n")
        for p, c in graph.edges:
            fh.write(f"{graph.names[c]}\t{graph.names[p]}\n")


def read_frequency_tsv(path) -> dict[str, int]:
    counts: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            try:
                name, count = line.split("\t")
                value = int(count)
            except ValueError:
                raise TaxonomyError(f"{path}:{lineno}: expected 'name<TAB>count', got {line!r}") from None
            if value < 0:
                raise TaxonomyError(f"{path}:{lineno}: negative count for {name!r}")
            counts[name] = counts.get(name, 0) + value
    return counts


def write_frequency_tsv(counts: Mapping[str, int], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name in sorted(counts):
            fh.write(f"{name}\t{int(counts[name])}\n")


def _dot_quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def export_dot(graph: ConceptGraph, frequencies=None) -> str:
    """DOT digraph, edges drawn hypernym -> hyponym.

    Each node carries its frequency as a ``freq`` attribute and as the node
    width, so rendered radii follow concept frequency.
    """
    lines = ["digraph taxonomy {", "  node [shape=circle, fixedsize=false];"]
    for v, name in enumerate(graph.names):
        attrs = [f"label={_dot_quote(name)}"]
        if frequencies is not None:
            f = float(frequencies[v])
            attrs.append(f'freq="{f:.6g}"')
            attrs.append(f'width="{0.3 + 2.0 * math.sqrt(f):.4f}"')
        lines.append(f"  n{v} [{', '.join(attrs)}];")
    for p, c in graph.edges:
        lines.append(f"  n{p} -> n{c};")
    lines.append("}")
    return "\n".join(lines) + "\n"
