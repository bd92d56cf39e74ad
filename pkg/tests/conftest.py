import numpy as np
import pytest

from ovparse.taxonomy import build_graph

TOY_EDGES = [
    ("animal", "entity"), ("dog", "animal"), ("cat", "animal"),
    ("furniture", "entity"), ("chair", "furniture"), ("table", "furniture"),
]


@pytest.fixture
def toy():
    return build_graph(TOY_EDGES)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def name_ancestors(edges, name):
    """Ancestors (self included) by walking parent links over names."""
    parents = {}
    for c, p in edges:
        parents.setdefault(c, set()).add(p)
    out, stack = {name}, [name]
    while stack:
        for p in parents.get(stack.pop(), ()):
            if p not in out:
                out.add(p)
                stack.append(p)
    return out


def longest_depth(edges, name):
    parents = {}
    for c, p in edges:
        parents.setdefault(c, set()).add(p)
    if name not in parents:
        return 1
    return 1 + max(longest_depth(edges, p) for p in parents[name])
