"""Brute-force reference implementations shared by the unit and acceptance
suites. Exhaustive and slow on purpose; only run on graphs of <= 8 nodes."""

import itertools

import numpy as np


def brute_parents(edges, v):
    return {u for (u, w) in edges if w == v}


def brute_ancestors(n, edges, v):
    """u is an ancestor iff a simple directed path u -> ... -> v exists."""
    succ = {i: set() for i in range(n)}
    for u, w in edges:
        succ[u].add(w)

    def reaches(u):
        stack = [(u, {u})]
        while stack:
            node, seen = stack.pop()
            for w in succ[node]:
                if w == v:
                    return True
                if w not in seen:
                    stack.append((w, seen | {w}))
        return False

    return {u for u in range(n) if (v in succ[u]) or reaches(u)}


def brute_cycles(n, edges):
    """All simple cycles, canonically rooted at their smallest node."""
    edge_set = set(edges)
    found = set()
    for size in range(2, n + 1):
        for subset in itertools.combinations(range(n), size):
            start = subset[0]
            for rest in itertools.permutations(subset[1:]):
                cycle = (start,) + rest
                pairs = list(zip(cycle, cycle[1:] + (start,)))
                if all(p in edge_set for p in pairs):
                    found.add(cycle)
    return found


def brute_betweenness(n, edges):
    """Enumerate all simple paths per ordered pair; count the shortest."""
    succ = {i: [] for i in range(n)}
    for u, w in edges:
        succ[u].append(w)

    def all_paths(s, t):
        out = []
        stack = [(s, (s,))]
        while stack:
            node, path = stack.pop()
            if node == t:
                out.append(path)
                continue
            for w in succ[node]:
                if w not in path:
                    stack.append((w, path + (w,)))
        return out

    score = {i: 0.0 for i in range(n)}
    for s in range(n):
        for t in range(n):
            if s == t:
                continue
            paths = all_paths(s, t)
            if not paths:
                continue
            shortest = min(len(p) for p in paths)
            sp = [p for p in paths if len(p) == shortest]
            for v in range(n):
                if v in (s, t):
                    continue
                through = sum(1 for p in sp if v in p)
                if through:
                    score[v] += through / len(sp)
    return score


def random_graph(seed, max_nodes=8):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, max_nodes + 1))
    edges = [(u, v) for u in range(n) for v in range(n)
             if u != v and rng.uniform() < 0.25]
    return n, edges
