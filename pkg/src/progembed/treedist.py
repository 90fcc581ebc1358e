"""Ordered tree edit distance over surface ASTs.

Classical postorder/keyroot dynamic program with unit costs: insert 1,
delete 1, relabel 1 when the node labels differ (DEF/CALL names are part of
the label). Under these costs the distance is a metric.
"""

from __future__ import annotations

import numpy as np

from .dsl import Node


def _label(node: Node) -> str:
    if node.name is not None:
        return f"{node.kind.name}:{node.name}"
    return node.kind.name


class _Annotated:
    """Postorder node labels, leftmost-leaf indices, and keyroots."""

    def __init__(self, root: Node):
        labels: list[str] = []
        lmds: list[int] = []

        def rec(node: Node) -> int:
            first = None
            for c in node.children:
                cl = rec(c)
                if first is None:
                    first = cl
            idx = len(labels)
            labels.append(_label(node))
            lmds.append(first if first is not None else idx)
            return lmds[idx]

        rec(root)
        self.labels = labels
        self.lmds = lmds
        keyroot_by_lmd: dict[int, int] = {}
        for i, l in enumerate(lmds):
            keyroot_by_lmd[l] = i
        self.keyroots = sorted(keyroot_by_lmd.values())


def edit_distance(a: Node, b: Node) -> int:
    """Exact ordered edit distance between two trees."""
    A, B = _Annotated(a), _Annotated(b)
    la, lb = A.lmds, B.lmds
    dist = np.zeros((len(A.labels), len(B.labels)), dtype=np.int64)

    for i in A.keyroots:
        for j in B.keyroots:
            m = i - la[i] + 2
            n = j - lb[j] + 2
            fd = np.zeros((m, n), dtype=np.int64)
            ioff = la[i] - 1
            joff = lb[j] - 1
            for x in range(1, m):
                fd[x, 0] = fd[x - 1, 0] + 1
            for y in range(1, n):
                fd[0, y] = fd[0, y - 1] + 1
            for x in range(1, m):
                for y in range(1, n):
                    if la[i] == la[x + ioff] and lb[j] == lb[y + joff]:
                        relabel = 0 if A.labels[x + ioff] == B.labels[y + joff] else 1
                        fd[x, y] = min(
                            fd[x - 1, y] + 1,
                            fd[x, y - 1] + 1,
                            fd[x - 1, y - 1] + relabel,
                        )
                        dist[x + ioff, y + joff] = fd[x, y]
                    else:
                        p = la[x + ioff] - 1 - ioff
                        q = lb[y + joff] - 1 - joff
                        fd[x, y] = min(
                            fd[x - 1, y] + 1,
                            fd[x, y - 1] + 1,
                            fd[p, q] + dist[x + ioff, y + joff],
                        )
    return int(dist[-1, -1])
