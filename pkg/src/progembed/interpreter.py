"""Instrumented execution of gridworld programs.

Runs follow standard Karel semantics with in-model failure: walking into a
wall or picking from an empty cell sets the crash flag, after which every
remaining statement is a no-op. Primitive statements (including the EMPTY
no-op) cost one step; control flow and condition tests cost zero. A while
loop whose body completes without consuming a step can never make progress,
so it halts with the same reason as a step-limit cutoff.

The instrumented variant records a (pre, subtree, post) observation each time
a statement subtree finishes executing, one per loop-body iteration.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .dsl import (
    CanonicalId,
    DslError,
    Node,
    NodeKind,
    num_value,
    subtrees,
    walk,
)
from .gridworld import Heading, StateLayout, WorldSpec, WorldState

DEFAULT_STEP_LIMIT = 1000
DEFAULT_TRIPLE_CAP = 50


class HaltReason(Enum):
    FINISHED = "finished"
    CRASHED = "crashed"
    STEP_LIMIT = "step_limit"


@dataclass(frozen=True)
class ExecutionTrace:
    final: WorldState
    steps: int
    halted_reason: HaltReason


@dataclass(frozen=True)
class HoareTriple:
    """Observed (precondition, subtree, postcondition) for one execution.

    States are kept in machine form; encode with the world's StateLayout when
    a dense vector is needed. Equivalent observations collapse on the
    (pre, subtree id, post) key.
    """

    pre: WorldState
    subtree: CanonicalId
    post: WorldState
    world: WorldSpec
    world_id: int = 0

    def key(self) -> tuple:
        return (self.pre, self.subtree, self.post)


class _Executor:
    def __init__(self, spec, state, step_limit, observer=None):
        self.spec = spec
        self.state = state
        self.step_limit = step_limit
        self.observer = observer
        self.steps = 0
        self.cutoff = False

    def eval_cond(self, node: Node) -> bool:
        kind = node.kind
        if kind is NodeKind.NOT:
            return not self.eval_cond(node.children[0])
        s, spec = self.state, self.spec
        if kind is NodeKind.COND_FRONT_CLEAR:
            dr, dc = s.heading.delta
            return spec.is_clear(s.row + dr, s.col + dc)
        if kind is NodeKind.COND_LEFT_CLEAR:
            dr, dc = s.heading.left().delta
            return spec.is_clear(s.row + dr, s.col + dc)
        if kind is NodeKind.COND_RIGHT_CLEAR:
            dr, dc = s.heading.right().delta
            return spec.is_clear(s.row + dr, s.col + dc)
        if kind is NodeKind.COND_BEEPERS_PRESENT:
            return s.beepers_at(spec, s.row, s.col) > 0
        if kind is NodeKind.COND_FACING_N:
            return s.heading is Heading.N
        if kind is NodeKind.COND_FACING_E:
            return s.heading is Heading.E
        if kind is NodeKind.COND_FACING_S:
            return s.heading is Heading.S
        if kind is NodeKind.COND_FACING_W:
            return s.heading is Heading.W
        raise DslError(f"{kind} is not a condition")

    def exec_stmt(self, node: Node) -> None:
        # crash absorption and cutoff: skipped statements are not executed
        # and leave no observation
        if self.cutoff or self.state.crashed:
            return
        pre = self.state
        if not self._dispatch(node):
            return
        if self.observer is not None:
            self.observer(node, pre, self.state)

    def _dispatch(self, node: Node) -> bool:
        kind = node.kind
        if kind in (NodeKind.MOVE, NodeKind.TURN_LEFT, NodeKind.TURN_RIGHT,
                    NodeKind.PUT_BEEPER, NodeKind.PICK_BEEPER, NodeKind.EMPTY):
            if self.steps + 1 > self.step_limit:
                self.cutoff = True
                return False
            self.steps += 1
            self._primitive(kind)
            return True
        if kind is NodeKind.SEQ:
            for c in node.children:
                self.exec_stmt(c)
            return True
        if kind is NodeKind.REPEAT:
            for _ in range(num_value(node.children[0].kind)):
                if self.cutoff or self.state.crashed:
                    break
                self.exec_stmt(node.children[1])
            return True
        if kind is NodeKind.WHILE:
            cond, body = node.children
            while not self.cutoff and not self.state.crashed:
                if not self.eval_cond(cond):
                    break
                before = self.steps
                self.exec_stmt(body)
                if (
                    self.steps == before
                    and not self.cutoff
                    and not self.state.crashed
                ):
                    # body consumed no steps, so state cannot have changed
                    # and the condition will stay true forever
                    self.cutoff = True
            return True
        if kind is NodeKind.IF:
            if self.eval_cond(node.children[0]):
                self.exec_stmt(node.children[1])
            return True
        if kind is NodeKind.IFELSE:
            if self.eval_cond(node.children[0]):
                self.exec_stmt(node.children[1])
            else:
                self.exec_stmt(node.children[2])
            return True
        raise DslError(f"cannot execute {kind}; was the tree inlined?")

    def _primitive(self, kind: NodeKind) -> None:
        s = self.state
        if kind is NodeKind.MOVE:
            dr, dc = s.heading.delta
            r, c = s.row + dr, s.col + dc
            if self.spec.is_clear(r, c):
                self.state = WorldState(r, c, s.heading, False, s.beepers)
            else:
                self.state = WorldState(s.row, s.col, s.heading, True, s.beepers)
        elif kind is NodeKind.TURN_LEFT:
            self.state = WorldState(s.row, s.col, s.heading.left(), False, s.beepers)
        elif kind is NodeKind.TURN_RIGHT:
            self.state = WorldState(s.row, s.col, s.heading.right(), False, s.beepers)
        elif kind is NodeKind.PUT_BEEPER:
            i = self.spec.cell_index(s.row, s.col)
            if s.beepers[i] < self.spec.beeper_max:
                beepers = s.beepers[:i] + (s.beepers[i] + 1,) + s.beepers[i + 1 :]
                self.state = WorldState(s.row, s.col, s.heading, False, beepers)
            # at the cap the put saturates: no change, no crash
        elif kind is NodeKind.PICK_BEEPER:
            i = self.spec.cell_index(s.row, s.col)
            if s.beepers[i] > 0:
                beepers = s.beepers[:i] + (s.beepers[i] - 1,) + s.beepers[i + 1 :]
                self.state = WorldState(s.row, s.col, s.heading, False, beepers)
            else:
                self.state = WorldState(s.row, s.col, s.heading, True, s.beepers)


def _check_inlined(prog: Node) -> None:
    for n in walk(prog):
        if n.kind in (NodeKind.DEF, NodeKind.CALL):
            raise DslError("execution requires an inlined tree (no def/call)")


def run(
    prog: Node,
    spec: WorldSpec,
    start: WorldState,
    step_limit: int = DEFAULT_STEP_LIMIT,
) -> ExecutionTrace:
    """Execute an inlined program from a start state and report the outcome."""
    _check_inlined(prog)
    ex = _Executor(spec, start, step_limit)
    ex.exec_stmt(prog)
    if ex.state.crashed:
        reason = HaltReason.CRASHED
    elif ex.cutoff:
        reason = HaltReason.STEP_LIMIT
    else:
        reason = HaltReason.FINISHED
    return ExecutionTrace(final=ex.state, steps=ex.steps, halted_reason=reason)


def extract_triples(
    prog: Node,
    worlds: list[tuple[WorldSpec, WorldState]],
    step_limit: int = DEFAULT_STEP_LIMIT,
    cap_per_subtree: int = DEFAULT_TRIPLE_CAP,
) -> list[HoareTriple]:
    """Execute on every world and record one triple per subtree execution.

    Loop bodies yield a triple per iteration. A statement cut off mid-flight
    by the step limit closes with the cutoff state as its postcondition.
    Equivalent triples collapse, then at most cap_per_subtree survive per
    subtree id, keeping the first encountered.
    """
    _check_inlined(prog)
    ids = {id(node): digest for node, digest in subtrees(prog)}
    raw: list[tuple[int, WorldState, CanonicalId, WorldState, WorldSpec]] = []

    for world_id, (spec, start) in enumerate(worlds):

        def observe(node, pre, post, world_id=world_id, spec=spec):
            raw.append((world_id, pre, ids[id(node)], post, spec))

        ex = _Executor(spec, start, step_limit, observer=observe)
        ex.exec_stmt(prog)

    seen: set[tuple] = set()
    counts: dict[CanonicalId, int] = {}
    out: list[HoareTriple] = []
    for world_id, pre, digest, post, spec in raw:
        key = (pre, digest, post)
        if key in seen:
            continue
        seen.add(key)
        if counts.get(digest, 0) >= cap_per_subtree:
            continue
        counts[digest] = counts.get(digest, 0) + 1
        out.append(HoareTriple(pre, digest, post, spec, world_id))
    return out


def run_unit_tests(
    prog: Node,
    cases: list[tuple[WorldSpec, WorldState, WorldState]],
    step_limit: int = DEFAULT_STEP_LIMIT,
) -> float:
    """Fraction of (spec, start, expected) cases solved exactly."""
    if not cases:
        raise ValueError("no unit tests given")
    passed = 0
    for spec, start, expected in cases:
        trace = run(prog, spec, start, step_limit)
        if trace.halted_reason is HaltReason.FINISHED and trace.final == expected:
            passed += 1
    return passed / len(cases)


# --- triples dataset file ---------------------------------------------------


def encode_triples(
    triples: list[HoareTriple], layout: StateLayout
) -> tuple[np.ndarray, np.ndarray, list[CanonicalId]]:
    """Vectorize triples against one layout: (pre matrix, post matrix, ids)."""
    P = layout.encode_batch([t.pre for t in triples])
    Q = layout.encode_batch([t.post for t in triples])
    return P, Q, [t.subtree for t in triples]


def _pack_vector(vec: np.ndarray) -> str:
    bits = np.packbits(vec.astype(np.uint8))
    return base64.b64encode(bits.tobytes()).decode()


def _unpack_vector(text: str, dim: int) -> np.ndarray:
    bits = np.frombuffer(base64.b64decode(text), dtype=np.uint8)
    return np.unpackbits(bits, count=dim).astype(np.float64)


def write_triples_file(path, triples: list[HoareTriple], layout: StateLayout) -> None:
    """One record per line: world id, packed pre bits, digest hex, post bits."""
    with open(path, "w") as fh:
        fh.write(f"# triples d={layout.dim} layout={layout.describe()}\n")
        for t in triples:
            pre = _pack_vector(layout.encode(t.pre))
            post = _pack_vector(layout.encode(t.post))
            fh.write(f"{t.world_id} {pre} {t.subtree.hex} {post}\n")


@dataclass(frozen=True)
class TripleRecord:
    world_id: int
    pre: np.ndarray
    subtree: CanonicalId
    post: np.ndarray


def read_triples_file(path) -> tuple[int, str, list[TripleRecord]]:
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("# triples d="):
            raise ValueError("not a triples file")
        fields = header[2:].split()
        dim = int(fields[1].split("=", 1)[1])
        layout_desc = fields[2].split("=", 1)[1]
        records = []
        for line in fh:
            wid, pre, digest, post = line.split()
            records.append(
                TripleRecord(
                    world_id=int(wid),
                    pre=_unpack_vector(pre, dim),
                    subtree=CanonicalId(bytes.fromhex(digest)),
                    post=_unpack_vector(post, dim),
                )
            )
    return dim, layout_desc, records
