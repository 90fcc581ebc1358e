"""Synthetic student-submission corpora with scripted rubric annotations.

Submissions are produced by weighted random mutation chains applied to a
task's reference solutions, with Zipf-distributed frequencies so a handful of
programs carry most of the mass. Annotation replays each program on the
task's unit-test worlds and evaluates deterministic rubric predicates over
the surface tree, the test outcomes, and the traces.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from typing import Callable

from .dsl import (
    CONDITION_ATOMS,
    CanonicalId,
    Node,
    NodeKind,
    PRIMITIVE_KINDS,
    binarize,
    canonical_id,
    inline_calls,
    leaf,
    num_kind,
    num_value,
    parse,
    pretty,
    walk,
)
from .gridworld import WorldSpec, WorldState
from .interpreter import (
    DEFAULT_STEP_LIMIT,
    ExecutionTrace,
    HaltReason,
    run,
)
from .numcore import make_rng

FUNCTIONAL = "functional"
STRATEGIC = "strategic"
STYLISTIC = "stylistic"

AnnotationSet = frozenset


class CorpusError(Exception):
    pass


@dataclass(frozen=True)
class AnnotationContext:
    """Everything a rubric predicate may look at."""

    surface: Node
    modeling: Node
    pass_fraction: float
    traces: tuple[ExecutionTrace, ...]
    expected: tuple[WorldState, ...]


@dataclass(frozen=True)
class RubricRule:
    label_id: str
    category: str
    description: str
    predicate: Callable[[AnnotationContext], bool]

    def __post_init__(self):
        if self.category not in (FUNCTIONAL, STRATEGIC, STYLISTIC):
            raise CorpusError(f"unknown rubric category {self.category}")


@dataclass
class Task:
    """A grading task: unit-test worlds, reference solutions, and a rubric."""

    name: str
    worlds: list[tuple[WorldSpec, WorldState, WorldState]]
    reference_solutions: list[Node]
    rubric: list[RubricRule]
    step_limit: int = DEFAULT_STEP_LIMIT

    def world_pairs(self) -> list[tuple[WorldSpec, WorldState]]:
        return [(spec, start) for spec, start, _ in self.worlds]

    def labels(self) -> list[str]:
        return [rule.label_id for rule in self.rubric]

    def categories(self) -> dict[str, str]:
        return {rule.label_id: rule.category for rule in self.rubric}


def validate_task(task: Task) -> None:
    if not task.worlds:
        raise CorpusError("task has no worlds")
    shapes = {(s.rows, s.cols, s.beeper_max) for s, _, _ in task.worlds}
    if len(shapes) != 1:
        raise CorpusError("all worlds of a task must share one state layout")
    ids = {rule.label_id for rule in task.rubric}
    if len(ids) != len(task.rubric):
        raise CorpusError("duplicate rubric label ids")
    if not {"correct", "incorrect"} <= ids:
        raise CorpusError("rubric must include correct and incorrect labels")
    for ref in task.reference_solutions:
        ctx = build_context(ref, task)
        if ctx.pass_fraction != 1.0:
            raise CorpusError(
                f"reference solution fails unit tests on task {task.name}"
            )


def modeling_ast(program: Node) -> Node:
    """Surface tree to executable modeling tree: inline methods, binarize."""
    return binarize(inline_calls(program))


def build_context(program: Node, task: Task) -> AnnotationContext:
    model = modeling_ast(program)
    traces = []
    passed = 0
    for spec, start, expected in task.worlds:
        trace = run(model, spec, start, task.step_limit)
        traces.append(trace)
        if trace.halted_reason is HaltReason.FINISHED and trace.final == expected:
            passed += 1
    return AnnotationContext(
        surface=program,
        modeling=model,
        pass_fraction=passed / len(task.worlds),
        traces=tuple(traces),
        expected=tuple(expected for _, _, expected in task.worlds),
    )


def annotate(program: Node, task: Task) -> frozenset[str]:
    """Set of rubric labels whose predicates hold for this program."""
    ctx = build_context(program, task)
    return frozenset(rule.label_id for rule in task.rubric if rule.predicate(ctx))


@dataclass(frozen=True)
class Submission:
    program: Node
    source: str
    frequency: int
    labels: frozenset[str]
    digest: CanonicalId


# --- rubric predicate helpers -------------------------------------------------


def count_kinds(ast: Node, kinds) -> int:
    return sum(1 for n in walk(ast) if n.kind in kinds)


def tests_condition(ast: Node, atom: NodeKind) -> bool:
    return any(n.kind is atom for n in walk(ast))


_COUNTED_STMTS = PRIMITIVE_KINDS | {
    NodeKind.REPEAT,
    NodeKind.WHILE,
    NodeKind.IF,
    NodeKind.IFELSE,
    NodeKind.CALL,
}


def statement_count(ast: Node) -> int:
    """Statements excluding structural SEQ/EMPTY glue."""
    return sum(1 for n in walk(ast) if n.kind in _COUNTED_STMTS)


def nesting_depth(ast: Node) -> int:
    """Block-nesting depth; a flat program has depth 1."""

    def depth(node: Node) -> int:
        if node.kind is NodeKind.REPEAT:
            return 1 + depth(node.children[1])
        if node.kind in (NodeKind.WHILE, NodeKind.IF):
            return 1 + depth(node.children[1])
        if node.kind is NodeKind.IFELSE:
            return 1 + max(depth(node.children[1]), depth(node.children[2]))
        if node.kind in (NodeKind.SEQ, NodeKind.DEF):
            return max((depth(c) for c in node.children), default=0)
        return 0

    return 1 + depth(ast)


_TURNS = (NodeKind.TURN_LEFT, NodeKind.TURN_RIGHT)


def has_redundant_turns(ast: Node, any_pair: bool = False) -> bool:
    """An adjacent cancelling turn pair, or three turns in a row.

    Any three consecutive turns net out to at most a half turn, so they are
    always expressible with two or fewer. With any_pair, every adjacent turn
    pair counts, for tasks where even a half turn signals flailing.
    """
    for n in walk(ast):
        if n.kind not in (NodeKind.SEQ, NodeKind.DEF):
            continue
        kinds = [c.kind for c in n.children]
        for a, b in zip(kinds, kinds[1:]):
            if a in _TURNS and b in _TURNS and (any_pair or a is not b):
                return True
        for a, b, c in zip(kinds, kinds[1:], kinds[2:]):
            if a in _TURNS and b in _TURNS and c in _TURNS:
                return True
    return False


def has_empty_block(ast: Node) -> bool:
    for n in walk(ast):
        if n.kind in (NodeKind.REPEAT, NodeKind.WHILE, NodeKind.IF):
            if n.children[1].kind is NodeKind.EMPTY:
                return True
        elif n.kind is NodeKind.IFELSE:
            if (
                n.children[1].kind is NodeKind.EMPTY
                or n.children[2].kind is NodeKind.EMPTY
            ):
                return True
    return False


# --- mutation machinery ---------------------------------------------------------
#
# Mutations act on a nested mutable form: a program is a list of statements,
# each ("prim", kind) | ("call", name) | ("repeat", k, body) |
# ("while", cond, body) | ("if", cond, body) | ("ifelse", cond, then, els),
# with cond = [negated, atom kind] and bodies plain lists.


def _stmt_to_mut(node: Node):
    kind = node.kind
    if kind in PRIMITIVE_KINDS:
        return ["prim", kind]
    if kind is NodeKind.CALL:
        return ["call", node.name]
    if kind is NodeKind.REPEAT:
        return ["repeat", num_value(node.children[0].kind), _body_to_mut(node.children[1])]
    if kind is NodeKind.WHILE:
        return ["while", _cond_to_mut(node.children[0]), _body_to_mut(node.children[1])]
    if kind is NodeKind.IF:
        return ["if", _cond_to_mut(node.children[0]), _body_to_mut(node.children[1])]
    if kind is NodeKind.IFELSE:
        return [
            "ifelse",
            _cond_to_mut(node.children[0]),
            _body_to_mut(node.children[1]),
            _body_to_mut(node.children[2]),
        ]
    raise CorpusError(f"cannot mutate {kind}")


def _cond_to_mut(node: Node):
    if node.kind is NodeKind.NOT:
        return [True, node.children[0].kind]
    return [False, node.kind]


def _body_to_mut(node: Node) -> list:
    if node.kind is NodeKind.EMPTY:
        return []
    if node.kind is NodeKind.SEQ:
        return [_stmt_to_mut(c) for c in node.children]
    return [_stmt_to_mut(node)]


def to_mutable(program: Node) -> list:
    return _body_to_mut(program)


def _mut_to_stmt(stmt) -> Node:
    tag = stmt[0]
    if tag == "prim":
        return leaf(stmt[1])
    if tag == "call":
        return Node(NodeKind.CALL, name=stmt[1])
    if tag == "repeat":
        return Node(NodeKind.REPEAT, (leaf(num_kind(stmt[1])), _mut_to_block(stmt[2])))
    if tag == "while":
        return Node(NodeKind.WHILE, (_mut_to_cond(stmt[1]), _mut_to_block(stmt[2])))
    if tag == "if":
        return Node(NodeKind.IF, (_mut_to_cond(stmt[1]), _mut_to_block(stmt[2])))
    if tag == "ifelse":
        return Node(
            NodeKind.IFELSE,
            (_mut_to_cond(stmt[1]), _mut_to_block(stmt[2]), _mut_to_block(stmt[3])),
        )
    raise CorpusError(f"bad mutable statement {tag}")


def _mut_to_cond(cond) -> Node:
    negated, atom = cond
    atom_node = leaf(atom)
    return Node(NodeKind.NOT, (atom_node,)) if negated else atom_node


def _mut_to_block(body: list) -> Node:
    if not body:
        return leaf(NodeKind.EMPTY)
    return Node(NodeKind.SEQ, tuple(_mut_to_stmt(s) for s in body))


def from_mutable(prog: list) -> Node:
    """Back to a parser-image tree: bare statement, SEQ, or EMPTY at root."""
    if not prog:
        return leaf(NodeKind.EMPTY)
    if len(prog) == 1:
        return _mut_to_stmt(prog[0])
    return Node(NodeKind.SEQ, tuple(_mut_to_stmt(s) for s in prog))


def _all_lists(prog: list) -> list[list]:
    lists = [prog]

    def rec(stmt):
        tag = stmt[0]
        if tag in ("repeat", "while", "if"):
            lists.append(stmt[2])
            for s in stmt[2]:
                rec(s)
        elif tag == "ifelse":
            lists.append(stmt[2])
            lists.append(stmt[3])
            for s in stmt[2] + stmt[3]:
                rec(s)

    for s in prog:
        rec(s)
    return lists


def _positions(prog: list) -> list[tuple[list, int]]:
    return [(lst, i) for lst in _all_lists(prog) for i in range(len(lst))]


def _walk_stmts(prog: list):
    for lst in _all_lists(prog):
        yield from lst


_ATOM_CHOICES = sorted(CONDITION_ATOMS, key=lambda k: k.name)
_PRIM_CHOICES = sorted(PRIMITIVE_KINDS, key=lambda k: k.name)


def _op_delete(prog, rng):
    pos = _positions(prog)
    if not pos:
        return False
    lst, i = pos[rng.integers(len(pos))]
    del lst[i]
    return True


def _op_duplicate(prog, rng):
    pos = _positions(prog)
    if not pos:
        return False
    lst, i = pos[rng.integers(len(pos))]
    lst.insert(i + 1, copy.deepcopy(lst[i]))
    return True


def _op_swap_adjacent(prog, rng):
    pairs = [
        (lst, i) for lst in _all_lists(prog) for i in range(len(lst) - 1)
    ]
    if not pairs:
        return False
    lst, i = pairs[rng.integers(len(pairs))]
    lst[i], lst[i + 1] = lst[i + 1], lst[i]
    return True


def _op_replace_primitive(prog, rng):
    prims = [s for s in _walk_stmts(prog) if s[0] == "prim"]
    if not prims:
        return False
    stmt = prims[rng.integers(len(prims))]
    choices = [k for k in _PRIM_CHOICES if k is not stmt[1]]
    stmt[1] = choices[rng.integers(len(choices))]
    return True


def _op_change_num(prog, rng):
    repeats = [s for s in _walk_stmts(prog) if s[0] == "repeat"]
    if not repeats:
        return False
    stmt = repeats[rng.integers(len(repeats))]
    choices = [k for k in range(1, 11) if k != stmt[1]]
    stmt[1] = int(choices[rng.integers(len(choices))])
    return True


def _op_flip_condition(prog, rng):
    conds = [s[1] for s in _walk_stmts(prog) if s[0] in ("while", "if", "ifelse")]
    if not conds:
        return False
    cond = conds[rng.integers(len(conds))]
    if rng.random() < 0.5:
        cond[0] = not cond[0]
    else:
        choices = [k for k in _ATOM_CHOICES if k is not cond[1]]
        cond[1] = choices[rng.integers(len(choices))]
    return True


def _op_wrap_repeat(prog, rng):
    pos = _positions(prog)
    if not pos:
        return False
    lst, i = pos[rng.integers(len(pos))]
    # students often wrap a statement in a one-shot loop, so favor k=1
    k = 1 if rng.random() < 0.3 else int(rng.integers(2, 11))
    lst[i] = ["repeat", k, [lst[i]]]
    return True


def _op_wrap_while(prog, rng):
    pos = _positions(prog)
    if not pos:
        return False
    lst, i = pos[rng.integers(len(pos))]
    cond = [bool(rng.random() < 0.5), _ATOM_CHOICES[rng.integers(len(_ATOM_CHOICES))]]
    lst[i] = ["while", cond, [lst[i]]]
    return True


def _op_unwrap_loop(prog, rng):
    loops = [
        (lst, i)
        for lst in _all_lists(prog)
        for i in range(len(lst))
        if lst[i][0] in ("repeat", "while")
    ]
    if not loops:
        return False
    lst, i = loops[rng.integers(len(loops))]
    body = lst[i][2]
    lst[i : i + 1] = body
    return True


def _op_truncate(prog, rng):
    if not prog:
        return False
    keep = int(rng.integers(0, len(prog)))
    del prog[keep:]
    return True


_MUTATIONS = [
    (_op_delete, 1.5),
    (_op_duplicate, 1.0),
    (_op_swap_adjacent, 1.0),
    (_op_replace_primitive, 1.5),
    (_op_change_num, 0.75),
    (_op_flip_condition, 1.25),
    (_op_wrap_repeat, 1.0),
    (_op_wrap_while, 0.5),
    (_op_unwrap_loop, 0.75),
    (_op_truncate, 1.0),
]
_MUT_WEIGHTS = [w for _, w in _MUTATIONS]
_MUT_TOTAL = sum(_MUT_WEIGHTS)


def mutate_chain(program: Node, rng, length: int | None = None) -> Node:
    """Apply a random chain of mutations; length is geometric with mean 3."""
    if length is None:
        length = int(rng.geometric(1.0 / 3.0))
    prog = to_mutable(program)
    applied = 0
    guard = 0
    while applied < length and guard < 20 * (length + 1):
        guard += 1
        r = rng.random() * _MUT_TOTAL
        acc = 0.0
        for op, w in _MUTATIONS:
            acc += w
            if r < acc:
                if op(prog, rng):
                    applied += 1
                break
    return from_mutable(prog)


def generate_corpus(task: Task, n_unique: int, seed: int) -> list[Submission]:
    """n_unique distinct programs: references first, then mutation chains.

    Frequencies follow a Zipf law with exponent 1.5 over generation rank, so
    the references (rank 0) dominate. Deterministic for a given seed.
    """
    if n_unique < 1:
        raise CorpusError("n_unique must be >= 1")
    rng = make_rng(seed)
    programs: list[Node] = []
    seen: set[CanonicalId] = set()

    def admit(prog: Node) -> bool:
        digest = canonical_id(prog)
        if digest in seen:
            return False
        seen.add(digest)
        programs.append(prog)
        return True

    for ref in task.reference_solutions:
        if len(programs) < n_unique:
            admit(ref)
    budget = 200 + 80 * n_unique
    attempts = 0
    refs = task.reference_solutions
    while len(programs) < n_unique:
        attempts += 1
        if attempts > budget:
            raise CorpusError(
                f"could not reach {n_unique} distinct programs "
                f"within {budget} mutation attempts"
            )
        base = refs[int(rng.integers(len(refs)))]
        admit(mutate_chain(base, rng))

    out = []
    for rank, prog in enumerate(programs):
        freq = max(1, round(n_unique * (rank + 1) ** -1.5))
        out.append(
            Submission(
                program=prog,
                source=pretty(prog),
                frequency=freq,
                labels=annotate(prog, task),
                digest=canonical_id(prog),
            )
        )
    return out


def compose_corpus(
    pool: list[Node], n: int, parts: int, seed: int
) -> list[tuple[Node, tuple[Node, ...]]]:
    """n sequenced compositions of `parts` programs drawn uniformly from pool.

    Returns (program, components-in-execution-order) pairs; the program is
    SEQ[A, B] for two parts and SEQ[A, SEQ[B, C]] for three.
    """
    if not pool:
        raise CorpusError("empty composition pool")
    if parts not in (2, 3):
        raise CorpusError("parts must be 2 or 3")
    rng = make_rng(seed)
    out = []
    for _ in range(n):
        comps = tuple(pool[int(rng.integers(len(pool)))] for _ in range(parts))
        if parts == 2:
            prog = Node(NodeKind.SEQ, comps)
        else:
            prog = Node(NodeKind.SEQ, (comps[0], Node(NodeKind.SEQ, comps[1:])))
        out.append((prog, comps))
    return out


# --- corpus files ----------------------------------------------------------------


def write_corpus_file(path, submissions: list[Submission]) -> None:
    """One submission per line: digest hex, frequency, escaped source."""
    with open(path, "w") as fh:
        for sub in submissions:
            fh.write(f"{sub.digest.hex} {sub.frequency} {json.dumps(sub.source)}\n")


def read_corpus_file(path) -> list[tuple[Node, int]]:
    """Parse a corpus file back to (program, frequency), verifying digests."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            digest_hex, freq, source = line.rstrip("\n").split(" ", 2)
            program = parse(json.loads(source))
            if canonical_id(program).hex != digest_hex:
                raise CorpusError(f"digest mismatch on line {lineno}")
            out.append((program, int(freq)))
    return out


def write_labels_file(path, submissions: list[Submission]) -> None:
    with open(path, "w") as fh:
        for sub in submissions:
            fh.write(f"{sub.digest.hex} {','.join(sorted(sub.labels))}\n")


def read_labels_file(path) -> dict[str, frozenset[str]]:
    out = {}
    with open(path) as fh:
        for line in fh:
            digest_hex, _, rest = line.rstrip("\n").partition(" ")
            out[digest_hex] = frozenset(x for x in rest.split(",") if x)
    return out


def write_rubric_file(path, rubric: list[RubricRule]) -> None:
    with open(path, "w") as fh:
        for rule in rubric:
            fh.write(f"{rule.label_id},{rule.category},{rule.description}\n")


def read_rubric_file(path) -> list[tuple[str, str, str]]:
    out = []
    with open(path) as fh:
        for line in fh:
            label, category, description = line.rstrip("\n").split(",", 2)
            out.append((label, category, description))
    return out
