"""Karel-style gridworld DSL: parsing, canonical ids, and tree transforms.

The language has five primitive actions, bounded repeat loops, sensor-guarded
while/if statements, and parameterless method definitions. There are no
user-defined variables. All trees are immutable; every function here is pure.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from enum import Enum, unique


class DslError(Exception):
    pass


class ParseError(DslError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{message} (line {line}, col {col})")
        self.line = line
        self.col = col


class InvalidAstError(DslError):
    pass


@unique
class NodeKind(Enum):
    MOVE = "move"
    TURN_LEFT = "turn_left"
    TURN_RIGHT = "turn_right"
    PUT_BEEPER = "put_beeper"
    PICK_BEEPER = "pick_beeper"
    REPEAT = "repeat"
    WHILE = "while"
    IF = "if"
    IFELSE = "ifelse"
    SEQ = "seq"
    EMPTY = "empty"
    NOT = "not"
    COND_FRONT_CLEAR = "front_is_clear"
    COND_LEFT_CLEAR = "left_is_clear"
    COND_RIGHT_CLEAR = "right_is_clear"
    COND_BEEPERS_PRESENT = "beepers_present"
    COND_FACING_N = "facing_north"
    COND_FACING_E = "facing_east"
    COND_FACING_S = "facing_south"
    COND_FACING_W = "facing_west"
    NUM_1 = "1"
    NUM_2 = "2"
    NUM_3 = "3"
    NUM_4 = "4"
    NUM_5 = "5"
    NUM_6 = "6"
    NUM_7 = "7"
    NUM_8 = "8"
    NUM_9 = "9"
    NUM_10 = "10"
    DEF = "def"
    CALL = "call"


PRIMITIVE_KINDS = frozenset(
    {
        NodeKind.MOVE,
        NodeKind.TURN_LEFT,
        NodeKind.TURN_RIGHT,
        NodeKind.PUT_BEEPER,
        NodeKind.PICK_BEEPER,
    }
)
CONDITION_ATOMS = frozenset(
    {
        NodeKind.COND_FRONT_CLEAR,
        NodeKind.COND_LEFT_CLEAR,
        NodeKind.COND_RIGHT_CLEAR,
        NodeKind.COND_BEEPERS_PRESENT,
        NodeKind.COND_FACING_N,
        NodeKind.COND_FACING_E,
        NodeKind.COND_FACING_S,
        NodeKind.COND_FACING_W,
    }
)
CONDITION_KINDS = CONDITION_ATOMS | {NodeKind.NOT}
NUM_KINDS = frozenset(k for k in NodeKind if k.name.startswith("NUM_"))
DECISION_KINDS = frozenset(
    {NodeKind.REPEAT, NodeKind.WHILE, NodeKind.IF, NodeKind.IFELSE}
)
STATEMENT_KINDS = (
    PRIMITIVE_KINDS
    | DECISION_KINDS
    | {NodeKind.SEQ, NodeKind.EMPTY, NodeKind.CALL}
)

MAX_REPEAT = 10


def num_value(kind: NodeKind) -> int:
    if kind not in NUM_KINDS:
        raise InvalidAstError(f"{kind} is not a numeric literal")
    return int(kind.value)


def num_kind(k: int) -> NodeKind:
    if not 1 <= k <= MAX_REPEAT:
        raise InvalidAstError(f"repeat count {k} outside 1..{MAX_REPEAT}")
    return NodeKind[f"NUM_{k}"]


@dataclass(frozen=True)
class Node:
    """One AST node. Structural equality and hashing come from the dataclass."""

    kind: NodeKind
    children: tuple["Node", ...] = ()
    name: str | None = None

    def __post_init__(self):
        _check_node(self)

    def __repr__(self):
        name = f" {self.name}" if self.name else ""
        kids = f" [{len(self.children)}]" if self.children else ""
        return f"<{self.kind.name}{name}{kids}>"


ProgramAst = Node


def _is_statement(node: Node) -> bool:
    return node.kind in STATEMENT_KINDS


def _check_node(node: Node) -> None:
    kind, children = node.kind, node.children
    if node.name is not None and kind not in (NodeKind.DEF, NodeKind.CALL):
        raise InvalidAstError(f"{kind} cannot carry a name")
    if kind in (NodeKind.DEF, NodeKind.CALL) and not node.name:
        raise InvalidAstError(f"{kind} requires a name")
    if kind is NodeKind.REPEAT:
        if len(children) != 2 or children[0].kind not in NUM_KINDS:
            raise InvalidAstError("repeat needs [count, body]")
        if not _is_statement(children[1]):
            raise InvalidAstError("repeat body must be a statement")
    elif kind in (NodeKind.WHILE, NodeKind.IF):
        if (
            len(children) != 2
            or children[0].kind not in CONDITION_KINDS
            or not _is_statement(children[1])
        ):
            raise InvalidAstError(f"{kind.value} needs [condition, body]")
    elif kind is NodeKind.IFELSE:
        if (
            len(children) != 3
            or children[0].kind not in CONDITION_KINDS
            or not _is_statement(children[1])
            or not _is_statement(children[2])
        ):
            raise InvalidAstError("ifelse needs [condition, then, else]")
    elif kind is NodeKind.NOT:
        if len(children) != 1 or children[0].kind not in CONDITION_ATOMS:
            raise InvalidAstError("not wraps a single condition atom")
    elif kind is NodeKind.SEQ:
        if not children:
            raise InvalidAstError("seq needs at least one child")
        seen_stmt = False
        for c in children:
            if c.kind is NodeKind.DEF:
                # method definitions may only prefix a compilation unit
                if seen_stmt:
                    raise InvalidAstError("def after statements")
            elif _is_statement(c):
                seen_stmt = True
            else:
                raise InvalidAstError(f"{c.kind} is not a statement")
        if not seen_stmt:
            raise InvalidAstError("seq needs at least one statement child")
    elif kind is NodeKind.DEF:
        for c in children:
            if not _is_statement(c):
                raise InvalidAstError("def body holds statements only")
    else:
        if children:
            raise InvalidAstError(f"{kind} is a leaf")


def leaf(kind: NodeKind) -> Node:
    return Node(kind)


# --- tokenizer -------------------------------------------------------------

_TOKEN_RE = re.compile(r"[a-z_][a-z0-9_]*|\d+|[(){}]|\S")

_ATOM_WORDS = {k.value: k for k in CONDITION_ATOMS}
_PRIMITIVE_WORDS = {k.value: k for k in PRIMITIVE_KINDS}
_KEYWORDS = (
    set(_ATOM_WORDS)
    | set(_PRIMITIVE_WORDS)
    | {"repeat", "while", "if", "else", "not", "def"}
)


@dataclass
class _Token:
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        line = line.split("#", 1)[0]
        for m in _TOKEN_RE.finditer(line):
            tokens.append(_Token(m.group(), lineno, m.start() + 1))
    return tokens


class _Parser:
    def __init__(self, tokens: list[_Token]):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> str | None:
        if self.pos < len(self.tokens):
            return self.tokens[self.pos].text
        return None

    def next(self) -> _Token:
        if self.pos >= len(self.tokens):
            self.fail("unexpected end of input")
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, text: str) -> _Token:
        tok = self.next()
        if tok.text != text:
            self.fail(f"expected '{text}', found '{tok.text}'", tok)
        return tok

    def fail(self, message: str, tok: _Token | None = None):
        if tok is None:
            tok = self.tokens[self.pos] if self.pos < len(self.tokens) else None
        if tok is None:
            last = self.tokens[-1] if self.tokens else None
            line = last.line if last else 1
            col = last.col + len(last.text) if last else 1
            raise ParseError(message, line, col)
        raise ParseError(message, tok.line, tok.col)

    def parse_unit(self) -> Node:
        defs: list[Node] = []
        calls: list[tuple[str, _Token]] = []
        while self.peek() == "def":
            defs.append(self.parse_def(calls))
        stmts: list[Node] = []
        while self.peek() is not None:
            if self.peek() == "def":
                self.fail("method definitions must precede statements")
            stmts.append(self.parse_stmt(calls))
        names = set()
        for d in defs:
            if d.name in names:
                self.fail(f"duplicate definition of '{d.name}'")
            names.add(d.name)
        for name, tok in calls:
            if name not in names:
                raise ParseError(f"call to undefined method '{name}'", tok.line, tok.col)
        body = _shape_unit(stmts)
        if defs:
            return Node(NodeKind.SEQ, tuple(defs) + _unit_children(body))
        return body

    def parse_def(self, calls) -> Node:
        self.expect("def")
        tok = self.next()
        if not _is_ident(tok.text):
            self.fail("expected method name", tok)
        body = self.parse_block_stmts(calls)
        return Node(NodeKind.DEF, tuple(body), name=tok.text)

    def parse_block_stmts(self, calls) -> list[Node]:
        self.expect("{")
        stmts = []
        while self.peek() != "}":
            if self.peek() is None:
                self.fail("unclosed block")
            stmts.append(self.parse_stmt(calls))
        self.expect("}")
        return stmts

    def parse_block(self, calls) -> Node:
        stmts = self.parse_block_stmts(calls)
        if not stmts:
            return leaf(NodeKind.EMPTY)
        return Node(NodeKind.SEQ, tuple(stmts))

    def parse_stmt(self, calls) -> Node:
        tok = self.next()
        word = tok.text
        if word in _PRIMITIVE_WORDS:
            return leaf(_PRIMITIVE_WORDS[word])
        if word == "repeat":
            self.expect("(")
            count = self.next()
            if not count.text.isdigit():
                self.fail("expected repeat count", count)
            k = int(count.text)
            if not 1 <= k <= MAX_REPEAT:
                raise ParseError(
                    f"repeat count {k} outside 1..{MAX_REPEAT}", count.line, count.col
                )
            self.expect(")")
            return Node(NodeKind.REPEAT, (leaf(num_kind(k)), self.parse_block(calls)))
        if word == "while":
            self.expect("(")
            cond = self.parse_cond()
            self.expect(")")
            return Node(NodeKind.WHILE, (cond, self.parse_block(calls)))
        if word == "if":
            self.expect("(")
            cond = self.parse_cond()
            self.expect(")")
            then = self.parse_block(calls)
            if self.peek() == "else":
                self.next()
                return Node(NodeKind.IFELSE, (cond, then, self.parse_block(calls)))
            return Node(NodeKind.IF, (cond, then))
        if _is_ident(word) and word not in _KEYWORDS:
            self.expect("(")
            self.expect(")")
            calls.append((word, tok))
            return Node(NodeKind.CALL, name=word)
        self.fail(f"expected a statement, found '{word}'", tok)

    def parse_cond(self) -> Node:
        tok = self.next()
        if tok.text == "not":
            return Node(NodeKind.NOT, (self.parse_atom(),))
        return self.atom_from(tok)

    def parse_atom(self) -> Node:
        return self.atom_from(self.next())

    def atom_from(self, tok: _Token) -> Node:
        if tok.text in _ATOM_WORDS:
            return leaf(_ATOM_WORDS[tok.text])
        self.fail(f"expected a condition, found '{tok.text}'", tok)


def _is_ident(text: str) -> bool:
    return bool(re.fullmatch(r"[a-z_][a-z0-9_]*", text))


def _shape_unit(stmts: list[Node]) -> Node:
    if not stmts:
        return leaf(NodeKind.EMPTY)
    if len(stmts) == 1:
        return stmts[0]
    return Node(NodeKind.SEQ, tuple(stmts))


def _unit_children(body: Node) -> tuple[Node, ...]:
    if body.kind is NodeKind.SEQ:
        return body.children
    return (body,)


def parse(text: str) -> Node:
    """Parse source text into an AST.

    A unit with method definitions parses to a SEQ whose leading children are
    the DEF nodes; a def-free unit parses to its bare statement tree (EMPTY
    for no statements, the single statement, or a SEQ).
    """
    return _Parser(_tokenize(text)).parse_unit()


# --- pretty printing -------------------------------------------------------


def pretty(ast: Node) -> str:
    """Deterministic canonical source text; inverse of parse up to structure."""
    return "\n".join(_lines(ast))


def _lines(node: Node) -> list[str]:
    kind = node.kind
    if kind in PRIMITIVE_KINDS:
        return [kind.value]
    if kind is NodeKind.EMPTY:
        return []
    if kind is NodeKind.SEQ:
        out: list[str] = []
        for c in node.children:
            out.extend(_lines(c))
        return out
    if kind is NodeKind.CALL:
        return [f"{node.name}()"]
    if kind is NodeKind.DEF:
        body: list[str] = []
        for c in node.children:
            body.extend(_lines(c))
        return [f"def {node.name} {{"] + ["  " + s for s in body] + ["}"]
    if kind is NodeKind.REPEAT:
        head = f"repeat({num_value(node.children[0].kind)}){{"
        return _block(head, node.children[1])
    if kind is NodeKind.WHILE:
        return _block(f"while({_cond_text(node.children[0])}){{", node.children[1])
    if kind is NodeKind.IF:
        return _block(f"if({_cond_text(node.children[0])}){{", node.children[1])
    if kind is NodeKind.IFELSE:
        cond, then, alt = node.children
        out = _block(f"if({_cond_text(cond)}){{", then)
        out[-1] = "} else {"
        return out + ["  " + s for s in _lines(alt)] + ["}"]
    raise InvalidAstError(f"{kind} cannot appear in statement position")


def _block(head: str, body: Node) -> list[str]:
    return [head] + ["  " + s for s in _lines(body)] + ["}"]


def _cond_text(node: Node) -> str:
    if node.kind is NodeKind.NOT:
        return f"not {node.children[0].kind.value}"
    return node.kind.value


# --- canonical ids ---------------------------------------------------------


@dataclass(frozen=True, order=True)
class CanonicalId:
    """256-bit content hash of a subtree's canonical serialization."""

    digest: bytes

    @property
    def hex(self) -> str:
        return self.digest.hex()

    def __repr__(self):
        return f"CanonicalId({self.digest.hex()[:12]})"


def _serialize(node: Node, out: list[str]) -> None:
    out.append("(")
    out.append(node.kind.name)
    if node.name is not None:
        out.append(":" + node.name)
    for c in node.children:
        _serialize(c, out)
    out.append(")")


def canonical_id(ast: Node) -> CanonicalId:
    parts: list[str] = []
    _serialize(ast, parts)
    return CanonicalId(hashlib.sha256("".join(parts).encode()).digest())


# --- traversals and transforms ---------------------------------------------


def walk(ast: Node):
    """Pre-order iterator over every node, conditions and defs included."""
    stack = [ast]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(reversed(node.children))


def subtrees(ast: Node) -> list[tuple[Node, CanonicalId]]:
    """Pre-order list of statement-position subtrees with their ids.

    Conditions and numeric literals are not statements and are skipped, as are
    DEF declarations (their bodies surface at call sites after inlining). The
    first entry is the tree itself; parents precede children.
    """
    out: list[tuple[Node, CanonicalId]] = []

    def visit(node: Node) -> None:
        out.append((node, canonical_id(node)))
        for c in node.children:
            if c.kind in STATEMENT_KINDS:
                visit(c)

    visit(ast)
    return out


def program_defs(ast: Node) -> dict[str, Node]:
    """DEF nodes of a compilation unit, keyed by name."""
    if ast.kind is NodeKind.SEQ:
        return {c.name: c for c in ast.children if c.kind is NodeKind.DEF}
    return {}


def inline_calls(ast: Node, depth_cap: int = 8) -> Node:
    """Replace every CALL with its DEF body, recursively up to depth_cap.

    Beyond the cap a CALL becomes EMPTY, so recursive methods still produce a
    finite modeling tree. The result contains no DEF or CALL nodes.
    """
    defs = program_defs(ast)

    def expand(node: Node, depth: int) -> Node:
        if node.kind is NodeKind.CALL:
            if node.name not in defs:
                raise DslError(f"call to undefined method '{node.name}'")
            if depth >= depth_cap:
                return leaf(NodeKind.EMPTY)
            body = [expand(c, depth + 1) for c in defs[node.name].children]
            return _shape_unit(body)
        if node.children:
            return Node(
                node.kind, tuple(expand(c, depth) for c in node.children), node.name
            )
        return node

    if ast.kind is NodeKind.SEQ and defs:
        body = [c for c in ast.children if c.kind is not NodeKind.DEF]
        return expand(_shape_unit(body), 0)
    return expand(ast, 0)


def binarize(ast: Node) -> Node:
    """Rewrite every SEQ into a right-leaning chain of 2-ary SEQ nodes.

    Single-child SEQs collapse to the child. Requires an inlined tree; the
    result gives every node kind a fixed arity.
    """
    if ast.kind in (NodeKind.DEF, NodeKind.CALL):
        raise InvalidAstError("binarize requires an inlined tree")
    if not ast.children:
        return ast
    kids = tuple(binarize(c) for c in ast.children)
    if ast.kind is NodeKind.SEQ:
        if len(kids) == 1:
            return kids[0]
        chain = kids[-1]
        for c in reversed(kids[:-1]):
            chain = Node(NodeKind.SEQ, (c, chain))
        return chain
    return Node(ast.kind, kids, ast.name)


def binarized_arity(kind: NodeKind) -> int:
    """Child count of a node kind in a binarized modeling tree."""
    if kind is NodeKind.IFELSE:
        return 3
    if kind in (NodeKind.SEQ, NodeKind.REPEAT, NodeKind.WHILE, NodeKind.IF):
        return 2
    if kind is NodeKind.NOT:
        return 1
    if kind in (NodeKind.DEF, NodeKind.CALL):
        raise InvalidAstError(f"{kind} does not appear in modeling trees")
    return 0


def cyclomatic_complexity(ast: Node) -> int:
    """1 + number of decision nodes (loops and conditionals) in the tree."""
    return 1 + sum(1 for n in walk(ast) if n.kind in DECISION_KINDS)
