"""Three bundled grading tasks of increasing difficulty.

maze_walk: follow a walled corridor to a marker cell; needs a sensor loop
with a conditional turn inside. fetch_beeper: collect a beeper in one fixed
room and return home; solvable by counting or by sensing. find_midpoint:
stop at the middle of a corridor of unknown width, using beepers as markers;
several multi-phase strategies exist and all are loop-heavy.

Each task bundles unit-test worlds, structurally distinct reference
solutions that agree on every expected final state, and a rubric of
functional, strategic, and stylistic labels.
"""

from __future__ import annotations

from .corpus import (
    FUNCTIONAL,
    STRATEGIC,
    STYLISTIC,
    CorpusError,
    RubricRule,
    Task,
    count_kinds,
    has_empty_block,
    has_redundant_turns,
    modeling_ast,
    nesting_depth,
    statement_count,
    tests_condition,
    validate_task,
)
from .dsl import NodeKind, parse
from .gridworld import Heading, WorldSpec, WorldState, empty_beepers
from .interpreter import HaltReason, run

_LOOPS = (NodeKind.WHILE, NodeKind.REPEAT)
_BRANCHES = (NodeKind.IF, NodeKind.IFELSE)


def _corridor_world(
    rows: int,
    cols: int,
    path: list[tuple[int, int]],
    start: tuple[int, int],
    heading: Heading,
    beeper_at: tuple[int, int] | None,
    beeper_max: int = 1,
) -> tuple[WorldSpec, WorldState]:
    cells = set(path)
    walls = frozenset(
        (r, c) for r in range(rows) for c in range(cols) if (r, c) not in cells
    )
    spec = WorldSpec(rows, cols, walls, beeper_max)
    beepers = list(empty_beepers(spec))
    if beeper_at is not None:
        beepers[spec.cell_index(*beeper_at)] = 1
    state = WorldState(start[0], start[1], heading, False, tuple(beepers))
    return spec, state


def _segment(a: tuple[int, int], b: tuple[int, int]) -> list[tuple[int, int]]:
    (r0, c0), (r1, c1) = a, b
    if r0 == r1:
        step = 1 if c1 >= c0 else -1
        return [(r0, c) for c in range(c0, c1 + step, step)]
    if c0 == c1:
        step = 1 if r1 >= r0 else -1
        return [(r, c0) for r in range(r0, r1 + step, step)]
    raise ValueError("segments must be axis-aligned")


def _expected_states(worlds, reference) -> list:
    model = modeling_ast(reference)
    expected = []
    for spec, start in worlds:
        trace = run(model, spec, start)
        if trace.halted_reason is not HaltReason.FINISHED:
            raise CorpusError("reference solution does not finish cleanly")
        expected.append(trace.final)
    return expected


def _base_functional_rules(wrong_cell: bool = True, beeper_check: bool = False):
    rules = [
        RubricRule(
            "correct",
            FUNCTIONAL,
            "passes every unit test exactly",
            lambda ctx: ctx.pass_fraction == 1.0,
        ),
        RubricRule(
            "incorrect",
            FUNCTIONAL,
            "fails at least one unit test",
            lambda ctx: ctx.pass_fraction < 1.0,
        ),
        RubricRule(
            "crashes",
            FUNCTIONAL,
            "hits a wall or picks from an empty cell on some test",
            lambda ctx: any(
                t.halted_reason is HaltReason.CRASHED for t in ctx.traces
            ),
        ),
        RubricRule(
            "runs-forever",
            FUNCTIONAL,
            "exceeds the step limit on some test",
            lambda ctx: any(
                t.halted_reason is HaltReason.STEP_LIMIT for t in ctx.traces
            ),
        ),
    ]
    if wrong_cell:
        rules.append(
            RubricRule(
                "wrong-end-cell",
                FUNCTIONAL,
                "finishes everywhere but stops on a wrong cell somewhere",
                lambda ctx: all(
                    t.halted_reason is HaltReason.FINISHED for t in ctx.traces
                )
                and any(
                    (t.final.row, t.final.col) != (e.row, e.col)
                    for t, e in zip(ctx.traces, ctx.expected)
                ),
            )
        )
    if beeper_check:
        rules.append(
            RubricRule(
                "beeper-mismatch",
                FUNCTIONAL,
                "finishes everywhere but leaves the wrong beeper layout",
                lambda ctx: all(
                    t.halted_reason is HaltReason.FINISHED for t in ctx.traces
                )
                and any(
                    t.final.beepers != e.beepers
                    for t, e in zip(ctx.traces, ctx.expected)
                ),
            )
        )
    return rules


def _style_rules(
    overlong_at: int,
    deep_at: int = 4,
    empty_block: bool = True,
    any_turn_pair: bool = False,
):
    rules = [
        RubricRule(
            "redundant-turns",
            STYLISTIC,
            "adjacent or tripled turns that net to less",
            lambda ctx: has_redundant_turns(ctx.surface, any_turn_pair),
        ),
        RubricRule(
            "overlong",
            STYLISTIC,
            f"more than {overlong_at} statements",
            lambda ctx: statement_count(ctx.surface) > overlong_at,
        ),
        RubricRule(
            "deep-nesting",
            STYLISTIC,
            f"blocks nested deeper than {deep_at} levels",
            lambda ctx: nesting_depth(ctx.surface) > deep_at,
        ),
    ]
    if empty_block:
        rules.insert(
            1,
            RubricRule(
                "empty-block",
                STYLISTIC,
                "a loop or branch with an empty body",
                lambda ctx: has_empty_block(ctx.surface),
            ),
        )
    return rules


def _rule_missing_loop():
    return RubricRule(
        "missing-loop",
        STRATEGIC,
        "no loop of any kind",
        lambda ctx: count_kinds(ctx.surface, _LOOPS) == 0,
    )


def _rule_no_conditionals():
    return RubricRule(
        "no-conditionals",
        STRATEGIC,
        "never branches on a sensor",
        lambda ctx: count_kinds(ctx.surface, _BRANCHES) == 0,
    )


def _rule_bounded_iteration():
    return RubricRule(
        "bounded-iteration",
        STRATEGIC,
        "relies on counted repeats with no sensor loop",
        lambda ctx: count_kinds(ctx.surface, (NodeKind.REPEAT,)) > 0
        and count_kinds(ctx.surface, (NodeKind.WHILE,)) == 0,
    )


def _rule_goal_blind():
    return RubricRule(
        "goal-blind",
        STRATEGIC,
        "never tests for beepers",
        lambda ctx: not tests_condition(ctx.surface, NodeKind.COND_BEEPERS_PRESENT),
    )


def _rule_never(kind: NodeKind, label: str, verb: str):
    return RubricRule(
        label,
        STRATEGIC,
        f"never {verb}",
        lambda ctx: count_kinds(ctx.surface, (kind,)) == 0,
    )


# --- maze_walk ---------------------------------------------------------------

_MAZE_REF_1 = """
while(not beepers_present){
  if(front_is_clear){
    move
  } else {
    if(left_is_clear){
      turn_left
    } else {
      turn_right
    }
  }
}
"""

_MAZE_REF_2 = """
while(not beepers_present){
  if(front_is_clear){
    move
  } else {
    if(right_is_clear){
      turn_right
    } else {
      turn_left
    }
  }
}
"""


def maze_walk_task() -> Task:
    worlds = []
    # corridor up col 0, east along row 3, up col 4 to the marker
    path = (
        _segment((7, 0), (3, 0)) + _segment((3, 1), (3, 4)) + _segment((2, 4), (0, 4))
    )
    worlds.append(_corridor_world(8, 8, path, (7, 0), Heading.N, (0, 4)))
    # west along row 7, up col 2, west along row 4
    path = (
        _segment((7, 7), (7, 2)) + _segment((6, 2), (4, 2)) + _segment((4, 1), (4, 0))
    )
    worlds.append(_corridor_world(8, 8, path, (7, 7), Heading.W, (4, 0)))
    # east along row 0, down col 6
    path = _segment((0, 0), (0, 6)) + _segment((1, 6), (5, 6))
    worlds.append(_corridor_world(8, 8, path, (0, 0), Heading.E, (5, 6)))

    refs = [parse(_MAZE_REF_1), parse(_MAZE_REF_2)]
    expected = _expected_states(worlds, refs[0])
    rubric = (
        _base_functional_rules(wrong_cell=True, beeper_check=False)
        + [
            _rule_missing_loop(),
            _rule_no_conditionals(),
            _rule_bounded_iteration(),
            _rule_goal_blind(),
        ]
        + _style_rules(overlong_at=12, any_turn_pair=True)
    )
    task = Task(
        name="maze_walk",
        worlds=[(s, st, e) for (s, st), e in zip(worlds, expected)],
        reference_solutions=refs,
        rubric=rubric,
    )
    validate_task(task)
    return task


# --- fetch_beeper ------------------------------------------------------------

_FETCH_REF_1 = """
repeat(5){
  move
}
pick_beeper
turn_left
turn_left
repeat(5){
  move
}
"""

_FETCH_REF_2 = """
while(not beepers_present){
  move
}
pick_beeper
turn_left
turn_left
while(front_is_clear){
  move
}
"""


def fetch_beeper_task() -> Task:
    spec = WorldSpec(4, 6, frozenset(), 1)
    beepers = list(empty_beepers(spec))
    beepers[spec.cell_index(3, 5)] = 1
    start = WorldState(3, 0, Heading.E, False, tuple(beepers))
    worlds = [(spec, start)]

    refs = [parse(_FETCH_REF_1), parse(_FETCH_REF_2)]
    expected = _expected_states(worlds, refs[0])
    rubric = (
        _base_functional_rules(wrong_cell=True, beeper_check=True)
        + [
            _rule_missing_loop(),
            _rule_bounded_iteration(),
            _rule_goal_blind(),
            _rule_never(NodeKind.PICK_BEEPER, "never-picks", "picks up the beeper"),
        ]
        + _style_rules(overlong_at=10, deep_at=3)
    )
    task = Task(
        name="fetch_beeper",
        worlds=[(s, st, e) for (s, st), e in zip(worlds, expected)],
        reference_solutions=refs,
        rubric=rubric,
    )
    validate_task(task)
    return task


# --- find_midpoint -----------------------------------------------------------

_MID_REF_1 = """
put_beeper
while(front_is_clear){
  move
  put_beeper
}
turn_left
turn_left
repeat(10){
  if(front_is_clear){
    move
    if(beepers_present){
      turn_left
      turn_left
      move
      pick_beeper
      turn_left
      turn_left
      while(front_is_clear){
        move
      }
      turn_left
      turn_left
      while(not beepers_present){
        move
      }
    } else {
      turn_left
      turn_left
      move
    }
  }
}
"""

_MID_REF_2 = """
while(front_is_clear){
  put_beeper
  move
}
put_beeper
turn_right
turn_right
repeat(10){
  if(front_is_clear){
    move
    if(beepers_present){
      turn_right
      turn_right
      move
      pick_beeper
      turn_right
      turn_right
      while(front_is_clear){
        move
      }
      turn_right
      turn_right
      while(not beepers_present){
        move
      }
    } else {
      turn_right
      turn_right
      move
    }
  }
}
"""


def find_midpoint_task() -> Task:
    worlds = []
    for width in (5, 7, 9, 11):
        path = _segment((0, 0), (0, width - 1))
        worlds.append(_corridor_world(1, 12, path, (0, 0), Heading.E, None))

    refs = [parse(_MID_REF_1), parse(_MID_REF_2)]
    expected = _expected_states(worlds, refs[0])
    rubric = (
        _base_functional_rules(wrong_cell=True, beeper_check=True)
        + [
            _rule_missing_loop(),
            _rule_no_conditionals(),
            RubricRule(
                "single-phase",
                STRATEGIC,
                "fewer than two loops; midpoint needs a marking and a "
                "shrinking phase",
                lambda ctx: count_kinds(ctx.surface, _LOOPS) < 2,
            ),
            _rule_never(NodeKind.PUT_BEEPER, "never-puts", "lays a marker"),
            _rule_never(NodeKind.PICK_BEEPER, "never-picks", "removes a marker"),
        ]
        + _style_rules(overlong_at=30, deep_at=5, empty_block=False)
    )
    task = Task(
        name="find_midpoint",
        worlds=[(s, st, e) for (s, st), e in zip(worlds, expected)],
        reference_solutions=refs,
        rubric=rubric,
    )
    validate_task(task)
    return task


_BUILDERS = {
    "maze_walk": maze_walk_task,
    "fetch_beeper": fetch_beeper_task,
    "find_midpoint": find_midpoint_task,
}


def task_names() -> list[str]:
    return sorted(_BUILDERS)


def get_task(name: str) -> Task:
    try:
        builder = _BUILDERS[name]
    except KeyError:
        raise CorpusError(
            f"unknown task {name!r}; available: {', '.join(task_names())}"
        ) from None
    return builder()
