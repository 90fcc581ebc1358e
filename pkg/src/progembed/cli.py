"""Command-line pipeline: generate, extract, train, evaluate, propagate.

Every command reads one JSON config (plus --seed/--out overrides), writes its
artifacts into the output directory next to a copy of the exact config, and
is deterministic: identical config and seed reproduce identical bytes.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import feedback as fb
from . import gridworld
from .corpus import (
    CorpusError,
    Submission,
    compose_corpus,
    generate_corpus,
    modeling_ast,
    read_corpus_file,
    read_labels_file,
    write_corpus_file,
    write_labels_file,
    write_rubric_file,
)
from .dsl import CanonicalId, DslError, cyclomatic_complexity, subtrees
from .gridworld import StateLayout, WorldError
from .interpreter import (
    HaltReason,
    HoareTriple,
    extract_triples,
    read_triples_file,
    run,
    write_triples_file,
)
from .npm import (
    CommonBaseline,
    NpmHyper,
    NpmModel,
    eval_prediction,
    fit_npm,
    matrix_product_accuracy,
    model_from_tensors,
    model_to_tensors,
    prediction_accuracy,
    smart_init,
    split_triples,
)
from .numcore import load_checkpoint, make_rng, save_checkpoint
from .tasks import get_task, task_names
from .treemodels import (
    TreeHyper,
    predict_feedback,
    rnn_prediction_accuracy,
    train_feedback,
    train_rnn_post,
    tree_from_tensors,
    tree_to_tensors,
)

TRAIN_MODELS = ("npm", "npm0", "rnn")
FEEDBACK_METHODS = ("npm_rnn", "rnn", "bag", "knn", "unittest")


@dataclass
class ExperimentConfig:
    task: str = "maze_walk"
    corpus_size: int = 500
    seed: int = 0
    out_dir: str = "out"
    step_limit: int = 1000
    cap_per_subtree: int = 50
    test_fraction: float = 0.2
    budget_k: int = 50
    strategy: str = "kmeans_centroids"
    compose_n: int = 200
    compose_extra_worlds: int = 4
    npm: NpmHyper = field(default_factory=NpmHyper)
    tree: TreeHyper = field(default_factory=TreeHyper)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @staticmethod
    def from_dict(raw: dict) -> "ExperimentConfig":
        cfg = ExperimentConfig()
        for key, value in raw.items():
            if key == "npm":
                cfg.npm = NpmHyper(**value)
            elif key == "tree":
                cfg.tree = TreeHyper(**value)
            elif hasattr(cfg, key):
                setattr(cfg, key, value)
            else:
                raise CorpusError(f"unknown config field {key!r}")
        return cfg


def load_config(args) -> ExperimentConfig:
    if args.config:
        with open(args.config) as fh:
            cfg = ExperimentConfig.from_dict(json.load(fh))
    else:
        cfg = ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.npm.seed = args.seed
        cfg.tree.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def _outdir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    return out


def _load_corpus(cfg: ExperimentConfig, task) -> list[Submission]:
    out = Path(cfg.out_dir)
    programs = read_corpus_file(out / "corpus.txt")
    labels = read_labels_file(out / "labels.txt")
    subs = []
    for program, freq in programs:
        digest = corpus_mod.canonical_id(program)
        subs.append(
            Submission(
                program=program,
                source=corpus_mod.pretty(program),
                frequency=freq,
                labels=labels[digest.hex],
                digest=digest,
            )
        )
    return subs


def _layout(task) -> StateLayout:
    return StateLayout(task.worlds[0][0])


def _corpus_triples(cfg, task, submissions) -> tuple[list[HoareTriple], dict]:
    """Triples of every submission's modeling tree, plus subtree ASTs."""
    worlds = task.world_pairs()
    triples: list[HoareTriple] = []
    asts: dict[CanonicalId, object] = {}
    for sub in submissions:
        model = modeling_ast(sub.program)
        for node, digest in subtrees(model):
            asts.setdefault(digest, node)
        triples.extend(
            extract_triples(model, worlds, cfg.step_limit, cfg.cap_per_subtree)
        )
    return triples, asts


def _load_triples(cfg, task) -> list[HoareTriple]:
    layout = _layout(task)
    dim, _, records = read_triples_file(Path(cfg.out_dir) / "triples.txt")
    if dim != layout.dim:
        raise CorpusError(
            f"triples file dimension {dim} does not match task layout {layout.dim}"
        )
    worlds = task.world_pairs()
    pre_states = layout.decode_batch(np.array([r.pre for r in records]))
    post_states = layout.decode_batch(np.array([r.post for r in records]))
    return [
        HoareTriple(
            pre=pre,
            subtree=rec.subtree,
            post=post,
            world=worlds[rec.world_id][0],
            world_id=rec.world_id,
        )
        for rec, pre, post in zip(records, pre_states, post_states)
    ]


# --- commands ---------------------------------------------------------------


def cmd_gen(cfg: ExperimentConfig) -> int:
    task = get_task(cfg.task)
    out = _outdir(cfg)
    subs = generate_corpus(task, cfg.corpus_size, cfg.seed)
    write_corpus_file(out / "corpus.txt", subs)
    write_labels_file(out / "labels.txt", subs)
    write_rubric_file(out / "rubric.txt", task.rubric)
    print(f"gen: wrote {len(subs)} unique programs to {out}")
    return 0


def cmd_extract(cfg: ExperimentConfig) -> int:
    task = get_task(cfg.task)
    out = _outdir(cfg)
    subs = _load_corpus(cfg, task)
    layout = _layout(task)
    triples, _ = _corpus_triples(cfg, task, subs)
    write_triples_file(out / "triples.txt", triples, layout)

    states = set()
    for t in triples:
        states.add(t.pre)
        states.add(t.post)
    annotations = set()
    for sub in subs:
        annotations |= sub.labels
    summary = [
        ("students", sum(s.frequency for s in subs)),
        ("unique programs", len(subs)),
        ("unique subtrees", len({t.subtree for t in triples})),
        ("unique triples", len(triples)),
        ("unique states", len(states)),
        ("unique annotations", len(annotations)),
    ]
    lines = [f"{name}: {value}" for name, value in summary]
    (out / "extract_summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def _rnn_checkpoint_tensors(params, base):
    tensors = tree_to_tensors(params)
    tensors.update(
        {
            "enc.W": base.W_enc,
            "enc.b": base.b_enc,
            "dec.W": base.W_dec,
            "dec.b": base.b_dec,
        }
    )
    return tensors


def cmd_train(cfg: ExperimentConfig, model_name: str) -> int:
    task = get_task(cfg.task)
    out = _outdir(cfg)
    layout = _layout(task)
    triples = _load_triples(cfg, task)
    train, _ = split_triples(triples, cfg.test_fraction, make_rng(cfg.seed))

    if model_name == "npm":
        model = fit_npm(train, layout, cfg.npm, joint=True)
        save_checkpoint(out / "model_npm.ckpt", model_to_tensors(model))
        with open(out / "loss_curve_npm.csv", "w") as fh:
            fh.write("epoch,train_loss,val_loss\n")
            for epoch, tr, va in model.loss_curve:
                fh.write(f"{epoch},{tr:.6f},{va:.6f}\n")
    elif model_name == "npm0":
        model = fit_npm(train, layout, cfg.npm, joint=False)
        save_checkpoint(out / "model_npm0.ckpt", model_to_tensors(model))
    elif model_name == "rnn":
        subs = _load_corpus(cfg, task)
        _, asts = _corpus_triples(cfg, task, subs)
        base = smart_init(train, layout, cfg.npm)
        params = train_rnn_post(train, asts, base, cfg.tree)
        save_checkpoint(
            out / "model_rnn.ckpt", _rnn_checkpoint_tensors(params, base)
        )
    else:
        raise CorpusError(f"unknown model {model_name!r}")
    print(f"train: wrote model_{model_name}.ckpt")
    return 0


def cmd_eval_post(cfg: ExperimentConfig) -> int:
    task = get_task(cfg.task)
    out = _outdir(cfg)
    layout = _layout(task)
    triples = _load_triples(cfg, task)
    train, test = split_triples(triples, cfg.test_fraction, make_rng(cfg.seed))

    rows = []

    def add(model_label, split_label, acc, n, unknown):
        rows.append((model_label, split_label, acc, n, unknown))

    for name in ("npm", "npm0"):
        path = out / f"model_{name}.ckpt"
        if not path.exists():
            continue
        model = model_from_tensors(load_checkpoint(path), layout)
        for split_label, split in (("train", train), ("test", test)):
            acc, n, unknown = prediction_accuracy(model, split)
            add(name, split_label, acc, n, unknown)
    rnn_path = out / "model_rnn.ckpt"
    if rnn_path.exists():
        tensors = load_checkpoint(rnn_path)
        params, _ = tree_from_tensors(tensors)
        base = model_from_tensors(tensors, layout)
        subs = _load_corpus(cfg, task)
        _, asts = _corpus_triples(cfg, task, subs)
        for split_label, split in (("train", train), ("test", test)):
            add("rnn", split_label, rnn_prediction_accuracy(params, split, asts, base), len(split), 0)
    common = CommonBaseline(train)
    add("common", "train", eval_prediction(common, train), len(train), 0)
    add("common", "test", eval_prediction(common, test), len(test), 0)

    with open(out / "eval_post.csv", "w") as fh:
        fh.write("model,split,accuracy,n,unknown\n")
        for model_label, split_label, acc, n, unknown in rows:
            fh.write(f"{model_label},{split_label},{acc:.6f},{n},{unknown}\n")
    lines = [
        f"{model_label:6s} {split_label:5s} accuracy={acc:.4f} (n={n}, unknown={unknown})"
        for model_label, split_label, acc, n, unknown in rows
    ]
    (out / "eval_post.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def compose_start_states(task, n_extra: int, seed: int):
    """Task worlds plus randomized agent placements for precondition variety.

    Composed programs are evaluated on more preconditions than the unit
    tests alone, so every composed root observes several triples.
    """
    worlds = list(task.world_pairs())
    if n_extra <= 0:
        return worlds
    rng = make_rng(seed)
    for i in range(n_extra):
        spec, start = worlds[i % len(task.worlds)]
        cells = sorted(
            (r, c)
            for r in range(spec.rows)
            for c in range(spec.cols)
            if (r, c) not in spec.walls
        )
        r, c = cells[int(rng.integers(len(cells)))]
        heading = gridworld.Heading(int(rng.integers(4)))
        worlds.append(
            (spec, gridworld.WorldState(r, c, heading, False, start.beepers))
        )
    return worlds


def compose_evaluation(
    cfg: ExperimentConfig,
    task,
    pool,
    parts: int,
    with_rnn: bool = True,
) -> list[tuple[str, float, int, int]]:
    """Composability grid for one corpus arity; rows (method, acc, n, skipped)."""
    layout = _layout(task)
    worlds = compose_start_states(task, cfg.compose_extra_worlds, cfg.seed + 17)
    composed = compose_corpus(pool, cfg.compose_n, parts, cfg.seed + parts)
    triples = []
    asts: dict[CanonicalId, object] = {}
    cases = {}
    for prog, comps in composed:
        model_ast = corpus_mod.binarize(prog)
        root = corpus_mod.canonical_id(model_ast)
        cases[root] = [corpus_mod.canonical_id(corpus_mod.binarize(c)) for c in comps]
        for node, digest in subtrees(model_ast):
            asts.setdefault(digest, node)
        triples.extend(
            extract_triples(model_ast, worlds, cfg.step_limit, cfg.cap_per_subtree)
        )
    train, test = split_triples(triples, cfg.test_fraction, make_rng(cfg.seed))
    root_test = [t for t in test if t.subtree in cases]

    init = smart_init(train, layout, cfg.npm)
    model = fit_npm(train, layout, cfg.npm, joint=True)

    rows = []
    acc, n, unk = prediction_accuracy(model, root_test)
    rows.append(("direct", acc, n, unk))
    product_cases = [(t, cases[t.subtree]) for t in root_test]
    acc, n, unk = matrix_product_accuracy(model, product_cases)
    rows.append(("npm", acc, n, unk))
    acc, n, unk = matrix_product_accuracy(init, product_cases)
    rows.append(("npm0", acc, n, unk))
    if with_rnn:
        params = train_rnn_post(train, asts, init, cfg.tree)
        rows.append(
            ("rnn", rnn_prediction_accuracy(params, root_test, asts, init), len(root_test), 0)
        )
    common = CommonBaseline(train)
    rows.append(("common", eval_prediction(common, root_test), len(root_test), 0))
    return rows


def cmd_compose(cfg: ExperimentConfig) -> int:
    task = get_task(cfg.task)
    out = _outdir(cfg)
    subs = _load_corpus(cfg, task)
    pool = [modeling_ast(s.program) for s in subs]

    lines = []
    with open(out / "compose.csv", "w") as fh:
        fh.write("corpus,method,accuracy,n,skipped\n")
        for parts in (2, 3):
            rows = compose_evaluation(cfg, task, pool, parts)
            for method, acc, n, skipped in rows:
                fh.write(f"compose-{parts},{method},{acc:.6f},{n},{skipped}\n")
                lines.append(
                    f"compose-{parts} {method:6s} accuracy={acc:.4f} "
                    f"(n={n}, skipped={skipped})"
                )
    (out / "compose.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def feedback_predictions(
    cfg: ExperimentConfig,
    task,
    subs: list[Submission],
    exemplar_ids: list[CanonicalId],
    method: str,
    npm_model: NpmModel | None,
) -> dict[CanonicalId, np.ndarray]:
    """Per-label probabilities for every non-exemplar submission."""
    labels = task.labels()
    exemplar_set = set(exemplar_ids)
    by_digest = {s.digest: s for s in subs}
    rest = [s for s in subs if s.digest not in exemplar_set]

    if method in ("npm_rnn", "rnn"):
        exemplars = [
            (modeling_ast(by_digest[e].program), set(by_digest[e].labels))
            for e in exemplar_ids
        ]
        if method == "npm_rnn":
            if npm_model is None:
                raise CorpusError("npm_rnn feedback requires a trained npm model")
            m, lookup = npm_model.m, npm_model.program_matrices
        else:
            m, lookup = cfg.npm.m, None
        params, heads = train_feedback(exemplars, labels, m, lookup, cfg.tree)
        mu = cfg.tree.mu if method == "npm_rnn" else 0.0
        return {
            s.digest: predict_feedback(
                modeling_ast(s.program), params, heads, lookup, mu
            )
            for s in rest
        }
    if method == "bag":
        exemplars = [
            (
                fb.program_subtree_features(modeling_ast(by_digest[e].program)),
                by_digest[e].labels,
            )
            for e in exemplar_ids
        ]
        features = {
            s.digest: fb.program_subtree_features(modeling_ast(s.program))
            for s in rest
        }
        return fb.baseline_bag_of_trees(exemplars, features, labels)
    if method == "knn":
        exemplars = [
            (e, by_digest[e].program, by_digest[e].labels) for e in exemplar_ids
        ]
        programs = {s.digest: s.program for s in rest}
        return fb.baseline_knn_edit(exemplars, programs, labels)
    if method == "unittest":
        worlds = task.world_pairs()
        fractions = {}
        for s in rest:
            model_ast = modeling_ast(s.program)
            passed = 0
            for (spec, start), (_, _, expected) in zip(worlds, task.worlds):
                trace = run(model_ast, spec, start, cfg.step_limit)
                if (
                    trace.halted_reason is HaltReason.FINISHED
                    and trace.final == expected
                ):
                    passed += 1
            fractions[s.digest] = passed / len(worlds)
        return fb.baseline_unit_tests(fractions, labels)
    raise CorpusError(f"unknown feedback method {method!r}")


def run_feedback(
    cfg: ExperimentConfig,
    task,
    subs: list[Submission],
    method: str,
    npm_model: NpmModel | None,
    strategy: fb.SelectionStrategy,
    seed: int,
):
    """Select exemplars, predict, sweep; returns (result, breakdown, exemplars)."""
    embeddings = None
    if strategy is fb.SelectionStrategy.KMEANS_CENTROIDS:
        if npm_model is None:
            raise CorpusError("kmeans selection requires a trained npm model")
        rows = []
        for s in subs:
            root = corpus_mod.canonical_id(modeling_ast(s.program))
            rows.append(npm_model.program_matrices[root].reshape(-1))
        embeddings = np.array(rows)
    exemplar_ids = fb.select_exemplars(subs, embeddings, cfg.budget_k, strategy, seed)
    predictions = feedback_predictions(cfg, task, subs, exemplar_ids, method, npm_model)
    truth = {s.digest: s.labels for s in subs}
    freqs = {s.digest: s.frequency for s in subs}
    result = fb.propagate_and_sweep(
        predictions, truth, freqs, task.labels(), exemplar_ids
    )
    complexities = {s.digest: cyclomatic_complexity(s.program) for s in subs}
    breakdown = fb.breakdown_by_category(
        predictions,
        truth,
        freqs,
        task.labels(),
        task.categories(),
        complexities,
    )
    return result, breakdown, exemplar_ids


def cmd_feedback(cfg: ExperimentConfig, method: str) -> int:
    task = get_task(cfg.task)
    out = _outdir(cfg)
    subs = _load_corpus(cfg, task)
    strategy = fb.SelectionStrategy(cfg.strategy)

    npm_model = None
    model_path = out / "model_npm.ckpt"
    if model_path.exists():
        npm_model = model_from_tensors(load_checkpoint(model_path), _layout(task))
    result, breakdown, exemplar_ids = run_feedback(
        cfg, task, subs, method, npm_model, strategy, cfg.seed
    )

    with open(out / f"feedback_{method}.csv", "w") as fh:
        fh.write("threshold,precision,recall\n")
        for threshold, precision, recall in result.curve.points:
            fh.write(f"{threshold:.6f},{precision:.6f},{recall:.6f}\n")
    categories = task.categories()
    with open(out / f"feedback_{method}_labels.csv", "w") as fh:
        fh.write("label,category,recall_at_90\n")
        for name in task.labels():
            fh.write(
                f"{name},{categories[name]},{breakdown.label_recall[name]:.6f}\n"
            )
    with open(out / f"feedback_{method}_bins.csv", "w") as fh:
        fh.write("bin,size,min_complexity,max_complexity,recall_at_target\n")
        for entry in breakdown.bins:
            fh.write(
                f"{entry['bin']},{entry['size']},{entry['min_complexity']},"
                f"{entry['max_complexity']},{entry['recall_at_target']:.6f}\n"
            )
    lines = [
        f"method={method} strategy={cfg.strategy} K={cfg.budget_k}",
        f"recall@{result.precision_target:.0%} precision: {result.recall_at_target:.4f}"
        + ("" if result.reached_target else " (target precision unreachable)"),
        f"force multiplier: {result.force_multiplier:.2f}x",
    ]
    for cat in ("functional", "strategic", "stylistic"):
        if cat in breakdown.category_recall:
            lines.append(f"{cat} recall: {breakdown.category_recall[cat]:.4f}")
    (out / f"feedback_{method}.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def cmd_report(cfg: ExperimentConfig) -> int:
    out = _outdir(cfg)
    sections = []
    for name in sorted(p.name for p in out.glob("*.txt")):
        if name == "report.txt":
            continue
        body = (out / name).read_text().rstrip("\n")
        sections.append(f"== {name} ==\n{body}")
    report = "\n\n".join(sections) + "\n"
    (out / "report.txt").write_text(report)
    print(report, end="")
    return 0


# --- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="progembed",
        description="gridworld program embeddings and feedback propagation",
    )
    parser.add_argument("--config", help="path to a JSON experiment config")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="override the output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", help="generate a synthetic annotated corpus")
    sub.add_parser("extract", help="extract the triples dataset")
    p = sub.add_parser("train", help="train a postcondition model")
    p.add_argument("model", choices=TRAIN_MODELS)
    sub.add_parser("eval-post", help="postcondition prediction report")
    sub.add_parser("compose", help="composability report")
    p = sub.add_parser("feedback", help="feedback propagation report")
    p.add_argument("method", choices=FEEDBACK_METHODS)
    sub.add_parser("report", help="bundle all summaries into one report")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        cfg = load_config(args)
        if args.command == "gen":
            return cmd_gen(cfg)
        if args.command == "extract":
            return cmd_extract(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.model)
        if args.command == "eval-post":
            return cmd_eval_post(cfg)
        if args.command == "compose":
            return cmd_compose(cfg)
        if args.command == "feedback":
            return cmd_feedback(cfg, args.method)
        if args.command == "report":
            return cmd_report(cfg)
        parser.print_usage()
        return 1
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (OSError, CorpusError, DslError, WorldError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
