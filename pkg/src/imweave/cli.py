"""Command-line entry point.

One subcommand per pipeline stage, with files as the only inter-stage
contract. Every run serializes its resolved parameters to
``<output>.run.json`` next to its primary output; that sidecar can be fed
back through ``--config`` to replay the run (flags still override).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from . import bench as bench_mod
from . import clustering, datastats, fusion, generation, grouping
from . import corpus as corpus_mod
from .api import DEFAULT_API_KEY_ENV, Endpoint
from .errors import EXIT_DATA, ConfigError, PipelineError
from .templates import DEFAULT_TEMPLATE, TEMPLATES, get_template
from .tokencount import DEFAULT_COUNTER, TOKEN_COUNTERS

logger = logging.getLogger(__name__)

_SIDECAR_EXCLUDED = {"func", "key", "config", "verbose", "command", "bench_command"}


def _write_sidecar(out_path: str, command: str, args: argparse.Namespace) -> None:
    resolved = {
        k: v
        for k, v in sorted(vars(args).items())
        if k not in _SIDECAR_EXCLUDED and not callable(v)
    }
    sidecar = {"command": command, **resolved}
    Path(f"{out_path}.run.json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _endpoint(args: argparse.Namespace) -> Endpoint:
    return Endpoint(
        base_url=args.base_url,
        model=args.model,
        api_key_env=args.api_key_env,
        timeout=args.timeout,
        max_retries=args.max_retries,
        backoff_base=args.backoff_base,
    )


def _add_endpoint_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--base-url", required=True, help="endpoint base URL")
    parser.add_argument("--model", required=True, help="model identifier")
    parser.add_argument(
        "--api-key-env",
        default=DEFAULT_API_KEY_ENV,
        help="env var holding the service credential",
    )
    parser.add_argument("--timeout", type=float, default=120.0)
    parser.add_argument("--max-retries", type=int, default=5)
    parser.add_argument("--backoff-base", type=float, default=0.5)


def _add_config_flag(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--config",
        default=None,
        help="JSON file of defaults for this subcommand; flags override",
    )


# ---------------------------------------------------------------------------
# Stage commands


def cmd_ingest(args: argparse.Namespace) -> int:
    pairs = corpus_mod.parse_corpus(args.input)
    corpus_mod.write_corpus(pairs, args.out)
    _write_sidecar(args.out, "ingest", args)
    print(f"ingested {len(pairs)} pairs -> {args.out}")
    return 0


def cmd_embed(args: argparse.Namespace) -> int:
    pairs = corpus_mod.parse_corpus(args.corpus)
    records, report = corpus_mod.fetch_embeddings(
        pairs,
        _endpoint(args),
        concurrency=args.concurrency,
        cache_dir=args.cache_dir,
        strict=args.strict,
    )
    corpus_mod.write_embeddings(records, args.out)
    _write_sidecar(args.out, "embed", args)
    if args.report:
        Path(args.report).write_text(
            json.dumps(
                {
                    "requested": report.requested,
                    "succeeded": report.succeeded,
                    "retries": report.retries,
                    "failures": [{"id": f.id, "reason": f.reason} for f in report.failures],
                },
                indent=2,
            )
            + "\n",
            encoding="utf-8",
        )
    print(
        f"embedded {report.succeeded}/{report.requested} pairs "
        f"({len(report.failures)} failures, {report.retries} retries) -> {args.out}"
    )
    return 0


def cmd_fuse(args: argparse.Namespace) -> int:
    records = corpus_mod.read_embeddings(args.embeddings)
    cfg = fusion.FusionConfig(c=args.c, normalize_inputs=args.normalize_inputs)
    fused = fusion.fuse_all(records, cfg)
    fusion.write_vectors(fused, args.out)
    _write_sidecar(args.out, "fuse", args)
    print(f"fused {len(fused)} embeddings (c={args.c}) -> {args.out}")
    return 0


def _parse_dim(value: str) -> int | None:
    if value.lower() == "none":
        return None
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"--dim must be an integer or 'none', got {value!r}") from None


def cmd_reduce(args: argparse.Namespace) -> int:
    embeddings = fusion.read_vectors(args.vectors)
    if args.import_file:
        reduced = fusion.import_reduction(args.import_file, [e.id for e in embeddings])
        provenance = f"imported from {args.import_file}"
    else:
        dim = _parse_dim(args.dim)
        cfg = fusion.FusionConfig(reduced_dim=dim)
        reduced = fusion.reduce_dimensions(embeddings, cfg)
        provenance = "identity" if dim is None else f"pca dim={dim}"
    fusion.write_vectors(reduced, args.out)
    _write_sidecar(args.out, "reduce", args)
    print(f"reduced {len(reduced)} embeddings ({provenance}) -> {args.out}")
    return 0


def cmd_cluster(args: argparse.Namespace) -> int:
    points = fusion.read_vectors(args.vectors, stage=fusion.STAGE_REDUCED)
    params = clustering.ClusterParams(
        min_cluster_size=args.min_cluster_size,
        min_samples=args.min_samples,
        dbscan_eps=args.eps,
    )
    if args.algorithm == "hdbscan":
        assignment = clustering.hdbscan_cluster(points, params)
    else:
        assignment = clustering.dbscan_cluster(points, params)
    clustering.write_assignment(assignment, args.out)
    _write_sidecar(args.out, "cluster", args)
    print(json.dumps(clustering.cluster_summary(assignment)))
    return 0


def cmd_match(args: argparse.Namespace) -> int:
    first = clustering.read_assignment(args.assignments[0])
    second = clustering.read_assignment(args.assignments[1])
    pairs, total = grouping.greedy_cluster_match(first.clusters, second.clusters)
    grouping.write_matches(pairs, args.out)
    _write_sidecar(args.out, "match", args)
    print(f"matched {len(pairs)} cluster pairs covering {total} samples -> {args.out}")
    return 0


def cmd_sample(args: argparse.Namespace) -> int:
    embeddings = fusion.read_vectors(args.vectors, stage=fusion.STAGE_REDUCED)
    size_range = (args.group_size[0], args.group_size[1])
    if args.method == "rsi":
        plan = grouping.plan_batches(
            len(embeddings),
            images_per_batch=args.images_per_batch,
            conversations_per_batch=args.conversations_per_batch,
            group_size_range=size_range,
            with_replacement=args.with_replacement,
        )
        groups = grouping.generate_batch_groups(
            embeddings,
            plan,
            seed=args.seed,
            k=args.k,
            epsilon=args.epsilon,
            with_replacement=args.with_replacement,
            variant=args.variant,
        )
    else:
        if not args.matches:
            raise ConfigError("--matches is required with --method gcma")
        matches = grouping.read_matches(args.matches)
        groups = grouping.generate_union_groups(
            matches,
            embeddings,
            seed=args.seed,
            k=args.k,
            epsilon=args.epsilon,
            group_size_range=size_range,
            variant=args.variant,
        )
    grouping.write_groups(groups, args.out)
    _write_sidecar(args.out, "sample", args)
    print(f"sampled {len(groups)} groups ({args.method}) -> {args.out}")
    return 0


def cmd_generate(args: argparse.Namespace) -> int:
    groups = grouping.read_groups(args.groups)
    pairs = corpus_mod.parse_corpus(args.corpus)
    pairs_by_id = {p.id: p for p in pairs}
    template = get_template(args.template)
    conversations, report = generation.run_generation_batch(
        groups,
        pairs_by_id,
        template,
        _endpoint(args),
        concurrency=args.concurrency,
        temperature=args.temperature,
        top_p=args.top_p,
        max_tokens=args.max_tokens,
        seed=args.seed,
        strict_parse=args.strict_parse,
        min_turns=args.min_turns,
        max_turns=args.max_turns,
        out_path=args.out,
        resume=not args.no_resume,
    )
    _write_sidecar(args.out, "generate", args)
    if args.report:
        Path(args.report).write_text(
            json.dumps(
                {
                    "attempted": report.attempted,
                    "skipped": report.skipped,
                    "succeeded": report.succeeded,
                    "failures": [
                        {"group_id": f.group_id, "stage": f.stage, "reason": f.reason}
                        for f in report.failures
                    ],
                },
                indent=2,
            )
            + "\n",
            encoding="utf-8",
        )
    print(
        f"generated {report.succeeded}/{report.attempted} conversations "
        f"({report.skipped} resumed, {len(report.failures)} failures) -> {args.out}"
    )
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    report = datastats.validate_dataset(
        args.dataset,
        strict=args.strict,
        min_turns=args.min_turns,
        max_turns=args.max_turns,
    )
    for violation in report.violations:
        print(f"line {violation.line}: {violation.message}", file=sys.stderr)
    print(f"checked {report.checked} samples, {len(report.violations)} violations")
    if report.violations and args.strict:
        return EXIT_DATA
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    stats = datastats.compute_stats(args.dataset, token_counter=args.counter)
    print(datastats.render_stats_table(stats))
    if args.out:
        Path(args.out).write_text(
            json.dumps(datastats.stats_to_record(stats), indent=2) + "\n",
            encoding="utf-8",
        )
        _write_sidecar(args.out, "stats", args)
    return 0


# ---------------------------------------------------------------------------
# Benchmark commands


def cmd_bench_answer(args: argparse.Namespace) -> int:
    examples = bench_mod.read_bench_examples(args.bench)
    answers, failures = bench_mod.collect_answers(
        examples,
        _endpoint(args),
        concurrency=args.concurrency,
        model_id=args.model_id,
        token_counter=args.counter,
        max_tokens=args.max_tokens,
    )
    bench_mod.write_answers(answers, args.out)
    _write_sidecar(args.out, "bench answer", args)
    for failure in failures:
        print(f"failed {failure.example_id}: {failure.reason}", file=sys.stderr)
    print(f"answered {len(answers)}/{len(examples)} examples -> {args.out}")
    return 0


def cmd_bench_judge(args: argparse.Namespace) -> int:
    examples = bench_mod.read_bench_examples(args.bench)
    candidate = bench_mod.read_answers(args.candidate)
    baseline = bench_mod.read_answers(args.baseline)
    verdicts, skipped = bench_mod.judge_all(
        examples,
        candidate,
        baseline,
        _endpoint(args),
        concurrency=args.concurrency,
        max_tokens=args.max_tokens,
    )
    bench_mod.write_verdicts(verdicts, args.out)
    _write_sidecar(args.out, "bench judge", args)
    print(
        f"judged {len(verdicts) // 2} examples ({len(skipped)} skipped) -> {args.out}"
    )
    return 0


def cmd_bench_rank(args: argparse.Namespace) -> int:
    verdicts = bench_mod.read_verdicts(args.verdicts)
    battles = bench_mod.verdicts_to_battles(verdicts)
    scores = bench_mod.fit_scores(battles, args.baseline)
    cis = bench_mod.bootstrap_ci(
        battles, args.baseline, rounds=args.rounds, seed=args.seed
    )
    answers: list[bench_mod.ModelAnswer] = []
    for path in args.answers:
        answers.extend(bench_mod.read_answers(path))
    board = bench_mod.build_leaderboard(scores, cis, answers, args.baseline)
    bench_mod.write_leaderboard(board, args.out)
    _write_sidecar(args.out, "bench rank", args)
    print(bench_mod.render_leaderboard_table(board))
    return 0


# ---------------------------------------------------------------------------
# Parser assembly


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="imweave",
        description=(
            "Turn an image-caption corpus into correlated image groups and "
            "synthetic multi-turn conversations; rank model answers with a "
            "pairwise-judged leaderboard."
        ),
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    registry: dict[str, argparse.ArgumentParser] = {}

    def leaf(name: str, func, parent=sub, **kwargs) -> argparse.ArgumentParser:
        p = parent.add_parser(name, **kwargs)
        p.set_defaults(func=func, key=name if parent is sub else f"bench {name}")
        registry[name if parent is sub else f"bench {name}"] = p
        _add_config_flag(p)
        return p

    p = leaf("ingest", cmd_ingest, help="validate and normalize a corpus file")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)

    p = leaf("embed", cmd_embed, help="fetch image and caption embeddings")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--concurrency", type=int, default=4)
    p.add_argument("--cache-dir", default=None)
    p.add_argument("--strict", action="store_true", help="abort on any item failure")
    p.add_argument("--report", default=None, help="write a failure report JSON here")
    _add_endpoint_flags(p)

    p = leaf("fuse", cmd_fuse, help="fuse image and caption embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--c", type=float, default=0.2, help="caption weight (dataset-dependent)")
    p.add_argument("--normalize-inputs", action="store_true")

    p = leaf("reduce", cmd_reduce, help="reduce dimensionality before grouping")
    p.add_argument("--vectors", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dim", default="none", help="target dimension or 'none'")
    p.add_argument(
        "--import-file",
        default=None,
        help="use externally computed coordinates instead of the built-in reducer",
    )

    p = leaf("cluster", cmd_cluster, help="density-based clustering")
    p.add_argument("--vectors", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--algorithm", choices=("hdbscan", "dbscan"), default="hdbscan")
    p.add_argument("--min-cluster-size", type=int, default=8)
    p.add_argument("--min-samples", type=int, default=5)
    p.add_argument("--eps", type=float, default=0.5, help="dbscan neighborhood radius")

    p = leaf("match", cmd_match, help="greedily match clusters from two spaces")
    p.add_argument("--assignments", nargs=2, required=True, metavar=("FIRST", "SECOND"))
    p.add_argument("--out", required=True)

    p = leaf("sample", cmd_sample, help="build correlated image groups")
    p.add_argument("--vectors", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=("rsi", "gcma"), default="rsi")
    p.add_argument("--matches", default=None, help="matched pairs file (gcma)")
    p.add_argument("--k", type=int, default=grouping.DEFAULT_K)
    p.add_argument("--epsilon", type=float, default=grouping.DEFAULT_EPSILON)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--group-size",
        nargs=2,
        type=int,
        default=list(grouping.DEFAULT_GROUP_SIZE_RANGE),
        metavar=("LO", "HI"),
    )
    p.add_argument(
        "--images-per-batch", type=int, default=grouping.DEFAULT_IMAGES_PER_BATCH
    )
    p.add_argument(
        "--conversations-per-batch",
        type=int,
        default=grouping.DEFAULT_CONVERSATIONS_PER_BATCH,
    )
    p.add_argument("--with-replacement", action="store_true")
    p.add_argument("--variant", choices=("nearest", "farthest"), default="nearest")

    p = leaf("generate", cmd_generate, help="generate conversations for groups")
    p.add_argument("--groups", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--template", choices=sorted(TEMPLATES), default=DEFAULT_TEMPLATE)
    p.add_argument("--concurrency", type=int, default=4)
    p.add_argument("--temperature", type=float, default=generation.DEFAULT_TEMPERATURE)
    p.add_argument("--top-p", type=float, default=generation.DEFAULT_TOP_P)
    p.add_argument("--max-tokens", type=int, default=None)
    p.add_argument("--seed", type=int, default=None, help="decoding seed, if the endpoint supports one")
    p.add_argument("--strict-parse", action="store_true")
    p.add_argument("--min-turns", type=int, default=generation.MIN_TURNS)
    p.add_argument("--max-turns", type=int, default=generation.MAX_TURNS)
    p.add_argument("--no-resume", action="store_true")
    p.add_argument("--report", default=None)
    _add_endpoint_flags(p)

    p = leaf("validate", cmd_validate, help="validate a dataset file")
    p.add_argument("--dataset", required=True)
    p.add_argument("--strict", action="store_true")
    p.add_argument("--min-turns", type=int, default=generation.MIN_TURNS)
    p.add_argument("--max-turns", type=int, default=generation.MAX_TURNS)

    p = leaf("stats", cmd_stats, help="dataset statistics table")
    p.add_argument("--dataset", required=True)
    p.add_argument("--counter", choices=sorted(TOKEN_COUNTERS), default=DEFAULT_COUNTER)
    p.add_argument("--out", default=None, help="also write the stats record JSON here")

    bench = sub.add_parser("bench", help="benchmark harness")
    bench_sub = bench.add_subparsers(dest="bench_command", required=True)

    p = leaf("answer", cmd_bench_answer, parent=bench_sub, help="collect model answers")
    p.add_argument("--bench", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model-id", default=None, help="override the recorded model id")
    p.add_argument("--concurrency", type=int, default=4)
    p.add_argument("--counter", choices=sorted(TOKEN_COUNTERS), default=DEFAULT_COUNTER)
    p.add_argument("--max-tokens", type=int, default=None)
    _add_endpoint_flags(p)

    p = leaf("judge", cmd_bench_judge, parent=bench_sub, help="pairwise judge verdicts")
    p.add_argument("--bench", required=True)
    p.add_argument("--candidate", required=True, help="candidate answers file")
    p.add_argument("--baseline", required=True, help="baseline answers file")
    p.add_argument("--out", required=True)
    p.add_argument("--concurrency", type=int, default=4)
    p.add_argument("--max-tokens", type=int, default=None)
    _add_endpoint_flags(p)

    p = leaf("rank", cmd_bench_rank, parent=bench_sub, help="fit scores and report")
    p.add_argument("--verdicts", required=True)
    p.add_argument("--baseline", required=True, help="baseline model id")
    p.add_argument("--answers", nargs="+", required=True, help="answers files for token averages")
    p.add_argument("--out", required=True)
    p.add_argument("--rounds", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)

    # demote argparse-level required flags so --config files can supply
    # them; presence is enforced after the merge in _parse
    required_map: dict[str, list[str]] = {}
    for key, sp in registry.items():
        required: list[str] = []
        for action in sp._actions:
            if action.required and action.option_strings:
                action.required = False
                required.append(action.dest)
        required_map[key] = required

    return parser, registry, required_map


def _parse(argv: Sequence[str] | None) -> argparse.Namespace:
    parser, registry, required_map = build_parser()
    args = parser.parse_args(argv)
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                defaults: dict[str, Any] = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"malformed config {config_path}: {exc}") from None
        defaults.pop("command", None)
        target = registry[args.key]
        known = {action.dest for action in target._actions}
        unknown = sorted(set(defaults) - known)
        if unknown:
            raise ConfigError(f"config keys not recognized by {args.key!r}: {unknown}")
        target.set_defaults(**defaults)
        args = parser.parse_args(argv)
    missing = [d for d in required_map.get(args.key, []) if getattr(args, d) is None]
    if missing:
        flags = ", ".join("--" + d.replace("_", "-") for d in missing)
        raise ConfigError(f"missing required flags for {args.key!r}: {flags}")
    return args


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = _parse(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    except PipelineError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return exc.exit_code
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except PipelineError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
