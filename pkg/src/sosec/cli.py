"""The `sosec` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage error, 2 runtime error. The CLI is pure
orchestration; all behavior lives in the stage modules.
"""

from __future__ import annotations

import argparse
import json
import sys
from collections import Counter
from pathlib import Path

from . import __version__
from .analysis import CweMap, analyze_file, load_adapters
from .config import GlobalConfig, load_config
from .errors import SosecError
from .evaluation import (
    ARM_PROMPT_ONLY,
    ARM_SOSECURE,
    compute_metrics,
    dual_tool_filter,
    filter_supported,
    load_samples,
    load_supported_cwes,
    render_report_text,
    run_arm,
)
from .kb import KeywordSet, build_knowledge_base, load_kb_jsonl, parse_dump_rows, write_kb_jsonl
from .retrieval import build_index, load_index, retrieve, save_index
from .revision import (
    PROVIDER_LIVE,
    PROVIDER_MOCK,
    PROVIDER_RECORDED,
    ProviderConfig,
    revise,
)

_PROVIDER_ALIASES = {
    "mock": PROVIDER_MOCK,
    "recorded": PROVIDER_RECORDED,
    "live": PROVIDER_LIVE,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 instead of argparse's default 2
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _add_common_flags(p: argparse.ArgumentParser, format_default: str = "text") -> None:
    p.add_argument("--config", help="JSON config file layered under the flags")
    p.add_argument("--format", choices=("text", "json"), default=format_default)


def _build_parser() -> _Parser:
    parser = _Parser(prog="sosec", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("version", help="print the package version")
    _add_common_flags(p)

    p = sub.add_parser("build-kb", help="build the knowledge base from dump XML")
    _add_common_flags(p)
    p.add_argument("--posts", required=True)
    p.add_argument("--comments", required=True)
    p.add_argument("--keywords")
    p.add_argument("--out", required=True)
    p.add_argument("--min-upvote", type=int, default=1)

    p = sub.add_parser("index", help="build the retrieval index from KB JSONL")
    _add_common_flags(p)
    p.add_argument("--kb", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k1", type=float, default=1.2)
    p.add_argument("--b", type=float, default=0.75)

    p = sub.add_parser("retrieve", help="rank KB entries against a code file")
    _add_common_flags(p)
    p.add_argument("--index", required=True)
    p.add_argument("--code", required=True)
    p.add_argument("-k", type=int, default=None)

    p = sub.add_parser("revise", help="revise a code file with retrieved context")
    _add_common_flags(p, format_default="json")  # the revision record is the output
    p.add_argument("--index", required=True)
    p.add_argument("--code", required=True)
    p.add_argument("-k", type=int, default=None)
    p.add_argument("--provider", choices=sorted(_PROVIDER_ALIASES), default="mock")
    p.add_argument("--transcript")
    p.add_argument("--budget", type=int, default=None)

    p = sub.add_parser("analyze", help="run one analyzer adapter on a file")
    _add_common_flags(p)
    p.add_argument("--file", required=True)
    p.add_argument("--adapter", required=True)
    p.add_argument("--cwe-map", dest="cwe_map")
    p.add_argument("--adapters")

    p = sub.add_parser("eval", help="run arms over a dataset and report metrics")
    _add_common_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--arm", required=True, help="comma-separated arm names")
    p.add_argument("--index")
    p.add_argument("--provider", choices=sorted(_PROVIDER_ALIASES), default="mock")
    p.add_argument("--transcript")
    p.add_argument("--out")
    p.add_argument("--adapters")
    p.add_argument("--cwe-map", dest="cwe_map")
    p.add_argument("--supported-cwes", dest="supported_cwes")
    p.add_argument("--baseline-arm", dest="baseline_arm")
    p.add_argument("-k", type=int, default=None)
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)

    return parser


def _provider_config(config: GlobalConfig, args) -> ProviderConfig:
    kind = _PROVIDER_ALIASES[args.provider]
    provider = config.provider
    if provider.kind != kind:
        provider = ProviderConfig(kind=kind)
    if args.transcript:
        provider.transcript_path = args.transcript
    if kind == PROVIDER_RECORDED and not provider.transcript_path:
        raise UsageError("--provider recorded requires --transcript")
    return provider


def _emit(args, payload, text: str) -> None:
    if args.format == "json":
        print(json.dumps(payload, ensure_ascii=False, indent=2))
    else:
        print(text)


def _cmd_version(args, config) -> int:
    _emit(args, {"version": __version__}, f"sosec {__version__}")
    return 0


def _cmd_build_kb(args, config: GlobalConfig) -> int:
    keywords = KeywordSet.from_file(args.keywords or config.keyword_path)
    posts_tally, comments_tally, kb_tally = Counter(), Counter(), Counter()
    with open(args.posts, "rb") as posts_fh, open(args.comments, "rb") as comments_fh:
        entries = build_knowledge_base(
            parse_dump_rows(posts_fh, "posts", tally=posts_tally),
            parse_dump_rows(comments_fh, "comments", tally=comments_tally),
            keywords,
            min_upvote=args.min_upvote,
            tally=kb_tally,
        )
    write_kb_jsonl(entries, args.out)
    summary = {
        "out": args.out,
        "entries": len(entries),
        "posts_skipped": posts_tally["skipped"],
        "comments_skipped": comments_tally["skipped"],
        "duplicate_answers": kb_tally["duplicate_answers"],
    }
    _emit(
        args,
        summary,
        f"wrote {len(entries)} entries to {args.out} "
        f"(skipped {summary['posts_skipped']} post rows, {summary['comments_skipped']} comment rows)",
    )
    return 0


def _cmd_index(args, config: GlobalConfig) -> int:
    entries = load_kb_jsonl(args.kb)
    index = build_index(entries, k1=args.k1, b=args.b)
    save_index(index, args.out)
    summary = {"out": args.out, "docs": index.num_docs, "terms": len(index.postings)}
    _emit(args, summary, f"indexed {index.num_docs} entries ({len(index.postings)} terms) to {args.out}")
    return 0


def _hit_payload(hit) -> dict:
    return {
        "rank": hit.rank,
        "score": hit.score,
        "answer_id": hit.entry.answer_id,
        "url": hit.entry.url,
        "entry": hit.entry.to_dict(),
    }


def _cmd_retrieve(args, config: GlobalConfig) -> int:
    index = load_index(args.index)
    code = Path(args.code).read_text(encoding="utf-8")
    hits = retrieve(index, code, k=args.k if args.k is not None else config.k)
    text = "\n".join(
        f"{h.rank:>2}. score={h.score:.4f}  {h.entry.url}" for h in hits
    ) or "no entries share tokens with the query"
    _emit(args, [_hit_payload(h) for h in hits], text)
    return 0


def _cmd_revise(args, config: GlobalConfig) -> int:
    index = load_index(args.index)
    code = Path(args.code).read_text(encoding="utf-8")
    hits = retrieve(index, code, k=args.k if args.k is not None else config.k)
    provider = _provider_config(config, args)
    record = revise(
        provider,
        code,
        hits,
        sample_id=Path(args.code).name,
        budget=args.budget if args.budget is not None else config.budget,
    )
    text = (
        f"changed={record.changed} parse_ok={record.parse_ok} "
        f"context_answers={record.retrieved_answer_ids}\n{record.revised_code}"
    )
    _emit(args, record.to_dict(), text)
    return 0


def _cmd_analyze(args, config: GlobalConfig) -> int:
    adapters = load_adapters(args.adapters or config.adapters_path)
    if args.adapter not in adapters:
        raise SosecError(
            f"unknown adapter {args.adapter!r}; configured: {', '.join(sorted(adapters))}"
        )
    cwe_map = CweMap.from_file(args.cwe_map or config.cwe_map_path)
    findings = analyze_file(adapters[args.adapter], cwe_map, args.file)
    text = "\n".join(
        f"{f.file}:{f.line} [{f.severity}] {f.rule_id} ({f.cwe or 'unmapped'}): {f.message}"
        for f in findings
    ) or "no findings"
    _emit(args, [f.to_dict() for f in findings], text)
    return 0


def _cmd_eval(args, config: GlobalConfig) -> int:
    samples = load_samples(args.dataset)
    arms = [a.strip() for a in args.arm.split(",") if a.strip()]
    if not arms:
        raise UsageError("--arm names no arms")

    adapters = load_adapters(args.adapters or config.adapters_path)
    adapter_list = list(adapters.values())
    if len(adapter_list) < 2:
        raise SosecError("eval needs two configured adapters for the dual-tool filter")
    cwe_map = CweMap.from_file(args.cwe_map or config.cwe_map_path)
    supported = load_supported_cwes(args.supported_cwes or config.supported_cwes_path)

    index = load_index(args.index) if args.index else None
    provider = _provider_config(config, args)
    k = args.k if args.k is not None else config.k
    budget = args.budget if args.budget is not None else config.budget
    workers = args.workers if args.workers is not None else config.workers

    tally = Counter()
    analyzed = dual_tool_filter(samples, adapter_list[0], adapter_list[1], cwe_map, tally=tally)
    analyzed = filter_supported(analyzed, supported)

    outcomes = []
    for arm in arms:
        outcomes.extend(
            run_arm(
                analyzed,
                arm,
                provider,
                index=index if arm == ARM_SOSECURE else None,
                adapters=adapter_list,
                cwe_map=cwe_map,
                supported_cwes=supported,
                k=k,
                budget=budget,
                workers=workers,
                tally=tally,
            )
        )

    baseline = args.baseline_arm or (ARM_PROMPT_ONLY if ARM_PROMPT_ONLY in arms else None)
    footnotes = []
    tallied = {key: count for key, count in tally.items() if count}
    if tallied:
        footnotes.append(f"excluded/tallied during the run: {tallied}")
    report = compute_metrics(outcomes, baseline_arm=baseline, footnotes=footnotes)

    if args.out:
        Path(args.out).write_text(
            json.dumps(report.to_dict(), ensure_ascii=False, indent=2), encoding="utf-8"
        )
    _emit(args, report.to_dict(), render_report_text(report))
    return 0


_COMMANDS = {
    "version": _cmd_version,
    "build-kb": _cmd_build_kb,
    "index": _cmd_index,
    "retrieve": _cmd_retrieve,
    "revise": _cmd_revise,
    "analyze": _cmd_analyze,
    "eval": _cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_usage() + "sosec: error: a subcommand is required")
        config = load_config(args.config)
        return _COMMANDS[args.command](args, config)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (SosecError, OSError) as exc:
        print(f"sosec: error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())
