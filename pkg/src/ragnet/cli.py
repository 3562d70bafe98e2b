"""Command-line entry point: ingest, index, ask, eval and experiment.

Configuration is layered: built-in defaults, then a TOML/JSON config file,
then command-line flags, then ``RAG_<SECTION>_<FIELD>`` environment
variables (highest precedence).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import httpx

from .agent import AgentConfig, run_combined, run_iterative
from .corpus import ChunkingConfig, CorpusStore, Gazetteer, TokenizerConfig, ingest_documents
from .errors import ConfigError, RagnetError
from .eval import (
    PIPELINES,
    LazinessConfig,
    LazinessPolicyBackend,
    PipelineSettings,
    laziness_csv,
    laziness_experiment,
    load_questions,
    render_markdown,
    run_basic,
    run_benchmark,
)
from .index import EmbedderConfig, Index, IndexConfig, build_index
from .llm import BackendConfig, make_backend
from .oneshot import Budget, FilterRules, run_oneshot

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("ragnet")

ENV_PREFIX = "RAG_"


@dataclass(frozen=True)
class Stages:
    filter: bool = True
    crop: bool = True


@dataclass(frozen=True)
class Paths:
    corpus_dir: Optional[str] = None
    index_dir: str = "rag_index"
    gazetteer: Optional[str] = None
    workers: int = 1


SECTIONS = {
    "paths": Paths,
    "tokenizer": TokenizerConfig,
    "chunking": ChunkingConfig,
    "embedder": EmbedderConfig,
    "index": IndexConfig,
    "budget": Budget,
    "filter": FilterRules,
    "stages": Stages,
    "agent": AgentConfig,
    "backend": BackendConfig,
    "judge": BackendConfig,
    "laziness": LazinessConfig,
}
SECTION_DEFAULTS = {"judge": {"kind": "lexical"}}
# fields that are derived rather than configured directly
SKIP_FIELDS = {("agent", "fallback_budget")}


@dataclass
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    chunking: ChunkingConfig = field(default_factory=ChunkingConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    index: IndexConfig = field(default_factory=IndexConfig)
    budget: Budget = field(default_factory=Budget)
    filter: FilterRules = field(default_factory=FilterRules)
    stages: Stages = field(default_factory=Stages)
    agent: AgentConfig = field(default_factory=AgentConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    judge: BackendConfig = field(default_factory=lambda: BackendConfig(kind="lexical"))
    laziness: LazinessConfig = field(default_factory=LazinessConfig)

    def settings(self) -> PipelineSettings:
        return PipelineSettings(
            budget=self.budget,
            rules=self.filter,
            stages={"filter": self.stages.filter, "crop": self.stages.crop},
            agent=self.agent,
        )


def config_fields():
    """Yield ``(section, field_name, default, annotation)`` for every field."""
    for section, cls in SECTIONS.items():
        overrides = SECTION_DEFAULTS.get(section, {})
        for f in dataclasses.fields(cls):
            if (section, f.name) in SKIP_FIELDS:
                continue
            if f.default is not dataclasses.MISSING:
                default = f.default
            elif f.default_factory is not dataclasses.MISSING:
                default = f.default_factory()
            else:
                default = None
            yield section, f.name, overrides.get(f.name, default), str(f.type)


def coerce(value, default, annotation: str):
    """Convert a string (from flags or env) to the field's type."""
    if not isinstance(value, str):
        return value
    kind = type(default) if default is not None else None
    if kind is None:
        if value.lower() in ("", "none", "null"):
            return None
        for name, conv in (("int", int), ("float", float)):
            if f"[{name}]" in annotation or annotation == name:
                return conv(value)
        return value
    if kind is bool:
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if kind in (tuple, list):
        return tuple(int(v) for v in value.split(",") if v.strip())
    return kind(value)


def read_config_file(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    text = p.read_text(encoding="utf-8")
    try:
        if p.suffix.lower() == ".toml":
            return tomllib.loads(text)
        if p.suffix.lower() == ".json":
            return json.loads(text)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from exc
    raise ConfigError(f"config file must be .toml or .json: {p}")


def layered_values(file_values: dict, flag_values: dict, environ) -> dict:
    """Merge the three layers into ``{section: {field: value}}``."""
    merged: dict = {}
    known = {(s, n): (d, a) for s, n, d, a in config_fields()}
    for section, body in (file_values or {}).items():
        if section not in SECTIONS or not isinstance(body, dict):
            raise ConfigError(f"unknown config section {section!r}")
        for name, value in body.items():
            if (section, name) not in known:
                raise ConfigError(f"unknown config field {section}.{name}")
            if isinstance(value, list):
                value = tuple(value)
            merged.setdefault(section, {})[name] = value
    for (section, name), value in flag_values.items():
        d, a = known[(section, name)]
        merged.setdefault(section, {})[name] = coerce(value, d, a)
    for (section, name), (d, a) in known.items():
        key = f"{ENV_PREFIX}{section}_{name}".upper()
        if key in environ:
            merged.setdefault(section, {})[name] = coerce(environ[key], d, a)
    return merged


def build_config(file_values: dict, flag_values: dict, environ=None) -> RunConfig:
    merged = layered_values(file_values, flag_values, os.environ if environ is None else environ)
    parts = {}
    for section, cls in SECTIONS.items():
        values = dict(SECTION_DEFAULTS.get(section, {}))
        values.update(merged.get(section, {}))
        if section == "agent" and values.get("fallback_retriever") == "token_constrained":
            values["fallback_budget"] = parts["budget"]
        try:
            parts[section] = cls(**values)
        except TypeError as exc:
            raise ConfigError(f"[{section}] {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"[{section}] {exc}") from exc
    return RunConfig(**parts)


# ----------------------------------------------------------------- parser


def _flag(section: str, name: str) -> str:
    return f"--{section}-{name}".replace("_", "-")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML or JSON config file")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    groups = {}
    for section, name, default, _ in config_fields():
        if section not in groups:
            groups[section] = parser.add_argument_group(f"[{section}]")
        shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
        groups[section].add_argument(
            _flag(section, name), dest=f"cfg:{section}:{name}", default=argparse.SUPPRESS, metavar="V",
            help=f"(default: {shown})",
        )
    groups["budget"].add_argument("--budget-tokens", dest="cfg:budget:max_tokens", default=argparse.SUPPRESS,
                                  metavar="V", help="alias of --budget-max-tokens")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ragnet", description="Government-document question answering with RAG.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="chunk documents and build the index")
    p.add_argument("inputs", nargs="*", help="files or directories (.txt, .md, .jsonl); default [paths] corpus_dir")
    _add_config_flags(p)

    p = sub.add_parser("index", help="rebuild the index from a saved corpus")
    _add_config_flags(p)

    p = sub.add_parser("ask", help="answer one question")
    p.add_argument("question")
    p.add_argument("--pipeline", choices=("basic", "oneshot", "iterative", "combined"), default="oneshot")
    p.add_argument("--trace", help="write the full trace or transcript JSON here")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="run a benchmark and write report.json and report.md")
    p.add_argument("--questions", required=True, help="question set (JSONL)")
    p.add_argument("--pipeline", action="append", choices=PIPELINES,
                   help="pipeline to run; repeatable (default: all)")
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p)

    p = sub.add_parser("experiment", help="run an experiment")
    exp = p.add_subparsers(dest="experiment", required=True)
    q = exp.add_parser("laziness", help="follow-up search probability against context length")
    q.add_argument("--questions", required=True, help="question set (JSONL)")
    q.add_argument("--qid", help="question to use (default: first with two or more golden chunks)")
    q.add_argument("--policy", choices=("scripted", "backend"), default="scripted",
                   help="scripted laziness policy or the configured backend")
    q.add_argument("--out", required=True, help="output directory")
    _add_config_flags(q)
    return parser


def _flag_values(ns: argparse.Namespace) -> dict:
    out = {}
    for key, value in vars(ns).items():
        if key.startswith("cfg:"):
            _, section, name = key.split(":")
            out[(section, name)] = value
    return out


# --------------------------------------------------------------- commands


def _load_store(cfg: RunConfig) -> tuple[CorpusStore, Index]:
    d = Path(cfg.paths.index_dir)
    if not (d / "manifest.json").is_file():
        raise ConfigError(f"no corpus found in index_dir {d}; run `ragnet ingest` first")
    corpus = CorpusStore.load(d)
    return corpus, Index.load(d, corpus)


def _write_json(path, obj) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(obj, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
    return p


def cmd_ingest(args, cfg: RunConfig) -> int:
    inputs = args.inputs or ([cfg.paths.corpus_dir] if cfg.paths.corpus_dir else [])
    if not inputs:
        raise ConfigError("no inputs given and [paths] corpus_dir is unset")
    for path in inputs:
        if not Path(path).exists():
            raise ConfigError(f"input path does not exist: {path}")
    gaz = Gazetteer.from_file(cfg.paths.gazetteer) if cfg.paths.gazetteer else None
    out = Path(cfg.paths.index_dir)
    store = ingest_documents(inputs, cfg.chunking, cfg.tokenizer, gaz, out_dir=out)
    build_index(store, cfg.embedder, cfg.index, out_dir=out)
    manifest = store.manifest()
    print(f"documents: {manifest['n_documents']}")
    print(f"chunks: {manifest['n_chunks']}")
    print(f"manifest hash: {manifest['corpus_hash']}")
    for name in ("manifest.json", "docs.jsonl", "chunks.jsonl", "index_manifest.json", "vectors.bin", "postings.jsonl"):
        print(f"wrote {out / name}")
    return 0


def cmd_index(args, cfg: RunConfig) -> int:
    d = Path(cfg.paths.index_dir)
    if not (d / "manifest.json").is_file():
        raise ConfigError(f"no corpus found in index_dir {d}")
    store = CorpusStore.load(d)
    build_index(store, cfg.embedder, cfg.index, out_dir=d)
    print(f"chunks: {len(store.chunks)}")
    for name in ("index_manifest.json", "vectors.bin", "postings.jsonl"):
        print(f"wrote {d / name}")
    return 0


def cmd_ask(args, cfg: RunConfig) -> int:
    corpus, index = _load_store(cfg)
    llm = make_backend(cfg.backend)
    code, trace = 0, None
    try:
        if args.pipeline == "basic":
            answer, _, trace = run_basic(args.question, index, llm)
        elif args.pipeline == "oneshot":
            stages = {"filter": cfg.stages.filter, "crop": cfg.stages.crop}
            res = run_oneshot(args.question, index, corpus, cfg.budget, cfg.filter, llm, stages)
            answer, trace = res.answer, res.record()
        else:
            run = run_combined if args.pipeline == "combined" else run_iterative
            agent_cfg = cfg.agent
            if args.pipeline == "combined" and agent_cfg.fallback_retriever != "token_constrained":
                agent_cfg = dataclasses.replace(agent_cfg, fallback_retriever="token_constrained",
                                                fallback_budget=cfg.budget)
            tr = run(args.question, index, corpus, agent_cfg, llm)
            answer, trace = tr.final_answer or "", tr.to_dict()
            if tr.termination == "backend_error":
                print(f"error: backend failure: {tr.error}", file=sys.stderr)
                code = 3
    except (RagnetError, httpx.HTTPError) as exc:
        if args.trace and getattr(exc, "partial_trace", None) is not None:
            print(f"wrote {_write_json(args.trace, exc.partial_trace)}")
        raise
    if code == 0:
        print(answer)
    if args.trace:
        print(f"wrote {_write_json(args.trace, trace)}")
    return code


def cmd_eval(args, cfg: RunConfig) -> int:
    if not Path(args.questions).is_file():
        raise ConfigError(f"questions file not found: {args.questions}")
    corpus, index = _load_store(cfg)
    questions = load_questions(args.questions, corpus)
    pipelines = args.pipeline or list(PIPELINES)
    llm = make_backend(cfg.backend)
    out = Path(args.out)
    rows = []
    for name in pipelines:
        target = out / name if len(pipelines) > 1 else out
        report = run_benchmark(questions, name, index, corpus, llm, cfg.judge, cfg.settings(),
                               workers=cfg.paths.workers, out_dir=target)
        rows.append((name, report))
        for f in ("report.json", "report.md", "traces.jsonl"):
            print(f"wrote {target / f}")
    if len(pipelines) > 1:
        (out / "report.md").write_text(render_markdown(rows), encoding="utf-8")
        print(f"wrote {out / 'report.md'}")
    print(render_markdown(rows), end="")
    return 0


def cmd_laziness(args, cfg: RunConfig) -> int:
    if not Path(args.questions).is_file():
        raise ConfigError(f"questions file not found: {args.questions}")
    corpus, index = _load_store(cfg)
    questions = load_questions(args.questions, corpus)
    if args.qid:
        picked = [q for q in questions if q.qid == args.qid]
    else:
        picked = [q for q in questions if len(q.golden_chunk_ids) >= 2]
    if not picked:
        raise ConfigError("no suitable question (need --qid or a question with two or more golden chunks)")
    llm = LazinessPolicyBackend(corpus.tokenizer) if args.policy == "scripted" else make_backend(cfg.backend)
    rows = laziness_experiment(picked[0], cfg.laziness, cfg.agent, llm, index, corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = laziness_csv(rows)
    (out / "laziness.csv").write_text(text, encoding="utf-8")
    print(text, end="")
    print(f"wrote {out / 'laziness.csv'}")
    return 0


COMMANDS = {"ingest": cmd_ingest, "index": cmd_index, "ask": cmd_ask, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = build_config(file_values, _flag_values(args))
        if args.command == "experiment":
            return cmd_laziness(args, cfg)
        return COMMANDS[args.command](args, cfg)
    except RagnetError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except httpx.HTTPError as exc:
        print(f"error: backend transport: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
