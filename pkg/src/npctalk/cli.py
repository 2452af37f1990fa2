"""Command-line surface: dataset conversion, validation, evaluation, serving,
and a terminal chat REPL over the same engine.

Expert backends come from a JSON config file:

    {
      "experts": {
        "tool":    {"script": "scripts/tool.json", "model": "npc-tool-adapter"},
        "direct":  {"endpoint": "http://localhost:8080", "model": "npc-base"},
        "persona": {"endpoint": "http://localhost:8080", "model": "npc-persona-adapter"}
      },
      "budget_ms": 7000,
      "prefill": "<tool_call>\\n{\\"name\\": \\"",
      "sentinel": "reply\\"",
      "think_prefixes": {"direct": "...", "persona": "..."},
      "banned_strings": ["<tool_call>", "</tool_call>"]
    }
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Any, Mapping, Sequence

from .backends import (
    ExpertBackend,
    ExpertId,
    GenerationGateway,
    HTTPBackend,
    ScriptedBackend,
)
from .dataset import ConversationRecord, load_records, make_splits, restructure, export_jsonl
from .evaluation import run_eval
from .model import Message
from .router import DialogueEngine, EngineConfig
from .service import DEFAULT_BUDGET_MS, NpcService, serve_forever
from .tools import ToolSchema, load_manifest
from .validation import (
    ValidationIssue,
    check_flow_correspondence,
    report_jsonl,
    summarize,
    validate_conversation,
    validate_schema,
    validate_structure,
)


def _read(path: str) -> bytes:
    return Path(path).read_bytes()


def load_engine_config(obj: Mapping[str, Any]) -> EngineConfig:
    think = obj.get("think_prefixes", {})
    defaults = EngineConfig()
    return EngineConfig(
        prefill=obj.get("prefill", defaults.prefill),
        sentinel=obj.get("sentinel", defaults.sentinel),
        early_stop=obj.get("early_stop", defaults.early_stop),
        direct_think_prefix=think.get("direct", defaults.direct_think_prefix),
        persona_think_prefix=think.get("persona", defaults.persona_think_prefix),
        banned_strings=tuple(obj.get("banned_strings", defaults.banned_strings)),
        decision_max_tokens=obj.get("decision_max_tokens", defaults.decision_max_tokens),
        reply_max_tokens=obj.get("reply_max_tokens", defaults.reply_max_tokens),
        temperature=obj.get("temperature", defaults.temperature),
        seed=obj.get("seed", defaults.seed),
    )


def load_gateway(obj: Mapping[str, Any], base_dir: Path) -> GenerationGateway:
    experts: dict[ExpertId, ExpertBackend] = {}
    for key, expert in (("tool", ExpertId.TOOL), ("direct", ExpertId.DIRECT),
                        ("persona", ExpertId.PERSONA)):
        spec = obj.get("experts", {}).get(key)
        if spec is None:
            continue
        if "script" in spec:
            backend: Any = ScriptedBackend.from_file(base_dir / spec["script"])
        elif "endpoint" in spec:
            backend = HTTPBackend(
                spec["endpoint"],
                timeout_ms=spec.get("timeout_ms", 6000),
                supports_logit_bias=spec.get("supports_logit_bias", False),
            )
        else:
            raise SystemExit(f"expert {key!r} needs either a script or an endpoint")
        experts[expert] = ExpertBackend(backend, spec.get("model", ""))
    return GenerationGateway(experts)


def _load_service(args: argparse.Namespace) -> NpcService:
    config_path = Path(args.config)
    config = json.loads(config_path.read_text(encoding="utf-8"))
    records_path = getattr(args, "records", None) or config.get("records")
    manifest_path = getattr(args, "manifest", None) or config.get("manifest")
    if not records_path or not manifest_path:
        raise SystemExit("records and manifest are required (flag or config key)")
    base = config_path.parent
    records = load_records((base / records_path).read_bytes())
    manifest = load_manifest((base / manifest_path).read_bytes())
    gateway = load_gateway(config, config_path.parent)
    return NpcService(
        records,
        manifest,
        DialogueEngine(gateway),
        config=load_engine_config(config),
        budget_ms=config.get("budget_ms", DEFAULT_BUDGET_MS),
    )


# ----------------------------------------------------------------------
# convert
# ----------------------------------------------------------------------

def cmd_convert(args: argparse.Namespace) -> int:
    records = load_records(_read(args.records))
    manifest = load_manifest(_read(args.manifest))
    examples = []
    for record in records:
        conversation, tools = restructure(record, manifest)
        examples.extend(make_splits(conversation, tools, record.context))
    payload = export_jsonl(examples)
    Path(args.output).write_bytes(payload)
    print(f"wrote {len(examples)} training examples to {args.output}")
    return 0


# ----------------------------------------------------------------------
# validate
# ----------------------------------------------------------------------

def _infer_manifest(records: Sequence[ConversationRecord]) -> dict[str, list[ToolSchema]]:
    """Schemas reconstructed from gold calls, for structure-only validation
    when no declarative manifest is supplied."""
    tags = {str: "string", bool: "boolean", int: "number", float: "number",
            dict: "object", list: "array"}
    inferred: dict[str, dict[str, ToolSchema]] = {}
    for record in records:
        bucket = inferred.setdefault(record.function_list_id, {})
        for turn in record.turns:
            for fn in turn.gold_functions:
                properties = {
                    name: {"type": tags.get(type(value), "string"), "description": ""}
                    for name, value in fn.parameters.items()
                }
                known = bucket.get(fn.name)
                if known is not None:
                    properties = {**known.properties, **properties}
                bucket[fn.name] = ToolSchema(fn.name, "(inferred from dataset)", properties)
    return {list_id: list(by_name.values()) for list_id, by_name in inferred.items()}


def _conversations_for_validation(
    records: Sequence[ConversationRecord],
    manifest: Mapping[str, Sequence[ToolSchema]] | None,
) -> list[tuple[str, list[Message], Sequence[ToolSchema]]]:
    effective = manifest if manifest is not None else _infer_manifest(records)
    out = []
    for record in records:
        conversation, tools = restructure(record, effective)
        out.append((record.data_id, conversation, tools))
    return out


def _validate_jsonl(document: bytes) -> tuple[list[ValidationIssue], int]:
    """Validate converted training examples (tools travel with each line)."""
    import re as _re

    issues: list[ValidationIssue] = []
    seen: set[str] = set()
    count = 0
    for n, line in enumerate(document.decode("utf-8").splitlines()):
        if not line.strip():
            continue
        count += 1
        where = f"line{n + 1}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            issues.append(ValidationIssue("error", "schema", where, f"invalid JSON line: {exc.msg}"))
            continue
        text = str(obj.get("input", "")) + "\n" + str(obj.get("label", ""))
        issues.extend(validate_structure([], raw_texts=[text], record_id=where))
        issues.extend(validate_schema([], obj.get("tools", []), record_id=where))
        digest = _re.sub(r"\s+", " ", text.lower()).strip()
        if digest in seen:
            issues.append(ValidationIssue("error", "structural", where, "exact duplicate example"))
        seen.add(digest)
    return issues, count


def cmd_validate(args: argparse.Namespace) -> int:
    document = _read(args.dataset)
    head = document.lstrip()[:1]
    issues: list[ValidationIssue] = []
    records_checked = 0

    if head == b"[":
        records = load_records(document)
        manifest = load_manifest(_read(args.manifest)) if args.manifest else None
        if manifest is None:
            print("note: no --manifest given; schemas inferred from gold calls", file=sys.stderr)
        seen_hashes: set[str] = set()
        for data_id, conversation, tools in _conversations_for_validation(records, manifest):
            issues.extend(validate_conversation(conversation, tools, data_id, seen_hashes))
        records_checked = len(records)

        if args.augmented_against:
            originals = load_records(_read(args.augmented_against))
            orig_manifest = manifest if manifest is not None else _infer_manifest(originals + records)
            orig_convs = _conversations_for_validation(originals, orig_manifest)
            aug_convs = _conversations_for_validation(records, orig_manifest)
            for (oid, orig, _), (aid, aug, _) in zip(orig_convs, aug_convs):
                for issue in check_flow_correspondence(orig, aug):
                    issues.append(
                        ValidationIssue(issue.severity, issue.category,
                                        f"{aid}{issue.location}", issue.message)
                    )
            if len(orig_convs) != len(aug_convs):
                issues.append(
                    ValidationIssue("error", "flow", "#",
                                    f"record count differs: {len(orig_convs)} originals vs "
                                    f"{len(aug_convs)} augmented")
                )
    else:
        issues, records_checked = _validate_jsonl(document)

    payload = report_jsonl(issues, records_checked)
    if args.report:
        Path(args.report).write_bytes(payload)
    else:
        sys.stdout.write(payload.decode("utf-8"))
    summary = summarize(issues, records_checked)
    print(f"checked {records_checked} records: "
          f"{summary['errors']} errors, {summary['warnings']} warnings", file=sys.stderr)
    return 1 if summary["errors"] else 0


# ----------------------------------------------------------------------
# eval
# ----------------------------------------------------------------------

def cmd_eval(args: argparse.Namespace) -> int:
    records = load_records(_read(args.records))
    manifest = load_manifest(_read(args.manifest))
    config_path = Path(args.backend)
    config = json.loads(config_path.read_text(encoding="utf-8"))
    engine = DialogueEngine(load_gateway(config, config_path.parent))
    report = run_eval(records, manifest, engine, load_engine_config(config))

    payload = report.to_json()
    print(json.dumps(payload["summary"], indent=2))
    if args.report:
        Path(args.report).write_text(json.dumps(payload, indent=2), encoding="utf-8")
    if args.csv:
        rows = payload["rows"]
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()) if rows else
                                    ["record_id", "turn_index"])
            writer.writeheader()
            for row in rows:
                writer.writerow({k: json.dumps(v) if isinstance(v, (list, dict)) else v
                                 for k, v in row.items()})
    return 0


# ----------------------------------------------------------------------
# serve / chat
# ----------------------------------------------------------------------

def cmd_serve(args: argparse.Namespace) -> int:
    service = _load_service(args)
    serve_forever(service, host=args.host, port=args.port)
    return 0


def cmd_chat(args: argparse.Namespace) -> int:
    service = _load_service(args)
    try:
        session_id = service.create_session(args.scenario_id)
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return 1
    scenario = service.scenarios[args.scenario_id]
    npc = scenario.record.context.npc_persona.get("name", "NPC")
    place = scenario.record.context.state.get("place", "")
    print(f"chatting with {npc}{f' at {place}' if place else ''} (ctrl-D to quit)")
    while True:
        try:
            text = input("you> ").strip()
        except EOFError:
            print()
            return 0
        if not text:
            continue
        try:
            response = service.post_message(session_id, text)
        except Exception as exc:  # noqa: BLE001
            print(f"error: {exc}", file=sys.stderr)
            continue
        trace = response.trace
        decision = trace.get("decision") or {}
        if decision.get("type") == "tools":
            for call in trace.get("tool_calls", []):
                print(f"  [tool] {call['name']}({json.dumps(call['arguments'])})")
        print(f"{npc}> {response.reply}")
        print(f"  ({response.timing_total_ms:.0f} ms, expert={trace.get('expert_used')})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="npctalk")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="convert competition records to training JSONL")
    p.add_argument("records")
    p.add_argument("manifest")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(fn=cmd_convert)

    p = sub.add_parser("validate", help="run the dataset quality gate")
    p.add_argument("dataset", help="records JSON or converted JSONL")
    p.add_argument("--augmented-against", dest="augmented_against",
                   help="original records to check flow correspondence against")
    p.add_argument("--manifest", help="tool manifest for schema/semantic layers")
    p.add_argument("--report", help="write the JSONL issue report here")
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("eval", help="replay records through the pipeline and score")
    p.add_argument("records")
    p.add_argument("manifest")
    p.add_argument("--backend", required=True, help="expert backend config JSON")
    p.add_argument("--report", help="write the full JSON report here")
    p.add_argument("--csv", help="write per-turn rows as CSV here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("serve", help="run the HTTP chat service")
    p.add_argument("--config", required=True)
    p.add_argument("--records")
    p.add_argument("--manifest")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8023)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("chat", help="terminal REPL over the engine")
    p.add_argument("scenario_id")
    p.add_argument("--config", required=True)
    p.add_argument("--records")
    p.add_argument("--manifest")
    p.set_defaults(fn=cmd_chat)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
