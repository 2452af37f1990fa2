"""Tool schemas, the dummy reply tool, argument validation, and call execution.

A ToolSet is immutable after construction. Handlers receive the argument map
and the scenario context and must be safe to call from multiple threads; a
failing handler degrades to an error-object result instead of aborting the
batch, because a turn must always produce a reply.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

from .model import ScenarioContext, ToolCall, ToolResult

REPLY_TOOL_NAME = "reply"
REPLY_TOOL_DESCRIPTION = "Reply directly to the player without using any tool."

TYPE_TAGS = ("string", "number", "boolean", "object", "array")

_PY_TYPES: dict[str, tuple[type, ...]] = {
    "string": (str,),
    "number": (int, float),
    "boolean": (bool,),
    "object": (dict,),
    "array": (list,),
}


class ToolError(Exception):
    pass


class NameCollision(ToolError):
    """A schema named 'reply' already exists; injecting the dummy tool would shadow it."""


class NameMismatch(ToolError):
    """validate_arguments was handed a call/schema pair with different names."""


class UnknownTool(ToolError):
    def __init__(self, name: str):
        super().__init__(f"unknown tool: {name}")
        self.name = name


class ManifestError(ToolError):
    pass


@dataclass(frozen=True)
class ToolSchema:
    """Declared function signature: name, description, flat property map."""

    name: str
    description: str
    properties: dict[str, dict[str, str]] = field(default_factory=dict)
    required: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for prop in self.required:
            if prop not in self.properties:
                raise ValueError(f"required property {prop!r} not declared on {self.name!r}")

    def to_manifest(self) -> dict[str, Any]:
        """Converted JSON form: {name, description, parameters:{type:"object", properties}}."""
        parameters: dict[str, Any] = {"type": "object", "properties": dict(self.properties)}
        if self.required:
            parameters["required"] = list(self.required)
        return {"name": self.name, "description": self.description, "parameters": parameters}

    @classmethod
    def from_manifest(cls, obj: Mapping[str, Any]) -> "ToolSchema":
        for key in ("name", "description", "parameters"):
            if key not in obj:
                raise ManifestError(f"tool schema missing {key!r}: {obj!r}")
        parameters = obj["parameters"]
        if not isinstance(parameters, Mapping):
            raise ManifestError(f"parameters must be an object on {obj.get('name')!r}")
        properties = dict(parameters.get("properties", {}))
        for prop, spec in properties.items():
            tag = spec.get("type") if isinstance(spec, Mapping) else None
            if tag not in TYPE_TAGS:
                raise ManifestError(f"property {prop!r} on {obj['name']!r} has bad type tag {tag!r}")
        return cls(
            name=obj["name"],
            description=obj["description"],
            properties=properties,
            required=tuple(parameters.get("required", ())),
        )


Handler = Callable[[dict[str, Any], ScenarioContext], Any]


@dataclass(frozen=True)
class ToolSet:
    schemas: tuple[ToolSchema, ...]
    handlers: Mapping[str, Handler] = field(default_factory=dict)
    reply_injected: bool = False

    def __post_init__(self) -> None:
        names = [s.name for s in self.schemas]
        if len(names) != len(set(names)):
            raise ValueError(f"duplicate tool names in ToolSet: {names}")
        if self.reply_injected:
            reply = next((s for s in self.schemas if s.name == REPLY_TOOL_NAME), None)
            if reply is None or reply.properties:
                raise ValueError("reply_injected requires a 'reply' schema with empty properties")

    def schema_for(self, name: str) -> ToolSchema | None:
        return next((s for s in self.schemas if s.name == name), None)


def reply_tool_schema() -> ToolSchema:
    return ToolSchema(name=REPLY_TOOL_NAME, description=REPLY_TOOL_DESCRIPTION)


def inject_reply_tool(tools: Sequence[ToolSchema]) -> list[ToolSchema]:
    """Append the dummy reply tool so the decision model can opt out of tool use."""
    if any(s.name == REPLY_TOOL_NAME for s in tools):
        raise NameCollision(f"a tool named {REPLY_TOOL_NAME!r} is already declared")
    return list(tools) + [reply_tool_schema()]


@dataclass(frozen=True)
class ArgumentIssue:
    call_name: str
    argument_name: str
    kind: str  # missing | unknown | type-mismatch
    detail: str

    def __post_init__(self) -> None:
        if self.kind not in ("missing", "unknown", "type-mismatch"):
            raise ValueError(f"bad issue kind: {self.kind!r}")


def validate_arguments(call: ToolCall, schema: ToolSchema) -> list[ArgumentIssue]:
    """Check presence and top-level type of every argument against the schema."""
    if call.name != schema.name:
        raise NameMismatch(f"call {call.name!r} validated against schema {schema.name!r}")
    issues: list[ArgumentIssue] = []
    for name in schema.required:
        if name not in call.arguments:
            issues.append(ArgumentIssue(call.name, name, "missing", "required argument absent"))
    for name, value in call.arguments.items():
        spec = schema.properties.get(name)
        if spec is None:
            issues.append(ArgumentIssue(call.name, name, "unknown", "argument not declared"))
            continue
        tag = spec.get("type", "string")
        expected = _PY_TYPES.get(tag, (object,))
        ok = isinstance(value, expected)
        if tag == "number" and isinstance(value, bool):
            ok = False  # bool is an int subclass; a declared number is not a flag
        if not ok:
            issues.append(
                ArgumentIssue(
                    call.name, name, "type-mismatch",
                    f"expected {tag}, got {type(value).__name__}",
                )
            )
    return issues


def execute_calls(
    calls: Sequence[ToolCall],
    toolset: ToolSet,
    context: ScenarioContext,
) -> tuple[list[ToolResult], list[str]]:
    """Run every call in order; one result per call, failures as error objects.

    Returns (results, warnings). Unknown tools and handler failures never
    abort the batch: they yield a result whose return_value is {"error": ...}
    plus a warning entry describing what happened.
    """
    if not calls:
        raise ValueError("execute_calls requires at least one call")
    if any(c.name == REPLY_TOOL_NAME for c in calls):
        raise ValueError("the reply sentinel is not executable")

    results: list[ToolResult] = []
    warnings: list[str] = []
    for call in calls:
        handler = toolset.handlers.get(call.name)
        if handler is None:
            warnings.append(UnknownTool(call.name).args[0])
            results.append(ToolResult(call.name, call.arguments, {"error": "unknown tool"}))
            continue
        schema = toolset.schema_for(call.name)
        if schema is not None:
            for issue in validate_arguments(call, schema):
                warnings.append(
                    f"argument issue on {issue.call_name}.{issue.argument_name}: "
                    f"{issue.kind} ({issue.detail})"
                )
        try:
            value = handler(dict(call.arguments), context)
        except Exception as exc:  # noqa: BLE001 - a bad tool cannot kill the turn
            warnings.append(f"handler for {call.name} failed: {exc}")
            value = {"error": f"{type(exc).__name__}: {exc}"}
        results.append(ToolResult(call.name, call.arguments, value))
    return results, warnings


def load_manifest(document: bytes | str | Mapping[str, Any]) -> dict[str, list[ToolSchema]]:
    """Load a tool manifest: function_list_id -> list of converted-form schemas."""
    if isinstance(document, (bytes, str)):
        obj = json.loads(document)
    else:
        obj = document
    if not isinstance(obj, Mapping):
        raise ManifestError("manifest must be a JSON object keyed by function_list_id")
    manifest: dict[str, list[ToolSchema]] = {}
    for list_id, schemas in obj.items():
        if not isinstance(schemas, list):
            raise ManifestError(f"manifest entry {list_id!r} must be a list")
        manifest[list_id] = [ToolSchema.from_manifest(s) for s in schemas]
    return manifest
