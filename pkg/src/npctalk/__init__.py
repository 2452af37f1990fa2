"""npctalk: multi-expert tool-calling NPC dialogue engine, dataset toolkit,
and evaluation harness."""

from .backends import (
    BackendError,
    BackendProtocol,
    BackendUnavailable,
    ExpertBackend,
    ExpertId,
    GenerationGateway,
    GenerationRequest,
    GenerationResult,
    HTTPBackend,
    ScriptedBackend,
    UnconfiguredExpert,
    apply_ban_filter,
)
from .dataset import (
    ConversationRecord,
    GoldFunction,
    TrainingExample,
    Turn,
    export_jsonl,
    load_records,
    make_splits,
    restructure,
)
from .evaluation import (
    EvalReport,
    integration_recall,
    match_call,
    run_eval,
    score_decision,
    similarity_f1,
)
from .model import (
    AssistantText,
    AssistantToolCalls,
    InvalidHistory,
    MalformedToolCall,
    Message,
    ParsedOutput,
    ScenarioContext,
    ToolCall,
    ToolResponse,
    ToolResult,
    UserText,
    parse_assistant_output,
    render_assistant_output,
    render_prompt,
    serialize_tool_response,
)
from .router import (
    BudgetExceeded,
    DialogueEngine,
    EngineConfig,
    RouteDecision,
    Session,
    TurnTrace,
    prune_history,
)
from .service import NpcService, SessionStore, TurnInProgress, UnknownScenario, UnknownSession
from .tools import (
    ArgumentIssue,
    NameCollision,
    NameMismatch,
    ToolSchema,
    ToolSet,
    UnknownTool,
    execute_calls,
    inject_reply_tool,
    load_manifest,
    validate_arguments,
)
from .validation import (
    ValidationIssue,
    check_flow_correspondence,
    validate_conversation,
    validate_schema,
    validate_semantics,
    validate_structure,
)

__version__ = "0.1.0"
