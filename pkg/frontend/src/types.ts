// Wire types for the npctalk chat service API.

export interface ScenarioInfo {
  id: string;
  npc_name: string;
  place: string;
}

export interface SessionCreated {
  session_id: string;
}

export interface ToolCallData {
  name: string;
  arguments: Record<string, unknown>;
}

export interface ToolResultData {
  name: string;
  arguments: Record<string, unknown>;
  return_value: unknown;
}

export interface TraceData {
  decision: { type: 'reply' | 'tools'; calls: ToolCallData[] } | null;
  expert_used: string | null;
  tool_calls: ToolCallData[];
  tool_results: ToolResultData[];
  decision_completion: string;
  reply_text: string | null;
  timings: Record<string, number>;
  warnings: string[];
}

export interface TurnResponseData {
  reply: string;
  trace: TraceData;
  timing_total_ms: number;
}

export interface HistoryMessage {
  role: 'user' | 'assistant' | 'tool';
  text?: string;
  tool_calls?: ToolCallData[];
  tool_results?: ToolResultData[];
}

export interface HistoryResponse {
  messages: HistoryMessage[];
}

export interface ApiErrorBody {
  error: string;
  detail: string;
}
