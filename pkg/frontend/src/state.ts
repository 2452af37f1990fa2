import type { HistoryMessage, ScenarioInfo, TraceData } from './types';

export interface Bubble {
  role: 'user' | 'npc';
  text: string;
  trace?: TraceData;
  timingMs?: number;
}

export interface ChatViewState {
  scenarios: ScenarioInfo[];
  activeScenario: ScenarioInfo | null;
  sessionId: string | null;
  transcript: Bubble[];
  pending: boolean;
  banner: string | null;
}

export function initialState(): ChatViewState {
  return {
    scenarios: [],
    activeScenario: null,
    sessionId: null,
    transcript: [],
    pending: false,
    banner: null,
  };
}

export function withScenarios(state: ChatViewState, scenarios: ScenarioInfo[]): ChatViewState {
  return { ...state, scenarios };
}

/** A new session clears the transcript and any banner. Blocked while pending. */
export function startSession(
  state: ChatViewState,
  scenario: ScenarioInfo,
  sessionId: string,
): ChatViewState {
  if (state.pending) {
    return state;
  }
  return {
    ...state,
    activeScenario: scenario,
    sessionId,
    transcript: [],
    pending: false,
    banner: null,
  };
}

/**
 * Optimistically append the user bubble and flip the pending flag.
 * Returns null (no-op) when the input is empty, no session is active,
 * or a post is already in flight.
 */
export function beginSend(state: ChatViewState, text: string): ChatViewState | null {
  if (!text.trim() || state.pending || !state.sessionId) {
    return null;
  }
  return {
    ...state,
    transcript: [...state.transcript, { role: 'user', text }],
    pending: true,
    banner: null,
  };
}

export function applyTurn(
  state: ChatViewState,
  reply: string,
  trace: TraceData,
  timingMs: number,
): ChatViewState {
  return {
    ...state,
    transcript: [...state.transcript, { role: 'npc', text: reply, trace, timingMs }],
    pending: false,
  };
}

/**
 * A failed turn never commits on the server, so the optimistic user bubble
 * is rolled back to keep the transcript in sync with server history.
 */
export function applyFailure(state: ChatViewState, message: string): ChatViewState {
  const transcript = [...state.transcript];
  const last = transcript[transcript.length - 1];
  if (last && last.role === 'user') {
    transcript.pop();
  }
  return { ...state, transcript, pending: false, banner: message };
}

export function dismissBanner(state: ChatViewState): ChatViewState {
  return { ...state, banner: null };
}

/** Text-level view of the transcript in server history terms. */
function transcriptAsHistory(state: ChatViewState): { role: string; text: string }[] {
  return state.transcript.map((bubble) => ({
    role: bubble.role === 'npc' ? 'assistant' : 'user',
    text: bubble.text,
  }));
}

/**
 * True when the transcript matches the server history (tool messages in the
 * server view belong to trace panels, not bubbles, and are skipped).
 */
export function matchesServerHistory(state: ChatViewState, messages: HistoryMessage[]): boolean {
  const serverTurns = messages
    .filter((m) => m.role === 'user' || m.role === 'assistant')
    .map((m) => ({ role: m.role, text: m.text ?? '' }));
  const local = transcriptAsHistory(state);
  if (serverTurns.length !== local.length) {
    return false;
  }
  return serverTurns.every(
    (turn, i) => turn.role === local[i].role && turn.text === local[i].text,
  );
}
