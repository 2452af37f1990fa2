import type { Bubble, ChatViewState } from './state';
import type { TraceData } from './types';

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) {
    node.className = className;
  }
  if (text !== undefined) {
    node.textContent = text;
  }
  return node;
}

function renderTracePanel(trace: TraceData, timingMs?: number): HTMLElement {
  const panel = el('details', 'trace-panel');
  const summary = el('summary');
  const decision = trace.decision?.type === 'tools' ? 'Tools' : 'Reply';
  summary.appendChild(el('span', `decision-badge decision-${decision.toLowerCase()}`, decision));
  const names = trace.tool_calls.map((c) => c.name).join(', ');
  summary.appendChild(
    el('span', 'trace-summary-text', names ? ` ${names}` : ' no tools used'),
  );
  panel.appendChild(summary);

  if (trace.tool_calls.length > 0) {
    const calls = el('div', 'trace-calls');
    calls.appendChild(el('h4', undefined, 'Tool calls'));
    for (const call of trace.tool_calls) {
      calls.appendChild(
        el('code', 'trace-call', `${call.name}(${JSON.stringify(call.arguments)})`),
      );
    }
    panel.appendChild(calls);
  }
  if (trace.tool_results.length > 0) {
    const results = el('div', 'trace-results');
    results.appendChild(el('h4', undefined, 'Results'));
    for (const result of trace.tool_results) {
      results.appendChild(
        el('code', 'trace-result', `${result.name} -> ${JSON.stringify(result.return_value)}`),
      );
    }
    panel.appendChild(results);
  }

  const timings = el('div', 'trace-timings');
  timings.appendChild(el('h4', undefined, 'Timings'));
  const parts = Object.entries(trace.timings).map(([k, v]) => `${k} ${v.toFixed(1)} ms`);
  if (timingMs !== undefined) {
    parts.push(`total ${timingMs.toFixed(1)} ms`);
  }
  timings.appendChild(el('span', undefined, parts.join(' | ')));
  panel.appendChild(timings);

  if (trace.warnings.length > 0) {
    const warnings = el('div', 'trace-warnings');
    warnings.appendChild(el('h4', undefined, 'Warnings'));
    for (const warning of trace.warnings) {
      warnings.appendChild(el('div', 'trace-warning', warning));
    }
    panel.appendChild(warnings);
  }
  return panel;
}

function renderBubble(bubble: Bubble): HTMLElement {
  const wrap = el('div', `bubble-row ${bubble.role}`);
  const node = el('div', `bubble ${bubble.role === 'npc' ? 'npc-bubble' : 'user-bubble'}`);
  node.appendChild(el('p', undefined, bubble.text));
  wrap.appendChild(node);
  if (bubble.role === 'npc' && bubble.trace) {
    wrap.appendChild(renderTracePanel(bubble.trace, bubble.timingMs));
  }
  return wrap;
}

export function render(state: ChatViewState, root: HTMLElement): void {
  root.textContent = '';

  const sidebar = el('aside', 'scenario-list');
  sidebar.appendChild(el('h2', undefined, 'Scenarios'));
  for (const scenario of state.scenarios) {
    const button = el('button', 'scenario-item', `${scenario.npc_name} · ${scenario.place}`);
    button.dataset.scenarioId = scenario.id;
    if (state.activeScenario?.id === scenario.id) {
      button.classList.add('active');
    }
    button.disabled = state.pending;
    sidebar.appendChild(button);
  }
  root.appendChild(sidebar);

  const main = el('main', 'chat-main');
  const header = el('header', 'chat-header');
  if (state.activeScenario) {
    header.appendChild(el('h1', undefined, state.activeScenario.npc_name));
    header.appendChild(el('span', 'chat-place', state.activeScenario.place));
  } else {
    header.appendChild(el('h1', undefined, 'Pick a scenario'));
  }
  main.appendChild(header);

  if (state.banner) {
    main.appendChild(el('div', 'error-banner', state.banner));
  }

  const transcript = el('div', 'transcript');
  for (const bubble of state.transcript) {
    transcript.appendChild(renderBubble(bubble));
  }
  if (state.pending) {
    transcript.appendChild(el('div', 'typing-indicator', '…'));
  }
  main.appendChild(transcript);

  const form = el('form', 'composer');
  const input = el('input', 'composer-input') as HTMLInputElement;
  input.type = 'text';
  input.placeholder = state.activeScenario ? 'Say something…' : 'Pick a scenario first';
  input.disabled = state.pending || !state.sessionId;
  const send = el('button', 'composer-send', 'Send') as HTMLButtonElement;
  send.type = 'submit';
  send.disabled = state.pending || !state.sessionId;
  form.appendChild(input);
  form.appendChild(send);
  main.appendChild(form);

  root.appendChild(main);
}
