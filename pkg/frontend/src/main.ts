import { ApiError, ChatApi } from './api';
import {
  applyFailure,
  applyTurn,
  beginSend,
  ChatViewState,
  initialState,
  matchesServerHistory,
  startSession,
  withScenarios,
} from './state';
import { render } from './view';
import type { ScenarioInfo } from './types';

export interface App {
  state: ChatViewState;
  selectScenario(scenarioId: string): Promise<void>;
  sendMessage(text: string): Promise<void>;
}

/** Wire the chat client into `root`, talking to the service at `baseUrl`. */
export function createApp(root: HTMLElement, baseUrl = ''): App {
  const api = new ChatApi(baseUrl);

  const app: App = {
    state: initialState(),

    async selectScenario(scenarioId: string): Promise<void> {
      if (app.state.pending) {
        return;
      }
      const scenario = app.state.scenarios.find((s: ScenarioInfo) => s.id === scenarioId);
      if (!scenario) {
        return;
      }
      try {
        const created = await api.createSession(scenarioId);
        update(startSession(app.state, scenario, created.session_id));
      } catch (error) {
        update({ ...app.state, banner: describe(error) });
      }
    },

    async sendMessage(text: string): Promise<void> {
      const optimistic = beginSend(app.state, text);
      if (!optimistic) {
        return;
      }
      update(optimistic);
      try {
        const turn = await api.sendMessage(app.state.sessionId!, text);
        update(applyTurn(app.state, turn.reply, turn.trace, turn.timing_total_ms));
        await verifySync();
      } catch (error) {
        update(applyFailure(app.state, describe(error)));
      }
    },
  };

  function update(next: ChatViewState): void {
    app.state = next;
    render(app.state, root);
  }

  async function verifySync(): Promise<void> {
    if (!app.state.sessionId) {
      return;
    }
    try {
      const history = await api.history(app.state.sessionId);
      if (!matchesServerHistory(app.state, history.messages)) {
        console.warn('transcript out of sync with server history', history.messages);
      }
    } catch {
      // sync check is best-effort; the next turn will surface real errors
    }
  }

  function describe(error: unknown): string {
    if (error instanceof ApiError) {
      if (error.code === 'budget_exceeded') {
        return 'The NPC took too long to answer and the turn was aborted. Try again.';
      }
      return `Request failed (${error.code}): ${error.message}`;
    }
    return `Request failed: ${String(error)}`;
  }

  root.addEventListener('click', (event) => {
    const target = event.target as HTMLElement;
    if (target.matches('.scenario-item') && target.dataset.scenarioId) {
      void app.selectScenario(target.dataset.scenarioId);
    }
  });

  root.addEventListener('submit', (event) => {
    const form = event.target as HTMLElement;
    if (form.matches('.composer')) {
      event.preventDefault();
      const input = form.querySelector('.composer-input') as HTMLInputElement | null;
      if (input) {
        const text = input.value;
        input.value = '';
        void app.sendMessage(text);
      }
    }
  });

  void (async () => {
    try {
      const scenarios = await api.listScenarios();
      update(withScenarios(app.state, scenarios));
    } catch (error) {
      update({ ...app.state, banner: describe(error) });
    }
  })();

  render(app.state, root);
  return app;
}

declare global {
  interface Window {
    npctalkApp?: App;
  }
}

if (typeof document !== 'undefined' && document.getElementById('app')) {
  const params = new URLSearchParams(window.location.search);
  window.npctalkApp = createApp(
    document.getElementById('app') as HTMLElement,
    params.get('api') ?? '',
  );
}
