import type {
  ApiErrorBody,
  HistoryResponse,
  ScenarioInfo,
  SessionCreated,
  TurnResponseData,
} from './types';

export class ApiError extends Error {
  code: string;
  status: number;

  constructor(code: string, detail: string, status: number) {
    super(detail);
    this.code = code;
    this.status = status;
  }
}

async function readError(response: Response): Promise<ApiError> {
  try {
    const body = (await response.json()) as ApiErrorBody;
    return new ApiError(body.error ?? 'unknown', body.detail ?? response.statusText, response.status);
  } catch {
    return new ApiError('unknown', response.statusText, response.status);
  }
}

export class ChatApi {
  constructor(private baseUrl: string = '') {}

  private async get<T>(path: string): Promise<T> {
    const response = await fetch(`${this.baseUrl}${path}`);
    if (!response.ok) {
      throw await readError(response);
    }
    return response.json() as Promise<T>;
  }

  private async post<T>(path: string, body: unknown): Promise<T> {
    const response = await fetch(`${this.baseUrl}${path}`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(body),
    });
    if (!response.ok) {
      throw await readError(response);
    }
    return response.json() as Promise<T>;
  }

  listScenarios(): Promise<ScenarioInfo[]> {
    return this.get<ScenarioInfo[]>('/api/scenarios');
  }

  createSession(scenarioId: string): Promise<SessionCreated> {
    return this.post<SessionCreated>('/api/sessions', { scenario_id: scenarioId });
  }

  sendMessage(sessionId: string, text: string): Promise<TurnResponseData> {
    return this.post<TurnResponseData>(`/api/sessions/${sessionId}/messages`, { text });
  }

  history(sessionId: string): Promise<HistoryResponse> {
    return this.get<HistoryResponse>(`/api/sessions/${sessionId}/history`);
  }
}
