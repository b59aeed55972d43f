import type { SessionState, SurveyAnswers } from "./types.js";

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

async function unwrap(resp: Response): Promise<any> {
  const text = await resp.text();
  let body: any = {};
  try {
    body = text ? JSON.parse(text) : {};
  } catch {
    body = { error: text };
  }
  if (!resp.ok) {
    throw new ApiError(resp.status, body.error ?? `HTTP ${resp.status}`);
  }
  return body;
}

/** Thin client over the session server's JSON endpoints. */
export class ApiClient {
  constructor(private baseUrl: string = "") {}

  private url(path: string): string {
    return `${this.baseUrl}${path}`;
  }

  async createSession(config: Record<string, unknown>): Promise<{ session_id: string; state: SessionState }> {
    const resp = await fetch(this.url("/api/sessions"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(config),
    });
    return unwrap(resp);
  }

  async getState(sessionId: string): Promise<SessionState> {
    const resp = await fetch(this.url(`/api/sessions/${sessionId}`));
    return (await unwrap(resp)).state;
  }

  async advance(sessionId: string): Promise<SessionState> {
    const resp = await fetch(this.url(`/api/sessions/${sessionId}/advance`), { method: "POST" });
    return (await unwrap(resp)).state;
  }

  async submitAction(sessionId: string, action: number, token: string): Promise<SessionState> {
    const resp = await fetch(this.url(`/api/sessions/${sessionId}/action`), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ action, token }),
    });
    return (await unwrap(resp)).state;
  }

  async submitSurvey(sessionId: string, answers: SurveyAnswers, token: string): Promise<SessionState> {
    const resp = await fetch(this.url(`/api/sessions/${sessionId}/survey`), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ ...answers, token }),
    });
    return (await unwrap(resp)).state;
  }

  async exportSession(sessionId: string): Promise<any> {
    return unwrap(await fetch(this.url(`/api/sessions/${sessionId}/export`)));
  }

  async replayCheck(sessionId: string): Promise<{ ok: boolean; steps: number; mismatches: number[] }> {
    return unwrap(await fetch(this.url(`/api/sessions/${sessionId}/replay`)));
  }

  eventsUrl(sessionId: string, after: number): string {
    return this.url(`/api/sessions/${sessionId}/events?after=${after}`);
  }
}
