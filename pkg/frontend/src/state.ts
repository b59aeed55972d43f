import type { ServerEvent, SessionState, SurveyAnswers } from "./types.js";
import { SURVEY_FIELDS } from "./types.js";

export type ConnectionStatus = "connecting" | "live" | "retrying" | "closed" | "error";

export interface ConsoleState {
  connection: ConnectionStatus;
  session: SessionState | null;
  eventLog: ServerEvent[];
  /** one idempotency token per raised query / due survey */
  actionToken: string | null;
  surveyToken: string | null;
  submitting: boolean;
  surveyDraft: Partial<SurveyAnswers>;
  surveyError: string | null;
  lastError: string | null;
  autoplay: boolean;
}

export function initialState(): ConsoleState {
  return {
    connection: "connecting",
    session: null,
    eventLog: [],
    actionToken: null,
    surveyToken: null,
    submitting: false,
    surveyDraft: {},
    surveyError: null,
    lastError: null,
    autoplay: true,
  };
}

export function makeToken(): string {
  // crypto.randomUUID exists in browsers and node >= 19
  if (typeof crypto !== "undefined" && "randomUUID" in crypto) {
    return crypto.randomUUID();
  }
  return `tok-${Date.now()}-${Math.random().toString(36).slice(2)}`;
}

/** The action palette may only submit while the server awaits a human action. */
export function paletteEnabled(state: ConsoleState): boolean {
  return state.session?.phase === "awaiting_human_action" && !state.submitting;
}

export function surveyCardActive(state: ConsoleState): boolean {
  return state.session?.phase === "awaiting_survey";
}

export function validateSurvey(draft: Partial<SurveyAnswers>): { ok: boolean; missing: string[] } {
  const missing = SURVEY_FIELDS.filter((field) => {
    const v = draft[field];
    return v === undefined || !Number.isInteger(v) || (v as number) < 1 || (v as number) > 5;
  });
  return { ok: missing.length === 0, missing };
}

/**
 * Pure reducer: every transition originates from a server snapshot or a
 * server event. UI handlers never mutate session fields directly.
 */
export class ConsoleStore {
  state: ConsoleState = initialState();
  private listeners: (() => void)[] = [];

  subscribe(listener: () => void): void {
    this.listeners.push(listener);
  }

  private notify(): void {
    for (const l of this.listeners) l();
  }

  applySnapshot(session: SessionState): void {
    this.state.session = session;
    if (session.phase === "awaiting_human_action" && this.state.actionToken === null) {
      this.state.actionToken = makeToken();
    }
    if (session.phase !== "awaiting_human_action") {
      this.state.actionToken = null;
    }
    if (session.phase === "awaiting_survey" && this.state.surveyToken === null) {
      this.state.surveyToken = makeToken();
    }
    if (session.phase !== "awaiting_survey") {
      this.state.surveyToken = null;
      this.state.surveyDraft = {};
      this.state.surveyError = null;
    }
    this.notify();
  }

  applyEvent(ev: ServerEvent): void {
    this.state.eventLog.push(ev);
    this.notify();
  }

  setConnection(status: ConnectionStatus): void {
    this.state.connection = status;
    this.notify();
  }

  setSubmitting(flag: boolean): void {
    this.state.submitting = flag;
    this.notify();
  }

  setError(message: string | null): void {
    this.state.lastError = message;
    this.notify();
  }

  setSurveyField(field: keyof SurveyAnswers, value: number): void {
    this.state.surveyDraft[field] = value;
    this.state.surveyError = null;
    this.notify();
  }

  setSurveyError(message: string): void {
    this.state.surveyError = message;
    this.notify();
  }

  setAutoplay(flag: boolean): void {
    this.state.autoplay = flag;
    this.notify();
  }
}

/** Chart inputs derived purely from the server snapshot. */
export function workloadChartSeries(session: SessionState): {
  predicted: number[];
  reported: { index: number; value: number }[];
} {
  return {
    predicted: session.workload_series,
    reported: session.surveys.map((s) => ({ index: s.timestep, value: s.reported })),
  };
}

export function gapChartSeries(session: SessionState): {
  gaps: { index: number; value: number }[];
  thresholds: { index: number; value: number }[];
} {
  const gaps: { index: number; value: number }[] = [];
  const thresholds: { index: number; value: number }[] = [];
  session.trace.forEach((row) => {
    if (row.gap !== null && row.gap !== undefined) {
      gaps.push({ index: row.timestep, value: row.gap });
    }
    if (row.threshold !== null && row.threshold !== undefined) {
      thresholds.push({ index: row.timestep, value: row.threshold });
    }
  });
  const pending = session.pending_query;
  if (pending && pending.gap !== null && pending.gap !== undefined) {
    gaps.push({ index: session.timestep, value: pending.gap });
    if (pending.threshold !== null && pending.threshold !== undefined) {
      thresholds.push({ index: session.timestep, value: pending.threshold });
    }
  }
  return { gaps, thresholds };
}
