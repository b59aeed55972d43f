import { ApiClient } from "./api.js";
import { ConsoleStore, validateSurvey } from "./state.js";
import { EventStream } from "./sse.js";
import type { SurveyAnswers } from "./types.js";

/**
 * Drives one session: owns the event stream and funnels every mutation
 * through the server, refreshing the snapshot after each server event so
 * the view never gets ahead of the backend.
 */
export class SessionController {
  private stream: EventStream | null = null;

  constructor(
    public api: ApiClient,
    public store: ConsoleStore,
    public sessionId: string,
  ) {}

  async connect(): Promise<void> {
    const state = await this.api.getState(this.sessionId);
    this.store.applySnapshot(state);
    this.stream = new EventStream(
      (after) => this.api.eventsUrl(this.sessionId, after),
      {
        onEvent: (ev) => {
          this.store.applyEvent(ev);
          void this.refresh();
        },
        onStatus: (status) => this.store.setConnection(status),
      },
    );
    void this.stream.run();
  }

  disconnect(): void {
    this.stream?.stop();
  }

  get lastEventSeq(): number {
    return this.stream?.lastSeq ?? -1;
  }

  async refresh(): Promise<void> {
    try {
      this.store.applySnapshot(await this.api.getState(this.sessionId));
    } catch (err) {
      this.store.setError(err instanceof Error ? err.message : String(err));
    }
  }

  async advanceOnce(): Promise<void> {
    const phase = this.store.state.session?.phase;
    if (phase !== "awaiting_policy") return;
    try {
      this.store.applySnapshot(await this.api.advance(this.sessionId));
    } catch (err) {
      this.store.setError(err instanceof Error ? err.message : String(err));
    }
  }

  /** Step the policy until it defers, asks for a survey, or finishes. */
  async advanceUntilBlocked(maxSteps = 500): Promise<void> {
    for (let i = 0; i < maxSteps; i++) {
      const phase = this.store.state.session?.phase;
      if (phase !== "awaiting_policy") return;
      await this.advanceOnce();
      if (this.store.state.lastError) return;
    }
  }

  async answerQuery(action: number): Promise<void> {
    const { session, actionToken, submitting } = this.store.state;
    if (session?.phase !== "awaiting_human_action" || submitting) return;
    const token = actionToken ?? "";
    this.store.setSubmitting(true);
    try {
      this.store.applySnapshot(await this.api.submitAction(this.sessionId, action, token));
      this.store.setError(null);
    } catch (err) {
      this.store.setError(err instanceof Error ? err.message : String(err));
    } finally {
      this.store.setSubmitting(false);
    }
  }

  async completeSurvey(answers: Partial<SurveyAnswers>): Promise<boolean> {
    const { session, surveyToken, submitting } = this.store.state;
    if (session?.phase !== "awaiting_survey" || submitting) return false;
    const check = validateSurvey(answers);
    if (!check.ok) {
      this.store.setSurveyError(`Please answer: ${check.missing.join(", ")}`);
      return false;
    }
    const token = surveyToken ?? "";
    this.store.setSubmitting(true);
    try {
      this.store.applySnapshot(
        await this.api.submitSurvey(this.sessionId, answers as SurveyAnswers, token),
      );
      this.store.setError(null);
      return true;
    } catch (err) {
      this.store.setError(err instanceof Error ? err.message : String(err));
      return false;
    } finally {
      this.store.setSubmitting(false);
    }
  }
}
