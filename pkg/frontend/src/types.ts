/** Wire types mirrored from the session server's JSON payloads. */

export type Phase =
  | "awaiting_policy"
  | "awaiting_human_action"
  | "awaiting_survey"
  | "finished";

export interface TraceRow {
  timestep: number;
  food_index: number;
  food_label: string;
  attempt: number;
  action: number;
  action_label: string;
  deferred: boolean;
  queried: boolean;
  reward: number;
  gap: number | null;
  threshold: number | null;
}

export interface SurveyRecord {
  timestep: number;
  reported: number;
  predicted: number;
}

export interface PendingQuery {
  food_label: string;
  food_index: number;
  attempt: number;
  gap: number | null;
  threshold: number | null;
}

export interface SessionState {
  schema_version: number;
  session_id: string;
  phase: Phase;
  policy: string;
  n_foods: number;
  food_index: number;
  attempt: number;
  timestep: number;
  max_attempts: number;
  initial_workload: number;
  current_food: { label: string; index: number; success_bars?: number[] } | null;
  pending_query: PendingQuery | null;
  action_labels: string[];
  blinded: boolean;
  surveys_enabled: boolean;
  workload_series: number[];
  trace: TraceRow[];
  surveys: SurveyRecord[];
  events_len: number;
  final_workload: number | null;
  revealed_success: Record<string, number[]> | null;
}

export interface ServerEvent {
  seq: number;
  kind: string;
  data: Record<string, unknown>;
}

export interface SurveyAnswers {
  mental: number;
  temporal: number;
  performance: number;
  effort: number;
  frustration: number;
}

export const SURVEY_FIELDS: (keyof SurveyAnswers)[] = [
  "mental",
  "temporal",
  "performance",
  "effort",
  "frustration",
];

export const SURVEY_QUESTIONS: Record<keyof SurveyAnswers, string> = {
  mental: "How mentally or physically demanding was answering?",
  temporal: "How hurried or rushed did you feel?",
  performance: "How successful were you in what you were asked to do?",
  effort: "How hard did you have to work?",
  frustration: "How irritated, stressed, or annoyed were you?",
};
