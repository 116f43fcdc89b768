// Wire types for the /v1 API, snake_case like the server sends them.

export const LABELS = ["Unrelated", "Comment", "Support", "Refute"] as const;
export type Label = (typeof LABELS)[number];

export interface SuggestionPayload {
  label: Label;
  confidence: number;
}

export interface NextResponse {
  done: boolean;
  round_complete: boolean;
  study_complete: boolean;
  doc_id: string | null;
  text: string | null;
  round: number | null;
  position: number | null;
  total: number | null;
  suggestion: SuggestionPayload | null;
}

export interface SubmitAck {
  accepted_recorded: boolean | null;
  retrain_scheduled: boolean;
}

export interface RoundSummary {
  annotator_id: string;
  round: number;
  n_items: number;
  n_suggested: number;
  n_accepted: number;
  mean_latency: number;
  study_complete: boolean;
}

export interface RegisterResponse {
  annotator_id: string;
  token: string;
  group: string;
}

export interface AgreementRow {
  group: string;
  scope: string;
  kappa: number;
  accuracy: number;
  n_items: number;
  n_annotators: number;
}

export interface AgreementReportPayload {
  agreement: AgreementRow[];
  control_accuracy: Record<string, Record<string, number>>;
  outliers: string[];
  rendered: string;
}

export interface AcceptancePayload {
  per_annotator: Record<string, number>;
  per_group: Record<string, number>;
  per_group_round: Record<string, Record<string, number>>;
  accepted_counts: Record<string, Record<string, number>>;
  shown_counts: Record<string, Record<string, number>>;
}

export interface DivergencePoint {
  model_version: number;
  n_train: number;
  n_diverging: number;
}

export interface BiasReportPayload {
  acceptance: AcceptancePayload;
  correction_matrix: { labels: string[]; counts: number[][] };
  divergence: Record<string, DivergencePoint[]>;
  outliers: string[];
}

export interface TransferPayload {
  groups: string[];
  mean: number[][];
  std: number[][];
  runs: number;
}

// One annotation event line of the export JSONL.
export interface ExportedEvent {
  annotator: string;
  group: string;
  round: number;
  position: number;
  doc_id: string;
  suggestion_label: string | null;
  suggestion_confidence: number | null;
  model_version: number | null;
  chosen: string;
  accepted: boolean | null;
  started_at: string;
  submitted_at: string;
}
