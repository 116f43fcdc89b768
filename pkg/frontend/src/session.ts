// Annotator workflow state machine, framework-free so the whole flow is
// testable without a DOM. The render layer consumes AnnotationView and
// never touches study state except through the ApiClient.

import { ApiClient, SessionExpiredError } from "./api.js";
import { LABELS, type Label, type NextResponse, type RoundSummary } from "./types.js";

export type SessionPhase =
  | "idle"
  | "annotating"
  | "round_complete"
  | "study_complete"
  | "login"
  | "error";

export interface LabelControl {
  label: Label;
  /** key 1..4 selects this control */
  key: string;
  selected: boolean;
  suggested: boolean;
}

/** Everything the annotator screen shows; no author metadata exists anywhere. */
export interface AnnotationView {
  text: string;
  controls: LabelControl[];
  /** pre-selected suggestion is highlighted until the user overrides it */
  highlightedLabel: Label | null;
  /** shown only when the debug flag is set */
  suggestionConfidence: number | null;
  position: number;
  total: number;
  roundBanner: string;
}

export interface SessionOptions {
  /** reveal suggestion confidence (off by default, debugging only) */
  showConfidence?: boolean;
  now?: () => Date;
}

export class AnnotatorSession {
  phase: SessionPhase = "idle";
  lastError: string | null = null;
  roundSummary: RoundSummary | null = null;

  private current: NextResponse | null = null;
  private selected: Label | null = null;
  private startedAt: string | null = null;
  private showConfidence: boolean;
  private now: () => Date;

  constructor(
    private api: ApiClient,
    private studyId: string,
    private token: string,
    options: SessionOptions = {},
  ) {
    this.showConfidence = options.showConfidence ?? false;
    this.now = options.now ?? (() => new Date());
  }

  /** Fetch the next item; started_at is the render time of this item. */
  async loadNext(): Promise<void> {
    let item: NextResponse;
    try {
      item = await this.api.next(this.studyId, this.token);
    } catch (err) {
      this.fail(err);
      return;
    }
    if (item.done) {
      this.current = null;
      this.phase = item.study_complete ? "study_complete" : "round_complete";
      return;
    }
    this.current = item;
    this.selected = item.suggestion ? item.suggestion.label : null;
    this.startedAt = this.now().toISOString();
    this.phase = "annotating";
  }

  view(): AnnotationView {
    if (this.phase !== "annotating" || !this.current) {
      throw new Error(`no item on screen (phase ${this.phase})`);
    }
    const suggestion = this.current.suggestion;
    const controls: LabelControl[] = LABELS.map((label, i) => ({
      label,
      key: String(i + 1),
      selected: this.selected === label,
      suggested: suggestion?.label === label,
    }));
    return {
      text: this.current.text ?? "",
      controls,
      highlightedLabel:
        suggestion && this.selected === suggestion.label ? suggestion.label : null,
      suggestionConfidence:
        suggestion && this.showConfidence ? suggestion.confidence : null,
      position: this.current.position ?? 0,
      total: this.current.total ?? 0,
      roundBanner: `Round ${this.current.round ?? "?"}`,
    };
  }

  /** Correcting is one interaction: picking another label deselects the rest. */
  selectLabel(label: Label): void {
    if (this.phase !== "annotating") return;
    this.selected = label;
  }

  selectByKey(key: string): boolean {
    const index = Number.parseInt(key, 10) - 1;
    const label = LABELS[index];
    if (label === undefined) return false;
    this.selectLabel(label);
    return true;
  }

  selectedLabel(): Label | null {
    return this.selected;
  }

  currentDocId(): string | null {
    return this.current?.doc_id ?? null;
  }

  /** Submit the current selection and advance one position. */
  async submit(): Promise<void> {
    if (this.phase !== "annotating" || !this.current || !this.startedAt) {
      throw new Error("nothing to submit");
    }
    if (this.selected === null) {
      throw new Error("select a label first");
    }
    const docId = this.current.doc_id;
    if (!docId) throw new Error("current item has no document id");
    try {
      await this.api.submit(this.studyId, this.token, docId, this.selected, this.startedAt);
    } catch (err) {
      this.fail(err);
      return;
    }
    await this.loadNext();
  }

  /** The end-of-round lock. */
  async finishRound(): Promise<void> {
    if (this.phase !== "round_complete" && this.phase !== "annotating") {
      throw new Error(`cannot finish round in phase ${this.phase}`);
    }
    try {
      this.roundSummary = await this.api.finishRound(this.studyId, this.token);
    } catch (err) {
      this.fail(err);
      return;
    }
    this.phase = this.roundSummary.study_complete ? "study_complete" : "idle";
  }

  private fail(err: unknown): void {
    if (err instanceof SessionExpiredError) {
      this.phase = "login";
      this.lastError = "session expired; sign in again";
      return;
    }
    this.phase = "error";
    this.lastError = err instanceof Error ? err.message : String(err);
  }
}
