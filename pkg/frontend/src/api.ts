// Thin typed client for the /v1 API. All study state flows through these
// endpoints; the UI never mutates anything by other means.

import type {
  AgreementReportPayload,
  BiasReportPayload,
  Label,
  NextResponse,
  RegisterResponse,
  RoundSummary,
  SubmitAck,
  TransferPayload,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    message: string,
  ) {
    super(message);
  }
}

export class SessionExpiredError extends ApiError {
  constructor(message: string) {
    super(401, message);
  }
}

export type FetchLike = (
  input: string,
  init?: {
    method?: string;
    headers?: Record<string, string>;
    body?: string;
  },
) => Promise<{ status: number; text(): Promise<string> }>;

export interface ApiClientOptions {
  /** retries for transient network failures; submits are idempotent server-side */
  retries?: number;
  retryDelayMs?: number;
  fetchImpl?: FetchLike;
}

const defaultFetch: FetchLike = (input, init) => fetch(input, init);

export class ApiClient {
  private retries: number;
  private retryDelayMs: number;
  private fetchImpl: FetchLike;

  constructor(
    public baseUrl: string,
    options: ApiClientOptions = {},
  ) {
    this.retries = options.retries ?? 2;
    this.retryDelayMs = options.retryDelayMs ?? 250;
    this.fetchImpl = options.fetchImpl ?? defaultFetch;
  }

  private async request<T>(
    method: string,
    path: string,
    body?: unknown,
    token?: string,
  ): Promise<T> {
    const headers: Record<string, string> = { "Content-Type": "application/json" };
    if (token) headers["Authorization"] = `Bearer ${token}`;
    let lastError: unknown;
    for (let attempt = 0; attempt <= this.retries; attempt++) {
      try {
        const resp = await this.fetchImpl(`${this.baseUrl}${path}`, {
          method,
          headers,
          body: body === undefined ? undefined : JSON.stringify(body),
        });
        const text = await resp.text();
        if (resp.status === 401) throw new SessionExpiredError(text);
        if (resp.status >= 400) throw new ApiError(resp.status, text);
        return text ? (JSON.parse(text) as T) : (undefined as T);
      } catch (err) {
        if (err instanceof ApiError) throw err; // server spoke; don't retry
        lastError = err;
        if (attempt < this.retries) {
          await new Promise((r) => setTimeout(r, this.retryDelayMs));
        }
      }
    }
    throw lastError instanceof Error
      ? lastError
      : new Error(`network failure calling ${path}`);
  }

  register(studyId: string, group?: string): Promise<RegisterResponse> {
    return this.request("POST", `/v1/studies/${studyId}/annotators`, {
      group: group ?? null,
    });
  }

  next(studyId: string, token: string): Promise<NextResponse> {
    return this.request("GET", `/v1/studies/${studyId}/next`, undefined, token);
  }

  submit(
    studyId: string,
    token: string,
    docId: string,
    chosen: Label,
    startedAt: string,
  ): Promise<SubmitAck> {
    return this.request(
      "POST",
      `/v1/studies/${studyId}/annotations`,
      { doc_id: docId, chosen, started_at: startedAt },
      token,
    );
  }

  finishRound(studyId: string, token: string): Promise<RoundSummary> {
    return this.request("POST", `/v1/studies/${studyId}/finish-round`, undefined, token);
  }

  agreementReport(studyId: string, adminToken: string): Promise<AgreementReportPayload> {
    return this.request(
      "GET",
      `/v1/studies/${studyId}/metrics?report=agreement`,
      undefined,
      adminToken,
    );
  }

  biasReport(studyId: string, adminToken: string): Promise<BiasReportPayload> {
    return this.request(
      "GET",
      `/v1/studies/${studyId}/metrics?report=bias`,
      undefined,
      adminToken,
    );
  }

  transferReport(
    studyId: string,
    adminToken: string,
    runs = 10,
  ): Promise<TransferPayload> {
    return this.request(
      "GET",
      `/v1/studies/${studyId}/metrics?report=transfer&runs=${runs}`,
      undefined,
      adminToken,
    );
  }

  async exportLog(studyId: string, adminToken: string): Promise<string> {
    const headers = { Authorization: `Bearer ${adminToken}` };
    const resp = await this.fetchImpl(`${this.baseUrl}/v1/studies/${studyId}/export`, {
      method: "GET",
      headers,
    });
    const text = await resp.text();
    if (resp.status === 401) throw new SessionExpiredError(text);
    if (resp.status >= 400) throw new ApiError(resp.status, text);
    return text;
  }
}
