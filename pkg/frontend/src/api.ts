/** Typed client for the reader-study service HTTP/JSON API. */

import type {
  AssistanceView,
  CasePointer,
  RankedEntry,
  RatingComponent,
  SessionInfo,
} from "./types";

/** Raised for any non-2xx reply; status 0 means the service was unreachable. */
export class ApiError extends Error {
  readonly status: number;

  constructor(status: number, detail: string) {
    super(detail);
    this.name = "ApiError";
    this.status = status;
  }
}

export interface HttpRequestInit {
  method?: string;
  headers?: Record<string, string>;
  body?: string;
}

/** The slice of a fetch Response the client actually uses. */
export interface HttpResponseLike {
  ok: boolean;
  status: number;
  json(): Promise<unknown>;
}

export type FetchLike = (path: string, init?: HttpRequestInit) => Promise<HttpResponseLike>;

interface RawCase {
  case_id: string;
  image: string;
  index: number;
  total: number;
}

interface RawAssistance {
  top5_diseases: [string, number][];
  top5_lesions: [string, number][];
  heatmap: string;
}

function toRanked(rows: [string, number][]): RankedEntry[] {
  return rows.map(([name, score]) => ({ name, score }));
}

export class ReaderStudyApi {
  private readonly baseUrl: string;
  private readonly fetchFn: FetchLike;

  constructor(baseUrl = "", fetchFn: FetchLike = (path, init) => fetch(path, init)) {
    this.baseUrl = baseUrl.replace(/\/$/, "");
    this.fetchFn = fetchFn;
  }

  private async request<T>(
    method: string,
    path: string,
    body?: unknown,
    headers?: Record<string, string>,
  ): Promise<T> {
    const init: HttpRequestInit = { method };
    if (body !== undefined) {
      init.headers = { "content-type": "application/json", ...headers };
      init.body = JSON.stringify(body);
    } else if (headers) {
      init.headers = headers;
    }
    let response: HttpResponseLike;
    try {
      response = await this.fetchFn(this.baseUrl + path, init);
    } catch (err) {
      throw new ApiError(0, `service unreachable: ${String(err)}`);
    }
    if (!response.ok) {
      let detail = `request failed with status ${response.status}`;
      try {
        const parsed = (await response.json()) as { detail?: unknown };
        if (parsed && typeof parsed.detail === "string") {
          detail = parsed.detail;
        }
      } catch {
        // non-JSON error body; keep the generic detail
      }
      throw new ApiError(response.status, detail);
    }
    return (await response.json()) as T;
  }

  async startSession(participantId: string): Promise<SessionInfo> {
    const raw = await this.request<{ token: string; n_cases: number }>(
      "POST",
      "/sessions",
      { participant_id: participantId },
    );
    return { token: raw.token, nCases: raw.n_cases };
  }

  /** The case the reader should work on next, or null when every case is done. */
  async nextCase(token: string): Promise<CasePointer | null> {
    const raw = await this.request<{ complete: boolean; case?: RawCase }>(
      "GET",
      `/sessions/${encodeURIComponent(token)}/next`,
    );
    if (raw.complete || !raw.case) {
      return null;
    }
    return {
      caseId: raw.case.case_id,
      image: raw.case.image,
      index: raw.case.index,
      total: raw.case.total,
    };
  }

  async commitStage1(
    token: string,
    caseId: string,
    diagnosis: string,
    confidence: number,
  ): Promise<void> {
    await this.request(
      "POST",
      `/sessions/${encodeURIComponent(token)}/cases/${encodeURIComponent(caseId)}/stage1`,
      { diagnosis, confidence },
    );
  }

  /** Only legal after the stage-1 commit; the service 409s earlier requests. */
  async fetchAssistance(token: string, caseId: string): Promise<AssistanceView> {
    const raw = await this.request<RawAssistance>(
      "GET",
      `/sessions/${encodeURIComponent(token)}/cases/${encodeURIComponent(caseId)}/assistance`,
    );
    return {
      diseases: toRanked(raw.top5_diseases),
      lesions: toRanked(raw.top5_lesions),
      heatmapUrl: this.baseUrl + raw.heatmap,
    };
  }

  /** Returns true when this commit finished the last case of the session. */
  async commitStage2(
    token: string,
    caseId: string,
    diagnosis: string,
    confidence: number,
    ratings: Record<RatingComponent, number>,
  ): Promise<boolean> {
    const raw = await this.request<{ complete: boolean }>(
      "POST",
      `/sessions/${encodeURIComponent(token)}/cases/${encodeURIComponent(caseId)}/stage2`,
      { diagnosis, confidence, ratings },
    );
    return raw.complete;
  }

  async submitQuestionnaire(token: string, ratings: Record<string, number>): Promise<void> {
    await this.request(
      "POST",
      `/sessions/${encodeURIComponent(token)}/questionnaire`,
      { ratings },
    );
  }

  /** Read-only aggregate report; requires the admin token. */
  async fetchReport(adminToken: string): Promise<unknown> {
    return this.request("GET", "/admin/report", undefined, { "X-Admin-Token": adminToken });
  }
}
