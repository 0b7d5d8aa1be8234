// Typed client for the assessment service. Every call maps 1:1 to a
// documented endpoint; the UI layer never invents verdict or
// recommendation strings of its own.

export type Site = "RUL" | "LUL" | "RLL" | "LLL";
export type Verdict = "normal" | "abnormal";
export type Recommendation = "no_action" | "consult_physician";

export const SYMPTOMS = [
  "fever",
  "cough",
  "sputum",
  "runny_nose",
  "breathing_difficulty",
  "chest_pain",
] as const;
export type Symptom = (typeof SYMPTOMS)[number];

export interface SiteResult {
  p_abnormal: number;
  clip_verdicts: Verdict[];
}

export interface AssessmentResult {
  session_id: string;
  sites: Record<string, SiteResult>;
  overall_verdict: Verdict;
  recommendation: Recommendation;
  model_version: string;
  threshold: number;
}

export interface RecordingInfo {
  recording_ref: string;
  duration_s: number;
  quality_flags: string[];
}

export interface SessionState {
  session_id: string;
  symptoms: string[];
  other: string;
  status: "open" | "assessed";
  recordings: Record<string, RecordingInfo>;
  result: AssessmentResult | null;
}

export interface UploadReceipt {
  recording_ref: string;
  quality_flags: string[];
}

/** Error envelope from the service: {error, detail} plus the HTTP status. */
export class ServiceError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    detail: string,
  ) {
    super(detail);
    this.name = "ServiceError";
  }
}

export class ServiceClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: typeof fetch = globalThis.fetch.bind(globalThis),
  ) {}

  async createSession(symptoms: string[], other = ""): Promise<string> {
    const body = await this.request("POST", "/sessions", {
      json: { symptoms, other },
    });
    return body.session_id as string;
  }

  async uploadRecording(
    sessionId: string,
    site: Site,
    wavBytes: ArrayBuffer,
  ): Promise<UploadReceipt> {
    const path = `/sessions/${encodeURIComponent(sessionId)}/recordings?site=${site}`;
    return (await this.request("POST", path, {
      binary: wavBytes,
    })) as unknown as UploadReceipt;
  }

  async assess(sessionId: string): Promise<AssessmentResult> {
    const path = `/sessions/${encodeURIComponent(sessionId)}/assess`;
    return (await this.request("POST", path, {})) as unknown as AssessmentResult;
  }

  async getSession(sessionId: string): Promise<SessionState> {
    const path = `/sessions/${encodeURIComponent(sessionId)}`;
    return (await this.request("GET", path, {})) as unknown as SessionState;
  }

  private async request(
    method: string,
    path: string,
    opts: { json?: unknown; binary?: ArrayBuffer },
  ): Promise<Record<string, unknown>> {
    const init: RequestInit = { method };
    if (opts.json !== undefined) {
      init.body = JSON.stringify(opts.json);
      init.headers = { "content-type": "application/json" };
    } else if (opts.binary !== undefined) {
      init.body = opts.binary;
      init.headers = { "content-type": "application/octet-stream" };
    }
    let resp: Response;
    try {
      resp = await this.fetchFn(this.baseUrl + path, init);
    } catch (err) {
      throw new ServiceError(0, "NetworkError", String(err));
    }
    const text = await resp.text();
    let body: Record<string, unknown> = {};
    if (text) {
      try {
        body = JSON.parse(text);
      } catch {
        throw new ServiceError(resp.status, "BadResponse", text.slice(0, 200));
      }
    }
    if (!resp.ok) {
      const code = typeof body.error === "string" ? body.error : "HttpError";
      const detail =
        typeof body.detail === "string" ? body.detail : `HTTP ${resp.status}`;
      throw new ServiceError(resp.status, code, detail);
    }
    return body;
  }
}
