import type { Ack, NextResponse, StickFigureClip, Submission } from "./types.js";

/** Error carrying the service's {error, detail} body plus the HTTP status. */
export class ApiError extends Error {
  readonly status: number;
  readonly code: string;

  constructor(status: number, code: string, detail: string) {
    super(detail || code);
    this.status = status;
    this.code = code;
  }
}

async function parseError(resp: Response): Promise<ApiError> {
  let code = "HttpError";
  let detail = `HTTP ${resp.status}`;
  try {
    const body = await resp.json();
    if (body && typeof body.error === "string") {
      code = body.error;
      detail = body.detail ?? detail;
    }
  } catch {
    // body was not JSON; keep the generic message
  }
  return new ApiError(resp.status, code, detail);
}

export class ReviewApi {
  private readonly base: string;
  private readonly fetchImpl: typeof fetch;

  constructor(base = "", fetchImpl: typeof fetch = fetch) {
    this.base = base.replace(/\/$/, "");
    this.fetchImpl = fetchImpl;
  }

  async nextCase(raterId: string): Promise<NextResponse> {
    const resp = await this.fetchImpl(
      `${this.base}/api/raters/${encodeURIComponent(raterId)}/next`
    );
    if (!resp.ok) throw await parseError(resp);
    return (await resp.json()) as NextResponse;
  }

  async submitRating(raterId: string, submission: Submission): Promise<Ack> {
    const resp = await this.fetchImpl(
      `${this.base}/api/raters/${encodeURIComponent(raterId)}/ratings`,
      {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify(submission),
      }
    );
    if (!resp.ok) throw await parseError(resp);
    return (await resp.json()) as Ack;
  }

  async preview(caseId: string): Promise<StickFigureClip> {
    const resp = await this.fetchImpl(
      `${this.base}/api/previews/${encodeURIComponent(caseId)}`
    );
    if (!resp.ok) throw await parseError(resp);
    return (await resp.json()) as StickFigureClip;
  }
}
