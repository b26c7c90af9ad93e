/**
 * Typed client for the review service HTTP API.
 *
 * All request/response bodies are JSON (UTF-8).  Status codes: 200 ok,
 * 400 malformed request, 404 unknown id, 409 cursor/ordering conflict.
 * The fetch implementation is injectable so tests can run against an
 * in-memory server.
 */

export type Judgement = "TP" | "FP";

/** Axis-aligned box in image pixels; width and height are positive. */
export interface Box {
  x: number;
  y: number;
  w: number;
  h: number;
}

export interface ReviewItem {
  detection_id: string;
  frame_id: string;
  class_label: string;
  bbox: [number, number, number, number];
  score: number;
  image_path: string;
  frame_width: number | null;
  frame_height: number | null;
  index: number;
  total: number;
}

export interface PrecisionEstimate {
  value: number;
  ci_low: number;
  ci_high: number;
  n: number;
}

export interface Progress {
  session_id: string;
  state: "open" | "complete";
  judged: number;
  required_n: number;
  tp: number;
  fp: number;
  fn: number | null;
  precision: PrecisionEstimate | null;
}

export interface Report extends Progress {
  fn_frame_coverage: number;
  recall?: PrecisionEstimate;
}

export interface SessionOpened {
  session_id: string;
  required_n: number;
  sample_size: number;
}

export interface SessionRequest {
  detector_id: string;
  pilot_p_hat?: number;
  epsilon?: number;
  confidence?: number;
  seed?: number;
  annotator?: string;
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

async function parseOrThrow<T>(resp: Response): Promise<T> {
  if (!resp.ok) {
    let detail = resp.statusText;
    try {
      const body = (await resp.json()) as { detail?: unknown };
      if (body && body.detail !== undefined) detail = String(body.detail);
    } catch {
      /* non-JSON error body; keep the status text */
    }
    throw new ApiError(resp.status, detail);
  }
  return (await resp.json()) as T;
}

export class ReviewApi {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private url(path: string): string {
    return `${this.baseUrl.replace(/\/$/, "")}${path}`;
  }

  private post(path: string, body: unknown): Promise<Response> {
    return this.fetchFn(this.url(path), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  async openSession(req: SessionRequest): Promise<SessionOpened> {
    return parseOrThrow(await this.post("/sessions", req));
  }

  /** The item at the server cursor, or null when the session is complete. */
  async nextItem(sessionId: string): Promise<ReviewItem | null> {
    const resp = await this.fetchFn(this.url(`/sessions/${sessionId}/next`));
    const body = await parseOrThrow<ReviewItem | { done: boolean }>(resp);
    return "done" in body ? null : body;
  }

  async submitVerdict(
    sessionId: string,
    detectionId: string,
    judgement: Judgement,
  ): Promise<Progress> {
    return parseOrThrow(
      await this.post(`/sessions/${sessionId}/verdicts`, {
        detection_id: detectionId,
        judgement,
      }),
    );
  }

  async submitFnMarks(
    sessionId: string,
    frameId: string,
    boxes: Box[],
  ): Promise<number> {
    const body = await parseOrThrow<{ accepted: number }>(
      await this.post(`/sessions/${sessionId}/fn-marks`, {
        frame_id: frameId,
        boxes: boxes.map((b) => [b.x, b.y, b.w, b.h]),
      }),
    );
    return body.accepted;
  }

  async progress(sessionId: string): Promise<Progress> {
    return parseOrThrow(
      await this.fetchFn(this.url(`/sessions/${sessionId}/progress`)),
    );
  }

  async report(sessionId: string): Promise<Report> {
    return parseOrThrow(
      await this.fetchFn(this.url(`/sessions/${sessionId}/report`)),
    );
  }

  frameImageUrl(frameId: string): string {
    return this.url(`/frames/${frameId}/image`);
  }
}
