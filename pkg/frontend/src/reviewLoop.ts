/**
 * Keyboard-driven review loop state machine.
 *
 * Keys: T = true positive, F = false positive, U = undo (re-judge the
 * last submitted item as a correction).  Exactly one verdict is sent per
 * accepted keystroke; the sequence of first-time verdicts follows the
 * server's sample order because the loop only ever judges the item the
 * server's cursor points at.
 *
 * Failure handling mirrors the wire contract: a 409 conflict means the
 * cursor moved under us, so the loop refetches; a transport failure queues
 * the verdict for retry and blocks further judgements until the queue
 * drains (the queue length is the UI's "offline" indicator).
 */

import { ApiError, ReviewApi } from "./api.js";
import type { Judgement, Progress, ReviewItem } from "./api.js";

export type LoopState =
  | "idle"
  | "loading"
  | "reviewing"
  | "correcting"
  | "retrying"
  | "complete";

export interface SubmittedVerdict {
  detectionId: string;
  judgement: Judgement;
  correction: boolean;
}

interface QueuedVerdict {
  detectionId: string;
  judgement: Judgement;
  correction: boolean;
}

const KEY_TO_JUDGEMENT: Record<string, Judgement> = {
  t: "TP",
  f: "FP",
};

export class ReviewLoop {
  state: LoopState = "idle";
  current: ReviewItem | null = null;
  progress: Progress | null = null;
  lastError: string | null = null;
  /** Successfully acknowledged verdicts, in submission order. */
  readonly submitted: SubmittedVerdict[] = [];

  private lastJudged: SubmittedVerdict | null = null;
  private correctionTarget: string | null = null;
  private readonly retryQueue: QueuedVerdict[] = [];

  constructor(
    private readonly api: ReviewApi,
    readonly sessionId: string,
  ) {}

  /** Number of verdicts waiting on transport recovery. */
  get pendingRetries(): number {
    return this.retryQueue.length;
  }

  async start(): Promise<void> {
    this.state = "loading";
    this.progress = await this.api.progress(this.sessionId);
    await this.fetchCursorItem();
  }

  /** Route one keystroke; unknown keys and out-of-state keys are ignored. */
  async handleKey(key: string): Promise<void> {
    const normalized = key.toLowerCase();
    if (normalized === "u") {
      this.beginCorrection();
      return;
    }
    const judgement = KEY_TO_JUDGEMENT[normalized];
    if (!judgement) return;
    if (this.state === "reviewing" && this.current) {
      await this.submit(this.current.detection_id, judgement, false);
    } else if (this.state === "correcting" && this.correctionTarget) {
      const target = this.correctionTarget;
      this.correctionTarget = null;
      await this.submit(target, judgement, true);
    }
    // "retrying" and "complete" accept no further judgements
  }

  /** Retry queued verdicts in order; stops at the first transport failure. */
  async flushRetries(): Promise<void> {
    while (this.retryQueue.length > 0) {
      const next = this.retryQueue[0]!;
      try {
        const progress = await this.api.submitVerdict(
          this.sessionId,
          next.detectionId,
          next.judgement,
        );
        this.retryQueue.shift();
        await this.onAccepted(next, progress);
      } catch (err) {
        if (err instanceof ApiError && err.status === 409) {
          // the server moved on; drop the stale verdict and resync
          this.retryQueue.shift();
          await this.fetchCursorItem();
          continue;
        }
        if (err instanceof ApiError) {
          this.retryQueue.shift();
          this.lastError = err.message;
          await this.fetchCursorItem();
          continue;
        }
        return; // still offline; keep the queue intact
      }
    }
    if (this.state === "retrying") {
      await this.fetchCursorItem();
    }
  }

  private beginCorrection(): void {
    if (this.lastJudged && (this.state === "reviewing" || this.state === "complete")) {
      this.correctionTarget = this.lastJudged.detectionId;
      this.state = "correcting";
    }
  }

  private async submit(
    detectionId: string,
    judgement: Judgement,
    correction: boolean,
  ): Promise<void> {
    this.lastError = null;
    try {
      const progress = await this.api.submitVerdict(
        this.sessionId,
        detectionId,
        judgement,
      );
      await this.onAccepted({ detectionId, judgement, correction }, progress);
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        await this.fetchCursorItem();
        return;
      }
      if (err instanceof ApiError) {
        this.lastError = err.message;
        if (correction) this.state = "reviewing";
        return;
      }
      // transport failure: queue for retry, block until drained
      this.retryQueue.push({ detectionId, judgement, correction });
      this.state = "retrying";
    }
  }

  private async onAccepted(
    verdict: QueuedVerdict,
    progress: Progress,
  ): Promise<void> {
    this.progress = progress;
    this.submitted.push({ ...verdict });
    this.lastJudged = { ...verdict };
    if (progress.state === "complete") {
      this.state = "complete";
      this.current = null;
      return;
    }
    if (verdict.correction) {
      // cursor did not move; return to the item being reviewed
      this.state = this.current ? "reviewing" : "complete";
      return;
    }
    await this.fetchCursorItem();
  }

  private async fetchCursorItem(): Promise<void> {
    const item = await this.api.nextItem(this.sessionId);
    this.current = item;
    this.state = item === null ? "complete" : "reviewing";
  }
}
