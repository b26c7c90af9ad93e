/**
 * Miss-marking mode: the annotator drags boxes over objects the detector
 * missed on a sampled frame, then submits the frame.  Zero-area drags are
 * discarded client-side and never reach the server; submitting with no
 * boxes still marks the frame visited so recall stays computable.
 */

import type { Box, ReviewApi } from "./api.js";
import { dragToBox, type Point, type ViewTransform } from "./overlay.js";

export interface FrameSize {
  width: number;
  height: number;
}

export class FnMarkingMode {
  /** Boxes drawn but not yet submitted, in image coordinates. */
  readonly pending: Box[] = [];
  /** Count of drags discarded as zero-area (for the UI hint). */
  rejectedDrags = 0;
  lastError: string | null = null;

  constructor(
    private readonly api: ReviewApi,
    readonly sessionId: string,
    readonly frameId: string,
    readonly frame: FrameSize,
  ) {}

  /** Returns the accepted box, or null when the drag was degenerate. */
  addDrag(start: Point, end: Point, view: ViewTransform): Box | null {
    const box = dragToBox(start, end, view, this.frame);
    if (box === null) {
      this.rejectedDrags += 1;
      return null;
    }
    this.pending.push(box);
    return box;
  }

  removeBox(index: number): void {
    this.pending.splice(index, 1);
  }

  /** Send all pending boxes; returns the server's accepted count. */
  async submit(): Promise<number> {
    this.lastError = null;
    const accepted = await this.api.submitFnMarks(
      this.sessionId,
      this.frameId,
      this.pending,
    );
    this.pending.length = 0;
    return accepted;
  }
}
