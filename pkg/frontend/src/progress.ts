/**
 * Progress view model.  Every number displayed is taken verbatim from the
 * server's progress payload — the UI computes no statistics of its own,
 * so a page reload mid-session loses nothing.
 */

import type { Progress } from "./api.js";

export interface ProgressView {
  judged: number;
  requiredN: number;
  tp: number;
  fp: number;
  fn: number | null;
  complete: boolean;
  /** null until at least one verdict exists. */
  precision: number | null;
  ciLow: number | null;
  ciHigh: number | null;
  /** e.g. "37 / 844" */
  counterText: string;
  /** e.g. "p = 0.600  [0.464, 0.736]" or "p undefined" */
  precisionText: string;
  /** 0..1 fraction of the planned sample that has been judged. */
  fractionDone: number;
}

function fmt(x: number): string {
  return x.toFixed(3);
}

export function toProgressView(p: Progress): ProgressView {
  const precision = p.precision ? p.precision.value : null;
  const ciLow = p.precision ? p.precision.ci_low : null;
  const ciHigh = p.precision ? p.precision.ci_high : null;
  return {
    judged: p.judged,
    requiredN: p.required_n,
    tp: p.tp,
    fp: p.fp,
    fn: p.fn,
    complete: p.state === "complete",
    precision,
    ciLow,
    ciHigh,
    counterText: `${p.judged} / ${p.required_n}`,
    precisionText:
      precision === null
        ? "p undefined"
        : `p = ${fmt(precision)}  [${fmt(ciLow as number)}, ${fmt(ciHigh as number)}]`,
    fractionDone: p.required_n > 0 ? p.judged / p.required_n : 0,
  };
}
