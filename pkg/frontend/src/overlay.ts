/**
 * Geometry for the canvas overlay: mapping server bboxes to display
 * coordinates at a given zoom/pan, and mapping pointer drags back to
 * image-space boxes.
 *
 * The overlay never invents coordinates: display corners are an affine
 * image of the server bbox, and drag boxes are normalized image-space
 * rectangles.  Degenerate (zero-area) drags yield null and must never
 * reach the server.
 */

import type { Box } from "./api.js";

export interface Point {
  x: number;
  y: number;
}

export interface ViewTransform {
  /** Display pixels per image pixel. */
  zoom: number;
  /** Display-space offset of the image origin. */
  pan: Point;
}

export interface DisplayBox {
  left: number;
  top: number;
  width: number;
  height: number;
}

export const IDENTITY: ViewTransform = { zoom: 1, pan: { x: 0, y: 0 } };

export function imageToDisplay(p: Point, view: ViewTransform): Point {
  return { x: p.x * view.zoom + view.pan.x, y: p.y * view.zoom + view.pan.y };
}

export function displayToImage(p: Point, view: ViewTransform): Point {
  return {
    x: (p.x - view.pan.x) / view.zoom,
    y: (p.y - view.pan.y) / view.zoom,
  };
}

/** Display rectangle for a server bbox ([x, y, w, h] in image pixels). */
export function boxToDisplay(
  bbox: [number, number, number, number],
  view: ViewTransform,
): DisplayBox {
  const [x, y, w, h] = bbox;
  const tl = imageToDisplay({ x, y }, view);
  const br = imageToDisplay({ x: x + w, y: y + h }, view);
  return {
    left: tl.x,
    top: tl.y,
    width: br.x - tl.x,
    height: br.y - tl.y,
  };
}

/**
 * A zoom that fits the whole frame into the viewport, centered, never
 * upscaling past maxZoom.
 */
export function fitView(
  frame: { width: number; height: number },
  viewport: { width: number; height: number },
  maxZoom = 8,
): ViewTransform {
  const zoom = Math.min(
    maxZoom,
    viewport.width / frame.width,
    viewport.height / frame.height,
  );
  return {
    zoom,
    pan: {
      x: (viewport.width - frame.width * zoom) / 2,
      y: (viewport.height - frame.height * zoom) / 2,
    },
  };
}

/**
 * Convert a pointer drag (display coordinates) to a normalized image-space
 * box, clamped to the frame.  Returns null for zero-area results: a click
 * without movement, a drag along one axis, or a drag entirely outside the
 * frame.
 */
export function dragToBox(
  start: Point,
  end: Point,
  view: ViewTransform,
  frame: { width: number; height: number },
): Box | null {
  const a = displayToImage(start, view);
  const b = displayToImage(end, view);
  let x1 = Math.min(a.x, b.x);
  let y1 = Math.min(a.y, b.y);
  let x2 = Math.max(a.x, b.x);
  let y2 = Math.max(a.y, b.y);
  x1 = Math.max(0, Math.min(x1, frame.width));
  x2 = Math.max(0, Math.min(x2, frame.width));
  y1 = Math.max(0, Math.min(y1, frame.height));
  y2 = Math.max(0, Math.min(y2, frame.height));
  const w = x2 - x1;
  const h = y2 - y1;
  if (w <= 0 || h <= 0) return null;
  return { x: x1, y: y1, w, h };
}
