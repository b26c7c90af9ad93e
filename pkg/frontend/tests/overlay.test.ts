import { describe, expect, it } from "vitest";

import {
  IDENTITY,
  type ViewTransform,
  boxToDisplay,
  displayToImage,
  dragToBox,
  fitView,
  imageToDisplay,
} from "../src/overlay.js";

const FRAME = { width: 640, height: 480 };

const VIEWS: Array<[string, ViewTransform]> = [
  ["identity", IDENTITY],
  ["zoomed in", { zoom: 3.5, pan: { x: -120, y: 40 } }],
  ["zoomed out", { zoom: 0.25, pan: { x: 10, y: 10 } }],
  ["panned only", { zoom: 1, pan: { x: 200, y: -75 } }],
];

describe("coordinate mapping", () => {
  it.each(VIEWS)("round-trips image points through %s", (_name, view) => {
    for (const p of [
      { x: 0, y: 0 },
      { x: 640, y: 480 },
      { x: 123.456, y: 78.9 },
    ]) {
      const back = displayToImage(imageToDisplay(p, view), view);
      expect(back.x).toBeCloseTo(p.x, 9);
      expect(back.y).toBeCloseTo(p.y, 9);
    }
  });

  it.each(VIEWS)("maps bbox corners faithfully under %s", (_name, view) => {
    const bbox: [number, number, number, number] = [100, 50, 80, 60];
    const d = boxToDisplay(bbox, view);
    // each display corner is the affine image of the matching bbox corner
    const tl = imageToDisplay({ x: 100, y: 50 }, view);
    const br = imageToDisplay({ x: 180, y: 110 }, view);
    expect(Math.abs(d.left - tl.x)).toBeLessThan(1e-9);
    expect(Math.abs(d.top - tl.y)).toBeLessThan(1e-9);
    expect(Math.abs(d.left + d.width - br.x)).toBeLessThan(1e-9);
    expect(Math.abs(d.top + d.height - br.y)).toBeLessThan(1e-9);
    expect(d.width).toBeGreaterThan(0);
    expect(d.height).toBeGreaterThan(0);
  });

  it("scales box size by the zoom factor", () => {
    const d = boxToDisplay([0, 0, 10, 20], { zoom: 4, pan: { x: 0, y: 0 } });
    expect(d.width).toBe(40);
    expect(d.height).toBe(80);
  });
});

describe("fitView", () => {
  it("fits a wide frame into a tall viewport, centered", () => {
    const view = fitView(FRAME, { width: 320, height: 480 });
    expect(view.zoom).toBeCloseTo(0.5, 12); // width-limited
    expect(view.pan.x).toBeCloseTo(0, 12);
    expect(view.pan.y).toBeCloseTo((480 - 240) / 2, 12);
  });

  it("never upscales past maxZoom", () => {
    const view = fitView({ width: 10, height: 10 }, { width: 1000, height: 1000 });
    expect(view.zoom).toBe(8);
  });

  it("keeps the whole frame inside the viewport", () => {
    const viewport = { width: 300, height: 200 };
    const view = fitView(FRAME, viewport);
    const d = boxToDisplay([0, 0, FRAME.width, FRAME.height], view);
    expect(d.left).toBeGreaterThanOrEqual(-1e-9);
    expect(d.top).toBeGreaterThanOrEqual(-1e-9);
    expect(d.left + d.width).toBeLessThanOrEqual(viewport.width + 1e-9);
    expect(d.top + d.height).toBeLessThanOrEqual(viewport.height + 1e-9);
  });
});

describe("dragToBox", () => {
  it("normalizes a drag regardless of direction", () => {
    const expected = { x: 10, y: 20, w: 30, h: 40 };
    const corners = [
      [{ x: 10, y: 20 }, { x: 40, y: 60 }],
      [{ x: 40, y: 60 }, { x: 10, y: 20 }],
      [{ x: 40, y: 20 }, { x: 10, y: 60 }],
      [{ x: 10, y: 60 }, { x: 40, y: 20 }],
    ] as const;
    for (const [start, end] of corners) {
      expect(dragToBox(start, end, IDENTITY, FRAME)).toEqual(expected);
    }
  });

  it("maps display drags through zoom and pan", () => {
    const view: ViewTransform = { zoom: 2, pan: { x: 100, y: 50 } };
    const start = imageToDisplay({ x: 10, y: 20 }, view);
    const end = imageToDisplay({ x: 40, y: 60 }, view);
    const box = dragToBox(start, end, view, FRAME)!;
    expect(box.x).toBeCloseTo(10, 9);
    expect(box.y).toBeCloseTo(20, 9);
    expect(box.w).toBeCloseTo(30, 9);
    expect(box.h).toBeCloseTo(40, 9);
  });

  it("clamps boxes to the frame bounds", () => {
    const box = dragToBox({ x: -50, y: -50 }, { x: 700, y: 500 }, IDENTITY, FRAME)!;
    expect(box).toEqual({ x: 0, y: 0, w: 640, h: 480 });
  });

  it("returns null for zero-area drags", () => {
    // a click with no movement
    expect(dragToBox({ x: 5, y: 5 }, { x: 5, y: 5 }, IDENTITY, FRAME)).toBeNull();
    // movement along one axis only
    expect(dragToBox({ x: 5, y: 5 }, { x: 50, y: 5 }, IDENTITY, FRAME)).toBeNull();
    expect(dragToBox({ x: 5, y: 5 }, { x: 5, y: 50 }, IDENTITY, FRAME)).toBeNull();
  });

  it("returns null when the drag lies entirely outside the frame", () => {
    expect(
      dragToBox({ x: 700, y: 500 }, { x: 800, y: 600 }, IDENTITY, FRAME),
    ).toBeNull();
    expect(
      dragToBox({ x: -100, y: -100 }, { x: -10, y: -10 }, IDENTITY, FRAME),
    ).toBeNull();
  });
});
