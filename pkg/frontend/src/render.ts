/** Canvas drawing and hit testing for the box editor. */

import type { BoxCoords, EditorBox } from "./types.js";

export interface PixelBox {
  x: number;
  y: number;
  w: number;
  h: number;
}

export type HandleName =
  | "nw" | "n" | "ne" | "e" | "se" | "s" | "sw" | "w" | "body";

export interface HitResult {
  index: number;
  handle: HandleName;
}

const HANDLE_PX = 7;

export function toPixels(box: BoxCoords, size: number): PixelBox {
  const [x0, y0, x1, y1] = box;
  return {
    x: x0 * size,
    y: y0 * size,
    w: (x1 - x0) * size,
    h: (y1 - y0) * size,
  };
}

/** Order the coordinates and keep the box inside the unit square. */
export function normalizeBox(box: BoxCoords): BoxCoords {
  let [x0, y0, x1, y1] = box;
  if (x1 < x0) [x0, x1] = [x1, x0];
  if (y1 < y0) [y0, y1] = [y1, y0];
  const clamp = (v: number) => Math.min(1, Math.max(0, v));
  return [clamp(x0), clamp(y0), clamp(x1), clamp(y1)];
}

export function cssColor(rgb: number[]): string {
  const [r, g, b] = rgb;
  return `rgb(${r}, ${g}, ${b})`;
}

function handlePoints(p: PixelBox): Record<Exclude<HandleName, "body">,
  [number, number]> {
  return {
    nw: [p.x, p.y],
    n: [p.x + p.w / 2, p.y],
    ne: [p.x + p.w, p.y],
    e: [p.x + p.w, p.y + p.h / 2],
    se: [p.x + p.w, p.y + p.h],
    s: [p.x + p.w / 2, p.y + p.h],
    sw: [p.x, p.y + p.h],
    w: [p.x, p.y + p.h / 2],
  };
}

/** Topmost box whose body or handle contains (px, py); handles win. */
export function hitTest(
  boxes: readonly EditorBox[],
  px: number,
  py: number,
  size: number,
  selected: number | null,
): HitResult | null {
  if (selected !== null && boxes[selected]) {
    const p = toPixels(boxes[selected].box, size);
    for (const [name, [hx, hy]] of Object.entries(handlePoints(p))) {
      if (Math.abs(px - hx) <= HANDLE_PX && Math.abs(py - hy) <= HANDLE_PX) {
        return { index: selected, handle: name as HandleName };
      }
    }
  }
  for (let i = boxes.length - 1; i >= 0; i -= 1) {
    const p = toPixels(boxes[i]!.box, size);
    if (px >= p.x && px <= p.x + p.w && py >= p.y && py <= p.y + p.h) {
      return { index: i, handle: "body" };
    }
  }
  return null;
}

export interface DrawOptions {
  boxes: readonly EditorBox[];
  colors: Map<string, string>;
  selected: number | null;
  errorBoxes: ReadonlySet<number>;
  transient?: { index: number | null; box: BoxCoords } | null;
}

export function drawEditor(
  ctx: CanvasRenderingContext2D,
  size: number,
  opts: DrawOptions,
): void {
  ctx.clearRect(0, 0, size, size);
  ctx.fillStyle = "#16181d";
  ctx.fillRect(0, 0, size, size);
  ctx.strokeStyle = "#23262e";
  ctx.lineWidth = 1;
  for (let i = 1; i < 8; i += 1) {
    const t = (i * size) / 8;
    ctx.beginPath();
    ctx.moveTo(t, 0);
    ctx.lineTo(t, size);
    ctx.moveTo(0, t);
    ctx.lineTo(size, t);
    ctx.stroke();
  }
  opts.boxes.forEach((b, i) => {
    const shown =
      opts.transient && opts.transient.index === i
        ? opts.transient.box
        : b.box;
    const p = toPixels(shown, size);
    const color = opts.colors.get(b.label) ?? "#cccccc";
    ctx.strokeStyle = opts.errorBoxes.has(i) ? "#ff5d5d" : color;
    ctx.lineWidth = i === opts.selected ? 3 : 2;
    ctx.strokeRect(p.x, p.y, p.w, p.h);
    ctx.fillStyle = `${color}33`;
    ctx.fillRect(p.x, p.y, p.w, p.h);
    ctx.fillStyle = color;
    ctx.font = "12px system-ui, sans-serif";
    ctx.fillText(`${i}: ${b.label}`, p.x + 4, p.y + 14);
    if (i === opts.selected) {
      ctx.fillStyle = "#ffffff";
      for (const [hx, hy] of Object.values(handlePoints(p))) {
        ctx.fillRect(hx - 3, hy - 3, 6, 6);
      }
    }
  });
  if (opts.transient && opts.transient.index === null) {
    const p = toPixels(opts.transient.box, size);
    ctx.strokeStyle = "#8ab4ff";
    ctx.setLineDash([4, 3]);
    ctx.strokeRect(p.x, p.y, p.w, p.h);
    ctx.setLineDash([]);
  }
}

/** Apply a drag to a box through the given handle. */
export function dragBox(
  original: BoxCoords,
  handle: HandleName,
  dx: number,
  dy: number,
): BoxCoords {
  let [x0, y0, x1, y1] = original;
  if (handle === "body") {
    const w = x1 - x0;
    const h = y1 - y0;
    x0 = Math.min(Math.max(0, x0 + dx), 1 - w);
    y0 = Math.min(Math.max(0, y0 + dy), 1 - h);
    return [x0, y0, x0 + w, y0 + h];
  }
  if (handle.includes("w")) x0 += dx;
  if (handle.includes("e")) x1 += dx;
  if (handle.includes("n")) y0 += dy;
  if (handle.includes("s")) y1 += dy;
  return normalizeBox([x0, y0, x1, y1]);
}
