/** Browser bootstrap: wires the editor canvas, style controls, preview
 * panes, and session buttons to the studio controller. */

import { StudioClient } from "./client.js";
import {
  DEFAULT_DEBOUNCE_MS,
  StudioController,
  type BoxedErrors,
} from "./controller.js";
import {
  cssColor,
  drawEditor,
  dragBox,
  hitTest,
  normalizeBox,
  type HandleName,
} from "./render.js";
import { EditorState } from "./state.js";
import type { BoxCoords, SynthesizeResponse } from "./types.js";

const CANVAS_SIZE = 416;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function pngUrl(b64: string): string {
  return `data:image/png;base64,${b64}`;
}

async function boot(): Promise<void> {
  const status = el<HTMLSpanElement>("status");
  const base =
    new URLSearchParams(location.search).get("service") ??
    "http://127.0.0.1:8321";
  const client = new StudioClient(base);

  let health;
  let cats;
  try {
    health = await client.health();
    cats = await client.categories();
  } catch {
    status.textContent = `no service at ${base} (pass ?service=http://...)`;
    return;
  }
  status.textContent =
    `model: ${health.resolution}x${health.resolution}, ` +
    `step ${health.step}, categories: ${cats.name}`;

  const colors = new Map<string, string>();
  cats.categories.forEach((name, i) => {
    colors.set(name, cssColor(cats.palette[i] ?? [204, 204, 204]));
  });
  const foreground = cats.categories.filter(
    (_, i) => i !== cats.background_index,
  );

  const labelSelect = el<HTMLSelectElement>("label-select");
  for (const name of foreground) {
    const opt = document.createElement("option");
    opt.value = name;
    opt.textContent = name;
    labelSelect.append(opt);
  }

  const canvas = el<HTMLCanvasElement>("editor");
  canvas.width = CANVAS_SIZE;
  canvas.height = CANVAS_SIZE;
  const ctx = canvas.getContext("2d");
  if (!ctx) throw new Error("canvas 2d context unavailable");

  const state = new EditorState(
    [health.resolution, health.resolution],
    cats.name,
  );
  let selected: number | null = null;
  let errors: BoxedErrors = { general: [], byBox: new Map() };
  let transient: { index: number | null; box: BoxCoords } | null = null;

  const imagePane = el<HTMLImageElement>("image-pane");
  const labelPane = el<HTMLImageElement>("label-pane");
  const overlayRange = el<HTMLInputElement>("overlay-opacity");
  const maskStrip = el<HTMLDivElement>("mask-strip");
  const errorBar = el<HTMLDivElement>("error-bar");
  const seedReadout = el<HTMLDivElement>("seed-readout");

  function redraw(): void {
    drawEditor(ctx!, CANVAS_SIZE, {
      boxes: state.getBoxes(),
      colors,
      selected,
      errorBoxes: new Set(errors.byBox.keys()),
      transient,
    });
    const seeds = controller.state.getSeeds();
    seedReadout.textContent =
      `image seed ${seeds.master}; instances ` +
      (seeds.objects === null
        ? "derived by the service"
        : `[${seeds.objects.join(", ")}]`);
  }

  function showResponse(res: SynthesizeResponse): void {
    imagePane.src = pngUrl(res.image_png);
    labelPane.src = pngUrl(res.label_map_png);
    labelPane.style.opacity = overlayRange.value;
    maskStrip.replaceChildren();
    res.masks_png.forEach((m, i) => {
      const wrap = document.createElement("label");
      wrap.className = "mask-toggle";
      const check = document.createElement("input");
      check.type = "checkbox";
      check.checked = true;
      const img = document.createElement("img");
      img.src = pngUrl(m);
      img.alt = `${res.labels[i]} mask`;
      check.addEventListener("change", () => {
        img.style.visibility = check.checked ? "visible" : "hidden";
      });
      const caption = document.createElement("span");
      caption.textContent = `${i}: ${res.labels[i]}`;
      wrap.append(check, caption, img);
      maskStrip.append(wrap);
    });
    errors = { general: [], byBox: new Map() };
    errorBar.textContent = "";
    redraw();
  }

  const controller = new StudioController(state, client, {
    debounceMs: DEFAULT_DEBOUNCE_MS,
    onRender: showResponse,
    onError: (err) => {
      errors = err;
      const parts = [...err.general];
      for (const list of err.byBox.values()) parts.push(...list);
      errorBar.textContent = parts.join("; ");
      redraw();
    },
  });

  overlayRange.addEventListener("input", () => {
    labelPane.style.opacity = overlayRange.value;
  });

  // -------------------------------------------------- canvas interaction

  let drag: {
    start: [number, number];
    handle: HandleName;
    index: number;
    original: BoxCoords;
  } | null = null;
  let draw: { start: [number, number] } | null = null;

  function canvasPoint(ev: PointerEvent): [number, number] {
    const rect = canvas.getBoundingClientRect();
    return [ev.clientX - rect.left, ev.clientY - rect.top];
  }

  canvas.addEventListener("pointerdown", (ev) => {
    const [px, py] = canvasPoint(ev);
    const hit = hitTest(state.getBoxes(), px, py, CANVAS_SIZE, selected);
    if (hit) {
      selected = hit.index;
      drag = {
        start: [px, py],
        handle: hit.handle,
        index: hit.index,
        original: state.getBoxes()[hit.index]!.box,
      };
    } else {
      selected = null;
      draw = { start: [px, py] };
    }
    canvas.setPointerCapture(ev.pointerId);
    redraw();
  });

  canvas.addEventListener("pointermove", (ev) => {
    if (!drag && !draw) return;
    const [px, py] = canvasPoint(ev);
    if (drag) {
      const dx = (px - drag.start[0]) / CANVAS_SIZE;
      const dy = (py - drag.start[1]) / CANVAS_SIZE;
      transient = {
        index: drag.index,
        box: dragBox(drag.original, drag.handle, dx, dy),
      };
    } else if (draw) {
      transient = {
        index: null,
        box: normalizeBox([
          draw.start[0] / CANVAS_SIZE,
          draw.start[1] / CANVAS_SIZE,
          px / CANVAS_SIZE,
          py / CANVAS_SIZE,
        ]),
      };
    }
    redraw();
  });

  canvas.addEventListener("pointerup", () => {
    if (drag && transient && transient.index === drag.index) {
      controller.moveBox(drag.index, transient.box);
    } else if (draw && transient && transient.index === null) {
      const [x0, y0, x1, y1] = transient.box;
      if (x1 - x0 > 0.02 && y1 - y0 > 0.02) {
        selected = controller.addBox(labelSelect.value, transient.box);
      }
    }
    drag = null;
    draw = null;
    transient = null;
    redraw();
  });

  // ------------------------------------------------------------- buttons

  el<HTMLButtonElement>("delete-box").addEventListener("click", () => {
    if (selected !== null) {
      controller.deleteBox(selected);
      selected = null;
      redraw();
    }
  });
  el<HTMLButtonElement>("relabel-box").addEventListener("click", () => {
    if (selected !== null) {
      controller.relabelBox(selected, labelSelect.value);
      redraw();
    }
  });
  el<HTMLButtonElement>("reseed-box").addEventListener("click", () => {
    if (selected !== null) {
      controller.reseedInstance(selected + 1);
      redraw();
    }
  });
  el<HTMLButtonElement>("reseed-bg").addEventListener("click", () => {
    controller.reseedInstance(0);
    redraw();
  });
  el<HTMLButtonElement>("reseed-image").addEventListener("click", () => {
    controller.reseedImage();
    redraw();
  });
  const lockAll = el<HTMLInputElement>("lock-all");
  lockAll.addEventListener("change", () => {
    controller.state.lockAll(lockAll.checked);
  });
  el<HTMLButtonElement>("undo").addEventListener("click", () => {
    controller.undo();
    selected = null;
    redraw();
  });
  el<HTMLButtonElement>("redo").addEventListener("click", () => {
    controller.redo();
    selected = null;
    redraw();
  });

  function download(name: string, text: string): void {
    const blob = new Blob([text], { type: "application/json" });
    const a = document.createElement("a");
    a.href = URL.createObjectURL(blob);
    a.download = name;
    a.click();
    URL.revokeObjectURL(a.href);
  }

  el<HTMLButtonElement>("save-session").addEventListener("click", () => {
    download("session.json", controller.saveSession());
  });
  el<HTMLButtonElement>("export-layout").addEventListener("click", () => {
    download("layout.json", controller.exportLayout());
  });
  const loadInput = el<HTMLInputElement>("load-session");
  loadInput.addEventListener("change", async () => {
    const file = loadInput.files?.[0];
    if (!file) return;
    try {
      controller.loadSession(await file.text());
      selected = null;
      errorBar.textContent = "";
    } catch (e) {
      errorBar.textContent = `load failed: ${(e as Error).message}`;
    }
    loadInput.value = "";
    redraw();
  });

  redraw();
  controller.commit();
}

void boot();
