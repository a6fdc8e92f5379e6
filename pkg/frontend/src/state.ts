/** Editor state: boxes, seeds, locks, and an exact-round-trip history.
 *
 * Seed lifecycle: a fresh or freshly loaded scene carries only a master
 * seed, and the request style is `{seed}` so the service derives the
 * per-instance seeds, exactly as the CLI does for the same file. The
 * first response echoes the effective seeds and the editor adopts them;
 * from then on every request pins `per_object_seeds` (background first,
 * foreground box i owns entry i + 1), so edits and reseeds touch exactly
 * the entries they mean to. A document exported here feeds the CLI
 * unchanged and reproduces the rendered image.
 */

import type {
  BoxCoords,
  EditorBox,
  LayoutDoc,
  SessionDoc,
  StyleBlock,
} from "./types.js";

export type SeedSource = () => number;

const SESSION_VERSION = 1;

/** Uniform seed in [0, 2^32); injectable for deterministic tests. */
export const randomSeed: SeedSource = () =>
  Math.floor(Math.random() * 0x100000000);

interface Snapshot {
  boxes: EditorBox[];
  masterSeed: number;
  objectSeeds: number[] | null;
  locks: boolean[];
}

function cloneBoxes(boxes: readonly EditorBox[]): EditorBox[] {
  return boxes.map((b) => ({ label: b.label, box: [...b.box] as BoxCoords }));
}

export class SessionFormatError extends Error {}

export class EditorState {
  readonly lattice: [number, number];
  readonly categories: string;
  private boxes: EditorBox[] = [];
  private masterSeed: number;
  /** Background first, length boxes.length + 1; null until the first
   * response establishes the effective seeds. */
  private objectSeeds: number[] | null = null;
  /** Same indexing as objectSeeds; locked seeds refuse reseeding. */
  private locks: boolean[];
  private undoStack: Snapshot[] = [];
  private redoStack: Snapshot[] = [];
  private seedSource: SeedSource;

  constructor(
    lattice: [number, number],
    categories: string,
    seedSource: SeedSource = randomSeed,
  ) {
    this.lattice = lattice;
    this.categories = categories;
    this.seedSource = seedSource;
    this.masterSeed = seedSource();
    this.locks = [false];
  }

  // ------------------------------------------------------------ accessors

  get boxCount(): number {
    return this.boxes.length;
  }

  getBoxes(): EditorBox[] {
    return cloneBoxes(this.boxes);
  }

  getSeeds(): { master: number; objects: number[] | null } {
    return {
      master: this.masterSeed,
      objects: this.objectSeeds === null ? null : [...this.objectSeeds],
    };
  }

  seedsPinned(): boolean {
    return this.objectSeeds !== null;
  }

  getLocks(): boolean[] {
    return [...this.locks];
  }

  // ----------------------------------------------------------- box edits

  private snapshot(): Snapshot {
    return {
      boxes: cloneBoxes(this.boxes),
      masterSeed: this.masterSeed,
      objectSeeds: this.objectSeeds === null ? null : [...this.objectSeeds],
      locks: [...this.locks],
    };
  }

  private restore(snap: Snapshot): void {
    this.boxes = cloneBoxes(snap.boxes);
    this.masterSeed = snap.masterSeed;
    this.objectSeeds =
      snap.objectSeeds === null ? null : [...snap.objectSeeds];
    this.locks = [...snap.locks];
  }

  private beginEdit(): void {
    this.undoStack.push(this.snapshot());
    this.redoStack = [];
  }

  addBox(label: string, box: BoxCoords): number {
    this.beginEdit();
    this.boxes.push({ label, box: [...box] as BoxCoords });
    this.objectSeeds?.push(this.seedSource());
    this.locks.push(false);
    return this.boxes.length - 1;
  }

  moveBox(index: number, box: BoxCoords): void {
    this.requireBox(index);
    this.beginEdit();
    this.boxes[index]!.box = [...box] as BoxCoords;
  }

  relabelBox(index: number, label: string): void {
    this.requireBox(index);
    this.beginEdit();
    this.boxes[index]!.label = label;
  }

  deleteBox(index: number): void {
    this.requireBox(index);
    this.beginEdit();
    this.boxes.splice(index, 1);
    this.objectSeeds?.splice(index + 1, 1);
    this.locks.splice(index + 1, 1);
  }

  private requireBox(index: number): void {
    if (!Number.isInteger(index) || index < 0 || index >= this.boxes.length) {
      throw new RangeError(`no box at index ${index}`);
    }
  }

  // ---------------------------------------------------------- seed edits

  /** Pin the effective seeds a response reported. Ignored when already
   * pinned or when the scene changed shape since the request. */
  adoptSeeds(seeds: readonly number[]): void {
    if (this.objectSeeds !== null) return;
    if (seeds.length !== this.boxes.length + 1) return;
    this.objectSeeds = [...seeds];
  }

  /** Reseed one instance; index 0 is the background, box i is i + 1. */
  reseedInstance(index: number, seed?: number): number {
    if (this.objectSeeds === null) {
      throw new Error("no effective seeds yet; render the scene first");
    }
    if (index < 0 || index >= this.objectSeeds.length) {
      throw new RangeError(`no instance at index ${index}`);
    }
    if (this.locks[index]) {
      throw new Error(`instance ${index} is locked`);
    }
    this.beginEdit();
    const value = seed ?? this.seedSource();
    this.objectSeeds![index] = value;
    return value;
  }

  /** New master seed. With pinned object seeds only the image style
   * changes; before pinning the whole derivation moves with it. */
  reseedImage(seed?: number): number {
    this.beginEdit();
    const value = seed ?? this.seedSource();
    this.masterSeed = value;
    return value;
  }

  setLock(index: number, locked: boolean): void {
    if (index < 0 || index >= this.locks.length) {
      throw new RangeError(`no instance at index ${index}`);
    }
    this.locks[index] = locked;
  }

  lockAll(locked: boolean): void {
    this.locks = this.locks.map(() => locked);
  }

  // -------------------------------------------------------------- history

  canUndo(): boolean {
    return this.undoStack.length > 0;
  }

  canRedo(): boolean {
    return this.redoStack.length > 0;
  }

  undo(): void {
    const snap = this.undoStack.pop();
    if (!snap) return;
    this.redoStack.push(this.snapshot());
    this.restore(snap);
  }

  redo(): void {
    const snap = this.redoStack.pop();
    if (!snap) return;
    this.undoStack.push(this.snapshot());
    this.restore(snap);
  }

  // -------------------------------------------------------- serialization

  /** The exact document sent to /synthesize and written by "export". */
  toLayoutDoc(): LayoutDoc {
    const style: StyleBlock = { seed: this.masterSeed };
    if (this.objectSeeds !== null) {
      style.per_object_seeds = [...this.objectSeeds];
    }
    return {
      lattice: [...this.lattice] as [number, number],
      categories: this.categories,
      boxes: this.boxes.map((b) => ({ label: b.label, box: [...b.box] })),
      style,
    };
  }

  toSessionDoc(): SessionDoc {
    return {
      ...this.toLayoutDoc(),
      studio: { locks: [...this.locks], version: SESSION_VERSION },
    };
  }

  /** Build a state from a session file or a plain layout document.
   *
   * Plain documents (for example a file previously fed to the CLI) load
   * too. Without explicit per-object seeds the state stays unpinned, so
   * the service derives the same styles for this document that the CLI
   * would.
   */
  static fromDoc(
    doc: unknown,
    seedSource: SeedSource = randomSeed,
  ): EditorState {
    if (typeof doc !== "object" || doc === null || Array.isArray(doc)) {
      throw new SessionFormatError("session file must be a JSON object");
    }
    const d = doc as Partial<SessionDoc>;
    if (
      !Array.isArray(d.lattice) ||
      d.lattice.length !== 2 ||
      !d.lattice.every((v) => Number.isInteger(v) && v >= 1)
    ) {
      throw new SessionFormatError("lattice must be [H, W] positive integers");
    }
    if (typeof d.categories !== "string") {
      throw new SessionFormatError("categories must be a string");
    }
    if (!Array.isArray(d.boxes)) {
      throw new SessionFormatError("boxes must be an array");
    }
    const state = new EditorState(
      [d.lattice[0]!, d.lattice[1]!],
      d.categories,
      seedSource,
    );
    for (const [i, b] of d.boxes.entries()) {
      if (
        typeof b !== "object" ||
        b === null ||
        typeof (b as EditorBox).label !== "string" ||
        !Array.isArray(b.box) ||
        b.box.length !== 4 ||
        !b.box.every((v) => typeof v === "number")
      ) {
        throw new SessionFormatError(
          `boxes[${i}] must be {label, box: [x0, y0, x1, y1]}`,
        );
      }
      state.boxes.push({
        label: (b as EditorBox).label,
        box: [...b.box] as BoxCoords,
      });
      state.locks.push(false);
    }
    if (d.style !== undefined) {
      const s = d.style;
      if (typeof s !== "object" || s === null || !Number.isInteger(s.seed)) {
        throw new SessionFormatError("style must carry an integer seed");
      }
      state.masterSeed = s.seed;
      if (s.per_object_seeds !== undefined) {
        if (
          !Array.isArray(s.per_object_seeds) ||
          s.per_object_seeds.length !== state.boxes.length + 1 ||
          !s.per_object_seeds.every((v) => Number.isInteger(v))
        ) {
          throw new SessionFormatError(
            `per_object_seeds must hold ${state.boxes.length + 1} ` +
              "integers (background first)",
          );
        }
        state.objectSeeds = [...s.per_object_seeds];
      }
    }
    const meta = d.studio;
    if (meta !== undefined) {
      if (
        typeof meta !== "object" ||
        meta === null ||
        !Array.isArray(meta.locks) ||
        meta.locks.length !== state.locks.length ||
        !meta.locks.every((v) => typeof v === "boolean")
      ) {
        throw new SessionFormatError("studio metadata is malformed");
      }
      state.locks = [...meta.locks];
    }
    state.undoStack = [];
    state.redoStack = [];
    return state;
  }
}
