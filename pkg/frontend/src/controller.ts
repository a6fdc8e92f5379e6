/** Studio controller: turns editor actions into synthesize requests.
 *
 * Request discipline, in order:
 *   1. committed edits are debounced (default 200 ms) so a drag issues a
 *      single request on release;
 *   2. a commit whose serialized document equals the last one sent is
 *      dropped (identity edits are free);
 *   3. a document seen before renders straight from the response cache;
 *   4. otherwise the newest request wins: anything still in flight is
 *      aborted and stale responses are discarded.
 *
 * Every rendered preview therefore corresponds to exactly one
 * /synthesize response, and the request log on the server side mirrors
 * user intent one to one.
 */

import { ServiceError, StudioClient, serializeLayout } from "./client.js";
import { EditorState, SessionFormatError } from "./state.js";
import type { SeedSource } from "./state.js";
import type { BoxCoords, SynthesizeResponse } from "./types.js";

export interface Scheduler {
  set(fn: () => void, ms: number): unknown;
  clear(id: unknown): void;
}

const defaultScheduler: Scheduler = {
  set: (fn, ms) => setTimeout(fn, ms),
  clear: (id) => clearTimeout(id as Parameters<typeof clearTimeout>[0]),
};

export interface ControllerOptions {
  debounceMs?: number;
  scheduler?: Scheduler;
  seedSource?: SeedSource;
  onRender?: (response: SynthesizeResponse, requestBody: string) => void;
  onError?: (error: BoxedErrors) => void;
}

/** Server-side validation errors sorted to the box they blame. */
export interface BoxedErrors {
  general: string[];
  byBox: Map<number, string[]>;
}

export const DEFAULT_DEBOUNCE_MS = 200;

const BOX_PATH = /^boxes\[(\d+)\]/;

export function sortViolations(violations: string[]): BoxedErrors {
  const out: BoxedErrors = { general: [], byBox: new Map() };
  for (const v of violations) {
    const m = BOX_PATH.exec(v);
    if (m) {
      const idx = Number(m[1]);
      const list = out.byBox.get(idx) ?? [];
      list.push(v);
      out.byBox.set(idx, list);
    } else {
      out.general.push(v);
    }
  }
  return out;
}

export class StudioController {
  state: EditorState;
  private client: StudioClient;
  private debounceMs: number;
  private scheduler: Scheduler;
  private seedSource?: SeedSource;
  private onRender?: ControllerOptions["onRender"];
  private onError?: ControllerOptions["onError"];

  private cache = new Map<string, SynthesizeResponse>();
  private lastSentBody: string | null = null;
  private lastResponse: SynthesizeResponse | null = null;
  private lastRenderedBody: string | null = null;
  private pendingTimer: unknown = null;
  private inflight: AbortController | null = null;
  private epoch = 0;
  /** Resolves when the queue drains; recreated on every commit. */
  private idlePromise: Promise<void> = Promise.resolve();
  private idleResolve: (() => void) | null = null;

  constructor(
    state: EditorState,
    client: StudioClient,
    options: ControllerOptions = {},
  ) {
    this.state = state;
    this.client = client;
    this.debounceMs = options.debounceMs ?? DEFAULT_DEBOUNCE_MS;
    this.scheduler = options.scheduler ?? defaultScheduler;
    this.seedSource = options.seedSource;
    this.onRender = options.onRender;
    this.onError = options.onError;
  }

  // ------------------------------------------------------------- queries

  latestResponse(): SynthesizeResponse | null {
    return this.lastResponse;
  }

  latestRenderedBody(): string | null {
    return this.lastRenderedBody;
  }

  /** Settles once no request is pending or in flight. */
  idle(): Promise<void> {
    return this.idlePromise;
  }

  // ------------------------------------------------------ editor actions

  addBox(label: string, box: BoxCoords): number {
    const i = this.state.addBox(label, box);
    this.commit();
    return i;
  }

  moveBox(index: number, box: BoxCoords): void {
    this.state.moveBox(index, box);
    this.commit();
  }

  relabelBox(index: number, label: string): void {
    this.state.relabelBox(index, label);
    this.commit();
  }

  deleteBox(index: number): void {
    this.state.deleteBox(index);
    this.commit();
  }

  reseedInstance(index: number, seed?: number): void {
    this.state.reseedInstance(index, seed);
    this.commit();
  }

  reseedImage(seed?: number): void {
    this.state.reseedImage(seed);
    this.commit();
  }

  undo(): void {
    this.state.undo();
    this.commit();
  }

  redo(): void {
    this.state.redo();
    this.commit();
  }

  // ----------------------------------------------------------- sessions

  exportLayout(): string {
    return JSON.stringify(this.state.toLayoutDoc(), null, 2) + "\n";
  }

  saveSession(): string {
    return JSON.stringify(this.state.toSessionDoc(), null, 2) + "\n";
  }

  /** Replace the editor state from a session or plain layout file.
   * The current state stays untouched when the file does not parse. */
  loadSession(text: string): void {
    let doc: unknown;
    try {
      doc = JSON.parse(text);
    } catch (e) {
      throw new SessionFormatError(
        `malformed JSON: ${(e as Error).message}`,
      );
    }
    this.state = EditorState.fromDoc(doc, this.seedSource);
    this.commit();
  }

  // ------------------------------------------------------- request queue

  /** Schedule a synthesize for the current state (debounced). */
  commit(): void {
    if (this.pendingTimer !== null) {
      this.scheduler.clear(this.pendingTimer);
      this.pendingTimer = null;
    } else if (this.idleResolve === null) {
      this.idlePromise = new Promise((resolve) => {
        this.idleResolve = resolve;
      });
    }
    this.pendingTimer = this.scheduler.set(() => {
      this.pendingTimer = null;
      void this.fire();
    }, this.debounceMs);
  }

  /** Send immediately, skipping the debounce window. */
  flush(): Promise<void> {
    if (this.pendingTimer !== null) {
      this.scheduler.clear(this.pendingTimer);
      this.pendingTimer = null;
      void this.fire();
    }
    return this.idle();
  }

  private settleIdle(): void {
    if (this.pendingTimer === null && this.inflight === null) {
      const resolve = this.idleResolve;
      this.idleResolve = null;
      resolve?.();
    }
  }

  private async fire(): Promise<void> {
    const body = serializeLayout(this.state.toLayoutDoc());
    if (body === this.lastSentBody) {
      this.settleIdle();
      return;
    }
    this.epoch += 1;
    const cached = this.cache.get(body);
    if (cached !== undefined) {
      this.inflight?.abort();
      this.lastSentBody = body;
      this.render(cached, body);
      this.settleIdle();
      return;
    }
    const myEpoch = this.epoch;
    this.inflight?.abort();
    const aborter = new AbortController();
    this.inflight = aborter;
    this.lastSentBody = body;
    try {
      const response = await this.client.synthesize(body, aborter.signal);
      if (myEpoch === this.epoch) {
        this.cache.set(body, response);
        this.render(response, body);
      }
    } catch (e) {
      if (myEpoch === this.epoch && !aborter.signal.aborted) {
        if (e instanceof ServiceError) {
          this.onError?.(sortViolations(this.violationList(e)));
        } else {
          this.onError?.({
            general: [(e as Error).message],
            byBox: new Map(),
          });
        }
      }
    } finally {
      if (this.inflight === aborter) {
        this.inflight = null;
      }
      this.settleIdle();
    }
  }

  private violationList(e: ServiceError): string[] {
    return e.violations.length > 0 ? e.violations : [e.message];
  }

  private render(response: SynthesizeResponse, body: string): void {
    this.state.adoptSeeds(response.object_seeds);
    this.lastResponse = response;
    this.lastRenderedBody = body;
    this.onRender?.(response, body);
  }
}
