/** Thin typed wrapper over the inference service's three routes. */

import type {
  CategoriesInfo,
  ErrorBody,
  HealthInfo,
  LayoutDoc,
  SynthesizeResponse,
} from "./types.js";

export class ServiceError extends Error {
  readonly status: number;
  readonly violations: string[];

  constructor(status: number, body: ErrorBody) {
    super(body.error);
    this.status = status;
    this.violations = body.violations ?? [];
  }
}

export class StudioClient {
  readonly baseUrl: string;
  private fetchImpl: typeof fetch;

  constructor(baseUrl: string, fetchImpl: typeof fetch = fetch) {
    this.baseUrl = baseUrl.replace(/\/$/, "");
    this.fetchImpl = fetchImpl;
  }

  async health(): Promise<HealthInfo> {
    return this.getJson<HealthInfo>("/health");
  }

  async categories(): Promise<CategoriesInfo> {
    return this.getJson<CategoriesInfo>("/categories");
  }

  /** POST a layout document; `body` must already be the exact JSON text
   * so callers can log and diff precisely what went on the wire. */
  async synthesize(
    body: string,
    signal?: AbortSignal,
  ): Promise<SynthesizeResponse> {
    const res = await this.fetchImpl(`${this.baseUrl}/synthesize`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body,
      signal,
    });
    const payload = (await res.json()) as SynthesizeResponse | ErrorBody;
    if (!res.ok) {
      throw new ServiceError(res.status, payload as ErrorBody);
    }
    return payload as SynthesizeResponse;
  }

  private async getJson<T>(path: string): Promise<T> {
    const res = await this.fetchImpl(`${this.baseUrl}${path}`);
    const payload = (await res.json()) as T | ErrorBody;
    if (!res.ok) {
      throw new ServiceError(res.status, payload as ErrorBody);
    }
    return payload as T;
  }
}

export function serializeLayout(doc: LayoutDoc): string {
  return JSON.stringify(doc);
}
