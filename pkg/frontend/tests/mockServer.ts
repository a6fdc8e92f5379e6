/** Recording mock of the inference service for e2e tests.
 *
 * Records every request (method, path, parsed body) in arrival order and
 * answers with deterministic synthetic payloads: the fake PNG fields are
 * digests of the request body, so distinct requests yield distinct
 * "images" and repeated requests yield identical ones. Latency and
 * scripted error responses are injectable per test.
 */

import { createHash } from "node:crypto";
import { createServer, type Server } from "node:http";
import type { AddressInfo } from "node:net";

export interface RecordedRequest {
  method: string;
  path: string;
  body: unknown;
  rawBody: string;
}

export interface MockBehavior {
  /** Milliseconds to wait before answering the next synthesize calls. */
  latencyMs?: number;
  /** When set, the next synthesize call returns this error once. */
  nextError?: { status: number; payload: unknown } | null;
}

export interface MockService {
  url: string;
  requests: RecordedRequest[];
  synthesizeRequests(): RecordedRequest[];
  behavior: MockBehavior;
  close(): Promise<void>;
}

const CATEGORIES = {
  name: "shapes",
  categories: ["background", "circle", "square", "triangle"],
  background_index: 0,
  palette: [
    [40, 40, 40],
    [230, 80, 80],
    [80, 160, 230],
    [240, 200, 80],
  ],
};

function digest(text: string, salt: string): string {
  return createHash("sha256").update(salt).update(text).digest("base64");
}

interface BodyShape {
  boxes?: { label?: string }[];
  style?: { seed?: number; per_object_seeds?: number[] };
}

function synthesizePayload(rawBody: string, body: BodyShape) {
  const boxes = body.boxes ?? [];
  const master = body.style?.seed ?? 0;
  const seeds = body.style?.per_object_seeds ??
    Array.from({ length: boxes.length + 1 },
      (_, i) => (master * 31 + i * 101) % 1000000);
  return {
    image_png: digest(rawBody, "image"),
    label_map_png: digest(rawBody, "labels"),
    masks_png: seeds.map((_, i) => digest(rawBody, `mask${i}`)),
    labels: ["background", ...boxes.map((b) => b.label ?? "?")],
    image_seed: body.style?.seed ?? 0,
    object_seeds: seeds,
    resolution: 32,
  };
}

export async function startMockService(): Promise<MockService> {
  const requests: RecordedRequest[] = [];
  const behavior: MockBehavior = { latencyMs: 0, nextError: null };

  const server: Server = createServer((req, res) => {
    const chunks: Buffer[] = [];
    req.on("data", (c: Buffer) => chunks.push(c));
    req.on("end", () => {
      const rawBody = Buffer.concat(chunks).toString("utf-8");
      const reply = (status: number, payload: unknown) => {
        // An aborted client may have destroyed the socket while a
        // latency timer was pending; dropping the write is the right
        // behavior for a cancelled request.
        try {
          const out = JSON.stringify(payload);
          res.writeHead(status, {
            "Content-Type": "application/json",
            "Access-Control-Allow-Origin": "*",
          });
          res.end(out);
        } catch {
          /* client went away */
        }
      };

      if (req.method === "GET" && req.url === "/health") {
        reply(200, { status: "ok", resolution: 32, step: 0 });
        return;
      }
      if (req.method === "GET" && req.url === "/categories") {
        reply(200, CATEGORIES);
        return;
      }
      if (req.method === "POST" && req.url === "/synthesize") {
        let body: unknown;
        try {
          body = JSON.parse(rawBody);
        } catch {
          reply(400, { error: "malformed JSON" });
          return;
        }
        requests.push({
          method: req.method,
          path: req.url,
          body,
          rawBody,
        });
        const answer = () => {
          const scripted = behavior.nextError;
          if (scripted) {
            behavior.nextError = null;
            reply(scripted.status, scripted.payload);
            return;
          }
          reply(200, synthesizePayload(rawBody, body as BodyShape));
        };
        if (behavior.latencyMs && behavior.latencyMs > 0) {
          setTimeout(answer, behavior.latencyMs);
        } else {
          answer();
        }
        return;
      }
      reply(404, { error: `no route ${req.url}` });
    });
  });

  await new Promise<void>((resolve) => server.listen(0, "127.0.0.1", resolve));
  const addr = server.address() as AddressInfo;
  return {
    url: `http://127.0.0.1:${addr.port}`,
    requests,
    synthesizeRequests: () =>
      requests.filter((r) => r.path === "/synthesize"),
    behavior,
    close: () =>
      new Promise<void>((resolve, reject) =>
        server.close((err) => (err ? reject(err) : resolve())),
      ),
  };
}
