import { describe, expect, it, vi } from "vitest";

import { ApiClient, StreamConnection } from "../src/api.js";
import type { EventSourceLike, StreamEvent } from "../src/api.js";

function jsonResponse(body: unknown, status = 200): Response {
  return {
    ok: status >= 200 && status < 300,
    status,
    json: async () => body,
  } as unknown as Response;
}

describe("ApiClient", () => {
  it("builds series queries from the given fields only", async () => {
    const calls: string[] = [];
    const client = new ApiClient("", async (url) => {
      calls.push(url);
      return jsonResponse({ series: [], t1: 0, t2: 1, width: null });
    });
    await client.series({ param: "Load1", t1: 5, t2: 9 });
    expect(calls[0]).toBe("/api/series?param=Load1&t1=5&t2=9");
  });

  it("admin sends the bearer token and reports denial", async () => {
    let auth = "";
    const client = new ApiClient("", async (_url, init) => {
      auth = (init?.headers as Record<string, string>)["Authorization"] ?? "";
      return jsonResponse({ error: "bad token" }, 403);
    });
    const out = await client.admin(
      { kind: "MODULE_TOGGLE", target: "st", payload: {} }, "nope");
    expect(auth).toBe("Bearer nope");
    expect(out.ok).toBe(false);
    expect(out.status).toBe(403);
  });

  it("sign-filter round trips the spec", async () => {
    const client = new ApiClient("", async (url, init) =>
      url.endsWith("/api/admin/sign-filter")
        ? jsonResponse({ spec: JSON.parse(String(init?.body)).spec,
                         signature: "aa" })
        : jsonResponse({}, 404));
    const out = await client.signFilter({ filter_id: "f" }, "tok");
    expect(out.ok).toBe(true);
    expect((out.body as { signature: string }).signature).toBe("aa");
  });

  it("non-2xx GETs throw", async () => {
    const client = new ApiClient("", async () => jsonResponse({}, 500));
    await expect(client.services()).rejects.toThrow("500");
  });
});

class FakeSource implements EventSourceLike {
  listeners = new Map<string, (ev: { data: string }) => void>();
  onerror: ((ev: unknown) => void) | null = null;
  onopen: ((ev: unknown) => void) | null = null;
  closed = false;

  addEventListener(type: string, cb: (ev: { data: string }) => void): void {
    this.listeners.set(type, cb);
  }

  close(): void {
    this.closed = true;
  }

  emit(type: string, payload: unknown): void {
    this.listeners.get(type)?.({ data: JSON.stringify(payload) });
  }
}

describe("StreamConnection", () => {
  it("dispatches typed events", () => {
    const sources: FakeSource[] = [];
    const events: StreamEvent[] = [];
    const conn = new StreamConnection("/api/stream", (ev) => events.push(ev), {
      makeSource: () => {
        const s = new FakeSource();
        sources.push(s);
        return s;
      },
    });
    conn.connect();
    sources[0]!.emit("data", { values: [] });
    sources[0]!.emit("alert", { target: "r", reason: "x", attempts: [], at: 1 });
    expect(events.map((e) => e.type)).toEqual(["data", "alert"]);
  });

  it("reconnects with exponential backoff and emits gap markers", () => {
    const sources: FakeSource[] = [];
    const waits: number[] = [];
    const timers: (() => void)[] = [];
    const events: StreamEvent[] = [];
    const conn = new StreamConnection("/api/stream", (ev) => events.push(ev), {
      baseBackoffMs: 100,
      makeSource: () => {
        const s = new FakeSource();
        sources.push(s);
        return s;
      },
      setTimer: (fn, ms) => {
        waits.push(ms);
        timers.push(fn);
        return 0;
      },
      now: () => 42,
    });
    conn.connect();
    sources[0]!.onerror?.({});           // drop 1
    expect(sources[0]!.closed).toBe(true);
    expect(events).toEqual([{ type: "gap", payload: { at: 42 } }]);
    timers[0]!();                        // reconnect 1
    sources[1]!.onerror?.({});           // drop 2: backoff doubles
    expect(waits).toEqual([100, 200]);
    timers[1]!();
    sources[2]!.onopen?.({});            // successful open resets backoff
    sources[2]!.onerror?.({});
    expect(waits).toEqual([100, 200, 100]);
    conn.close();
    expect(sources[3]).toBeUndefined();
  });

  it("ignores malformed event payloads", () => {
    const sources: FakeSource[] = [];
    const events: StreamEvent[] = [];
    const conn = new StreamConnection("/api/stream", (ev) => events.push(ev), {
      makeSource: () => {
        const s = new FakeSource();
        sources.push(s);
        return s;
      },
    });
    conn.connect();
    sources[0]!.listeners.get("data")?.({ data: "{not json" });
    expect(events).toEqual([]);
  });
});
