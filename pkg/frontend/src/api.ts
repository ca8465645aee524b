/**
 * Typed client for the repository HTTP API. The dashboard talks to
 * nothing else; every payload shape here mirrors a documented endpoint.
 */

export interface ServiceEntry {
  service_id: string;
  groups: string[];
  attributes: Record<string, string>;
  endpoint: string;
  proto_version: number;
  registered_at: number;
  status: "live" | "gone";
  seen: number;
}

export interface SeriesPoint {
  0: number; // time ms
  1: number; // value
}

export interface SeriesBin {
  t_start: number;
  t_end: number;
  mean: number;
  min: number;
  max: number;
  count: number;
}

export interface Series {
  key: string;
  farm: string;
  cluster: string;
  node: string;
  param: string;
  source: string;
  points?: [number, number][];
  bins?: SeriesBin[];
  width?: number;
}

export interface SeriesPayload {
  series: Series[];
  t1: number;
  t2: number;
  width: number | null;
}

export interface MstEdge {
  u: string;
  v: string;
  w: number | null;
  in_tree: boolean;
}

export interface MstPayload {
  epoch: number;
  total_weight: number;
  components: number;
  vertices: string[];
  edges: MstEdge[];
  updates: number;
}

export interface TreeUpdateEvent {
  epoch: number;
  edges: { u: string; v: string; w: number | null }[];
  total_weight: number;
  added: { u: string; v: string; w: number | null }[];
  removed: { u: string; v: string; w: number | null }[];
  components: number;
}

export interface RegistryStreamEvent {
  kind: "ServiceAdded" | "ServiceRemoved" | "AttributeChanged";
  descriptor: Omit<ServiceEntry, "status" | "seen">;
  at: number;
}

export interface Alert {
  target: string;
  reason: string;
  attempts: number[];
  at: number;
}

export interface DataStreamEvent {
  values: {
    farm: string;
    cluster: string;
    node: string;
    param: string;
    time: number;
    value: number;
  }[];
}

export type StreamEvent =
  | { type: "data"; payload: DataStreamEvent }
  | { type: "tree"; payload: TreeUpdateEvent }
  | { type: "registry"; payload: RegistryStreamEvent }
  | { type: "alert"; payload: Alert }
  | { type: "gap"; payload: { at: number } };

export interface AdminCommand {
  kind: "MODULE_TOGGLE" | "DEPLOY_FILTER" | "RESTART_TARGET";
  target: string;
  payload: Record<string, unknown>;
}

export interface AdminOutcome {
  ok: boolean;
  status: number;
  body: unknown;
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private base: string = "",
    private fetchFn: FetchLike = (u, i) => fetch(u, i),
  ) {}

  private async get<T>(path: string): Promise<T> {
    const resp = await this.fetchFn(this.base + path);
    if (!resp.ok) {
      throw new Error(`GET ${path} -> ${resp.status}`);
    }
    return (await resp.json()) as T;
  }

  services(): Promise<{ services: ServiceEntry[] }> {
    return this.get("/api/services");
  }

  series(q: {
    farm?: string;
    cluster?: string;
    node?: string;
    param?: string;
    t1?: number;
    t2?: number;
    width?: number;
    source?: string;
  }): Promise<SeriesPayload> {
    const params = new URLSearchParams();
    for (const [k, v] of Object.entries(q)) {
      if (v !== undefined) params.set(k, String(v));
    }
    return this.get(`/api/series?${params.toString()}`);
  }

  mst(): Promise<MstPayload> {
    return this.get("/api/mst");
  }

  alerts(): Promise<{ alerts: Alert[] }> {
    return this.get("/api/alerts");
  }

  async admin(cmd: AdminCommand, token: string): Promise<AdminOutcome> {
    const resp = await this.fetchFn(this.base + "/api/admin", {
      method: "POST",
      headers: {
        "Content-Type": "application/json",
        Authorization: `Bearer ${token}`,
      },
      body: JSON.stringify(cmd),
    });
    return { ok: resp.ok, status: resp.status, body: await resp.json() };
  }

  async signFilter(
    spec: Record<string, unknown>,
    token: string,
  ): Promise<AdminOutcome> {
    const resp = await this.fetchFn(this.base + "/api/admin/sign-filter", {
      method: "POST",
      headers: {
        "Content-Type": "application/json",
        Authorization: `Bearer ${token}`,
      },
      body: JSON.stringify({ spec }),
    });
    return { ok: resp.ok, status: resp.status, body: await resp.json() };
  }
}

/** Minimal EventSource surface so tests can fake it. */
export interface EventSourceLike {
  addEventListener(type: string, cb: (ev: { data: string }) => void): void;
  close(): void;
  onerror: ((ev: unknown) => void) | null;
  onopen: ((ev: unknown) => void) | null;
}

export interface StreamOptions {
  /** Event types to subscribe to; the hello/keepalive traffic is free. */
  kinds?: string[];
  baseBackoffMs?: number;
  maxBackoffMs?: number;
  makeSource?: (url: string) => EventSourceLike;
  setTimer?: (fn: () => void, ms: number) => unknown;
  now?: () => number;
}

/**
 * One multiplexed stream connection with exponential-backoff reconnect.
 * Every reconnect emits a synthetic "gap" event so charts can break
 * their line instead of lying across the outage.
 */
export class StreamConnection {
  private source: EventSourceLike | null = null;
  private backoffMs: number;
  private closed = false;
  readonly kinds: string[];

  constructor(
    private url: string,
    private onEvent: (ev: StreamEvent) => void,
    private opts: StreamOptions = {},
  ) {
    this.kinds = opts.kinds ?? ["data", "tree", "registry", "alert"];
    this.backoffMs = opts.baseBackoffMs ?? 500;
  }

  connect(): void {
    if (this.closed) return;
    const make =
      this.opts.makeSource ??
      ((u: string) => new EventSource(u) as unknown as EventSourceLike);
    const source = make(this.url);
    this.source = source;
    for (const kind of this.kinds) {
      source.addEventListener(kind, (ev) => {
        let payload: unknown;
        try {
          payload = JSON.parse(ev.data);
        } catch {
          return;
        }
        this.onEvent({ type: kind, payload } as StreamEvent);
      });
    }
    source.onopen = () => {
      this.backoffMs = this.opts.baseBackoffMs ?? 500;
    };
    source.onerror = () => this.scheduleReconnect();
  }

  private scheduleReconnect(): void {
    if (this.closed || this.source === null) return;
    this.source.close();
    this.source = null;
    const now = this.opts.now ?? Date.now;
    this.onEvent({ type: "gap", payload: { at: now() } });
    const timer = this.opts.setTimer ?? ((fn, ms) => setTimeout(fn, ms));
    const wait = this.backoffMs;
    this.backoffMs = Math.min(this.backoffMs * 2, this.opts.maxBackoffMs ?? 30_000);
    timer(() => this.connect(), wait);
  }

  close(): void {
    this.closed = true;
    this.source?.close();
    this.source = null;
  }
}
