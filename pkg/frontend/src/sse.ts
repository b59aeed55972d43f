import type { ServerEvent } from "./types.js";

/**
 * Incremental server-sent-events parser.
 *
 * Feed it arbitrary text chunks; it emits one ServerEvent per complete
 * frame. Comment lines (keepalives) are ignored. The last seen id is the
 * resume cursor for reconnects.
 */
export function createSseParser(onEvent: (ev: ServerEvent) => void): (chunk: string) => void {
  let buffer = "";
  return (chunk: string) => {
    buffer += chunk;
    let boundary: number;
    while ((boundary = buffer.indexOf("\n\n")) >= 0) {
      const frame = buffer.slice(0, boundary);
      buffer = buffer.slice(boundary + 2);
      let seq = -1;
      let kind = "message";
      const dataLines: string[] = [];
      for (const line of frame.split("\n")) {
        if (line.startsWith(":")) continue; // comment / keepalive
        if (line.startsWith("id: ")) seq = parseInt(line.slice(4), 10);
        else if (line.startsWith("event: ")) kind = line.slice(7);
        else if (line.startsWith("data: ")) dataLines.push(line.slice(6));
      }
      if (dataLines.length === 0) continue;
      let data: Record<string, unknown> = {};
      try {
        data = JSON.parse(dataLines.join("\n"));
      } catch {
        data = { raw: dataLines.join("\n") };
      }
      onEvent({ seq, kind, data });
    }
  };
}

export type StreamStatus = "connecting" | "live" | "retrying" | "closed";

export interface EventStreamHooks {
  onEvent: (ev: ServerEvent) => void;
  onStatus?: (status: StreamStatus) => void;
}

/**
 * Resumable event stream over fetch.
 *
 * Tracks the last delivered sequence number and reconnects from it after
 * drops, so consumers see every event exactly once and in order. The stream
 * closes itself once the terminal `finished` event arrives.
 */
export class EventStream {
  lastSeq = -1;
  private stopped = false;
  private finished = false;

  constructor(
    private urlFor: (after: number) => string,
    private hooks: EventStreamHooks,
    private retryDelayMs = 500,
  ) {}

  stop(): void {
    this.stopped = true;
  }

  private deliver(ev: ServerEvent): void {
    if (this.stopped) return; // a stopped stream delivers nothing more
    if (ev.seq <= this.lastSeq) return; // duplicate after a reconnect race
    this.lastSeq = ev.seq;
    if (ev.kind === "finished") this.finished = true;
    this.hooks.onEvent(ev);
  }

  async run(): Promise<void> {
    this.hooks.onStatus?.("connecting");
    while (!this.stopped && !this.finished) {
      try {
        const resp = await fetch(this.urlFor(this.lastSeq));
        if (!resp.ok || !resp.body) throw new Error(`events endpoint: HTTP ${resp.status}`);
        this.hooks.onStatus?.("live");
        const reader = resp.body.getReader();
        const decoder = new TextDecoder();
        const feed = createSseParser((ev) => this.deliver(ev));
        while (!this.stopped) {
          const { done, value } = await reader.read();
          if (done) break;
          feed(decoder.decode(value, { stream: true }));
          if (this.finished) break;
        }
        if (this.finished || this.stopped) break;
        throw new Error("stream ended before the session finished");
      } catch (err) {
        if (this.stopped || this.finished) break;
        this.hooks.onStatus?.("retrying");
        await new Promise((resolve) => setTimeout(resolve, this.retryDelayMs));
      }
    }
    this.hooks.onStatus?.("closed");
  }
}
