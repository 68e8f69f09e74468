// Gateway client: connects to /ws/sessions/<id>, folds envelopes into the
// view, resumes from the last applied seq on reconnect, and deduplicates
// anything replayed twice. The socket factory is injectable so the whole
// flow is testable without a browser.

import { applyEnvelope, initialView, type ConsoleSessionView } from "./reducer.js";
import { isEnvelope, type CommandFrame } from "./types.js";

export interface SocketLike {
  send(data: string): void;
  close(): void;
  onopen: ((event?: unknown) => void) | null;
  onmessage: ((event: { data: string }) => void) | null;
  onclose: ((event?: unknown) => void) | null;
  onerror: ((event?: unknown) => void) | null;
}

export interface GatewayClientOptions {
  url: string; // ws://host:port/ws/sessions/<session_id>
  onChange: (view: ConsoleSessionView) => void;
  makeSocket?: (url: string) => SocketLike;
  reconnectDelayMs?: number;
  schedule?: (fn: () => void, delayMs: number) => void;
}

function defaultSocketFactory(url: string): SocketLike {
  return new WebSocket(url) as unknown as SocketLike;
}

export class GatewayClient {
  view: ConsoleSessionView = initialView();

  private socket: SocketLike | null = null;
  private stopped = false;
  private readonly makeSocket: (url: string) => SocketLike;
  private readonly reconnectDelayMs: number;
  private readonly schedule: (fn: () => void, delayMs: number) => void;

  constructor(private readonly options: GatewayClientOptions) {
    this.makeSocket = options.makeSocket ?? defaultSocketFactory;
    this.reconnectDelayMs = options.reconnectDelayMs ?? 1000;
    this.schedule = options.schedule ?? ((fn, ms) => setTimeout(fn, ms));
  }

  connect(): void {
    this.stopped = false;
    this.open();
  }

  stop(): void {
    this.stopped = true;
    this.socket?.close();
    this.update({ ...this.view, connection: "closed" });
  }

  sendLearnerText(text: string): boolean {
    if (!text.trim()) return false; // client-side block on empty input
    return this.sendCommand({ kind: "say_as_learner", text });
  }

  sendCommand(frame: CommandFrame): boolean {
    if (this.socket === null || this.view.connection !== "live") return false;
    this.socket.send(JSON.stringify(frame));
    return true;
  }

  private resumeUrl(): string {
    const separator = this.options.url.includes("?") ? "&" : "?";
    return `${this.options.url}${separator}from_seq=${this.view.lastSeq}`;
  }

  private open(): void {
    const socket = this.makeSocket(this.resumeUrl());
    this.socket = socket;
    this.update({ ...this.view, connection: "reconnecting" });

    socket.onopen = () => {
      this.update({ ...this.view, connection: "live" });
    };
    socket.onmessage = (event) => {
      let parsed: unknown;
      try {
        parsed = JSON.parse(event.data);
      } catch {
        return; // non-JSON frames are ignored
      }
      if (!isEnvelope(parsed)) return;
      const next = applyEnvelope(this.view, parsed);
      if (next.gapFrom !== null) {
        // missed envelopes: resume from the last applied seq
        this.update(next);
        socket.close();
        return;
      }
      this.update(next);
    };
    socket.onclose = () => {
      if (this.stopped) return;
      this.update({ ...this.view, connection: "closed" });
      this.schedule(() => {
        if (!this.stopped) this.open();
      }, this.reconnectDelayMs);
    };
    socket.onerror = () => {
      // onclose drives the retry loop
    };
  }

  private update(view: ConsoleSessionView): void {
    this.view = view;
    this.options.onChange(view);
  }
}

export function gatewayWsUrl(base: string, sessionId: string): string {
  const trimmed = base.replace(/\/$/, "");
  const ws = trimmed.replace(/^http/, "ws");
  return `${ws}/ws/sessions/${encodeURIComponent(sessionId)}`;
}
