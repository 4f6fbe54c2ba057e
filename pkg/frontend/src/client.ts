// Thin websocket wrapper: manual reconnect (a stale generation session is
// not worth resuming silently), JSON encode/decode, status callbacks.

import type { ClientMessage, ServerMessage, SkeletonDef } from "./protocol.js";
import { parseServerMessage } from "./protocol.js";

export interface ClientHandlers {
  onMessage: (msg: ServerMessage) => void;
  onStatus: (status: "connecting" | "open" | "closed") => void;
  onProtocolError?: (raw: string) => void;
}

export class SessionClient {
  private ws: WebSocket | null = null;
  private url: string;
  private handlers: ClientHandlers;

  constructor(url: string, handlers: ClientHandlers) {
    this.url = url;
    this.handlers = handlers;
  }

  connect(): void {
    this.handlers.onStatus("connecting");
    this.ws = new WebSocket(this.url);
    this.ws.onopen = () => this.handlers.onStatus("open");
    this.ws.onclose = () => this.handlers.onStatus("closed");
    this.ws.onerror = () => {
      // onclose follows and drives the status change
    };
    this.ws.onmessage = (ev) => {
      const msg = parseServerMessage(String(ev.data));
      if (msg) this.handlers.onMessage(msg);
      else this.handlers.onProtocolError?.(String(ev.data));
    };
  }

  get isOpen(): boolean {
    return this.ws !== null && this.ws.readyState === WebSocket.OPEN;
  }

  send(msg: ClientMessage): boolean {
    if (!this.isOpen || !this.ws) return false;
    this.ws.send(JSON.stringify(msg));
    return true;
  }

  close(): void {
    this.ws?.close();
  }
}

/** Base URLs derived from the page query string (?server=host:port&seed=n). */
export function resolveServer(search: string, origin: string): { ws: string; http: string; seed: number | undefined } {
  const params = new URLSearchParams(search);
  const raw = params.get("server") ?? origin.replace(/^http/, "ws");
  const ws = raw.startsWith("ws") ? raw : `ws://${raw}`;
  const http = ws.replace(/^ws/, "http");
  const seedParam = params.get("seed");
  const seed = seedParam === null ? undefined : Number(seedParam);
  const wsUrl = `${ws.replace(/\/$/, "")}/session${seed !== undefined ? `?seed=${seed}` : ""}`;
  return { ws: wsUrl, http: http.replace(/\/$/, ""), seed };
}

export async function fetchSkeleton(httpBase: string): Promise<SkeletonDef> {
  const res = await fetch(`${httpBase}/skeleton`);
  if (!res.ok) throw new Error(`skeleton fetch failed: ${res.status}`);
  return (await res.json()) as SkeletonDef;
}
