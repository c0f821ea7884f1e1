/** Gateway connection: sequenced commands, ack matching, retry with the same
 * sequence number (commands are idempotent device-side), auto-reconnect. */

import { Command, GatewayMessage } from "./protocol.js";
import { PendingCommand } from "./state.js";

export interface SocketLike {
  send(data: string): void;
  close(): void;
  onmessage: ((event: { data: string }) => void) | null;
  onopen: (() => void) | null;
  onclose: (() => void) | null;
}

export type SocketFactory = (url: string) => SocketLike;

export interface GatewayClientOptions {
  retryMs?: number;
  maxRetries?: number;
  reconnectMs?: number;
  now?: () => number;
  setTimer?: (fn: () => void, ms: number) => unknown;
  clearTimer?: (handle: unknown) => void;
}

export class GatewayClient {
  readonly pending = new Map<number, PendingCommand>();
  onMessage: ((msg: GatewayMessage) => void) | null = null;
  onDisconnect: (() => void) | null = null;
  sentLog: GatewayMessage[] = [];

  private seq = 0;
  private sock: SocketLike | null = null;
  private timers = new Map<number, { handle: unknown; tries: number }>();
  private readonly retryMs: number;
  private readonly maxRetries: number;
  private readonly reconnectMs: number;
  private readonly now: () => number;
  private readonly setTimer: (fn: () => void, ms: number) => unknown;
  private readonly clearTimer: (handle: unknown) => void;
  private closed = false;

  constructor(private url: string, private factory: SocketFactory,
              opts: GatewayClientOptions = {}) {
    this.retryMs = opts.retryMs ?? 3000;
    this.maxRetries = opts.maxRetries ?? 3;
    this.reconnectMs = opts.reconnectMs ?? 1000;
    this.now = opts.now ?? (() => Date.now());
    this.setTimer = opts.setTimer ?? ((fn, ms) => setTimeout(fn, ms));
    this.clearTimer = opts.clearTimer ?? ((h) => clearTimeout(h as number));
  }

  connect(): void {
    this.closed = false;
    this.sock = this.factory(this.url);
    this.sock.onmessage = (event) => this.handleRaw(event.data);
    this.sock.onclose = () => {
      this.onDisconnect?.();
      if (!this.closed) {
        this.setTimer(() => this.connect(), this.reconnectMs);
      }
    };
  }

  close(): void {
    this.closed = true;
    this.sock?.close();
  }

  /** Send one command; returns its sequence number. Exactly one message goes
   * out per call; timeouts re-send the same message with the same seq. */
  sendCommand(command: Command): number {
    this.seq += 1;
    const seq = this.seq;
    const message: GatewayMessage = { type: "command", seq, payload: { ...command } };
    this.pending.set(seq, { seq, cmd: command.cmd, args: command.args, sentAt: this.now() });
    this.transmit(message, 0);
    return seq;
  }

  private transmit(message: GatewayMessage, tries: number): void {
    this.sock?.send(JSON.stringify(message));
    this.sentLog.push(message);
    if (tries < this.maxRetries) {
      const handle = this.setTimer(() => {
        if (this.pending.has(message.seq)) {
          this.transmit(message, tries + 1);
        }
      }, this.retryMs);
      this.timers.set(message.seq, { handle, tries });
    }
  }

  private handleRaw(data: string): void {
    let message: GatewayMessage;
    try {
      message = JSON.parse(data);
    } catch {
      return;
    }
    if (message.type === "ack") {
      const timer = this.timers.get(message.seq);
      if (timer) {
        this.clearTimer(timer.handle);
        this.timers.delete(message.seq);
      }
    }
    this.onMessage?.(message);
    if (message.type === "ack") {
      this.pending.delete(message.seq); // retries must stop even without a reducer
    }
  }
}
