/**
 * Bridge HTTP/SSE client. The console consumes exactly the four bridge
 * endpoints: /api/status, /api/command, /api/events and
 * /api/measurements/{id}/preview.
 */

import type { CommandBody, CommandResult, Snapshot } from './types.js';

export type EventHandler = (name: string, data: unknown) => void;

export interface BridgeApi {
  getStatus(): Promise<Snapshot>;
  postCommand(body: CommandBody): Promise<CommandResult>;
  /** Opens the event stream; returns a close function. */
  openEvents(onEvent: EventHandler, onError: () => void): () => void;
  previewUrl(fileId: string): string;
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;
type EventSourceFactory = (url: string) => EventSource;

const SSE_EVENT_NAMES = ['status', 'measurement', 'heartbeat'] as const;

export class HttpBridgeApi implements BridgeApi {
  constructor(
    private readonly baseUrl: string = '',
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
    private readonly eventSourceFactory: EventSourceFactory = (url) => new EventSource(url),
  ) {}

  async getStatus(): Promise<Snapshot> {
    const response = await this.fetchImpl(`${this.baseUrl}/api/status`);
    // 503 still carries a full snapshot with the failure recorded inside
    return (await response.json()) as Snapshot;
  }

  async postCommand(body: CommandBody): Promise<CommandResult> {
    const response = await this.fetchImpl(`${this.baseUrl}/api/command`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(body),
    });
    return { status: response.status, body: await response.json() };
  }

  openEvents(onEvent: EventHandler, onError: () => void): () => void {
    const source = this.eventSourceFactory(`${this.baseUrl}/api/events`);
    for (const name of SSE_EVENT_NAMES) {
      source.addEventListener(name, (event) => {
        onEvent(name, JSON.parse((event as MessageEvent).data));
      });
    }
    source.onerror = () => onError();
    return () => source.close();
  }

  previewUrl(fileId: string): string {
    const encoded = fileId.split('/').map(encodeURIComponent).join('/');
    return `${this.baseUrl}/api/measurements/${encoded}/preview`;
  }
}
