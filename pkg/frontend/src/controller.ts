/**
 * Console controller: owns the view state, talks to the bridge, and tells
 * the renderer when anything changed. DOM-free so the steering contract is
 * fully exercisable in tests against a scripted bridge session.
 */

import type { BridgeApi } from './api.js';
import {
  applyHeartbeat,
  applyMeasurementEvent,
  applySnapshot,
  beginCommand,
  buildProbeCommand,
  buildScanCommand,
  canAbort,
  canSteer,
  checkStaleness,
  finishCommandError,
  finishCommandOk,
  initialState,
  markLost,
  selectMeasurement,
  setOptimisticProbe,
  HEARTBEAT_INTERVAL_MS,
  type ConsoleState,
} from './state.js';
import type { MeasurementEntry, Snapshot } from './types.js';

export interface ControllerOptions {
  heartbeatIntervalMs?: number;
  now?: () => number;
}

export class ConsoleController {
  state: ConsoleState = initialState();

  onRender: (state: ConsoleState) => void = () => {};

  private readonly now: () => number;
  private readonly heartbeatIntervalMs: number;
  private closeEvents: (() => void) | null = null;

  constructor(private readonly api: BridgeApi, options: ControllerOptions = {}) {
    this.now = options.now ?? (() => Date.now());
    this.heartbeatIntervalMs = options.heartbeatIntervalMs ?? HEARTBEAT_INTERVAL_MS;
  }

  async start(): Promise<void> {
    try {
      const snapshot = await this.api.getStatus();
      this.update(applySnapshot(this.state, snapshot, this.now()));
    } catch {
      this.update(markLost(this.state));
    }
    this.closeEvents = this.api.openEvents(
      (name, data) => this.handleEvent(name, data),
      () => this.update(markLost(this.state)),
    );
  }

  stop(): void {
    this.closeEvents?.();
    this.closeEvents = null;
  }

  handleEvent(name: string, data: unknown): void {
    if (name === 'status') {
      this.update(applySnapshot(this.state, data as Snapshot, this.now()));
    } else if (name === 'measurement') {
      this.update(applyMeasurementEvent(this.state, data as MeasurementEntry));
    } else if (name === 'heartbeat') {
      this.update(applyHeartbeat(this.state, this.now()));
    }
  }

  /** Periodic staleness check; the view calls this on a timer. */
  tick(): void {
    this.update(checkStaleness(this.state, this.now(), this.heartbeatIntervalMs));
  }

  /**
   * One probe drag = at most one POST. Refused (no request at all) while a
   * scan is active, a command is pending, or the coordinates are invalid.
   */
  async submitProbePosition(x: number, y: number): Promise<boolean> {
    if (!canSteer(this.state)) {
      this.update({ ...this.state, toast: 'instrument busy' });
      return false;
    }
    const command = buildProbeCommand(x, y);
    if (command === null) {
      this.update({ ...this.state, toast: 'position outside [0, 1]' });
      return false;
    }
    this.update(setOptimisticProbe(beginCommand(this.state), { x, y }));
    return this.send(command);
  }

  async submitStartScan(width: number, height: number, dwellUs: number, seed: number): Promise<boolean> {
    if (!canSteer(this.state)) {
      this.update({ ...this.state, toast: 'instrument busy' });
      return false;
    }
    const command = buildScanCommand(width, height, dwellUs, seed);
    if (command === null) {
      this.update({ ...this.state, toast: 'scan parameters must be non-negative integers' });
      return false;
    }
    this.update(beginCommand(this.state));
    return this.send(command);
  }

  async submitAbort(): Promise<boolean> {
    const scanId = this.state.snapshot?.instrument?.scan_status?.scan_id;
    if (!canAbort(this.state) || !scanId) {
      return false;
    }
    this.update(beginCommand(this.state));
    return this.send({ method: 'abort_scan', params: { scan_id: scanId } });
  }

  select(fileId: string | null): void {
    this.update(selectMeasurement(this.state, fileId));
  }

  previewUrl(fileId: string): string {
    return this.api.previewUrl(fileId);
  }

  private async send(command: Parameters<BridgeApi['postCommand']>[0]): Promise<boolean> {
    try {
      const result = await this.api.postCommand(command);
      if (result.status === 200) {
        this.update(finishCommandOk(this.state));
        return true;
      }
      const error = result.body?.error;
      this.update(
        finishCommandError(
          this.state,
          error ? `${result.status} ${error.code}: ${error.message}` : `HTTP ${result.status}`,
        ),
      );
      return false;
    } catch (exc) {
      this.update(finishCommandError(this.state, `bridge unreachable: ${String(exc)}`));
      return false;
    }
  }

  private update(next: ConsoleState): void {
    this.state = next;
    this.onRender(next);
  }
}
