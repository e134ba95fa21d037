/**
 * Pure console view-state: every transition is a plain function from the
 * old state (plus an event payload) to a new state, so the steering rules
 * are testable without a DOM or a live bridge.
 *
 * Invariants kept here:
 *  - at most one pending steering command at a time;
 *  - steering is only possible when connected, Idle and not pending;
 *  - the probe marker is optimistic only until the next status snapshot
 *    (or rolled back on a command error);
 *  - the gallery is newest-first and deduplicated by file_id.
 */

import type { CommandBody, MeasurementEntry, ProbePosition, Snapshot } from './types.js';

export type ConnectionState = 'live' | 'stale' | 'lost';

/** Heartbeats arrive every 15 s; three missed beats flip the view to stale. */
export const HEARTBEAT_INTERVAL_MS = 15_000;
export const MISSED_HEARTBEAT_LIMIT = 3;

export interface ConsoleState {
  connection: ConnectionState;
  lastBeatAt: number | null;
  snapshot: Snapshot | null;
  pendingCommand: boolean;
  optimisticProbe: ProbePosition | null;
  measurements: MeasurementEntry[];
  selectedId: string | null;
  toast: string | null;
}

export function initialState(): ConsoleState {
  return {
    connection: 'lost',
    lastBeatAt: null,
    snapshot: null,
    pendingCommand: false,
    optimisticProbe: null,
    measurements: [],
    selectedId: null,
    toast: null,
  };
}

export function applySnapshot(state: ConsoleState, snapshot: Snapshot, now: number): ConsoleState {
  return {
    ...state,
    connection: 'live',
    lastBeatAt: now,
    snapshot,
    // the next status snapshot carries the confirmed probe position
    optimisticProbe: null,
    measurements: mergeMeasurements(state.measurements, snapshot.measurements ?? []),
  };
}

export function applyMeasurementEvent(state: ConsoleState, entry: MeasurementEntry): ConsoleState {
  return { ...state, measurements: mergeMeasurements(state.measurements, [entry]) };
}

export function applyHeartbeat(state: ConsoleState, now: number): ConsoleState {
  return { ...state, connection: 'live', lastBeatAt: now };
}

export function checkStaleness(
  state: ConsoleState,
  now: number,
  intervalMs: number = HEARTBEAT_INTERVAL_MS,
): ConsoleState {
  if (state.connection === 'lost' || state.lastBeatAt === null) {
    return state;
  }
  const stale = now - state.lastBeatAt > MISSED_HEARTBEAT_LIMIT * intervalMs;
  if (stale && state.connection === 'live') {
    return { ...state, connection: 'stale' };
  }
  return state;
}

export function markLost(state: ConsoleState): ConsoleState {
  return { ...state, connection: 'lost' };
}

export function beginCommand(state: ConsoleState): ConsoleState {
  return { ...state, pendingCommand: true, toast: null };
}

export function finishCommandOk(state: ConsoleState): ConsoleState {
  return { ...state, pendingCommand: false };
}

export function finishCommandError(state: ConsoleState, message: string): ConsoleState {
  // roll the optimistic marker back to the last confirmed position
  return { ...state, pendingCommand: false, optimisticProbe: null, toast: message };
}

export function setOptimisticProbe(state: ConsoleState, probe: ProbePosition): ConsoleState {
  return { ...state, optimisticProbe: probe };
}

export function selectMeasurement(state: ConsoleState, fileId: string | null): ConsoleState {
  return { ...state, selectedId: fileId };
}

/** Steering is legal only when live, Idle, instrument ok and nothing pending. */
export function canSteer(state: ConsoleState): boolean {
  if (state.pendingCommand || state.connection === 'lost') {
    return false;
  }
  const instrument = state.snapshot?.instrument;
  return Boolean(instrument?.ok && instrument.scan_status?.state === 'Idle');
}

/** Abort stays available while a scan runs (it is the only busy-state verb). */
export function canAbort(state: ConsoleState): boolean {
  if (state.pendingCommand) {
    return false;
  }
  return state.snapshot?.instrument?.scan_status?.state === 'Scanning';
}

export function displayedProbe(state: ConsoleState): ProbePosition | null {
  return state.optimisticProbe ?? state.snapshot?.instrument?.probe_position ?? null;
}

export function buildProbeCommand(x: number, y: number): CommandBody | null {
  if (!Number.isFinite(x) || !Number.isFinite(y) || x < 0 || x > 1 || y < 0 || y > 1) {
    return null; // client-side bounds check before any POST
  }
  return { method: 'set_probe_position', params: { x, y } };
}

export function buildScanCommand(
  width: number,
  height: number,
  dwellUs: number,
  seed: number,
): CommandBody | null {
  for (const value of [width, height, dwellUs, seed]) {
    if (!Number.isInteger(value) || value < 0) {
      return null;
    }
  }
  return {
    method: 'start_scan',
    params: { width, height, dwell_time_us: dwellUs, seed },
  };
}

function mergeMeasurements(
  current: MeasurementEntry[],
  incoming: MeasurementEntry[],
): MeasurementEntry[] {
  const byId = new Map<string, MeasurementEntry>();
  for (const entry of [...current, ...incoming]) {
    byId.set(entry.file_id, entry);
  }
  return [...byId.values()].sort(
    (a, b) => b.modified_at - a.modified_at || a.file_id.localeCompare(b.file_id),
  );
}
