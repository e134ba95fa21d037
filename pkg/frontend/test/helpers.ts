/** Shared builders for bridge payloads used across the test files. */

import type { MeasurementEntry, Snapshot } from '../src/types.js';

export function snapshot(over: Partial<{
  state: 'Idle' | 'Scanning';
  progress: number;
  frames: number;
  probe: { x: number; y: number };
  measurements: MeasurementEntry[];
  ok: boolean;
}> = {}): Snapshot {
  const ok = over.ok ?? true;
  return {
    timestamp: 1,
    object: 'u200.microscope',
    instrument: ok
      ? {
          ok: true,
          scan_status: {
            state: over.state ?? 'Idle',
            scan_id: (over.state ?? 'Idle') === 'Scanning' ? 'scan-000001' : null,
            progress: over.progress ?? 0,
            frames_completed: over.frames ?? 0,
          },
          probe_position: over.probe ?? { x: 0.5, y: 0.5 },
          metadata: { instrument_name: 'U200-sim', facility: 'CNMS-sim' },
        }
      : { ok: false, error: 'unreachable' },
    registry: { ok: true, records: [] },
    sync: null,
    measurements: over.measurements ?? [],
  };
}

export function entry(fileId: string, mtime = 100): MeasurementEntry {
  return { file_id: fileId, size_bytes: 8205, modified_at: mtime, sidecar: { scan_id: fileId } };
}
