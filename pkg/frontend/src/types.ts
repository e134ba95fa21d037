/** Payload shapes exchanged with the bridge (mirrors its JSON documents). */

export interface ScanStatus {
  state: 'Idle' | 'Scanning';
  scan_id: string | null;
  progress: number;
  frames_completed: number;
}

export interface ProbePosition {
  x: number;
  y: number;
}

export interface InstrumentSection {
  ok: boolean;
  error?: string;
  scan_status?: ScanStatus;
  probe_position?: ProbePosition;
  metadata?: Record<string, unknown>;
}

export interface MeasurementEntry {
  file_id: string;
  size_bytes: number;
  modified_at: number;
  sidecar: Record<string, unknown> | null;
}

export interface Snapshot {
  timestamp: number;
  object: string;
  instrument: InstrumentSection;
  registry: { ok: boolean; records?: unknown[]; error?: string };
  sync: Record<string, unknown> | null;
  measurements: MeasurementEntry[];
}

export interface CommandBody {
  method: 'set_probe_position' | 'start_scan' | 'abort_scan';
  params: Record<string, unknown>;
}

export interface CommandResult {
  status: number;
  body: { result?: unknown; error?: { code: string; message: string } };
}
