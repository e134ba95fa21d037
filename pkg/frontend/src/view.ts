/**
 * DOM renderer. Thin by design: all steering rules live in state.ts /
 * controller.ts; this layer only paints the current ConsoleState and
 * forwards pointer/form input to the controller.
 */

import type { ConsoleController } from './controller.js';
import { canAbort, canSteer, displayedProbe, type ConsoleState } from './state.js';
import type { MeasurementEntry } from './types.js';

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) {
    throw new Error(`missing element #${id}`);
  }
  return node as T;
}

export class ConsoleView {
  private renderedIds = '';

  constructor(private readonly controller: ConsoleController) {}

  mount(): void {
    this.controller.onRender = (state) => this.render(state);
    this.bindProbePad();
    this.bindScanForm();
    window.setInterval(() => this.controller.tick(), 1000);
  }

  // -- input wiring --------------------------------------------------------

  private bindProbePad(): void {
    const pad = el<HTMLDivElement>('probe-pad');
    let dragging = false;
    let last: { x: number; y: number } | null = null;

    const toUnit = (event: PointerEvent) => {
      const rect = pad.getBoundingClientRect();
      const x = (event.clientX - rect.left) / rect.width;
      const y = (event.clientY - rect.top) / rect.height;
      return { x: Math.min(1, Math.max(0, x)), y: Math.min(1, Math.max(0, y)) };
    };

    pad.addEventListener('pointerdown', (event) => {
      if (!canSteer(this.controller.state)) {
        return; // no request is ever issued while busy
      }
      dragging = true;
      pad.setPointerCapture(event.pointerId);
      last = toUnit(event);
      this.paintMarker(last.x, last.y);
    });
    pad.addEventListener('pointermove', (event) => {
      if (!dragging) {
        return;
      }
      last = toUnit(event);
      this.paintMarker(last.x, last.y);
    });
    pad.addEventListener('pointerup', () => {
      if (dragging && last) {
        // exactly one POST per completed drag
        void this.controller.submitProbePosition(last.x, last.y);
      }
      dragging = false;
      last = null;
    });
  }

  private bindScanForm(): void {
    el<HTMLFormElement>('scan-form').addEventListener('submit', (event) => {
      event.preventDefault();
      void this.controller.submitStartScan(
        Number(el<HTMLInputElement>('scan-width').value),
        Number(el<HTMLInputElement>('scan-height').value),
        Number(el<HTMLInputElement>('scan-dwell').value),
        Number(el<HTMLInputElement>('scan-seed').value),
      );
    });
    el<HTMLButtonElement>('abort-button').addEventListener('click', () => {
      void this.controller.submitAbort();
    });
  }

  // -- painting -------------------------------------------------------------

  render(state: ConsoleState): void {
    const instrument = state.snapshot?.instrument;
    const scan = instrument?.scan_status;

    const badge = el<HTMLSpanElement>('connection-badge');
    badge.textContent = state.connection;
    badge.className = `badge badge-${state.connection}`;

    el<HTMLSpanElement>('scan-state').textContent = instrument?.ok
      ? scan?.state ?? '?'
      : 'unreachable';
    el<HTMLSpanElement>('frames-done').textContent = String(scan?.frames_completed ?? 0);
    const progress = el<HTMLDivElement>('progress-fill');
    progress.style.width = `${Math.round((scan?.progress ?? 0) * 100)}%`;

    const meta = instrument?.metadata as Record<string, string> | undefined;
    el<HTMLSpanElement>('instrument-name').textContent = meta
      ? `${meta.instrument_name} @ ${meta.facility}`
      : state.snapshot?.object ?? '';

    const probe = displayedProbe(state);
    if (probe) {
      this.paintMarker(probe.x, probe.y);
      el<HTMLSpanElement>('probe-readout').textContent =
        `(${probe.x.toFixed(3)}, ${probe.y.toFixed(3)})${state.optimisticProbe ? ' …' : ''}`;
    }

    const steerable = canSteer(state);
    el<HTMLDivElement>('probe-pad').classList.toggle('disabled', !steerable);
    el<HTMLButtonElement>('scan-button').disabled = !steerable;
    el<HTMLButtonElement>('abort-button').disabled = !canAbort(state);

    const toast = el<HTMLDivElement>('toast');
    toast.textContent = state.toast ?? '';
    toast.classList.toggle('visible', state.toast !== null);

    this.renderGallery(state);
    this.renderSidecar(state);
    this.renderSync(state);
  }

  private paintMarker(x: number, y: number): void {
    const marker = el<HTMLDivElement>('probe-marker');
    marker.style.left = `${x * 100}%`;
    marker.style.top = `${y * 100}%`;
  }

  private renderGallery(state: ConsoleState): void {
    const ids = state.measurements.map((m) => m.file_id).join('|') + `@${state.selectedId}`;
    if (ids === this.renderedIds) {
      return; // unchanged; keep existing tiles (no reload flicker)
    }
    this.renderedIds = ids;
    const gallery = el<HTMLDivElement>('gallery');
    gallery.textContent = '';
    if (state.measurements.length === 0) {
      const empty = document.createElement('p');
      empty.className = 'empty';
      empty.textContent = 'no measurements synced yet';
      gallery.appendChild(empty);
      return;
    }
    for (const entry of state.measurements) {
      gallery.appendChild(this.tile(entry, entry.file_id === state.selectedId));
    }
  }

  private tile(entry: MeasurementEntry, selected: boolean): HTMLElement {
    const tile = document.createElement('figure');
    tile.className = selected ? 'tile selected' : 'tile';
    const img = document.createElement('img');
    img.src = this.controller.previewUrl(entry.file_id);
    img.alt = entry.file_id;
    img.onerror = () => tile.classList.add('broken');
    const caption = document.createElement('figcaption');
    const when = new Date(entry.modified_at * 1000).toISOString().slice(11, 19);
    caption.textContent = `${entry.file_id} · ${entry.size_bytes} B · ${when}`;
    tile.append(img, caption);
    tile.addEventListener('click', () => this.controller.select(entry.file_id));
    return tile;
  }

  private renderSidecar(state: ConsoleState): void {
    const pane = el<HTMLPreElement>('sidecar-pane');
    const selected = state.measurements.find((m) => m.file_id === state.selectedId);
    pane.textContent = selected
      ? JSON.stringify(selected.sidecar ?? { note: 'no sidecar synced' }, null, 2)
      : 'select a measurement to inspect its sidecar';
  }

  private renderSync(state: ConsoleState): void {
    const sync = state.snapshot?.sync as
      | { at?: string; status?: string; report?: { files_transferred?: number } }
      | null
      | undefined;
    el<HTMLSpanElement>('sync-summary').textContent = sync
      ? `${sync.status} at ${sync.at ?? '?'} (${sync.report?.files_transferred ?? 0} transferred)`
      : 'no sync report yet';
  }
}
