import { SessionClient, ConflictError } from './api.js';
import { decodeRle, sliceOf } from './rle.js';
import type { Plane, RleMask, SessionInfo } from './types.js';
import { PLANES, sliceCount } from './types.js';
import { ViewerState, compositeSlice } from './viewer.js';

/** DOM glue for the scribble editor. All segmentation logic lives on the
 * server; all view logic lives in ViewerState so it stays testable. */
export class App {
  client: SessionClient;
  state: ViewerState | null = null;
  session: SessionInfo | null = null;
  masks = new Map<number, Uint8Array>(); // round -> label volume

  private canvas: HTMLCanvasElement;
  private status: HTMLElement;
  private volumeToggle = 'target' as 'target' | 'reference';

  constructor(root: Document, baseUrl: string) {
    this.client = new SessionClient(baseUrl);
    this.canvas = root.getElementById('viewer') as HTMLCanvasElement;
    this.status = root.getElementById('status') as HTMLElement;
    this.bind(root);
  }

  private el<T extends HTMLElement>(id: string): T {
    return this.canvas.ownerDocument.getElementById(id) as T;
  }

  private bind(root: Document): void {
    this.el<HTMLButtonElement>('load').addEventListener('click', () => {
      const id = this.el<HTMLInputElement>('session-id').value.trim();
      if (id) void this.loadSession(id);
    });
    this.el<HTMLButtonElement>('submit').addEventListener('click', () => void this.submitRound());
    this.el<HTMLButtonElement>('undo').addEventListener('click', () => {
      this.state?.undoPending();
      void this.redraw();
    });
    this.el<HTMLButtonElement>('initial').addEventListener('click', () => void this.runInitial());

    for (const plane of PLANES) {
      this.el<HTMLButtonElement>(`plane-${plane}`).addEventListener('click', () => {
        this.state?.setPlane(plane);
        this.syncSliceSlider();
        void this.redraw();
      });
    }
    this.el<HTMLInputElement>('slice').addEventListener('input', (e) => {
      this.state?.setSlice(Number((e.target as HTMLInputElement).value));
      void this.redraw();
    });
    this.el<HTMLInputElement>('opacity').addEventListener('input', (e) => {
      if (this.state) this.state.opacity = Number((e.target as HTMLInputElement).value);
      void this.redraw();
    });
    this.el<HTMLInputElement>('brush-class').addEventListener('change', (e) => {
      if (this.state) this.state.tool.cls = Number((e.target as HTMLInputElement).value) === 2 ? 2 : 1;
    });
    this.el<HTMLSelectElement>('polarity').addEventListener('change', (e) => {
      if (this.state) this.state.tool.polarity = Number((e.target as HTMLSelectElement).value) === -1 ? -1 : 1;
    });
    this.el<HTMLInputElement>('radius').addEventListener('change', (e) => {
      if (this.state) this.state.tool.radius = Math.max(0, Number((e.target as HTMLInputElement).value));
    });
    this.el<HTMLInputElement>('reference-toggle').addEventListener('change', (e) => {
      this.volumeToggle = (e.target as HTMLInputElement).checked ? 'reference' : 'target';
      void this.redraw();
    });

    this.canvas.addEventListener('pointerdown', (e) => {
      const [r, c] = this.voxelFromPointer(e);
      this.state?.beginStroke(r, c);
      this.canvas.setPointerCapture?.(e.pointerId);
    });
    this.canvas.addEventListener('pointermove', (e) => {
      if (e.buttons & 1) {
        const [r, c] = this.voxelFromPointer(e);
        this.state?.extendStroke(r, c);
        void this.redraw();
      }
    });
    this.canvas.addEventListener('pointerup', () => {
      this.state?.finishStroke();
      void this.redraw();
    });
    root.addEventListener('keydown', (e) => {
      if ((e as KeyboardEvent).key === 'z' && (e as KeyboardEvent).ctrlKey) {
        this.state?.undoPending();
        void this.redraw();
      }
    });
  }

  voxelFromPointer(e: PointerEvent): [number, number] {
    const rect = this.canvas.getBoundingClientRect();
    const shape = this.state?.currentSliceShape() ?? [1, 1];
    const r = ((e.clientY - rect.top) / Math.max(rect.height, 1)) * shape[0];
    const c = ((e.clientX - rect.left) / Math.max(rect.width, 1)) * shape[1];
    return [Math.floor(r), Math.floor(c)];
  }

  async loadSession(id: string): Promise<void> {
    this.session = await this.client.getSession(id);
    this.state = new ViewerState(this.session.shape);
    this.masks.clear();
    for (const round of this.session.rounds) {
      this.state.observeRound(round.index);
    }
    this.state.sliceIndex = Math.floor(sliceCount(this.session.shape, this.state.plane) / 2);
    if (this.state.latestRound > 0) {
      await this.fetchMask(this.state.latestRound);
    }
    this.syncSliceSlider();
    this.renderHistory();
    await this.redraw();
    this.setStatus(`session ${id} loaded (${this.session.rounds.length} rounds)`);
  }

  async runInitial(): Promise<void> {
    if (!this.session || !this.state) return;
    const info = await this.client.runInitial(this.session.id);
    this.state.observeRound(info.index);
    await this.fetchMask(info.index);
    this.renderHistory();
    await this.redraw();
    this.setStatus('initial segmentation ready');
  }

  async submitRound(): Promise<void> {
    if (!this.session || !this.state) return;
    const strokes = this.state.takePendingForSubmit();
    try {
      const info = await this.client.submitRound(this.session.id, strokes, this.state.latestRound);
      this.state.observeRound(info.index);
      await this.fetchMask(info.index);
      this.session = await this.client.getSession(this.session.id);
      this.renderHistory();
      await this.redraw();
      this.setStatus(`round ${info.index} ready`);
    } catch (err) {
      if (err instanceof ConflictError) {
        this.setStatus('session advanced elsewhere; reload to continue');
      } else {
        throw err;
      }
    }
  }

  async fetchMask(round: number): Promise<Uint8Array> {
    const cached = this.masks.get(round);
    if (cached) return cached;
    const mask: RleMask = await this.client.getMask(this.session!.id, round);
    const data = decodeRle(mask);
    this.masks.set(round, data);
    return data;
  }

  /** Current round's labels on the current slice, or null before round 1. */
  currentOverlay(): Uint8Array | null {
    if (!this.state || this.state.roundCursor < 1) return null;
    const volume = this.masks.get(this.state.roundCursor);
    if (!volume) return null;
    return sliceOf(volume, this.state.shape, this.state.plane, this.state.sliceIndex);
  }

  async redraw(): Promise<void> {
    if (!this.session || !this.state) return;
    const { shape, pixels } = await this.client.getSlice(
      this.session.id,
      this.state.plane,
      this.state.sliceIndex,
      this.volumeToggle,
    );
    const overlay = this.volumeToggle === 'target' ? this.currentOverlay() : null;
    const rgba = compositeSlice(
      pixels,
      overlay,
      shape,
      this.state.opacity,
      this.state.pendingOnCurrentView(),
    );
    this.canvas.width = shape[1];
    this.canvas.height = shape[0];
    const ctx = this.canvas.getContext('2d');
    if (ctx) {
      ctx.putImageData(new ImageData(rgba, shape[1], shape[0]), 0, 0);
    }
  }

  renderHistory(): void {
    if (!this.session || !this.state) return;
    const list = this.el<HTMLElement>('history');
    list.innerHTML = '';
    for (const round of this.session.rounds) {
      const item = list.ownerDocument.createElement('li');
      let text = `round ${round.index} (${round.edit_count} strokes)`;
      if (round.metrics) {
        const dice = ((round.metrics.ggo.dsc + round.metrics.cons.dsc) / 2) * 100;
        text += ` dice ${dice.toFixed(1)}%`;
      }
      item.textContent = text;
      item.addEventListener('click', () => {
        this.state?.setRoundCursor(round.index);
        void this.fetchMask(round.index).then(() => this.redraw());
      });
      list.appendChild(item);
    }
  }

  syncSliceSlider(): void {
    if (!this.state) return;
    const slider = this.el<HTMLInputElement>('slice');
    slider.max = String(this.state.currentSliceCount() - 1);
    slider.value = String(this.state.sliceIndex);
  }

  setStatus(text: string): void {
    this.status.textContent = text;
  }
}

export function mount(doc: Document, baseUrl: string): App {
  return new App(doc, baseUrl);
}
