import type { Plane, RleMask, RoundInfo, SessionInfo, Stroke } from './types.js';

export class ConflictError extends Error {}

async function expectOk(resp: Response): Promise<Response> {
  if (resp.status === 409) {
    throw new ConflictError(await resp.text());
  }
  if (!resp.ok) {
    throw new Error(`${resp.status} ${await resp.text()}`);
  }
  return resp;
}

/** Thin client for the refinement session service. */
export class SessionClient {
  constructor(private baseUrl: string) {}

  private url(path: string): string {
    return `${this.baseUrl}${path}`;
  }

  async createSessionRaw(volumes: {
    ref_volume: Float32Array;
    ref_seg: Uint8Array;
    target_volume: Float32Array;
    gt?: Uint8Array;
    shape: [number, number, number];
  }): Promise<string> {
    const form = new FormData();
    const shapes: Record<string, number[]> = {};
    const add = (name: string, data: Float32Array | Uint8Array) => {
      form.append(name, new Blob([data.buffer as ArrayBuffer]), name);
      shapes[name] = [...volumes.shape];
    };
    add('ref_volume', volumes.ref_volume);
    add('ref_seg', volumes.ref_seg);
    add('target_volume', volumes.target_volume);
    if (volumes.gt) add('gt', volumes.gt);
    form.append('shapes', JSON.stringify(shapes));
    const resp = await expectOk(await fetch(this.url('/sessions'), { method: 'POST', body: form }));
    return (await resp.json()).id as string;
  }

  async getSession(id: string): Promise<SessionInfo> {
    const resp = await expectOk(await fetch(this.url(`/sessions/${id}`)));
    return (await resp.json()) as SessionInfo;
  }

  async runInitial(id: string): Promise<RoundInfo> {
    const resp = await expectOk(await fetch(this.url(`/sessions/${id}/initial`), { method: 'POST' }));
    return (await resp.json()) as RoundInfo;
  }

  async submitRound(id: string, strokes: Stroke[], baseRound: number): Promise<RoundInfo> {
    const resp = await expectOk(
      await fetch(this.url(`/sessions/${id}/rounds`), {
        method: 'POST',
        headers: { 'content-type': 'application/json' },
        body: JSON.stringify({ strokes, base_round: baseRound }),
      }),
    );
    return (await resp.json()) as RoundInfo;
  }

  async getMask(id: string, round: number): Promise<RleMask> {
    const resp = await expectOk(
      await fetch(this.url(`/sessions/${id}/rounds/${round}/mask?format=rle`)),
    );
    return (await resp.json()) as RleMask;
  }

  async getSlice(
    id: string,
    plane: Plane,
    index: number,
    volume: 'target' | 'reference' = 'target',
  ): Promise<{ shape: [number, number]; pixels: Uint8Array }> {
    const resp = await expectOk(
      await fetch(this.url(`/sessions/${id}/slices/${plane}/${index}?volume=${volume}`)),
    );
    const body = await resp.json();
    const binary = atob(body.data as string);
    const pixels = new Uint8Array(binary.length);
    for (let i = 0; i < binary.length; i++) pixels[i] = binary.charCodeAt(i);
    return { shape: body.shape, pixels };
  }

  async deleteSession(id: string): Promise<void> {
    await expectOk(await fetch(this.url(`/sessions/${id}`), { method: 'DELETE' }));
  }
}
