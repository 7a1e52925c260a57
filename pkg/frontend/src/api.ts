/**
 * Typed client for the decompose service.
 *
 * The UI talks to exactly five endpoints: GET /render, POST /select,
 * GET /instances, POST /instances/{id}/complete, GET /jobs/{id}.
 * The fetch implementation is injectable so contract tests can record
 * every request the client makes.
 */

export interface RenderParams {
  yaw: number;
  pitch: number;
  radius?: number;
  w?: number;
  h?: number;
}

export interface SelectResult {
  instance_id: number;
  gaussian_count: number;
  mask_png_base64: string;
}

export interface InstanceInfo {
  id: number;
  gaussian_count: number;
  frames: number;
  trained: boolean;
}

export interface JobResult {
  skipped: boolean;
  conditions: number[];
  targets: number[];
  generated: string[];          // data URLs
  refined_splat_url?: string;
}

export interface JobStatus {
  id: string;
  instance_id: number;
  status: 'queued' | 'running' | 'done' | 'failed';
  result?: JobResult;
  error?: string;
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

export class ApiClient {
  constructor(
    private baseUrl: string = '',
    private fetchImpl: FetchLike = (u, i) => fetch(u, i),
  ) {}

  /** URL for an <img> tag; the browser performs the GET. */
  renderUrl(params: RenderParams): string {
    const q = new URLSearchParams();
    q.set('yaw', params.yaw.toFixed(2));
    q.set('pitch', params.pitch.toFixed(2));
    if (params.radius !== undefined) q.set('radius', params.radius.toFixed(3));
    if (params.w !== undefined) q.set('w', String(params.w));
    if (params.h !== undefined) q.set('h', String(params.h));
    return `${this.baseUrl}/render?${q.toString()}`;
  }

  /** Same frame as renderUrl but fetched, for tests and prefetching. */
  async fetchRender(params: RenderParams): Promise<Blob> {
    const res = await this.fetchImpl(this.renderUrl(params));
    if (!res.ok) throw new ApiError(res.status, `render failed: ${res.status}`);
    return res.blob();
  }

  async select(params: RenderParams & { x: number; y: number }): Promise<SelectResult> {
    const res = await this.fetchImpl(`${this.baseUrl}/select`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(params),
    });
    if (!res.ok) {
      const body = await res.json().catch(() => ({}));
      throw new ApiError(res.status, body.error ?? `select failed: ${res.status}`);
    }
    return res.json();
  }

  async instances(): Promise<InstanceInfo[]> {
    const res = await this.fetchImpl(`${this.baseUrl}/instances`);
    if (!res.ok) throw new ApiError(res.status, `instances failed: ${res.status}`);
    const body = await res.json();
    return body.instances;
  }

  async startComplete(instanceId: number): Promise<string> {
    const res = await this.fetchImpl(`${this.baseUrl}/instances/${instanceId}/complete`, {
      method: 'POST',
    });
    if (!res.ok) {
      const body = await res.json().catch(() => ({}));
      throw new ApiError(res.status, body.error ?? `complete failed: ${res.status}`);
    }
    const body = await res.json();
    return body.job_id;
  }

  async job(jobId: string): Promise<JobStatus> {
    const res = await this.fetchImpl(`${this.baseUrl}/jobs/${jobId}`);
    if (!res.ok) throw new ApiError(res.status, `job lookup failed: ${res.status}`);
    return res.json();
  }
}
