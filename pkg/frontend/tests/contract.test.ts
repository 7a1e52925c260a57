/**
 * Contract test: exercising every client flow against a recorded stub
 * must touch only the documented endpoints.
 */

import { describe, expect, it } from 'vitest';
import { ApiClient } from '../src/api.js';
import { pollJob } from '../src/jobs.js';

const DOCUMENTED = [
  /^\/render\?/,
  /^\/select$/,
  /^\/instances$/,
  /^\/instances\/\d+\/complete$/,
  /^\/jobs\/[\w-]+$/,
];

function stubServer() {
  const calls: string[] = [];
  let jobPolls = 0;
  const fetchImpl = async (url: string, init?: RequestInit): Promise<Response> => {
    calls.push(url);
    const path = url.split('#')[0];
    if (path.startsWith('/render')) {
      return new Response(new Blob([new Uint8Array([0x89, 0x50])]), { status: 200 });
    }
    if (path === '/select') {
      expect(init?.method).toBe('POST');
      return Response.json({ instance_id: 1, gaussian_count: 25, mask_png_base64: '' });
    }
    if (path === '/instances') {
      return Response.json({ instances: [{ id: 1, gaussian_count: 25, frames: 8, trained: true }] });
    }
    if (/^\/instances\/\d+\/complete$/.test(path)) {
      expect(init?.method).toBe('POST');
      return Response.json({ job_id: 'job-1' });
    }
    if (path.startsWith('/jobs/')) {
      jobPolls += 1;
      if (jobPolls < 3) return Response.json({ id: 'job-1', instance_id: 1, status: 'running' });
      return Response.json({
        id: 'job-1', instance_id: 1, status: 'done',
        result: { skipped: false, conditions: [0, 8], targets: [1], generated: ['data:image/png;base64,x'] },
      });
    }
    throw new Error(`stub has no route for ${path}`);
  };
  return { calls, fetchImpl };
}

describe('endpoint contract', () => {
  it('full picker flow touches only the five documented endpoints', async () => {
    const { calls, fetchImpl } = stubServer();
    const client = new ApiClient('', fetchImpl);

    await client.fetchRender({ yaw: 10, pitch: 20, w: 64, h: 48 });
    await client.instances();
    await client.select({ yaw: 10, pitch: 20, x: 5, y: 6 });
    const jobId = await client.startComplete(1);
    await pollJob(client, jobId, { intervalMs: 0, sleep: async () => {} });

    expect(calls.length).toBeGreaterThanOrEqual(5);
    for (const url of calls) {
      expect(
        DOCUMENTED.some((re) => re.test(url)),
        `undocumented endpoint called: ${url}`,
      ).toBe(true);
    }
  });

  it('render URLs carry the full orbit parameterization', () => {
    const client = new ApiClient('');
    const url = client.renderUrl({ yaw: 90, pitch: -15, radius: 3.5, w: 512, h: 384 });
    expect(url).toContain('yaw=90.00');
    expect(url).toContain('pitch=-15.00');
    expect(url).toContain('radius=3.500');
    expect(url).toContain('w=512');
  });
});
