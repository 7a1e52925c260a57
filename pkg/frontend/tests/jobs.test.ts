import { describe, expect, it } from 'vitest';
import { ApiClient, JobStatus } from '../src/api.js';
import { pollJob } from '../src/jobs.js';

function clientWithStatuses(statuses: Array<JobStatus['status']>) {
  let i = 0;
  const fetchImpl = async (): Promise<Response> => {
    const status = statuses[Math.min(i, statuses.length - 1)];
    i += 1;
    const body: JobStatus = { id: 'j', instance_id: 1, status };
    if (status === 'failed') body.error = 'boom';
    return Response.json(body);
  };
  return new ApiClient('', fetchImpl);
}

describe('pollJob', () => {
  it('resolves once the job is done', async () => {
    const client = clientWithStatuses(['queued', 'running', 'running', 'done']);
    const ticks: string[] = [];
    const status = await pollJob(client, 'j', {
      intervalMs: 0,
      sleep: async () => {},
      onTick: (s) => ticks.push(s.status),
    });
    expect(status.status).toBe('done');
    expect(ticks).toEqual(['queued', 'running', 'running', 'done']);
  });

  it('surfaces failed jobs as a terminal status, not an exception', async () => {
    const client = clientWithStatuses(['running', 'failed']);
    const status = await pollJob(client, 'j', { intervalMs: 0, sleep: async () => {} });
    expect(status.status).toBe('failed');
    expect(status.error).toBe('boom');
  });

  it('times out on a stuck job', async () => {
    const client = clientWithStatuses(['running']);
    await expect(
      pollJob(client, 'j', { intervalMs: 1, timeoutMs: 0, sleep: async () => {} }),
    ).rejects.toThrow(/timed out/);
  });
});
