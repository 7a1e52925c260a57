/** Job polling: keep asking until the job leaves the queue. */

import { ApiClient, JobStatus } from './api.js';

export interface PollOptions {
  intervalMs?: number;
  timeoutMs?: number;
  sleep?: (ms: number) => Promise<void>;
  onTick?: (status: JobStatus) => void;
}

const defaultSleep = (ms: number) => new Promise<void>((r) => setTimeout(r, ms));

/** Resolves with the terminal status; rejects only on transport errors
 *  or timeout (a failed job resolves with status "failed"). */
export async function pollJob(
  client: ApiClient,
  jobId: string,
  opts: PollOptions = {},
): Promise<JobStatus> {
  const interval = opts.intervalMs ?? 1000;
  const timeout = opts.timeoutMs ?? 10 * 60 * 1000;
  const sleep = opts.sleep ?? defaultSleep;
  const start = Date.now();
  for (;;) {
    const status = await client.job(jobId);
    opts.onTick?.(status);
    if (status.status === 'done' || status.status === 'failed') return status;
    if (Date.now() - start > timeout) {
      throw new Error(`job ${jobId} timed out after ${timeout} ms`);
    }
    await sleep(interval);
  }
}
