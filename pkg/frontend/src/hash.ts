/**
 * URL-hash state codec: the view and any in-flight job survive a page
 * refresh, so polling resumes where it left off.
 */

import { OrbitState, defaultOrbit } from './orbit.js';

export interface HashState {
  orbit: OrbitState;
  jobId?: string;
  selectedInstance?: number;
}

export function encodeHash(state: HashState): string {
  const q = new URLSearchParams();
  q.set('yaw', state.orbit.yaw.toFixed(2));
  q.set('pitch', state.orbit.pitch.toFixed(2));
  if (state.orbit.radius > 0) q.set('r', state.orbit.radius.toFixed(3));
  if (state.jobId) q.set('job', state.jobId);
  if (state.selectedInstance !== undefined) q.set('sel', String(state.selectedInstance));
  return '#' + q.toString();
}

export function decodeHash(hash: string): HashState {
  const state: HashState = { orbit: defaultOrbit() };
  const raw = hash.startsWith('#') ? hash.slice(1) : hash;
  if (!raw) return state;
  const q = new URLSearchParams(raw);
  const yaw = parseFloat(q.get('yaw') ?? '');
  const pitch = parseFloat(q.get('pitch') ?? '');
  const radius = parseFloat(q.get('r') ?? '');
  if (Number.isFinite(yaw)) state.orbit.yaw = yaw;
  if (Number.isFinite(pitch)) state.orbit.pitch = pitch;
  if (Number.isFinite(radius) && radius > 0) state.orbit.radius = radius;
  const job = q.get('job');
  if (job) state.jobId = job;
  const sel = q.get('sel');
  if (sel !== null && Number.isFinite(parseInt(sel, 10))) {
    state.selectedInstance = parseInt(sel, 10);
  }
  return state;
}
