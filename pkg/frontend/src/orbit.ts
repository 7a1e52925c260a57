/** Orbit camera state: drag turns, scroll zooms multiplicatively. */

export interface OrbitState {
  yaw: number;      // degrees, wraps
  pitch: number;    // degrees, clamped
  radius: number;   // world units, 0 lets the server pick its default
}

export const PITCH_MIN = -85;
export const PITCH_MAX = 85;
export const RADIUS_MIN = 0.05;
export const RADIUS_MAX = 1000;
const DEG_PER_PIXEL = 0.45;
const ZOOM_STEP = 1.12;

export function defaultOrbit(): OrbitState {
  return { yaw: 0, pitch: 30, radius: 0 };
}

export function applyDrag(state: OrbitState, dx: number, dy: number): OrbitState {
  const yaw = ((state.yaw + dx * DEG_PER_PIXEL) % 360 + 360) % 360;
  const pitch = Math.min(PITCH_MAX, Math.max(PITCH_MIN, state.pitch + dy * DEG_PER_PIXEL));
  return { ...state, yaw, pitch };
}

/** Positive deltaY (scroll down) zooms out; radius scales, never shifts. */
export function applyScroll(state: OrbitState, deltaY: number): OrbitState {
  if (deltaY === 0 || state.radius === 0) {
    // no explicit radius yet: adopt a nominal one so zooming has an anchor
    if (deltaY === 0) return state;
    return { ...state, radius: deltaY > 0 ? 12 : 8 };
  }
  const factor = deltaY > 0 ? ZOOM_STEP : 1 / ZOOM_STEP;
  const radius = Math.min(RADIUS_MAX, Math.max(RADIUS_MIN, state.radius * factor));
  return { ...state, radius };
}
