/**
 * Interactive picker: orbit the scene, click an object, review its mask
 * and gaussian count, trigger completion and browse the generated views.
 *
 * All rendering happens server-side; this page only displays PNGs and
 * issues the documented API calls. State (view + job id + selection)
 * lives in the URL hash so a refresh resumes cleanly.
 */

import { ApiClient, ApiError, JobStatus, SelectResult } from './api.js';
import { decodeHash, encodeHash, HashState } from './hash.js';
import { pollJob } from './jobs.js';
import { applyDrag, applyScroll } from './orbit.js';

const VIEW_W = 512;
const VIEW_H = 384;
const RENDER_DEBOUNCE_MS = 120;

const client = new ApiClient('');

const el = {
  frame: document.getElementById('frame') as HTMLImageElement,
  overlay: document.getElementById('overlay') as HTMLCanvasElement,
  spinner: document.getElementById('spinner') as HTMLDivElement,
  toast: document.getElementById('toast') as HTMLDivElement,
  card: document.getElementById('instance-card') as HTMLDivElement,
  cardTitle: document.getElementById('card-title') as HTMLSpanElement,
  cardCount: document.getElementById('card-count') as HTMLSpanElement,
  completeBtn: document.getElementById('complete-btn') as HTMLButtonElement,
  jobPanel: document.getElementById('job-panel') as HTMLDivElement,
  jobStatus: document.getElementById('job-status') as HTMLSpanElement,
  gallery: document.getElementById('gallery') as HTMLDivElement,
  download: document.getElementById('download-link') as HTMLAnchorElement,
  instanceList: document.getElementById('instance-list') as HTMLUListElement,
};

let state: HashState = decodeHash(location.hash);
let selected: SelectResult | null = null;
let renderTimer: number | undefined;
let renderInFlight = false;
let renderQueued = false;

function saveHash() {
  history.replaceState(null, '', encodeHash(state));
}

function toast(message: string) {
  el.toast.textContent = message;
  el.toast.classList.add('visible');
  window.setTimeout(() => el.toast.classList.remove('visible'), 4000);
}

function showSpinner(on: boolean) {
  el.spinner.classList.toggle('visible', on);
}

/** One render in flight at a time; a queued request re-fires after. */
function refreshFrame() {
  if (renderInFlight) {
    renderQueued = true;
    return;
  }
  renderInFlight = true;
  showSpinner(true);
  const url = client.renderUrl({
    yaw: state.orbit.yaw,
    pitch: state.orbit.pitch,
    radius: state.orbit.radius > 0 ? state.orbit.radius : undefined,
    w: VIEW_W,
    h: VIEW_H,
  });
  const probe = new Image();
  probe.onload = () => {
    el.frame.src = probe.src;       // keep the last frame until the new one is ready
    renderInFlight = false;
    showSpinner(false);
    if (renderQueued) {
      renderQueued = false;
      refreshFrame();
    }
  };
  probe.onerror = () => {
    renderInFlight = false;
    showSpinner(false);
    toast('render failed: server unreachable');
  };
  probe.src = url;
}

function scheduleRender() {
  saveHash();
  window.clearTimeout(renderTimer);
  renderTimer = window.setTimeout(refreshFrame, RENDER_DEBOUNCE_MS);
}

function clearSelection() {
  selected = null;
  state.selectedInstance = undefined;
  el.card.classList.remove('visible');
  const ctx = el.overlay.getContext('2d')!;
  ctx.clearRect(0, 0, el.overlay.width, el.overlay.height);
  saveHash();
}

function drawOverlay(maskBase64: string) {
  const img = new Image();
  img.onload = () => {
    const ctx = el.overlay.getContext('2d')!;
    ctx.clearRect(0, 0, el.overlay.width, el.overlay.height);
    // tint the mask and blend it at 40% over the rendered frame
    const off = document.createElement('canvas');
    off.width = img.width;
    off.height = img.height;
    const octx = off.getContext('2d')!;
    octx.drawImage(img, 0, 0);
    octx.globalCompositeOperation = 'source-in';
    octx.fillStyle = '#3fa7ff';
    octx.fillRect(0, 0, off.width, off.height);
    ctx.globalAlpha = 0.4;
    ctx.drawImage(off, 0, 0, el.overlay.width, el.overlay.height);
    ctx.globalAlpha = 1.0;
  };
  img.src = 'data:image/png;base64,' + maskBase64;
}

async function handleClick(ev: MouseEvent) {
  const rect = el.frame.getBoundingClientRect();
  const x = Math.floor(((ev.clientX - rect.left) / rect.width) * VIEW_W);
  const y = Math.floor(((ev.clientY - rect.top) / rect.height) * VIEW_H);
  try {
    const result = await client.select({
      yaw: state.orbit.yaw,
      pitch: state.orbit.pitch,
      radius: state.orbit.radius > 0 ? state.orbit.radius : undefined,
      x, y, w: VIEW_W, h: VIEW_H,
    });
    if (result.instance_id === 0) {
      clearSelection();
      return;
    }
    selected = result;
    state.selectedInstance = result.instance_id;
    saveHash();
    el.cardTitle.textContent = `instance ${result.instance_id}`;
    el.cardCount.textContent = `${result.gaussian_count} gaussians`;
    el.card.classList.add('visible');
    el.completeBtn.disabled = false;
    el.completeBtn.title = '';
    drawOverlay(result.mask_png_base64);
  } catch (err) {
    if (err instanceof ApiError && err.status === 409) {
      toast('features are untrained: run `splitscene fit` first');
    } else {
      toast(String(err));
    }
  }
}

function showJobResult(status: JobStatus) {
  el.jobStatus.textContent = status.status;
  if (status.status === 'failed') {
    el.jobPanel.classList.add('failed');
    toast(`completion failed: ${status.error ?? 'unknown error'}`);
    return;
  }
  if (status.status !== 'done' || !status.result) return;
  el.gallery.innerHTML = '';
  for (const url of status.result.generated) {
    const img = document.createElement('img');
    img.src = url;
    img.className = 'gallery-thumb';
    el.gallery.appendChild(img);
  }
  if (status.result.refined_splat_url) {
    el.download.href = status.result.refined_splat_url;
    el.download.classList.add('visible');
  }
}

async function trackJob(jobId: string) {
  state.jobId = jobId;
  saveHash();
  el.jobPanel.classList.remove('failed');
  el.jobPanel.classList.add('visible');
  el.jobStatus.textContent = 'queued';
  try {
    const status = await pollJob(client, jobId, {
      intervalMs: 1500,
      onTick: (s) => (el.jobStatus.textContent = s.status),
    });
    showJobResult(status);
  } catch (err) {
    toast(String(err));
  }
}

async function handleComplete() {
  if (!selected) return;
  try {
    el.completeBtn.disabled = true;
    const jobId = await client.startComplete(selected.instance_id);
    await trackJob(jobId);
  } catch (err) {
    if (err instanceof ApiError && err.status === 409) {
      el.completeBtn.disabled = true;
      el.completeBtn.title = 'another completion job is already running';
      toast('another completion job is already running');
    } else {
      toast(String(err));
    }
  } finally {
    el.completeBtn.disabled = selected === null;
  }
}

async function loadInstances() {
  try {
    const list = await client.instances();
    el.instanceList.innerHTML = '';
    for (const info of list) {
      const li = document.createElement('li');
      li.textContent =
        `#${info.id}: ${info.gaussian_count} gaussians, ${info.frames} masks` +
        (info.trained ? '' : ' (untrained)');
      el.instanceList.appendChild(li);
    }
  } catch {
    toast('could not list instances');
  }
}

function wireInput() {
  let dragging = false;
  let lastX = 0;
  let lastY = 0;
  let moved = false;
  el.overlay.addEventListener('mousedown', (ev) => {
    dragging = true;
    moved = false;
    lastX = ev.clientX;
    lastY = ev.clientY;
  });
  window.addEventListener('mousemove', (ev) => {
    if (!dragging) return;
    const dx = ev.clientX - lastX;
    const dy = ev.clientY - lastY;
    if (Math.abs(dx) + Math.abs(dy) > 2) moved = true;
    lastX = ev.clientX;
    lastY = ev.clientY;
    state.orbit = applyDrag(state.orbit, dx, dy);
    scheduleRender();
  });
  window.addEventListener('mouseup', (ev) => {
    if (dragging && !moved) handleClick(ev);
    dragging = false;
  });
  el.overlay.addEventListener('wheel', (ev) => {
    ev.preventDefault();
    state.orbit = applyScroll(state.orbit, ev.deltaY);
    scheduleRender();
  });
  el.completeBtn.addEventListener('click', handleComplete);
}

function boot() {
  el.overlay.width = VIEW_W;
  el.overlay.height = VIEW_H;
  wireInput();
  loadInstances();
  refreshFrame();
  if (state.jobId) {
    // resume polling after a refresh mid-job
    trackJob(state.jobId);
  }
}

boot();
