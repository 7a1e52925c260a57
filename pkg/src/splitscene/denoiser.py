"""Pluggable denoiser boundary: in-process mock and subprocess protocol.

The orchestrator only ever sees `predict(x_t, condition, relative pose,
timestep, target, condition index) -> noise`. The closed-form mock drives
every verification path: its prediction makes the deterministic update
land exactly on a chosen target latent. The subprocess transport speaks
raw float32 tensors over stdio, each prefixed with a 16-byte header of
four little-endian u32 words: rank, then three dims (unused dims are 1).
"""

from __future__ import annotations

import struct
import subprocess
import sys
from dataclasses import dataclass

import numpy as np

_HEADER = struct.Struct("<4I")


class DenoiserError(RuntimeError):
    pass


@dataclass
class NoiseSchedule:
    """beta_t for t = 1..T; alpha_bar(0) is defined as 1."""

    betas: np.ndarray

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.ndim != 1 or self.betas.size < 1:
            raise ValueError("schedule needs at least one beta")
        if ((self.betas <= 0) | (self.betas >= 1)).any():
            raise ValueError("betas must lie strictly inside (0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)
        if not (np.diff(self.alpha_bars) < 0).all():
            raise ValueError("alpha_bar must be strictly decreasing")

    @property
    def timesteps(self) -> int:
        return int(self.betas.size)

    def alpha(self, t: int) -> float:
        self._check(t)
        return float(self.alphas[t - 1])

    def beta(self, t: int) -> float:
        self._check(t)
        return float(self.betas[t - 1])

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check(t)
        return float(self.alpha_bars[t - 1])

    def _check(self, t: int) -> None:
        if not 1 <= t <= self.timesteps:
            raise ValueError(f"timestep {t} outside 1..{self.timesteps}")

    @staticmethod
    def linear(timesteps: int = 50, beta_start: float = 1e-4,
               beta_end: float = 0.02) -> "NoiseSchedule":
        return NoiseSchedule(np.linspace(beta_start, beta_end, timesteps))


class MockTargetDenoiser:
    """Closed-form denoiser aiming each target at a fixed latent.

    epsilon = (x_t - sqrt(alpha_bar_t) * L) / sqrt(1 - alpha_bar_t), so the
    deterministic update converges to L exactly by t = 0.
    """

    concurrent = True

    def __init__(self, target_latents: dict[int, np.ndarray], schedule: NoiseSchedule):
        self.target_latents = {int(k): np.asarray(v, dtype=np.float64)
                               for k, v in target_latents.items()}
        self.schedule = schedule

    def predict(self, x_t, condition, relative_pose, t, *, target, condition_index=0):
        if target not in self.target_latents:
            raise DenoiserError(f"mock has no target latent for view {target}")
        ab = self.schedule.alpha_bar(t)
        lat = self.target_latents[target]
        if lat.shape != np.shape(x_t):
            raise DenoiserError(f"latent shape {lat.shape} != x_t {np.shape(x_t)}")
        return (np.asarray(x_t, dtype=np.float64) - np.sqrt(ab) * lat) / np.sqrt(1.0 - ab)

    def close(self):
        pass


# ---------------------------------------------------------------------------
# tensor framing


def write_tensor(stream, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim > 3:
        raise DenoiserError(f"tensor rank {arr.ndim} > 3 unsupported by the wire format")
    dims = list(arr.shape) + [1] * (3 - arr.ndim)
    stream.write(_HEADER.pack(arr.ndim, *dims))
    stream.write(arr.astype("<f4").tobytes())
    stream.flush()


def read_tensor(stream) -> np.ndarray:
    head = stream.read(_HEADER.size)
    if len(head) == 0:
        raise EOFError("denoiser stream closed")
    if len(head) != _HEADER.size:
        raise DenoiserError(f"short tensor header ({len(head)} bytes)")
    rank, d0, d1, d2 = _HEADER.unpack(head)
    if rank > 3:
        raise DenoiserError(f"tensor rank {rank} > 3")
    dims = [d0, d1, d2][:rank] if rank > 0 else []
    count = int(np.prod(dims)) if dims else 1
    payload = stream.read(count * 4)
    if len(payload) != count * 4:
        raise DenoiserError(f"short tensor payload ({len(payload)}/{count * 4} bytes)")
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return arr.reshape(dims) if dims else arr.reshape(())


class SubprocessDenoiser:
    """Client half of the stdio protocol.

    Handshake: betas, then the target-latent table (count, then id/latent
    pairs). Each request is x_t, condition latent, relative pose (4x4),
    and a meta triple (t, target, condition index); the response is one
    noise tensor of x_t's shape.
    """

    concurrent = False   # one stdio pipe, calls must be serialized

    def __init__(self, command: list[str], schedule: NoiseSchedule,
                 target_latents: dict[int, np.ndarray]):
        try:
            self.proc = subprocess.Popen(command, stdin=subprocess.PIPE,
                                         stdout=subprocess.PIPE)
        except OSError as e:
            raise DenoiserError(f"cannot launch denoiser {command!r}: {e}") from e
        try:
            write_tensor(self.proc.stdin, schedule.betas)
            write_tensor(self.proc.stdin, np.array([len(target_latents)], dtype=np.float32))
            for key in sorted(target_latents):
                write_tensor(self.proc.stdin, np.array([key], dtype=np.float32))
                write_tensor(self.proc.stdin, target_latents[key])
            ack = read_tensor(self.proc.stdout)
            if int(ack.reshape(-1)[0]) != schedule.timesteps:
                raise DenoiserError(f"handshake ack mismatch: {ack}")
        except (EOFError, DenoiserError, BrokenPipeError) as e:
            self.close()
            raise DenoiserError(f"denoiser handshake failed: {e}") from e

    def predict(self, x_t, condition, relative_pose, t, *, target, condition_index=0):
        try:
            write_tensor(self.proc.stdin, x_t)
            write_tensor(self.proc.stdin, condition)
            write_tensor(self.proc.stdin, relative_pose)
            write_tensor(self.proc.stdin,
                         np.array([t, target, condition_index], dtype=np.float32))
            out = read_tensor(self.proc.stdout)
        except (EOFError, DenoiserError, BrokenPipeError) as e:
            raise DenoiserError(f"denoiser call failed at timestep {t} "
                                f"(target {target}, condition {condition_index}): {e}") from e
        if out.shape != np.shape(x_t):
            raise DenoiserError(f"denoiser returned shape {out.shape}, expected {np.shape(x_t)}")
        return out

    def close(self):
        if self.proc.stdin:
            try:
                self.proc.stdin.close()
            except BrokenPipeError:
                pass
        self.proc.wait(timeout=10)


def serve_mock(stdin=None, stdout=None) -> None:
    """Server half: closed-form mock behind the stdio protocol."""
    stdin = stdin or sys.stdin.buffer
    stdout = stdout or sys.stdout.buffer
    betas = read_tensor(stdin)
    schedule = NoiseSchedule(betas)
    n = int(read_tensor(stdin).reshape(-1)[0])
    latents = {}
    for _ in range(n):
        key = int(read_tensor(stdin).reshape(-1)[0])
        latents[key] = read_tensor(stdin)
    mock = MockTargetDenoiser(latents, schedule)
    write_tensor(stdout, np.array([schedule.timesteps], dtype=np.float32))
    while True:
        try:
            x_t = read_tensor(stdin)
        except EOFError:
            return
        cond = read_tensor(stdin)
        pose = read_tensor(stdin)
        meta = read_tensor(stdin).reshape(-1)
        t, target, cidx = int(meta[0]), int(meta[1]), int(meta[2])
        eps = mock.predict(x_t, cond, pose, t, target=target, condition_index=cidx)
        write_tensor(stdout, eps)


if __name__ == "__main__":
    serve_mock()
