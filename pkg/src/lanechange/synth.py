"""Deterministic synthetic highway corpus.

A car drives a three-lane road, sampled at 10 frames per second.  Lane
keeping alternates with lane changes; during a change the lateral position
follows a truncated logistic curve from one lane centre to the next.  Each
frame is rendered as a flat-shaded perspective view (sky, grass, grey road,
solid edge lines, dashed lane lines).  The camera yaws with the car, so the
vanishing point slides opposite to the lateral velocity.  IMU channels come
from the same trajectory: steering follows lateral velocity, lateral
acceleration follows its derivative, both with sensor noise.

All randomness comes from :class:`~lanechange.rng.SplitMix64` streams
derived from the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import FrameRecord, Manifest, class_counts, write_manifest, write_ppm
from .rng import SplitMix64

FPS = 10
LANES = (-1.0, 0.0, 1.0)  # lane centres, in lane widths; negative is left
LOGISTIC_K = 4.0
LANE_WIDTH_M = 3.5
G = 9.81

SKY = np.array([150, 180, 220], dtype=np.float64)
GRASS = np.array([70, 115, 60], dtype=np.float64)
ROAD = np.array([95, 95, 100], dtype=np.float64)
PAINT = np.array([235, 235, 225], dtype=np.float64)


@dataclass(frozen=True)
class SynthConfig:
    frames: int = 1000
    width: int = 160
    height: int = 64
    seed: int = 0
    maneuver_rate: float = 0.25  # lane changes started per second of lane keeping
    noise_level: float = 1.0
    min_size: int = 32

    def validate(self) -> None:
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        if self.width < self.min_size or self.height < self.min_size:
            raise ValueError(
                f"image {self.width}x{self.height} is below the {self.min_size}-pixel minimum"
                " needed to survive five 2x2 poolings"
            )
        if self.maneuver_rate < 0 or self.noise_level < 0:
            raise ValueError("maneuver_rate and noise_level must be non-negative")


@dataclass
class Trajectory:
    position: np.ndarray  # lateral offset, lane widths
    velocity: np.ndarray  # lane widths / s
    accel: np.ndarray  # lane widths / s^2
    label: np.ndarray


def _logistic_profile(tau: np.ndarray):
    """Position, d/dtau and d2/dtau2 of the truncated logistic ramp from 0 to 1."""
    k = LOGISTIC_K
    lo, hi = 1 / (1 + math.exp(k / 2)), 1 / (1 + math.exp(-k / 2))
    z = hi - lo
    s = 1 / (1 + np.exp(-k * (tau - 0.5)))
    return (s - lo) / z, k * s * (1 - s) / z, k * k * s * (1 - s) * (1 - 2 * s) / z


def simulate_trajectory(frames: int, maneuver_rate: float, rng: SplitMix64) -> Trajectory:
    t = np.arange(frames) / FPS
    base = np.zeros(frames)
    vel = np.zeros(frames)
    acc = np.zeros(frames)
    label = np.zeros(frames, dtype=np.int64)
    lane = 1  # index into LANES
    now = 0.0
    end = frames / FPS
    while now < end:
        if maneuver_rate <= 0:
            keep = math.inf
        else:
            keep = (0.5 + rng.uniform()) / maneuver_rate
        sel = (t >= now) & (t < now + keep)
        base[sel] = LANES[lane]
        now += keep
        if now >= end:
            break
        duration = 3.0 + 2.0 * rng.uniform()
        if lane == 0:
            step = 1
        elif lane == len(LANES) - 1:
            step = -1
        else:
            step = -1 if rng.uniform() < 0.5 else 1
        sel = (t >= now) & (t < now + duration)
        tau = (t[sel] - now) / duration
        s, ds, dds = _logistic_profile(tau)
        base[sel] = LANES[lane] + step * s
        vel[sel] = step * ds / duration
        acc[sel] = step * dds / duration**2
        label[sel] = step  # -1 while moving left, +1 while moving right
        lane += step
        now += duration
    # slow lane-keeping wander on top of everything
    phase = 2 * math.pi * rng.uniform()
    w = 2 * math.pi / 7.0
    amp = 0.03
    return Trajectory(
        base + amp * np.sin(w * t + phase),
        vel + amp * w * np.cos(w * t + phase),
        acc - amp * w * w * np.sin(w * t + phase),
        label,
    )


def render_frame(
    height: int,
    width: int,
    position: float,
    velocity: float,
    time_s: float,
    noise: np.ndarray | None = None,
    brightness: float = 1.0,
) -> np.ndarray:
    """Flat-shaded road view as uint8 3 x H x W."""
    horizon = int(round(0.35 * height))
    img = np.empty((height, width, 3), dtype=np.float64)
    img[:horizon] = SKY
    rows = np.arange(horizon, height)
    z = ((rows - horizon + 0.5) / (height - horizon))[:, None]  # 0 far .. 1 near
    cols = np.arange(width)[None, :] + 0.5
    cx = width / 2
    scale = 0.42 * width
    vanish = cx - 0.5 * width * velocity  # yaw toward the direction of travel

    def screen_x(lateral):
        return vanish * (1 - z) + z * (cx + scale * (lateral - position))

    ground = np.broadcast_to(GRASS, (len(rows), width, 3)).copy()
    left_edge, right_edge = screen_x(-1.6), screen_x(1.6)
    on_road = (cols >= left_edge) & (cols <= right_edge)
    ground[on_road] = ROAD
    half = np.maximum(0.5, 0.05 * scale * z)
    dash = ((6.0 / np.maximum(z, 1e-3) + 9.0 * time_s) % 4.0) < 2.0
    for lateral, dashed in ((-1.5, False), (-0.5, True), (0.5, True), (1.5, False)):
        paint = np.abs(cols - screen_x(lateral)) <= half
        if dashed:
            paint &= dash
        ground[paint] = PAINT
    img[horizon:] = ground
    img *= brightness
    if noise is not None:
        img += noise.reshape(height, width, 3)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8).transpose(2, 0, 1)


def imu_readings(traj: Trajectory, noise_level: float, rng: SplitMix64) -> np.ndarray:
    """Six channels: brake N, gas N, speed km/h, steering deg, long. accel G, lat. accel G."""
    n = len(traj.label)
    t = np.arange(n) / FPS
    e = rng.normal(6 * n).reshape(6, n) * noise_level
    brake = np.abs(3.0 * e[0])
    gas = np.maximum(0.0, 25.0 + 5.0 * e[1])
    speed = 100.0 + 3.0 * np.sin(2 * math.pi * t / 60.0) + 1.0 * e[2]
    steering = 25.0 * traj.velocity + 6.0 * e[3]
    along = 0.01 * e[4]
    alat = traj.accel * LANE_WIDTH_M / G + 0.04 * e[5]
    return np.stack([brake, gas, speed, steering, along, alat], axis=1)


def generate_synthetic(config: SynthConfig, out_dir) -> Manifest:
    """Render ``config.frames`` frames into ``out_dir`` and write ``manifest.csv``."""
    config.validate()
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from None
    root = SplitMix64(config.seed)
    traj_rng, imu_rng, pix_rng = root.split(), root.split(), root.split()
    traj = simulate_trajectory(config.frames, config.maneuver_rate, traj_rng)
    imus = imu_readings(traj, config.noise_level, imu_rng)
    npix = config.height * config.width * 3
    records = []
    for i in range(config.frames):
        noise = pix_rng.normal(npix) * (6.0 * config.noise_level)
        brightness = 1.0 + 0.08 * config.noise_level * pix_rng.normal()
        img = render_frame(
            config.height, config.width, traj.position[i], traj.velocity[i], i / FPS, noise, brightness
        )
        fid = f"{i:06d}"
        write_ppm(out / "images" / f"{fid}.ppm", img)
        records.append(FrameRecord(fid, Path("images") / f"{fid}.ppm", imus[i], int(traj.label[i])))
    path = out / "manifest.csv"
    write_manifest(path, records)
    return Manifest(path, [FrameRecord(r.frame_id, out / r.image, r.imu, r.label) for r in records])


def summarize(manifest: Manifest) -> dict[int, int]:
    return class_counts(r.label for r in manifest.records)
