"""Video clips: linear motion with wall bounce over a fixed instance set."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .queries import HierAnnotation, SceneQuery, generate_query
from .scenes import GenConfig, GenerationError, Scene, ShapeInstance, generate_scene, _MOTION_STREAM

_MIN_MOTION_PIXELS = 3


@dataclass(frozen=True)
class VideoClip:
    """Frames share instance ids; attributes are constant across frames."""

    frames: tuple[Scene, ...]
    velocities: tuple[tuple[int, int], ...]  # indexed by instance id
    seed: int

    @property
    def n_frames(self) -> int:
        return len(self.frames)


def motion_label(displacement: tuple[int, int]) -> str:
    """Dominant direction of a net displacement; 'still' below the motion floor."""
    dr, dc = displacement
    if max(abs(dr), abs(dc)) < _MIN_MOTION_PIXELS:
        return "still"
    if abs(dc) >= abs(dr):
        return "left" if dc < 0 else "right"
    return "up" if dr < 0 else "down"


def _bounce(pos: int, vel: int, lo: int, hi: int) -> tuple[int, int]:
    pos += vel
    if pos < lo:
        return 2 * lo - pos, -vel
    if pos > hi:
        return 2 * hi - pos, -vel
    return pos, vel


def _simulate(base: Scene, velocities, n_frames: int) -> list[tuple[ShapeInstance, ...]]:
    per_frame = [base.instances]
    state = [(inst.center, velocities[inst.id]) for inst in base.instances]
    for _ in range(1, n_frames):
        moved = []
        new_state = []
        for inst, ((r, c), (vr, vc)) in zip(base.instances, state):
            r, vr = _bounce(r, vr, inst.extent, base.height - 1 - inst.extent)
            c, vc = _bounce(c, vc, inst.extent, base.width - 1 - inst.extent)
            moved.append(ShapeInstance(id=inst.id, shape=inst.shape, color=inst.color,
                                       size_class=inst.size_class, center=(r, c), extent=inst.extent))
            new_state.append(((r, c), (vr, vc)))
        per_frame.append(tuple(moved))
        state = new_state
    return per_frame


def _paths_disjoint(per_frame, min_gap: int) -> bool:
    for instances in per_frame:
        for i, a in enumerate(instances):
            for b in instances[i + 1:]:
                dr = a.center[0] - b.center[0]
                dc = a.center[1] - b.center[1]
                if (dr * dr + dc * dc) ** 0.5 < a.extent + b.extent + min_gap:
                    return False
    return True


def clip_displacements(clip: VideoClip) -> dict[int, tuple[int, int]]:
    """Net (dr, dc) from first to last frame, per instance id."""
    first = {i.id: i.center for i in clip.frames[0].instances}
    last = {i.id: i.center for i in clip.frames[-1].instances}
    return {k: (last[k][0] - first[k][0], last[k][1] - first[k][1]) for k in first}


def _draw_velocities(rng: np.random.Generator, n: int, config: GenConfig):
    out = []
    for _ in range(n):
        if rng.random() < config.still_rate:
            out.append((0, 0))
            continue
        speed = int(rng.integers(1, config.max_speed + 1))
        direction = int(rng.integers(4))
        out.append([(0, -speed), (0, speed), (-speed, 0), (speed, 0)][direction])
    return tuple(out)


def generate_clip(
    seed: int, config: GenConfig | None = None
) -> tuple[VideoClip, SceneQuery, HierAnnotation]:
    """Deterministic clip plus one clip-level query and annotation."""
    config = config or GenConfig()
    base = generate_scene(seed, config)
    rng = np.random.default_rng([seed, _MOTION_STREAM])
    n_frames = int(rng.integers(config.min_frames, config.max_frames + 1))

    for _ in range(config.max_velocity_tries):
        velocities = _draw_velocities(rng, len(base.instances), config)
        per_frame = _simulate(base, velocities, n_frames)
        if not config.disjoint_paths or _paths_disjoint(per_frame, config.min_gap):
            break
    else:
        raise GenerationError(f"no disjoint trajectory set found for seed {seed}")

    frames = tuple(
        Scene(height=base.height, width=base.width, instances=instances, seed=seed)
        for instances in per_frame
    )
    clip = VideoClip(frames=frames, velocities=velocities, seed=seed)
    query, annotation = generate_query(base, seed, config, displacements=clip_displacements(clip))
    return clip, query, annotation
