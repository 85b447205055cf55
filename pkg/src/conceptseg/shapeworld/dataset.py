"""Line-delimited dataset files: one JSON header, then one record per sample.

Images are never stored; scenes and clips re-render deterministically from
their seed plus the header's generation config. Ground-truth masks for the
first frame are stored as RLE so files are self-describing for evaluation.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from ..core import RleMask, rle_encode
from .queries import HierAnnotation, Predicate, SceneQuery
from .scenes import GenConfig, GenerationError, Scene, generate_scene
from .video import VideoClip, generate_clip, _simulate

FORMAT_VERSION = 1


class ParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class Sample:
    sample_id: int
    seed: int
    kind: str
    query: SceneQuery
    annotation: HierAnnotation
    masks: dict[int, RleMask]
    n_frames: int | None = None
    velocities: tuple[tuple[int, int], ...] | None = None

    @property
    def is_video(self) -> bool:
        return self.n_frames is not None


@dataclass
class Dataset:
    config: GenConfig
    samples: list[Sample]


def _sample_to_json(s: Sample) -> dict:
    rec = {
        "sample_id": s.sample_id,
        "seed": s.seed,
        "kind": s.kind,
        "query_text": s.query.text,
        "predicate": s.query.predicate.to_json(),
        "set_concept": s.annotation.set_concept,
        "sub_concepts": [
            {"phrase": p, "instance_ids": list(ids)} for p, ids in s.annotation.sub_concepts
        ],
        "response_text": s.annotation.response_text,
        "masks": {str(k): v.to_json() for k, v in sorted(s.masks.items())},
    }
    if s.is_video:
        rec["clip"] = {"n_frames": s.n_frames, "velocities": [list(v) for v in s.velocities]}
    return rec


def _sample_from_json(rec: dict) -> Sample:
    ann = HierAnnotation(
        set_concept=rec["set_concept"],
        sub_concepts=tuple((g["phrase"], tuple(g["instance_ids"])) for g in rec["sub_concepts"]),
        response_text=rec["response_text"],
    )
    query = SceneQuery(text=rec["query_text"], kind=rec["kind"],
                       predicate=Predicate.from_json(rec["predicate"]))
    clip = rec.get("clip")
    return Sample(
        sample_id=rec["sample_id"],
        seed=rec["seed"],
        kind=rec["kind"],
        query=query,
        annotation=ann,
        masks={int(k): RleMask.from_json(v) for k, v in rec["masks"].items()},
        n_frames=None if clip is None else clip["n_frames"],
        velocities=None if clip is None else tuple(tuple(v) for v in clip["velocities"]),
    )


def write_dataset(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as f:
        header = {"format_version": FORMAT_VERSION, "config": dataclasses.asdict(dataset.config)}
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for s in dataset.samples:
            f.write(json.dumps(_sample_to_json(s), sort_keys=True) + "\n")


def _config_from_json(obj: dict) -> GenConfig:
    return GenConfig.from_json(obj)


def read_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    config: GenConfig | None = None
    samples = []
    with path.open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                if config is None:
                    config = _config_from_json(rec["config"])
                else:
                    samples.append(_sample_from_json(rec))
            except (KeyError, ValueError, TypeError) as exc:
                raise ParseError(str(exc), line_no) from exc
    if config is None:
        raise ParseError("missing header", 1)
    return Dataset(config=config, samples=samples)


def scene_for(sample: Sample, config: GenConfig) -> Scene:
    return generate_scene(sample.seed, config)


def rebuild_clip(sample: Sample, config: GenConfig) -> VideoClip:
    """Reconstruct the clip a video record was generated from."""
    if not sample.is_video:
        raise ValueError("sample is not a video record")
    base = generate_scene(sample.seed, config)
    per_frame = _simulate(base, sample.velocities, sample.n_frames)
    frames = tuple(
        Scene(height=base.height, width=base.width, instances=instances, seed=sample.seed)
        for instances in per_frame
    )
    return VideoClip(frames=frames, velocities=sample.velocities, seed=sample.seed)


def generate_dataset(
    root_seed: int, count: int, config: GenConfig | None = None, video: bool = False
) -> Dataset:
    """Generate `count` samples with per-sample seed streams off `root_seed`.

    Placement failures advance a retry salt so the output is still a pure
    function of (root_seed, count, config).
    """
    config = config or GenConfig()
    from .queries import generate_query
    from .scenes import visible_masks

    samples: list[Sample] = []
    for i in range(count):
        for attempt in range(64):
            seed = root_seed * 1_000_003 + i * 64 + attempt
            try:
                if video:
                    clip, query, annotation = generate_clip(seed, config)
                    scene = clip.frames[0]
                else:
                    scene = generate_scene(seed, config)
                    query, annotation = generate_query(scene, seed, config)
                break
            except GenerationError:
                continue
        else:
            raise GenerationError(f"sample {i}: no placeable scene in 64 attempts")
        vis = visible_masks(scene)
        masks = {iid: rle_encode(vis[iid]) for iid in annotation.selected_ids}
        samples.append(
            Sample(
                sample_id=i,
                seed=seed,
                kind=query.kind,
                query=query,
                annotation=annotation,
                masks=masks,
                n_frames=clip.n_frames if video else None,
                velocities=clip.velocities if video else None,
            )
        )
    return Dataset(config=config, samples=samples)
