"""Image and video prediction pipelines over a trained checkpoint.

Image flow: generate the response once, build conditions, decode the
global pass and every fused sub pass, drop slots under the confidence
threshold, binarize at logit zero, then Hungarian-align the union of sub
masks to the global masks to attach sub-category labels. Every emitted
mask comes from the global pass; sub passes only contribute labels.

Video flow: concepts are generated once from the first frame and cached;
frames are detected independently and associated greedily by IoU into
tracks whose label is fixed at spawn.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import BinaryMask, RleMask, hungarian_assign, mask_iou, rle_decode, rle_encode
from .interface import SpanParseError, build_conditions, extract_spans, is_abstention
from .lm import TokenSequence, build_sequence
from .shapeworld import Scene, VideoClip
from .training import ConceptSegModel, UsageError, load_model

DEFAULT_THRESHOLD = 0.7
TRACK_MATCH_IOU = 0.3
TRACK_RETIRE_AFTER = 8
LABEL_FALLBACK_IOU = 0.1
UNSPECIFIED_LABEL = "unspecified"


class InferenceError(RuntimeError):
    def __init__(self, message: str, response_text: str):
        super().__init__(f"{message}; raw response: {response_text!r}")
        self.response_text = response_text


@dataclass
class LabeledMask:
    mask: BinaryMask
    confidence: float
    label: str
    sub_index: int | None
    slot_index: int


@dataclass
class InferenceResult:
    response_text: str
    set_concept: str | None
    labeled_masks: list[LabeledMask]
    abstained: bool

    def __post_init__(self) -> None:
        if self.abstained and self.labeled_masks:
            raise ValueError("an abstained result cannot carry masks")


@dataclass
class TrackState:
    track_id: int
    last_mask: BinaryMask
    last_confidence: float
    frames_since_seen: int
    label: str


@dataclass
class TrackedMask:
    track_id: int
    mask: LabeledMask


def union_align(
    m0: list[LabeledMask], union_members: list[tuple[BinaryMask, int, str]]
) -> list[LabeledMask]:
    """Attach sub labels to global masks by min-cost (1 - IoU) matching.

    `union_members` holds (mask, sub index, label) from the retained sub
    passes. Unmatched global masks fall back to their best-overlap label
    when IoU >= 0.1, else stay unspecified.
    """
    if not m0:
        return []
    if union_members:
        iou = np.zeros((len(m0), len(union_members)))
        for i, lm in enumerate(m0):
            for j, (mask, _, _) in enumerate(union_members):
                iou[i, j] = mask_iou(lm.mask, mask)
        assignment = hungarian_assign(1.0 - iou)
        for i, j in assignment.pairs:
            m0[i].label = union_members[j][2]
            m0[i].sub_index = union_members[j][1]
        matched = {i for i, _ in assignment.pairs}
        for i, lm in enumerate(m0):
            if i in matched:
                continue
            j_best = int(np.argmax(iou[i]))
            if iou[i, j_best] >= LABEL_FALLBACK_IOU:
                lm.label = union_members[j_best][2]
                lm.sub_index = union_members[j_best][1]
    return m0


def single_target_select(result: InferenceResult) -> BinaryMask:
    """Highest-confidence mask; ties prefer low sub_index, then early slot."""
    if result.abstained:
        raise UsageError("cannot select a target from an abstained result")
    if not result.labeled_masks:
        raise UsageError("result has no masks above threshold")
    best = min(
        result.labeled_masks,
        key=lambda lm: (
            -lm.confidence,
            lm.sub_index if lm.sub_index is not None else float("inf"),
            lm.slot_index,
        ),
    )
    return best.mask


def _to_image_tensor(image) -> torch.Tensor:
    if isinstance(image, Scene):
        image = image.image
    if isinstance(image, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32) / 255.0)
    return image


class ConceptPipeline:
    """Stateful wrapper binding a trained model to the inference contracts."""

    def __init__(self, model: ConceptSegModel, vocab, mode: str = "concept",
                 max_response_len: int = 96):
        self.model = model
        self.vocab = vocab
        self.mode = mode
        self.max_response_len = max_response_len
        self.generation_calls = 0
        torch.use_deterministic_algorithms(True)
        model.eval()

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "ConceptPipeline":
        model, vocab, payload = load_model(path)
        return cls(model, vocab, mode=payload["mode"])

    # --- language side ------------------------------------------------------

    def _generate(self, image_t: torch.Tensor, query_text: str) -> tuple[TokenSequence, str]:
        prompt_ids = self.vocab.encode(query_text) + [self.vocab.asst_id]
        cfg = self.model.lm_config
        budget = min(self.max_response_len, cfg.context - cfg.n_patches - len(prompt_ids))
        out, _truncated = self.model.lm.generate(self.vocab, image_t, prompt_ids,
                                                 max_len=budget)
        self.generation_calls += 1
        seq = build_sequence(self.model.lm_config.n_patches, prompt_ids, out, self.vocab.pad_id)
        return seq, self.vocab.decode(out)

    def _conditions(self, seq: TokenSequence, image_t: torch.Tensor, response_text: str):
        with torch.no_grad():
            _, hidden = self.model.lm.forward_sequence(seq, image_t)
            try:
                return build_conditions(seq, hidden, self.vocab, self.model.projector,
                                        self.model.fuser)
            except SpanParseError as exc:
                raise InferenceError(str(exc), response_text) from exc

    # --- detection ----------------------------------------------------------

    def _detect_concept(self, features: torch.Tensor, conds, threshold: float) -> list[LabeledMask]:
        """One global pass plus one pass per fused sub condition."""
        with torch.no_grad():
            stack = torch.stack([conds.global_cond.values] + [c.values for c in conds.sub_conds])
            mask_logits, score_logits = self.model.decoder.decode_batch(
                features.expand(stack.shape[0], -1, -1, -1), stack
            )
            scores = torch.sigmoid(score_logits)
        m0: list[LabeledMask] = []
        for slot in range(mask_logits.shape[1]):
            conf = float(scores[0, slot])
            if conf < threshold:
                continue
            m0.append(LabeledMask(
                mask=BinaryMask((mask_logits[0, slot] > 0).numpy()),
                confidence=conf, label=UNSPECIFIED_LABEL, sub_index=None, slot_index=slot,
            ))
        union_members: list[tuple[BinaryMask, int, str]] = []
        for s in range(1, stack.shape[0]):
            label = conds.sub_labels[s - 1]
            for slot in range(mask_logits.shape[1]):
                if float(scores[s, slot]) < threshold:
                    continue
                union_members.append(
                    (BinaryMask((mask_logits[s, slot] > 0).numpy()), s - 1, label)
                )
        return union_align(m0, union_members)

    def _detect_seg(self, features: torch.Tensor, seq: TokenSequence,
                    hidden: torch.Tensor, threshold: float) -> list[LabeledMask]:
        """Baseline: one independent mask per emitted [SEG] token."""
        positions = [i for i in seq.positions("response") if seq.ids[i] == self.vocab.seg_id]
        if not positions:
            return []
        with torch.no_grad():
            states = torch.stack([hidden[p] for p in positions])
            conds = self.model.projector(states)
            mask_logits, score_logits = self.model.decoder.decode_single_batch(
                features.expand(len(positions), -1, -1, -1), conds
            )
            scores = torch.sigmoid(score_logits)
        out = []
        for t in range(len(positions)):
            conf = float(scores[t])
            if conf < threshold:
                continue
            out.append(LabeledMask(
                mask=BinaryMask((mask_logits[t] > 0).numpy()),
                confidence=conf, label=UNSPECIFIED_LABEL, sub_index=None, slot_index=t,
            ))
        return out

    # --- public entry points --------------------------------------------------

    def segment_image(self, image, query_text: str,
                      threshold: float = DEFAULT_THRESHOLD) -> InferenceResult:
        image_t = _to_image_tensor(image)
        seq, response_text = self._generate(image_t, query_text)
        if is_abstention(seq, self.vocab):
            return InferenceResult(response_text=response_text, set_concept=None,
                                   labeled_masks=[], abstained=True)
        with torch.no_grad():
            features = self.model.encoder(image_t.unsqueeze(0))
        if self.mode == "seg_token":
            with torch.no_grad():
                _, hidden = self.model.lm.forward_sequence(seq, image_t)
            masks = self._detect_seg(features, seq, hidden, threshold)
            return InferenceResult(response_text=response_text, set_concept=None,
                                   labeled_masks=masks, abstained=False)
        conds = self._conditions(seq, image_t, response_text)
        if conds.abstained:
            return InferenceResult(response_text=response_text, set_concept=None,
                                   labeled_masks=[], abstained=True)
        try:
            spans = extract_spans(seq, self.vocab)
        except SpanParseError as exc:
            raise InferenceError(str(exc), response_text) from exc
        masks = self._detect_concept(features, conds, threshold)
        return InferenceResult(response_text=response_text, set_concept=spans[0].text,
                               labeled_masks=masks, abstained=False)

    def segment_video(self, clip: VideoClip, query_text: str,
                      threshold: float = DEFAULT_THRESHOLD) -> list[list[TrackedMask]]:
        """Detect-and-track: one concept generation per clip, greedy IoU links."""
        first = _to_image_tensor(clip.frames[0])
        seq, response_text = self._generate(first, query_text)
        if is_abstention(seq, self.vocab):
            return [[] for _ in clip.frames]
        if self.mode == "seg_token":
            cached = None
            with torch.no_grad():
                _, hidden = self.model.lm.forward_sequence(seq, first)
        else:
            cached = self._conditions(seq, first, response_text)
            if cached.abstained:
                return [[] for _ in clip.frames]

        tracks: list[TrackState] = []
        next_id = 1
        out: list[list[TrackedMask]] = []
        for frame in clip.frames:
            image_t = _to_image_tensor(frame)
            with torch.no_grad():
                features = self.model.encoder(image_t.unsqueeze(0))
            if self.mode == "seg_token":
                detections = self._detect_seg(features, seq, hidden, threshold)
            else:
                detections = self._detect_concept(features, cached, threshold)
            emitted, next_id = self._associate(detections, tracks, next_id)
            out.append(emitted)
        return out

    def _associate(self, detections: list[LabeledMask], tracks: list[TrackState],
                   next_id: int) -> tuple[list[TrackedMask], int]:
        """Greedy descending-IoU matching; spawn on miss, retire stale tracks."""
        emitted: list[TrackedMask] = []
        matched_dets: set[int] = set()
        if detections and tracks:
            iou = np.zeros((len(detections), len(tracks)))
            for i, det in enumerate(detections):
                for j, tr in enumerate(tracks):
                    iou[i, j] = mask_iou(det.mask, tr.last_mask)
            while iou.size:
                i, j = np.unravel_index(int(np.argmax(iou)), iou.shape)
                if iou[i, j] < TRACK_MATCH_IOU:
                    break
                tr = tracks[j]
                tr.last_mask = detections[i].mask
                tr.last_confidence = detections[i].confidence
                tr.frames_since_seen = 0
                matched_dets.add(int(i))
                emitted.append(TrackedMask(track_id=tr.track_id, mask=detections[i]))
                iou[i, :] = -1.0
                iou[:, j] = -1.0
        for i, det in enumerate(detections):
            if i in matched_dets:
                continue
            state = TrackState(track_id=next_id, last_mask=det.mask,
                               last_confidence=det.confidence, frames_since_seen=0,
                               label=det.label)
            next_id += 1
            tracks.append(state)
            emitted.append(TrackedMask(track_id=state.track_id, mask=det))
        emitted_ids = {e.track_id for e in emitted}
        for tr in list(tracks):
            if tr.track_id in emitted_ids:
                continue
            tr.frames_since_seen += 1
            if tr.frames_since_seen > TRACK_RETIRE_AFTER:
                tracks.remove(tr)
        emitted.sort(key=lambda e: e.track_id)
        return emitted, next_id


# --- prediction files --------------------------------------------------------

def _mask_record(lm: LabeledMask, track_id: int | None = None, frame: int | None = None) -> dict:
    rec = {
        "rle": rle_encode(lm.mask).to_json(),
        "confidence": lm.confidence,
        "label": lm.label,
        "sub_index": lm.sub_index,
        "slot_index": lm.slot_index,
    }
    if track_id is not None:
        rec["track_id"] = track_id
    if frame is not None:
        rec["frame"] = frame
    return rec


def result_record(sample_id: int, result: InferenceResult) -> dict:
    return {
        "sample_id": sample_id,
        "response": result.response_text,
        "set_concept": result.set_concept,
        "abstained": result.abstained,
        "masks": [_mask_record(lm) for lm in result.labeled_masks],
    }


def video_record(sample_id: int, response_text: str, frames: list[list[TrackedMask]]) -> dict:
    masks = []
    for f, emitted in enumerate(frames):
        for tm in emitted:
            masks.append(_mask_record(tm.mask, track_id=tm.track_id, frame=f))
    return {"sample_id": sample_id, "response": response_text, "set_concept": None,
            "abstained": not masks, "masks": masks}


def write_predictions(records: list[dict], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_predictions(path: str | Path) -> list[dict]:
    with Path(path).open("r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def record_masks(rec: dict) -> list[BinaryMask]:
    return [rle_decode(RleMask.from_json(m["rle"])) for m in rec["masks"]]
