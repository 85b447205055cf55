"""End-to-end optimization of the concept model and the per-token baseline.

One train step: teacher-forced LM forward over [visual, prompt, target
response], language-modeling loss on response positions, concept conditions
pooled from the same hidden states, one decoder pass per concept group,
Hungarian target assignment per pass, and a set loss whose per-slot terms
are mask BCE, soft dice, and objectness BCE. The per-token baseline
replaces the concept passes with one single-mask decode per [SEG] token,
bound to ground-truth instances in annotation emission order.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .core import Assignment, BinaryMask, hungarian_assign
from .decoder import DecoderConfig, MaskPrediction, MaskSetDecoder, VisualEncoder
from .interface import ConceptFuser, ConditionProjector, extract_spans
from .lm import LmConfig, TinyConceptLM, TokenSequence, Vocabulary, build_sequence, build_vocabulary
from .shapeworld import (
    ABSTAIN_TEXT,
    Dataset,
    GenConfig,
    Sample,
    Scene,
    VideoClip,
    generate_scene,
    rebuild_clip,
    render_gt_masks,
)

LOGIT_CLAMP = 50.0


class UsageError(ValueError):
    pass


class CapacityError(ValueError):
    """More ground-truth targets than decoder slots."""


class NumericAbortError(RuntimeError):
    def __init__(self, message: str, sample_ids: list[int]):
        super().__init__(f"{message}; offending samples {sample_ids}")
        self.sample_ids = sample_ids


class IncompatibilityError(ValueError):
    """Checkpoint config or vocabulary does not match."""


@dataclass(frozen=True)
class LossWeights:
    lm: float = 1.0
    bce: float = 2.0
    dice: float = 2.0
    obj: float = 1.0

    def __post_init__(self) -> None:
        for name, v in dataclasses.asdict(self).items():
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and non-negative")


@dataclass
class TrainSample:
    """A fully materialized supervised unit: tensors, tokens, targets."""

    sample_id: int
    kind: str
    image: torch.Tensor              # (H, W, 3) float32 in [0, 1]
    prompt_ids: list[int]
    response_ids: list[int]          # ends with eos
    gt_subs: list[torch.Tensor]      # one (Gi, H, W) bool tensor per sub group
    sub_labels: list[str]
    augment_branch: str | None = None

    @property
    def gt_global(self) -> torch.Tensor:
        present = [g for g in self.gt_subs if g.shape[0] > 0]
        if not present:
            return torch.zeros((0,) + tuple(self.image.shape[:2]), dtype=torch.bool)
        return torch.cat(present, dim=0)

    def sequence(self, n_patches: int, pad_id: int) -> TokenSequence:
        return build_sequence(n_patches, self.prompt_ids, self.response_ids, pad_id)


# --- torch loss kernels (mirrors of core.losses, batched) -------------------

def _bce_elem(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    z = logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    return z.clamp_min(0) - z * targets + torch.log1p(torch.exp(-z.abs()))

def bce_cost_matrix(mask_logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """(N, H, W) logits x (G, H, W) targets -> (N, G) mean per-pixel BCE."""
    n = mask_logits.shape[0]
    z = mask_logits.reshape(n, -1).clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    t = targets.reshape(targets.shape[0], -1).to(z.dtype)
    base = (z.clamp_min(0) + torch.log1p(torch.exp(-z.abs()))).sum(dim=1, keepdim=True)
    return (base - z @ t.T) / z.shape[1]

def dice_cost_matrix(mask_logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    n = mask_logits.shape[0]
    p = torch.sigmoid(mask_logits.reshape(n, -1))
    t = targets.reshape(targets.shape[0], -1).to(p.dtype)
    inter = p @ t.T
    denom = p.sum(dim=1, keepdim=True) + t.sum(dim=1)
    return 1.0 - (2.0 * inter + 1.0) / (denom + 1.0)

def _dice_pairs(mask_logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    p = torch.sigmoid(mask_logits.flatten(1))
    t = targets.flatten(1).to(p.dtype)
    inter = (p * t).sum(dim=1)
    return 1.0 - (2.0 * inter + 1.0) / (p.sum(dim=1) + t.sum(dim=1) + 1.0)


def match_targets(pred: MaskPrediction, gt: torch.Tensor, weights: LossWeights) -> Assignment:
    """Hungarian assignment of decoder slots to ground-truth masks.

    Cost per (slot, target) = bce_w * BCE + dice_w * Dice - obj_w * log(score).
    """
    g = gt.shape[0]
    if g == 0:
        return Assignment(pairs=(), total_cost=0.0)
    if g > pred.num_slots:
        raise CapacityError(f"{g} targets exceed {pred.num_slots} decoder slots")
    with torch.no_grad():
        cost = (
            weights.bce * bce_cost_matrix(pred.mask_logits, gt)
            + weights.dice * dice_cost_matrix(pred.mask_logits, gt)
            + weights.obj * F.softplus(-pred.score_logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))[:, None]
        )
    return hungarian_assign(cost.double().cpu().numpy())


def set_loss(pred: MaskPrediction, gt: torch.Tensor, assignment: Assignment,
             weights: LossWeights) -> torch.Tensor:
    """Mean over slots: matched slots pay mask BCE + dice + objectness-to-1,
    unmatched slots pay objectness-to-0."""
    n = pred.num_slots
    score = pred.score_logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    obj_target = torch.zeros(n, dtype=pred.mask_logits.dtype, device=score.device)
    total = torch.zeros((), dtype=pred.mask_logits.dtype, device=score.device)
    if assignment.pairs:
        rows = torch.tensor([r for r, _ in assignment.pairs], dtype=torch.long)
        cols = torch.tensor([c for _, c in assignment.pairs], dtype=torch.long)
        obj_target[rows] = 1.0
        matched_logits = pred.mask_logits[rows]
        matched_gt = gt[cols].to(pred.mask_logits.dtype)
        bce = _bce_elem(matched_logits, matched_gt).flatten(1).mean(dim=1)
        dice = _dice_pairs(matched_logits, matched_gt)
        total = total + (weights.bce * bce + weights.dice * dice).sum()
    obj = F.binary_cross_entropy_with_logits(score, obj_target, reduction="sum")
    return (total + weights.obj * obj) / n


def augment_no_target(sample: TrainSample, rng: np.random.Generator, vocab: Vocabulary) -> TrainSample:
    """Half the time, replace the target response with the abstention phrase.

    Either way the decoder target sets stay empty; the kept-concepts branch
    supervises decoder-side abstention, the replaced branch supervises the
    language-side one.
    """
    if sample.kind != "no-target":
        raise UsageError(f"augment_no_target on kind {sample.kind!r}")
    if rng.random() < 0.5:
        sample.response_ids = vocab.encode(ABSTAIN_TEXT) + [vocab.eos_id]
        sample.augment_branch = "abstain"
    else:
        sample.augment_branch = "keep"
    return sample


def sample_video_frames(clip: VideoClip, k: int, rng: np.random.Generator) -> list[int]:
    """k distinct frame indices, uniform without replacement, ascending."""
    if not 1 <= k <= clip.n_frames:
        raise UsageError(f"k={k} out of range for a {clip.n_frames}-frame clip")
    return sorted(int(i) for i in rng.choice(clip.n_frames, size=k, replace=False))


class ConceptSegModel(torch.nn.Module):
    """All learnable parts: LM, condition projector, fuser, encoder, decoder."""

    def __init__(self, lm_config: LmConfig, dec_config: DecoderConfig):
        super().__init__()
        self.lm_config = lm_config
        self.dec_config = dec_config
        self.lm = TinyConceptLM(lm_config)
        self.projector = ConditionProjector(lm_config.width, dec_config.cond_width)
        self.fuser = ConceptFuser(dec_config.cond_width)
        self.encoder = VisualEncoder(dec_config)
        self.decoder = MaskSetDecoder(dec_config)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def scene_image(scene: Scene) -> torch.Tensor:
    return torch.from_numpy(scene.image.astype(np.float32) / 255.0)


def prepare_sample(
    sample: Sample,
    config: GenConfig,
    vocab: Vocabulary,
    mode: str,
    scene: Scene | None = None,
) -> TrainSample:
    """Materialize one dataset record (or one clip frame) for training."""
    if scene is None:
        scene = generate_scene(sample.seed, config)
    global_set, per_sub = render_gt_masks(scene, sample.annotation)
    gt_subs = [
        torch.from_numpy(np.stack([m.bits for m in group], axis=0)) if group
        else torch.zeros((0, scene.height, scene.width), dtype=torch.bool)
        for group in per_sub
    ]
    prompt_ids = vocab.encode(sample.query.text) + [vocab.asst_id]
    if mode == "concept":
        response_ids = vocab.encode(sample.annotation.response_text) + [vocab.eos_id]
    elif mode == "seg_token":
        n_targets = len(sample.annotation.selected_ids)
        response_ids = [vocab.seg_id] * n_targets + [vocab.eos_id]
    else:
        raise UsageError(f"unknown training mode {mode!r}")
    return TrainSample(
        sample_id=sample.sample_id,
        kind=sample.kind,
        image=scene_image(scene),
        prompt_ids=prompt_ids,
        response_ids=response_ids,
        gt_subs=gt_subs,
        sub_labels=[p for p, _ in sample.annotation.sub_concepts],
    )


@dataclass(frozen=True)
class TrainerConfig:
    batch_size: int = 32
    steps: int = 8000
    lr: float = 3e-4
    weight_decay: float = 0.01
    warmup_steps: int = 100
    grad_clip: float = 1.0
    mode: str = "concept"          # concept | seg_token
    frames_per_clip: int = 3

    def __post_init__(self) -> None:
        if self.mode not in ("concept", "seg_token"):
            raise ValueError(f"unknown mode {self.mode!r}")


class Trainer:
    def __init__(
        self,
        model: ConceptSegModel,
        dataset: Dataset,
        vocab: Vocabulary,
        config: TrainerConfig,
        weights: LossWeights,
        root_seed: int,
    ):
        self.model = model
        self.dataset = dataset
        self.vocab = vocab
        self.config = config
        self.weights = weights
        self.root_seed = root_seed
        self.step = 0
        # bit-exact checkpoint resumption needs deterministic kernels
        # (threaded conv backward is otherwise non-deterministic on CPU)
        torch.use_deterministic_algorithms(True)
        self.optimizer = torch.optim.AdamW(
            model.parameters(), lr=config.lr, weight_decay=config.weight_decay
        )

    def lr_at(self, step: int) -> float:
        cfg = self.config
        if step < cfg.warmup_steps:
            return cfg.lr * (step + 1) / cfg.warmup_steps
        span = max(1, cfg.steps - cfg.warmup_steps)
        progress = min(1.0, (step - cfg.warmup_steps) / span)
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))

    def make_batch(self, step: int) -> list[TrainSample]:
        """Batch assembly is a pure function of (root_seed, step), so training
        resumes bit-exactly from a checkpointed step counter."""
        rng = np.random.default_rng([self.root_seed, 0xBA7C, step])
        n = len(self.dataset.samples)
        replace = n < self.config.batch_size
        idx = rng.choice(n, size=self.config.batch_size, replace=replace)
        batch: list[TrainSample] = []
        for i in idx:
            record = self.dataset.samples[int(i)]
            items: list[TrainSample] = []
            if record.is_video:
                clip = rebuild_clip(record, self.dataset.config)
                k = min(self.config.frames_per_clip, clip.n_frames)
                for f in sample_video_frames(clip, k, rng):
                    items.append(prepare_sample(record, self.dataset.config, self.vocab,
                                                self.config.mode, scene=clip.frames[f]))
            else:
                items.append(prepare_sample(record, self.dataset.config, self.vocab, self.config.mode))
            if items[0].kind == "no-target":
                # one draw per record: clip frames share a single response
                augment_no_target(items[0], rng, self.vocab)
                for ts in items[1:]:
                    ts.response_ids = list(items[0].response_ids)
                    ts.augment_branch = items[0].augment_branch
            batch.extend(items)
        return batch

    def _forward_lm(self, batch: list[TrainSample]):
        vocab, lm_cfg = self.vocab, self.model.lm_config
        t_max = max(len(s.prompt_ids) + len(s.response_ids) for s in batch)
        b = len(batch)
        text = torch.full((b, t_max), vocab.pad_id, dtype=torch.long)
        valid = torch.zeros((b, t_max), dtype=torch.bool)
        resp_mask = torch.zeros((b, lm_cfg.n_patches + t_max), dtype=torch.bool)
        for i, s in enumerate(batch):
            ids = s.prompt_ids + s.response_ids
            text[i, : len(ids)] = torch.tensor(ids)
            valid[i, : len(ids)] = True
            start = lm_cfg.n_patches + len(s.prompt_ids)
            resp_mask[i, start : start + len(s.response_ids)] = True
        images = torch.stack([s.image for s in batch])
        logits, hidden = self.model.lm(text, images, valid)
        full_ids = torch.cat(
            [torch.full((b, lm_cfg.n_patches), vocab.pad_id, dtype=torch.long), text], dim=1
        )
        ce = F.cross_entropy(
            logits[:, :-1].reshape(-1, logits.shape[-1]),
            full_ids[:, 1:].reshape(-1),
            reduction="none",
        ).view(b, -1)
        m = resp_mask[:, 1:].to(ce.dtype)
        lm_per_sample = (ce * m).sum(dim=1) / m.sum(dim=1)
        return lm_per_sample.mean(), hidden

    def _concept_passes(self, batch, hidden):
        """Pool every concept span, project, fuse, and list decoder passes."""
        pad, n_patches = self.vocab.pad_id, self.model.lm_config.n_patches
        pooled, owners = [], []  # owners: (sample index, span order)
        for i, s in enumerate(batch):
            seq = s.sequence(n_patches, pad)
            if s.augment_branch == "abstain":
                continue
            spans = extract_spans(seq, self.vocab)
            for span in spans:
                pooled.append(hidden[i, span.start : span.end].mean(dim=0))
                owners.append((i, span.order))
        if not pooled:
            return []
        projected = self.model.projector(torch.stack(pooled))
        globals_of = {i: projected[j] for j, (i, order) in enumerate(owners) if order == 0}
        passes = []  # (sample index, condition, gt tensor)
        sub_pairs = [(j, i) for j, (i, order) in enumerate(owners) if order > 0]
        fused = None
        if sub_pairs:
            g = torch.stack([globals_of[i] for _, i in sub_pairs])
            sub = torch.stack([projected[j] for j, _ in sub_pairs])
            fused = self.model.fuser(g, sub)
        for i, s in enumerate(batch):
            if i in globals_of:
                passes.append((i, globals_of[i], s.gt_global))
        for k, (j, i) in enumerate(sub_pairs):
            order = owners[j][1]
            passes.append((i, fused[k], batch[i].gt_subs[order - 1]))
        return passes

    def _set_loss_concept(self, batch, hidden):
        passes = self._concept_passes(batch, hidden)
        per_sample = torch.zeros(len(batch))
        counts = torch.zeros(len(batch))
        if passes:
            # one visual encode per image; passes over the same image share it
            feats_all = self.model.encoder(torch.stack([s.image for s in batch]))
            feats = feats_all[torch.tensor([i for i, _, _ in passes])]
            conds = torch.stack([c for _, c, _ in passes])
            mask_logits, score_logits = self.model.decoder.decode_batch(feats, conds)
            losses = []
            for p, (i, _, gt) in enumerate(passes):
                pred = MaskPrediction(mask_logits=mask_logits[p], score_logits=score_logits[p])
                assignment = match_targets(pred, gt, self.weights)
                losses.append((i, set_loss(pred, gt, assignment, self.weights)))
            for i, loss in losses:
                per_sample[i] = per_sample[i] + loss
                counts[i] = counts[i] + 1
        counts = counts.clamp_min(1.0)
        return (per_sample / counts).mean()

    def _set_loss_seg(self, batch, hidden):
        """Per-token single-mask supervision in annotation emission order."""
        n_patches = self.model.lm_config.n_patches
        entries = []  # (sample index, hidden position, gt mask index)
        for i, s in enumerate(batch):
            pos = n_patches + len(s.prompt_ids)
            n_tokens = sum(1 for t in s.response_ids if t == self.vocab.seg_id)
            gt = s.gt_global
            for t in range(n_tokens):
                entries.append((i, pos + t, t if t < gt.shape[0] else None))
        per_sample = torch.zeros(len(batch))
        counts = torch.zeros(len(batch))
        if entries:
            states = torch.stack([hidden[i, p] for i, p, _ in entries])
            conds = self.model.projector(states)
            feats_all = self.model.encoder(torch.stack([s.image for s in batch]))
            feats = feats_all[torch.tensor([i for i, _, _ in entries])]
            mask_logits, score_logits = self.model.decoder.decode_single_batch(feats, conds)
            h, w = mask_logits.shape[-2:]
            targets = torch.stack([
                batch[i].gt_global[g].to(mask_logits.dtype) if g is not None
                else torch.zeros(h, w, dtype=mask_logits.dtype)
                for i, _, g in entries
            ])
            bce = _bce_elem(mask_logits, targets).flatten(1).mean(dim=1)
            dice = _dice_pairs(mask_logits, targets)
            has_target = torch.tensor([1.0 if g is not None else 0.0 for _, _, g in entries])
            obj = F.binary_cross_entropy_with_logits(
                score_logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP), has_target, reduction="none"
            )
            tok_loss = self.weights.bce * bce + self.weights.dice * dice + self.weights.obj * obj
            for e, (i, _, _) in enumerate(entries):
                per_sample[i] = per_sample[i] + tok_loss[e]
                counts[i] = counts[i] + 1
        counts = counts.clamp_min(1.0)
        return (per_sample / counts).mean()

    def train_step(self, batch: list[TrainSample]) -> dict:
        self.model.train()
        lr = self.lr_at(self.step)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        lm, hidden = self._forward_lm(batch)
        if self.config.mode == "concept":
            set_component = self._set_loss_concept(batch, hidden)
        else:
            set_component = self._set_loss_seg(batch, hidden)
        total = self.weights.lm * lm + set_component
        if not torch.isfinite(total):
            raise NumericAbortError("non-finite training loss", [s.sample_id for s in batch])
        self.optimizer.zero_grad()
        total.backward()
        if self.config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.config.grad_clip)
        self.optimizer.step()
        self.step += 1
        return {
            "step": self.step,
            "lr": lr,
            "lm": float(lm.detach()),
            "set": float(set_component.detach()),
            "total": float(total.detach()),
        }

    def run(self, steps: int, log_every: int = 50, log_fn=None) -> None:
        for _ in range(steps):
            batch = self.make_batch(self.step)
            out = self.train_step(batch)
            if log_fn is not None and (out["step"] % log_every == 0 or out["step"] == 1):
                log_fn(out)


# --- checkpointing ----------------------------------------------------------

CHECKPOINT_VERSION = 1


def _integrity(lm_config, dec_config, vocab_tokens, mode) -> str:
    blob = json.dumps(
        {
            "lm": dataclasses.asdict(lm_config),
            "dec": dataclasses.asdict(dec_config),
            "vocab": list(vocab_tokens),
            "mode": mode,
        },
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()


def save_checkpoint(path: str | Path, trainer: Trainer, extra: dict | None = None) -> None:
    model = trainer.model
    payload = dict(extra or {})
    payload |= {
        "format_version": CHECKPOINT_VERSION,
        "lm_config": dataclasses.asdict(model.lm_config),
        "decoder_config": dataclasses.asdict(model.dec_config),
        "trainer_config": dataclasses.asdict(trainer.config),
        "loss_weights": dataclasses.asdict(trainer.weights),
        "vocab_tokens": list(trainer.vocab.tokens),
        "vocab_sha256": trainer.vocab.sha256(),
        "mode": trainer.config.mode,
        "integrity": _integrity(model.lm_config, model.dec_config, trainer.vocab.tokens,
                                trainer.config.mode),
        "model_state": model.state_dict(),
        "optimizer_state": trainer.optimizer.state_dict(),
        "step": trainer.step,
        "root_seed": trainer.root_seed,
        "torch_rng": torch.get_rng_state(),
    }
    torch.save(payload, path)


def _load_payload(path: str | Path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise IncompatibilityError(f"unsupported checkpoint version {payload.get('format_version')}")
    lm_config = LmConfig(**payload["lm_config"])
    dec_config = DecoderConfig(**payload["decoder_config"])
    expected = _integrity(lm_config, dec_config, payload["vocab_tokens"], payload["mode"])
    if expected != payload["integrity"]:
        raise IncompatibilityError("checkpoint config or vocabulary was modified after saving")
    vocab = Vocabulary(tokens=tuple(payload["vocab_tokens"]))
    if vocab.sha256() != payload["vocab_sha256"]:
        raise IncompatibilityError("vocabulary hash mismatch")
    payload["_lm_config"] = lm_config
    payload["_dec_config"] = dec_config
    payload["_vocab"] = vocab
    return payload


def load_model(path: str | Path) -> tuple[ConceptSegModel, Vocabulary, dict]:
    """Model plus vocabulary for inference; the raw payload rides along."""
    payload = _load_payload(path)
    model = ConceptSegModel(payload["_lm_config"], payload["_dec_config"])
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, payload["_vocab"], payload


def load_checkpoint(path: str | Path, dataset: Dataset) -> Trainer:
    """Rebuild a trainer mid-run; resumption is bit-exact under the same seed."""
    payload = _load_payload(path)
    model = ConceptSegModel(payload["_lm_config"], payload["_dec_config"])
    model.load_state_dict(payload["model_state"])
    trainer = Trainer(
        model=model,
        dataset=dataset,
        vocab=payload["_vocab"],
        config=TrainerConfig(**payload["trainer_config"]),
        weights=LossWeights(**payload["loss_weights"]),
        root_seed=payload["root_seed"],
    )
    trainer.optimizer.load_state_dict(payload["optimizer_state"])
    trainer.step = payload["step"]
    torch.set_rng_state(payload["torch_rng"])
    return trainer


def new_trainer(
    dataset: Dataset,
    lm_config: LmConfig | None = None,
    dec_config: DecoderConfig | None = None,
    trainer_config: TrainerConfig | None = None,
    weights: LossWeights | None = None,
    root_seed: int = 0,
    vocab: Vocabulary | None = None,
) -> Trainer:
    vocab = vocab or build_vocabulary()
    lm_config = lm_config or LmConfig(vocab_size=len(vocab))
    if lm_config.vocab_size != len(vocab):
        lm_config = dataclasses.replace(lm_config, vocab_size=len(vocab))
    dec_config = dec_config or DecoderConfig()
    torch.manual_seed(root_seed)
    model = ConceptSegModel(lm_config, dec_config)
    return Trainer(
        model=model,
        dataset=dataset,
        vocab=vocab,
        config=trainer_config or TrainerConfig(),
        weights=weights or LossWeights(),
        root_seed=root_seed,
    )
