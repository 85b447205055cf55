import copy
import itertools
import math

import numpy as np
import pytest
import torch

from conceptseg.core import BinaryMask
from conceptseg.decoder import DecoderConfig, MaskPrediction
from conceptseg.lm import LmConfig
from conceptseg.shapeworld import GenConfig, generate_clip, generate_dataset
from conceptseg.training import (
    CapacityError,
    LossWeights,
    Trainer,
    TrainerConfig,
    UsageError,
    IncompatibilityError,
    augment_no_target,
    load_checkpoint,
    load_model,
    match_targets,
    new_trainer,
    prepare_sample,
    sample_video_frames,
    save_checkpoint,
    set_loss,
)
from conceptseg.lm import build_vocabulary

TINY_LM = dict(width=32, layers=2, heads=2, context=128, patch_grid=4)
TINY_DEC = dict(num_queries=6, cond_width=16, channels=32, layers=1)
# instance budget kept under the tiny decoder's slot count
TINY_GEN = GenConfig(min_instances=2, max_instances=5)


def tiny_dataset(seed, count, video=False):
    return generate_dataset(seed, count, TINY_GEN, video=video)


def tiny_trainer(dataset, mode="concept", steps=100, batch_size=4, seed=0, lr=3e-4):
    return new_trainer(
        dataset,
        lm_config=LmConfig(**TINY_LM, vocab_size=0),
        dec_config=DecoderConfig(**TINY_DEC),
        trainer_config=TrainerConfig(batch_size=batch_size, steps=steps, mode=mode,
                                     lr=lr, warmup_steps=10),
        root_seed=seed,
    )


def random_pred(n_slots, h=16, w=16, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return MaskPrediction(
        mask_logits=torch.randn(n_slots, h, w, generator=g, dtype=dtype) * 2,
        score_logits=torch.randn(n_slots, generator=g, dtype=dtype),
    )


def random_gt(count, h=16, w=16, seed=1):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(count, h, w, generator=g) < 0.3


class TestMatchTargets:
    def test_empty_gt(self):
        pred = random_pred(4)
        a = match_targets(pred, torch.zeros(0, 16, 16, dtype=torch.bool), LossWeights())
        assert a.pairs == () and a.total_cost == 0.0

    def test_capacity_error(self):
        pred = random_pred(2)
        with pytest.raises(CapacityError):
            match_targets(pred, random_gt(3), LossWeights())

    def test_dominant_slot(self):
        # slot 0 reproduces the target exactly with score ~1; others are
        # background-only with score ~0
        target = torch.zeros(1, 16, 16, dtype=torch.bool)
        target[0, 4:9, 4:9] = True
        logits = torch.full((3, 16, 16), -20.0)
        logits[0][target[0]] = 20.0
        pred = MaskPrediction(mask_logits=logits, score_logits=torch.tensor([8.0, -8.0, -8.0]))
        a = match_targets(pred, target, LossWeights())
        assert a.pairs == ((0, 0),)

    def test_enumeration_oracle(self):
        # brute force over ordered slot subsets at N_q = 6, 4 targets
        weights = LossWeights()
        for seed in range(10):
            pred = random_pred(6, seed=seed, dtype=torch.float64)
            gt = random_gt(4, seed=seed + 100)
            got = match_targets(pred, gt, weights)

            t = gt.reshape(4, -1).double()
            z = pred.mask_logits.reshape(6, -1)
            cost = torch.zeros(6, 4, dtype=torch.float64)
            for s in range(6):
                for g in range(4):
                    zz = z[s].clamp(-50, 50)
                    bce = (zz.clamp_min(0) - zz * t[g] + torch.log1p(torch.exp(-zz.abs()))).mean()
                    p = torch.sigmoid(z[s])
                    dice = 1 - (2 * (p * t[g]).sum() + 1) / (p.sum() + t[g].sum() + 1)
                    score = torch.nn.functional.softplus(-pred.score_logits[s])
                    cost[s, g] = weights.bce * bce + weights.dice * dice + weights.obj * score
            best = min(
                math.fsum(cost[s, g].item() for g, s in enumerate(perm))
                for perm in itertools.permutations(range(6), 4)
            )
            assert got.total_cost == pytest.approx(best, abs=1e-9)


class TestSetLoss:
    def test_perfect_prediction_small_loss(self):
        # 100-pixel target, exact logits, calibrated scores
        target = torch.zeros(1, 16, 16, dtype=torch.bool)
        target[0, 3:13, 3:13] = True
        assert int(target.sum()) == 100
        logits = torch.where(target, torch.tensor(50.0), torch.tensor(-50.0))
        logits = torch.cat([logits, torch.full((2, 16, 16), -50.0)])
        pred = MaskPrediction(mask_logits=logits, score_logits=torch.tensor([50.0, -50.0, -50.0]))
        a = match_targets(pred, target, LossWeights())
        loss = set_loss(pred, target, a, LossWeights())
        assert float(loss) < 1e-3

    def test_empty_gt_half_scores_closed_form(self):
        for obj_w in (1.0, 2.5):
            pred = MaskPrediction(mask_logits=torch.zeros(4, 8, 8), score_logits=torch.zeros(4))
            weights = LossWeights(obj=obj_w)
            a = match_targets(pred, torch.zeros(0, 8, 8, dtype=torch.bool), weights)
            loss = set_loss(pred, torch.zeros(0, 8, 8, dtype=torch.bool), a, weights)
            assert float(loss) == pytest.approx(obj_w * math.log(2), rel=1e-6)

    def test_scalar_loop_oracle(self):
        weights = LossWeights(bce=1.7, dice=0.9, obj=1.3)
        pred = random_pred(5, seed=3, dtype=torch.float64)
        gt = random_gt(3, seed=4)
        a = match_targets(pred, gt, weights)
        got = float(set_loss(pred, gt, a, weights))

        total = 0.0
        matched_slots = {r: c for r, c in a.pairs}
        for s in range(5):
            z_score = float(pred.score_logits[s])
            if s in matched_slots:
                t = gt[matched_slots[s]].double()
                z = pred.mask_logits[s]
                bce = float((z.clamp_min(0) - z * t + torch.log1p(torch.exp(-z.abs()))).mean())
                p = torch.sigmoid(z)
                dice = float(1 - (2 * (p * t).sum() + 1) / (p.sum() + t.sum() + 1))
                obj = math.log(1 + math.exp(-z_score))
                total += weights.bce * bce + weights.dice * dice + weights.obj * obj
            else:
                total += weights.obj * math.log(1 + math.exp(z_score))
        assert got == pytest.approx(total / 5, abs=1e-9)

    def test_gt_permutation_invariance(self):
        weights = LossWeights()
        pred = random_pred(6, seed=9)
        gt = random_gt(3, seed=10)
        perm = gt[[2, 0, 1]]
        a1 = match_targets(pred, gt, weights)
        a2 = match_targets(pred, perm, weights)
        l1 = float(set_loss(pred, gt, a1, weights))
        l2 = float(set_loss(pred, perm, a2, weights))
        assert l1 == pytest.approx(l2, abs=1e-6)


class TestAugmentation:
    @pytest.fixture(scope="class")
    def no_target_sample(self):
        ds = generate_dataset(40, 200)
        vocab = build_vocabulary()
        for s in ds.samples:
            if s.kind == "no-target":
                return s, ds.config, vocab
        pytest.fail("no no-target sample in corpus")

    class _ScriptedRng:
        def __init__(self, value):
            self.value = value

        def random(self):
            return self.value

    def test_branch_a_abstention(self, no_target_sample):
        s, cfg, vocab = no_target_sample
        ts = prepare_sample(s, cfg, vocab, "concept")
        out = augment_no_target(ts, self._ScriptedRng(0.1), vocab)
        assert out.augment_branch == "abstain"
        assert out.response_ids == vocab.encode("no target") + [vocab.eos_id]
        assert out.gt_global.shape[0] == 0

    def test_branch_b_keeps_concepts(self, no_target_sample):
        s, cfg, vocab = no_target_sample
        ts = prepare_sample(s, cfg, vocab, "concept")
        original = list(ts.response_ids)
        out = augment_no_target(ts, self._ScriptedRng(0.9), vocab)
        assert out.augment_branch == "keep"
        assert out.response_ids == original
        assert out.gt_global.shape[0] == 0

    def test_usage_error_on_other_kinds(self, no_target_sample):
        s, cfg, vocab = no_target_sample
        ts = prepare_sample(s, cfg, vocab, "concept")
        ts.kind = "single"
        with pytest.raises(UsageError):
            augment_no_target(ts, self._ScriptedRng(0.5), vocab)

    def test_branch_frequency(self, no_target_sample):
        s, cfg, vocab = no_target_sample
        rng = np.random.default_rng(0)
        ts = prepare_sample(s, cfg, vocab, "concept")
        hits = 0
        n = 4000
        for _ in range(n):
            out = augment_no_target(copy.copy(ts), rng, vocab)
            hits += out.augment_branch == "abstain"
        assert hits / n == pytest.approx(0.5, abs=0.025)


class TestVideoFrameSampling:
    def test_all_frames_ascending(self):
        clip, _, _ = generate_clip(2)
        rng = np.random.default_rng(0)
        idx = sample_video_frames(clip, clip.n_frames, rng)
        assert idx == list(range(clip.n_frames))

    def test_out_of_range(self):
        clip, _, _ = generate_clip(2)
        rng = np.random.default_rng(0)
        with pytest.raises(UsageError):
            sample_video_frames(clip, clip.n_frames + 1, rng)
        with pytest.raises(UsageError):
            sample_video_frames(clip, 0, rng)

    def test_deterministic_given_state(self):
        clip, _, _ = generate_clip(2)
        a = sample_video_frames(clip, 3, np.random.default_rng(9))
        b = sample_video_frames(clip, 3, np.random.default_rng(9))
        assert a == b

    def test_single_frame_frequency(self):
        clip, _, _ = generate_clip(4)
        n = clip.n_frames
        rng = np.random.default_rng(1)
        draws = 10_000
        counts = np.zeros(n)
        for _ in range(draws):
            counts[sample_video_frames(clip, 1, rng)[0]] += 1
        p = 1.0 / n
        sigma = math.sqrt(p * (1 - p) / draws)
        assert np.abs(counts / draws - p).max() <= 3.5 * sigma


class TestTrainStep:
    def test_zero_lr_keeps_weights(self):
        ds = tiny_dataset(3, 16)
        tr = tiny_trainer(ds, lr=0.0)
        before = copy.deepcopy(tr.model.state_dict())
        out = tr.train_step(tr.make_batch(0))
        assert math.isfinite(out["total"])
        after = tr.model.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before)

    def test_seg_token_mode_runs(self):
        ds = tiny_dataset(3, 16)
        tr = tiny_trainer(ds, mode="seg_token")
        out = tr.train_step(tr.make_batch(0))
        assert math.isfinite(out["total"])

    def test_seg_token_sequential_binding(self):
        # one seg token per target, bound in annotation emission order
        ds = tiny_dataset(3, 32)
        vocab = build_vocabulary()
        for s in ds.samples:
            ts = prepare_sample(s, ds.config, vocab, "seg_token")
            n_tokens = sum(1 for t in ts.response_ids if t == vocab.seg_id)
            assert n_tokens == len(s.annotation.selected_ids)
            assert ts.gt_global.shape[0] == n_tokens
            # emission order == annotation order: sub groups in order, ids
            # ascending within each group
            flat_ids = [i for _, ids in s.annotation.sub_concepts for i in ids]
            assert flat_ids == list(s.annotation.selected_ids)

    def test_video_batch_runs(self):
        ds = tiny_dataset(6, 8, video=True)
        tr = tiny_trainer(ds)
        out = tr.train_step(tr.make_batch(0))
        assert math.isfinite(out["total"])

    def test_overfit_single_sample(self):
        # 500 steps on one sample must cut the loss by >= 10x vs step 10
        ds = tiny_dataset(8, 40)
        ds.samples = [s for s in ds.samples if s.kind != "no-target"][:1]
        tr = tiny_trainer(ds, batch_size=1, steps=500, lr=1e-3)
        losses = []
        for _ in range(500):
            out = tr.train_step(tr.make_batch(tr.step))
            losses.append(out["total"])
        assert losses[499] <= losses[9] / 10


class TestCheckpointing:
    def test_save_load_then_step_matches(self, tmp_path):
        ds = tiny_dataset(5, 24)
        a = tiny_trainer(ds, seed=3)
        for _ in range(3):
            a.train_step(a.make_batch(a.step))
        save_checkpoint(tmp_path / "ck.pt", a)

        b = load_checkpoint(tmp_path / "ck.pt", ds)
        out_a = a.train_step(a.make_batch(a.step))
        out_b = b.train_step(b.make_batch(b.step))
        assert out_a == out_b
        sa, sb = a.model.state_dict(), b.model.state_dict()
        assert all(torch.equal(sa[k], sb[k]) for k in sa)

    def test_resume_twin_run(self, tmp_path):
        ds = tiny_dataset(6, 24)
        solo = tiny_trainer(ds, seed=4)
        for _ in range(6):
            solo.train_step(solo.make_batch(solo.step))

        first = tiny_trainer(ds, seed=4)
        for _ in range(3):
            first.train_step(first.make_batch(first.step))
        save_checkpoint(tmp_path / "mid.pt", first)
        resumed = load_checkpoint(tmp_path / "mid.pt", ds)
        for _ in range(3):
            resumed.train_step(resumed.make_batch(resumed.step))

        sa, sb = solo.model.state_dict(), resumed.model.state_dict()
        assert all(torch.equal(sa[k], sb[k]) for k in sa)

    def test_edited_config_rejected(self, tmp_path):
        ds = tiny_dataset(7, 16)
        tr = tiny_trainer(ds)
        path = tmp_path / "ck.pt"
        save_checkpoint(path, tr)
        payload = torch.load(path, map_location="cpu", weights_only=False)
        payload["lm_config"]["width"] = 64
        torch.save(payload, path)
        with pytest.raises(IncompatibilityError):
            load_model(path)
