import math

import pytest
import torch

from conceptseg.lm import (
    ContextError,
    LmConfig,
    TinyConceptLM,
    TokenSequence,
    UndefinedLossError,
    build_sequence,
    build_vocabulary,
    lm_loss,
)
from conceptseg.lm.vocab import Vocabulary
from conceptseg.shapeworld import generate_dataset


@pytest.fixture(scope="module")
def vocab():
    return build_vocabulary()


@pytest.fixture(scope="module")
def tiny_model(vocab):
    torch.manual_seed(0)
    cfg = LmConfig(width=32, layers=2, heads=2, context=128, patch_grid=4, image_size=64,
                   vocab_size=len(vocab))
    return TinyConceptLM(cfg)


class TestVocabulary:
    def test_size_is_desk_scale(self, vocab):
        assert 100 <= len(vocab) <= 140

    def test_specials_distinct(self, vocab):
        ids = {vocab.pad_id, vocab.unk_id, vocab.eos_id, vocab.asst_id,
               vocab.ref_open_id, vocab.ref_close_id, vocab.seg_id}
        assert len(ids) == 7

    def test_empty_round_trip(self, vocab):
        assert vocab.encode("") == []
        assert vocab.decode([]) == ""

    def test_two_word_round_trip(self, vocab):
        ids = vocab.encode("red circle")
        assert len(ids) == 2
        assert vocab.decode(ids) == "red circle"

    def test_unknown_maps_to_unk(self, vocab):
        assert vocab.encode("xylophone") == [vocab.unk_id]

    def test_save_load_stable_ids(self, vocab, tmp_path):
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        loaded = Vocabulary.load(path)
        assert loaded.tokens == vocab.tokens
        assert loaded.sha256() == vocab.sha256()

    def test_generated_responses_round_trip(self, vocab):
        ds = generate_dataset(5, 1000)
        for s in ds.samples:
            text = s.annotation.response_text
            ids = vocab.encode(text)
            assert vocab.unk_id not in ids, f"out-of-vocabulary word in {text!r}"
            assert vocab.decode(ids) == text
            q_ids = vocab.encode(s.query.text)
            assert vocab.unk_id not in q_ids, f"out-of-vocabulary word in {s.query.text!r}"


class TestTokenSequence:
    def test_role_order_enforced(self):
        with pytest.raises(ValueError):
            TokenSequence(ids=[1, 2], roles=["response", "prompt"])

    def test_build_sequence(self, vocab):
        seq = build_sequence(3, [5, 6], [7], vocab.pad_id)
        assert seq.ids == [vocab.pad_id] * 3 + [5, 6, 7]
        assert seq.positions("response") == [5]


class TestForward:
    def test_causality_future_perturbation(self, vocab, tiny_model):
        torch.manual_seed(1)
        image = torch.rand(64, 64, 3)
        ids = vocab.encode("find the red circle") + [vocab.asst_id, vocab.eos_id]
        text = torch.tensor([ids])
        logits_a, _ = tiny_model(text, image.unsqueeze(0))
        perturbed = text.clone()
        perturbed[0, -1] = vocab.unk_id
        logits_b, _ = tiny_model(perturbed, image.unsqueeze(0))
        t_changed = tiny_model.config.n_patches + len(ids) - 1
        assert torch.allclose(logits_a[0, :t_changed], logits_b[0, :t_changed], atol=1e-6)

    def test_determinism(self, vocab, tiny_model):
        torch.manual_seed(2)
        image = torch.rand(64, 64, 3)
        text = torch.tensor([vocab.encode("all the shapes") + [vocab.asst_id]])
        a, _ = tiny_model(text, image.unsqueeze(0))
        b, _ = tiny_model(text, image.unsqueeze(0))
        assert torch.equal(a, b)

    def test_context_error(self, vocab, tiny_model):
        text = torch.zeros(1, tiny_model.config.context, dtype=torch.long)
        with pytest.raises(ContextError):
            tiny_model(text, torch.rand(1, 64, 64, 3))

    def test_padding_does_not_change_valid_positions(self, vocab, tiny_model):
        torch.manual_seed(3)
        image = torch.rand(1, 64, 64, 3)
        ids = vocab.encode("the red circle") + [vocab.asst_id]
        short = torch.tensor([ids])
        padded = torch.tensor([ids + [vocab.pad_id] * 4])
        valid = torch.tensor([[True] * len(ids) + [False] * 4])
        a, _ = tiny_model(short, image)
        b, _ = tiny_model(padded, image, valid)
        n = tiny_model.config.n_patches + len(ids)
        assert torch.allclose(a[0], b[0, :n], atol=1e-5)


class TestGenerate:
    def test_max_len_one(self, vocab, tiny_model):
        torch.manual_seed(4)
        image = torch.rand(64, 64, 3)
        prompt = vocab.encode("the red circle") + [vocab.asst_id]
        out, truncated = tiny_model.generate(vocab, image, prompt, max_len=1)
        assert len(out) <= 1
        if out:
            assert truncated

    def test_deterministic(self, vocab, tiny_model):
        torch.manual_seed(5)
        image = torch.rand(64, 64, 3)
        prompt = vocab.encode("all the shapes") + [vocab.asst_id]
        a = tiny_model.generate(vocab, image, prompt, max_len=12)
        b = tiny_model.generate(vocab, image, prompt, max_len=12)
        assert a == b

    def test_cache_matches_full_forward(self, vocab, tiny_model):
        # greedy decode step by step must agree with re-running the full sequence
        torch.manual_seed(6)
        image = torch.rand(64, 64, 3)
        prompt = vocab.encode("find the blue square") + [vocab.asst_id]
        out, _ = tiny_model.generate(vocab, image, prompt, max_len=6)
        full = prompt + out
        logits, _ = tiny_model(torch.tensor([full]), image.unsqueeze(0))
        # replaying: the argmax after each prefix must reproduce the next token
        p = tiny_model.config.n_patches
        for t, tok in enumerate(out):
            pos = p + len(prompt) + t - 1
            assert int(torch.argmax(logits[0, pos])) == tok


class TestLmLoss:
    def test_one_hot_logits(self):
        ids = [0] * 4 + [3, 1, 2]
        seq = TokenSequence(ids=ids, roles=["visual"] * 4 + ["prompt"] + ["response"] * 2)
        logits = torch.full((7, 5), -30.0)
        for t in range(1, 7):
            logits[t - 1, ids[t]] = 30.0
        assert lm_loss(logits, seq).item() < 1e-6

    def test_uniform_logits_closed_form(self):
        seq = TokenSequence(ids=[0, 1, 2], roles=["visual", "prompt", "response"])
        logits = torch.zeros(3, 128)
        assert lm_loss(logits, seq).item() == pytest.approx(math.log(128), rel=1e-6)

    def test_scalar_loop_oracle(self):
        torch.manual_seed(7)
        ids = [0, 0, 5, 9, 4, 7]
        roles = ["visual", "prompt", "prompt", "response", "response", "response"]
        seq = TokenSequence(ids=ids, roles=roles)
        logits = torch.randn(6, 11, dtype=torch.float64)
        expected = 0.0
        for t in (3, 4, 5):
            row = logits[t - 1]
            log_probs = row - torch.logsumexp(row, dim=0)
            expected -= float(log_probs[ids[t]])
        expected /= 3
        assert lm_loss(logits, seq).item() == pytest.approx(expected, abs=1e-9)

    def test_prompt_content_invariance(self):
        torch.manual_seed(8)
        logits = torch.randn(5, 7)
        a = TokenSequence(ids=[0, 1, 2, 3, 4], roles=["visual", "prompt", "prompt", "response", "response"])
        b = TokenSequence(ids=[0, 6, 5, 3, 4], roles=["visual", "prompt", "prompt", "response", "response"])
        assert lm_loss(logits, a).item() == lm_loss(logits, b).item()

    def test_no_response_positions(self):
        seq = TokenSequence(ids=[0, 1], roles=["visual", "prompt"])
        with pytest.raises(UndefinedLossError):
            lm_loss(torch.zeros(2, 5), seq)
