import pytest
import torch

from conceptseg.decoder import DecoderConfig, MaskSetDecoder, VisualEncoder


@pytest.fixture(scope="module")
def setup():
    torch.manual_seed(0)
    cfg = DecoderConfig(num_queries=8, cond_width=16, channels=32, layers=2, image_size=64)
    return cfg, VisualEncoder(cfg), MaskSetDecoder(cfg)


class TestVisualEncoder:
    def test_identical_images_identical_features(self, setup):
        cfg, enc, _ = setup
        img = torch.rand(1, 64, 64, 3)
        assert torch.equal(enc(img), enc(img.clone()))

    def test_feature_shape_contract(self, setup):
        cfg, enc, _ = setup
        feats = enc(torch.rand(2, 64, 64, 3))
        assert feats.shape == (2, cfg.channels, 16, 16)

    def test_wrong_size_rejected(self, setup):
        _, enc, _ = setup
        with pytest.raises(ValueError):
            enc(torch.rand(1, 32, 32, 3))


class TestDecode:
    def test_equal_inputs_equal_outputs(self, setup):
        cfg, enc, dec = setup
        feats = enc(torch.rand(1, 64, 64, 3))[0]
        cond = torch.randn(cfg.cond_width)
        a = dec.decode(feats, cond)
        b = dec.decode(feats, cond)
        assert torch.equal(a.mask_logits, b.mask_logits)
        assert torch.equal(a.score_logits, b.score_logits)

    def test_different_conditions_differ(self, setup):
        cfg, enc, dec = setup
        torch.manual_seed(1)
        feats = enc(torch.rand(1, 64, 64, 3))[0]
        a = dec.decode(feats, torch.randn(cfg.cond_width))
        b = dec.decode(feats, torch.randn(cfg.cond_width))
        assert not torch.allclose(a.mask_logits, b.mask_logits)

    def test_slot_count_and_shapes(self, setup):
        cfg, enc, dec = setup
        feats = enc(torch.rand(1, 64, 64, 3))[0]
        pred = dec.decode(feats, torch.randn(cfg.cond_width))
        assert pred.mask_logits.shape == (cfg.num_queries, 64, 64)
        assert pred.score_logits.shape == (cfg.num_queries,)

    def test_scores_in_unit_interval_scan(self, setup):
        # examples call for a 10k-slot range scan over random inputs
        cfg, enc, dec = setup
        torch.manual_seed(2)
        checked = 0
        with torch.no_grad():
            while checked < 10_000:
                feats = enc(torch.rand(8, 64, 64, 3))
                conds = torch.randn(8, cfg.cond_width) * 3
                _, score_logits = dec.decode_batch(feats, conds)
                scores = torch.sigmoid(score_logits)
                assert ((scores >= 0) & (scores <= 1)).all()
                checked += scores.numel()

    def test_condition_width_mismatch(self, setup):
        cfg, enc, dec = setup
        feats = enc(torch.rand(1, 64, 64, 3))
        with pytest.raises(ValueError):
            dec.decode_batch(feats, torch.randn(1, cfg.cond_width + 1))

    def test_non_finite_condition(self, setup):
        cfg, enc, dec = setup
        feats = enc(torch.rand(1, 64, 64, 3))
        bad = torch.full((1, cfg.cond_width), float("inf"))
        with pytest.raises(ValueError):
            dec.decode_batch(feats, bad)

    def test_pass_order_independence(self, setup):
        # decoding global and sub conditions over shared features must not
        # depend on batch order
        cfg, enc, dec = setup
        torch.manual_seed(3)
        feats = enc(torch.rand(1, 64, 64, 3))
        c1, c2 = torch.randn(cfg.cond_width), torch.randn(cfg.cond_width)
        both = torch.stack([c1, c2])
        m_ab, s_ab = dec.decode_batch(feats.expand(2, -1, -1, -1), both)
        m_ba, s_ba = dec.decode_batch(feats.expand(2, -1, -1, -1), both.flip(0))
        assert torch.allclose(m_ab[0], m_ba[1], atol=1e-6)
        assert torch.allclose(s_ab[1], s_ba[0], atol=1e-6)


class TestSingleMaskPath:
    def test_shapes(self, setup):
        cfg, enc, dec = setup
        feats = enc(torch.rand(3, 64, 64, 3))
        conds = torch.randn(3, cfg.cond_width)
        logits, scores = dec.decode_single_batch(feats, conds)
        assert logits.shape == (3, 64, 64)
        assert scores.shape == (3,)

    def test_deterministic(self, setup):
        cfg, enc, dec = setup
        feats = enc(torch.rand(1, 64, 64, 3))
        cond = torch.randn(1, cfg.cond_width)
        a = dec.decode_single_batch(feats, cond)
        b = dec.decode_single_batch(feats, cond)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
