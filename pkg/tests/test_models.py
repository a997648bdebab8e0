"""Architecture shape contracts, parameter scaling, and checkpoint round trips."""

import numpy as np
import pytest
import torch

from emofuse.errors import ShapeError
from emofuse.models import (AUDIO_VARIANTS, AudioNet, ModelConfig,
                            TwoStreamNet, VideoNet, build_model,
                            load_checkpoint, parameter_count, restore_model,
                            save_checkpoint)

SMALL = ModelConfig(conv_channels=(4, 8, 8), rnn_hidden=16, embed_dim=8)


def spec_batch(b, seed=0):
    rng = np.random.default_rng(seed)
    return torch.tensor(rng.normal(size=(b, 3, 200, 300)), dtype=torch.float32)


def clip_batch(b, seed=0):
    rng = np.random.default_rng(seed)
    return torch.tensor(rng.random(size=(b, 3, 20, 100, 60)), dtype=torch.float32)


def conv2d_out(size, kernel, padding):
    return (size + 2 * padding - kernel) + 1


class TestModelConfig:
    def test_defaults_valid(self):
        cfg = ModelConfig()
        assert cfg.variant == "cnn" and cfg.num_classes == 4

    @pytest.mark.parametrize("kwargs", [
        {"variant": "mlp"},
        {"num_classes": 5},
        {"num_classes": 2},
        {"width_multiplier": 3},
        {"audio_variant": "two_stream"},
        {"conv_channels": (16, 32)},
        {"conv_channels": (16, 32, 0)},
        {"rnn_hidden": 0},
        {"embed_dim": -1},
    ])
    def test_invalid_rejected(self, kwargs):
        with pytest.raises(ValueError):
            ModelConfig(**kwargs)

    def test_dict_roundtrip(self):
        cfg = ModelConfig(variant="two_stream", num_classes=3,
                          width_multiplier=2, audio_variant="cnn_rnn")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestAudioNet:
    @pytest.mark.parametrize("variant", AUDIO_VARIANTS)
    def test_logit_shape(self, variant):
        for k in (3, 4):
            cfg = ModelConfig(variant=variant, num_classes=k,
                              conv_channels=(4, 8, 8), rnn_hidden=16)
            model = build_model(cfg, seed=0).eval()
            out = model(spec_batch(2))
            assert out.shape == (2, k)
            assert torch.isfinite(out).all()

    @pytest.mark.parametrize("variant", AUDIO_VARIANTS)
    def test_embedding_shape(self, variant):
        model = AudioNet(SMALL, variant=variant).eval()
        out = model(spec_batch(2), output="embedding")
        assert out.shape == (2, SMALL.embed_dim)

    def test_conv_grid_matches_layer_arithmetic(self):
        # [DERIVED] three (same-size conv, 2x2 floor pool) blocks
        h, w = 200, 300
        for kernel, padding in ((7, 3), (5, 2), (3, 1)):
            h = conv2d_out(h, kernel, padding) // 2
            w = conv2d_out(w, kernel, padding) // 2
        assert (h, w) == (25, 37)
        model = AudioNet(SMALL)
        assert model.grid == (25, 37)
        feat = model.conv(spec_batch(1))
        assert tuple(feat.shape) == (1, 8, 25, 37)

    def test_eval_mode_deterministic(self):
        model = AudioNet(SMALL, variant="cnn_lstm").eval()
        x = spec_batch(1)
        both = model(torch.cat([x, x]))
        assert torch.equal(both[0], both[1])

    def test_train_mode_dropout_varies(self):
        torch.manual_seed(0)
        model = AudioNet(ModelConfig(variant="cnn", conv_channels=(4, 8, 8),
                                     dropout_fc=0.5)).train()
        x = spec_batch(1)
        a = model(x)
        b = model(x)
        assert not torch.equal(a, b)

    def test_extreme_inputs_stay_finite(self):
        model = AudioNet(SMALL, variant="cnn_rnn").eval()
        for x in (torch.zeros(1, 3, 200, 300), torch.ones(1, 3, 200, 300) * 5):
            assert torch.isfinite(model(x)).all()

    def test_wrong_input_shape_rejected(self):
        model = AudioNet(SMALL)
        with pytest.raises(ShapeError):
            model(torch.zeros(1, 3, 300, 200))
        with pytest.raises(ShapeError):
            model(torch.zeros(3, 200, 300))

    def test_unknown_output_mode(self):
        model = AudioNet(SMALL)
        with pytest.raises(ValueError):
            model(spec_batch(1), output="both")

    def test_width_multiplier_scales_parameters(self):
        counts = [parameter_count(AudioNet(ModelConfig(width_multiplier=m)))
                  for m in (1, 2, 4)]
        assert counts[0] < counts[1] < counts[2]

    def test_recurrent_variants_differ_in_structure(self):
        rnn = AudioNet(SMALL, variant="cnn_rnn")
        lstm = AudioNet(SMALL, variant="cnn_lstm")
        # an LSTM carries four gate blocks to the plain RNN's one
        assert parameter_count(lstm) > parameter_count(rnn)
        assert isinstance(rnn.rnn, torch.nn.RNN)
        assert isinstance(lstm.rnn, torch.nn.LSTM)


class TestVideoNet:
    def test_embedding_shape(self):
        model = VideoNet(SMALL).eval()
        out = model(clip_batch(2))
        assert out.shape == (2, SMALL.embed_dim)
        assert torch.isfinite(out).all()

    def test_conv_grid_matches_layer_arithmetic(self):
        # [DERIVED] pools after the first three of four conv blocks
        t, h, w = 20, 100, 60
        for _ in range(3):
            t, h, w = t // 2, h // 2, w // 2
        assert (t, h, w) == (2, 12, 7)
        model = VideoNet(SMALL)
        assert model.grid == (2, 12, 7)
        feat = model.conv(clip_batch(1))
        assert tuple(feat.shape) == (1, 64, 2, 12, 7)

    def test_eval_mode_deterministic(self):
        model = VideoNet(SMALL).eval()
        x = clip_batch(1)
        both = model(torch.cat([x, x]))
        assert torch.equal(both[0], both[1])

    def test_wrong_input_shape_rejected(self):
        model = VideoNet(SMALL)
        with pytest.raises(ShapeError):
            model(torch.zeros(1, 3, 20, 60, 100))

    def test_unknown_output_mode(self):
        model = VideoNet(SMALL)
        with pytest.raises(ValueError):
            model(clip_batch(1), output="logits")


class TestTwoStreamNet:
    CFG = ModelConfig(variant="two_stream", num_classes=3,
                      conv_channels=(4, 8, 8), rnn_hidden=16, embed_dim=8)

    def test_logit_shape(self):
        model = build_model(self.CFG, seed=0).eval()
        out = model(spec_batch(2), clip_batch(2))
        assert out.shape == (2, 3)
        assert torch.isfinite(out).all()

    def test_embeddings_shapes(self):
        model = TwoStreamNet(self.CFG).eval()
        za, zv = model.embeddings(spec_batch(2), clip_batch(2))
        assert za.shape == (2, 8) and zv.shape == (2, 8)

    def test_audio_branch_uses_configured_variant(self):
        cfg = ModelConfig(variant="two_stream", audio_variant="cnn_rnn",
                          conv_channels=(4, 8, 8), rnn_hidden=16, embed_dim=8)
        model = TwoStreamNet(cfg)
        assert isinstance(model.audio.rnn, torch.nn.RNN)

    def test_concat_order_audio_then_video(self):
        model = TwoStreamNet(self.CFG).eval()
        d = self.CFG.embed_dim
        spec, clip = spec_batch(1), clip_batch(1)
        with torch.no_grad():
            # silence the video half of the classifier; the logits must
            # then ignore any change to the clip input
            model.classifier.weight[:, d:] = 0.0
            a = model(spec, clip)
            b = model(spec, clip_batch(1, seed=9))
            assert torch.allclose(a, b)
            c = model(spec_batch(1, seed=9), clip)
            assert not torch.allclose(a, c)

    def test_batch_mismatch_rejected(self):
        model = TwoStreamNet(self.CFG)
        with pytest.raises(ShapeError):
            model(spec_batch(2), clip_batch(3))

    def test_gradient_reaches_both_streams(self):
        model = TwoStreamNet(self.CFG)
        out = model(spec_batch(2), clip_batch(2))
        out.sum().backward()
        audio_g = model.audio.conv[0].weight.grad
        video_g = model.video.conv[0].weight.grad
        assert audio_g is not None and audio_g.abs().sum() > 0
        assert video_g is not None and video_g.abs().sum() > 0


class TestBuildModel:
    def test_seeded_init_reproducible(self):
        a = build_model(SMALL, seed=3)
        b = build_model(SMALL, seed=3)
        c = build_model(SMALL, seed=4)
        pa = torch.cat([p.flatten() for p in a.parameters()])
        pb = torch.cat([p.flatten() for p in b.parameters()])
        pc = torch.cat([p.flatten() for p in c.parameters()])
        assert torch.equal(pa, pb)
        assert not torch.equal(pa, pc)

    def test_variant_dispatch(self):
        assert isinstance(build_model(ModelConfig(variant="cnn")), AudioNet)
        cfg = ModelConfig(variant="two_stream")
        assert isinstance(build_model(cfg), TwoStreamNet)
        assert cfg.audio_variant == "cnn_lstm"


class TestCheckpoints:
    def test_roundtrip_preserves_outputs(self, tmp_path):
        model = build_model(SMALL, seed=1).eval()
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path, SMALL, iteration=17, seed=1,
                        extra={"val_accuracy": 0.5})
        restored, meta = restore_model(path)
        restored.eval()
        x = spec_batch(2)
        assert torch.equal(model(x), restored(x))
        assert meta["iteration"] == 17
        assert meta["seed"] == 1
        assert meta["extra"]["val_accuracy"] == 0.5
        assert ModelConfig.from_dict(meta["config"]) == SMALL

    def test_two_stream_roundtrip(self, tmp_path):
        cfg = TestTwoStreamNet.CFG
        model = build_model(cfg, seed=2).eval()
        path = tmp_path / "ts.ckpt"
        save_checkpoint(model, path, cfg)
        restored, _ = restore_model(path)
        restored.eval()
        spec, clip = spec_batch(2), clip_batch(2)
        assert torch.equal(model(spec, clip), restored(spec, clip))

    def test_version_guard(self, tmp_path):
        model = build_model(SMALL, seed=0)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path, SMALL)
        meta, arrays = load_checkpoint(path)
        import json

        meta["format_version"] = 99
        blob = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        with open(path, "wb") as f:
            np.savez(f, _meta_json=blob, **arrays)
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(path)

    def test_meta_lists_arrays(self, tmp_path):
        model = build_model(SMALL, seed=0)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path, SMALL)
        meta, arrays = load_checkpoint(path)
        assert meta["arrays"] == sorted(arrays)
        assert sorted(arrays) == sorted(model.state_dict())


class TestParameterCount:
    def test_matches_manual_sum(self):
        model = AudioNet(SMALL)
        want = sum(int(np.prod(p.shape)) for p in model.parameters())
        assert parameter_count(model) == want
