import math
import sys

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mrir.conditioning import (
    EmbeddingRefiner,
    ExternalCaptionProvider,
    ImageEmbedding,
    SidecarCaptionProvider,
    StubCaptionProvider,
    StubImageEncoder,
    StubTextEncoder,
    encode_long_prompt,
    make_null_conditioning,
    refine_image_embedding,
)
from mrir.errors import ProvenanceError
from mrir.numeric import check_module_gradients, randomize_parameters

from conftest import make_image


@pytest.fixture
def encoder():
    return StubTextEncoder(d_txt=8, vocab_size=128, seed=42)


def caption_with_tokens(encoder, n):
    words = [f"tok{i}" for i in range(n)]
    caption = " ".join(words)
    assert len(encoder.tokenize(caption)) == n
    return caption


class TestCaptionProviders:
    def test_stub_deterministic(self, image64):
        provider = StubCaptionProvider()
        a = provider.get_caption(image64)
        b = provider.get_caption(image64)
        assert a == b
        assert a.caption.strip()
        assert a.source == "stub"

    def test_stub_varies_with_content(self, image64):
        provider = StubCaptionProvider()
        other = make_image(99, 64)
        assert provider.get_caption(image64) != provider.get_caption(other)

    def test_sidecar_round_trip(self, tmp_path, image64):
        text = ("A field of ripe wheat stands against a clear blue sky, "
                "creating a picturesque sight.")
        img_path = tmp_path / "field.png"
        (tmp_path / "field.caption.txt").write_text(text, encoding="utf-8")
        record = SidecarCaptionProvider().get_caption(image64, img_path)
        assert record.caption == text
        assert record.source == "sidecar_file"

    def test_sidecar_missing_raises(self, tmp_path, image64):
        with pytest.raises(ProvenanceError):
            SidecarCaptionProvider().get_caption(image64, tmp_path / "absent.png")
        with pytest.raises(ProvenanceError):
            SidecarCaptionProvider().get_caption(image64, None)

    def test_external_command_adapter(self, tmp_path, image64):
        script = tmp_path / "captioner.py"
        script.write_text(
            "import sys, pathlib\n"
            "p = pathlib.Path(sys.argv[1])\n"
            "p.with_name(p.stem + '.caption.txt').write_text('external caption here')\n",
            encoding="utf-8",
        )
        img_path = tmp_path / "img.png"
        img_path.write_bytes(b"")
        provider = ExternalCaptionProvider([sys.executable, str(script)])
        record = provider.get_caption(image64, img_path)
        assert record.caption == "external caption here"
        assert record.source == "external"

    def test_external_command_must_write_file(self, tmp_path, image64):
        script = tmp_path / "noop.py"
        script.write_text("pass\n", encoding="utf-8")
        img_path = tmp_path / "img.png"
        img_path.write_bytes(b"")
        with pytest.raises(ProvenanceError):
            ExternalCaptionProvider([sys.executable, str(script)]).get_caption(image64, img_path)


class TestLongPromptEncoding:
    def test_exact_window_single_chunk(self, encoder):
        caption = caption_with_tokens(encoder, 75)
        emb = encode_long_prompt(caption, encoder)
        assert emb.chunk_count == 1
        direct = encoder.encode_window(encoder.tokenize(caption))
        assert torch.equal(emb.tokens, direct)

    def test_double_window(self, encoder):
        emb = encode_long_prompt(caption_with_tokens(encoder, 150), encoder)
        assert emb.chunk_count == 2
        assert emb.tokens.shape == (2 * 77, 8)

    def test_first_chunk_matches_prefix_encoding(self, encoder):
        caption = caption_with_tokens(encoder, 76)
        prefix = caption_with_tokens(encoder, 75)  # same leading words
        emb = encode_long_prompt(caption, encoder)
        prefix_emb = encode_long_prompt(prefix, encoder)
        assert emb.chunk_count == 2
        assert torch.equal(emb.tokens[:77], prefix_emb.tokens)

    def test_empty_caption_single_marker_chunk(self, encoder):
        emb = encode_long_prompt("", encoder)
        assert emb.chunk_count == 1
        assert emb.tokens.shape == (77, 8)

    def test_chunk_locality(self, encoder):
        a = caption_with_tokens(encoder, 100)
        b = a.rsplit(" ", 20)[0] + " " + " ".join(f"alt{i}" for i in range(20))
        ea, eb = encode_long_prompt(a, encoder), encode_long_prompt(b, encoder)
        assert torch.equal(ea.tokens[:77], eb.tokens[:77])
        assert not torch.equal(ea.tokens[77:], eb.tokens[77:])

    @settings(max_examples=60, deadline=None)
    @given(n=st.integers(min_value=0, max_value=400))
    def test_chunk_count_law(self, n):
        enc = StubTextEncoder(d_txt=4, vocab_size=64, seed=1)
        emb = encode_long_prompt(" ".join(f"w{i}" for i in range(n)), enc)
        assert emb.chunk_count == max(1, math.ceil(n / 75))
        assert emb.tokens.shape[0] == emb.chunk_count * 77

    def test_deterministic(self, encoder):
        caption = "a weathered stone bridge over a quiet stream"
        assert torch.equal(
            encode_long_prompt(caption, encoder).tokens,
            encode_long_prompt(caption, encoder).tokens,
        )


class TestImageEncoder:
    def test_shape_and_determinism(self, image64):
        enc = StubImageEncoder(d_img=6, n_tokens=5, seed=3)
        a = enc.encode(image64)
        b = enc.encode(image64)
        assert a.tokens.shape == (5, 6)
        assert not a.refined
        assert torch.equal(a.tokens, b.tokens)

    def test_17_token_default(self, image64):
        enc = StubImageEncoder()
        assert enc.encode(image64).tokens.shape == (17, 48)

    def test_token_count_must_be_square_plus_one(self):
        with pytest.raises(ValueError):
            StubImageEncoder(n_tokens=7)


class TestRefiner:
    def test_zero_input_zero_biases_gives_zero(self):
        refiner = EmbeddingRefiner(4, 4, 4)
        with torch.no_grad():
            for p in refiner.parameters():
                if p.ndim == 1:  # biases and layer-norm shifts
                    p.zero_()
        out = refiner(torch.zeros(3, 4))
        assert out.abs().max() == 0.0

    def test_matches_independent_reimplementation(self):
        refiner = EmbeddingRefiner(4, 4, 4).double()
        with torch.no_grad():
            for fc in (refiner.fc1, refiner.fc2, refiner.fc3):
                fc.weight.copy_(torch.eye(4, dtype=torch.float64))
                fc.bias.zero_()
        x = np.array([1.0, -1.0, 1.0, -1.0])

        def layer_norm(v, eps=1e-5):
            return (v - v.mean()) / np.sqrt(v.var() + eps)

        def leaky(v, slope=0.01):
            return np.where(v >= 0, v, slope * v)

        h = leaky(layer_norm(x))
        h = leaky(layer_norm(h))
        expected = h  # final affine is identity here
        out = refiner(torch.tensor(x)[None]).detach().numpy()[0]
        assert np.abs(out - expected).max() < 1e-12

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(0)
        refiner = EmbeddingRefiner(3, 5, 4).double()
        randomize_parameters(refiner, seed=8)
        x = torch.randn(6, 3, dtype=torch.float64)
        errors = check_module_gradients(refiner, lambda: refiner(x).sum())
        assert max(errors.values()) <= 1e-4, errors

    def test_output_width_and_flag(self, image64):
        enc = StubImageEncoder(d_img=6, n_tokens=5, seed=3)
        refiner = EmbeddingRefiner(6, 8, 12)
        refined = refine_image_embedding(enc.encode(image64), refiner)
        assert refined.tokens.shape == (5, 12)
        assert refined.refined
        with pytest.raises(ValueError):
            refine_image_embedding(refined, refiner)

    def test_gradients_finite_everywhere(self):
        refiner = EmbeddingRefiner(4, 4, 4).double()
        x = torch.zeros(2, 4, dtype=torch.float64, requires_grad=True)
        out = refiner(x).sum()
        out.backward()
        assert torch.isfinite(x.grad).all()


class TestNullConditioning:
    def test_null_text_single_chunk(self, encoder):
        null_text, null_image = make_null_conditioning(encoder, 5, 8)
        assert null_text.chunk_count == 1
        assert null_image.tokens.abs().max() == 0.0
        assert null_image.refined

    def test_deterministic(self, encoder):
        a = make_null_conditioning(encoder, 5, 8)
        b = make_null_conditioning(encoder, 5, 8)
        assert torch.equal(a[0].tokens, b[0].tokens)
        assert torch.equal(a[1].tokens, b[1].tokens)


def test_embedding_validation():
    with pytest.raises(ValueError):
        ImageEmbedding(tokens=torch.full((3, 4), float("nan")), refined=False)
