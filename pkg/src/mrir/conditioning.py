"""Textual-level control: captions, chunked text embeddings, refined image embeddings.

The caption source and the two encoders hide behind small provider classes so
the whole pipeline runs hermetically. The stub providers are pure functions
of (input bytes, config): captions come from a hash-driven template, token
and patch embeddings from seeded pseudo-random tables. A real captioner can
be attached through the sidecar-file or external-command providers without
touching anything downstream.
"""

from __future__ import annotations

import hashlib
import re
import subprocess
import threading
from dataclasses import dataclass, replace
from pathlib import Path

import cv2
import numpy as np
import torch
from torch import nn

from .config import ConditioningConfig, DEFAULT_INSTRUCTION
from .errors import ProvenanceError


@dataclass(frozen=True)
class PromptRecord:
    caption: str
    source: str  # sidecar_file | stub | external
    instruction: str = DEFAULT_INSTRUCTION

    def __post_init__(self):
        if not self.caption.strip():
            raise ValueError("caption is empty after trimming")


@dataclass(frozen=True)
class TextEmbedding:
    tokens: torch.Tensor  # [chunk_count * (window + 2), d_txt]
    chunk_count: int
    window: int = 75

    def __post_init__(self):
        expect = self.chunk_count * (self.window + 2)
        if self.chunk_count < 1:
            raise ValueError(f"chunk_count {self.chunk_count} must be >= 1")
        if self.tokens.shape[0] != expect:
            raise ValueError(f"token length {self.tokens.shape[0]} != {expect}")
        if not torch.isfinite(self.tokens).all():
            raise ValueError("text embedding contains non-finite entries")


@dataclass(frozen=True)
class ImageEmbedding:
    tokens: torch.Tensor  # [M, d]
    refined: bool

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ValueError(f"expected [M, d] tokens, got shape {tuple(self.tokens.shape)}")
        if not torch.isfinite(self.tokens).all():
            raise ValueError("image embedding contains non-finite entries")


# --------------------------------------------------------------------------
# caption providers


def _image_digest(image: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(image)
    h = hashlib.sha256()
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.digest()


_ADJECTIVES = ("weathered", "sunlit", "quiet", "vivid", "dusty", "rain-soaked", "golden", "distant")
_SUBJECTS = ("stone bridge", "pine forest", "market street", "harbor wall", "wheat field",
             "mountain ridge", "tiled rooftop", "river bend")
_SETTINGS = ("under a clear sky", "at dusk", "in soft morning light", "after the rain",
             "in late afternoon", "under scattered clouds")
_DETAILS = ("fine surface texture", "sharp edge detail", "layered depth", "crisp shadows",
            "subtle color gradients", "dense repeating patterns")


class StubCaptionProvider:
    """Deterministic caption from a fixed template keyed by the image bytes."""

    def __init__(self, instruction: str = DEFAULT_INSTRUCTION):
        self.instruction = instruction

    def get_caption(self, image: np.ndarray, path: Path | None = None) -> PromptRecord:
        digest = _image_digest(image)
        pick = lambda options, i: options[digest[i] % len(options)]
        caption = (
            f"a {pick(_ADJECTIVES, 0)} {pick(_SUBJECTS, 1)} {pick(_SETTINGS, 2)}, "
            f"showing {pick(_DETAILS, 3)} and {pick(_DETAILS, 4)}"
        )
        return PromptRecord(caption=caption, source="stub", instruction=self.instruction)


def sidecar_path(image_path: Path) -> Path:
    return image_path.with_name(image_path.stem + ".caption.txt")


class SidecarCaptionProvider:
    """Caption read from `<image-stem>.caption.txt` next to the image."""

    def __init__(self, instruction: str = DEFAULT_INSTRUCTION):
        self.instruction = instruction

    def get_caption(self, image: np.ndarray, path: Path | None = None) -> PromptRecord:
        if path is None:
            raise ProvenanceError("sidecar captions require the image path")
        sc = sidecar_path(Path(path))
        if not sc.exists():
            raise ProvenanceError(f"caption file not found: {sc}")
        caption = sc.read_text(encoding="utf-8").strip()
        return PromptRecord(caption=caption, source="sidecar_file", instruction=self.instruction)


class ExternalCaptionProvider:
    """Runs a user command that must write the sidecar caption file.

    The command receives the image path as its last argument. Subprocess I/O
    is serialized; concurrent callers queue on a lock.
    """

    def __init__(self, command: list[str] | str, instruction: str = DEFAULT_INSTRUCTION):
        self.command = command.split() if isinstance(command, str) else list(command)
        self.instruction = instruction
        self._lock = threading.Lock()

    def get_caption(self, image: np.ndarray, path: Path | None = None) -> PromptRecord:
        if path is None:
            raise ProvenanceError("external captioning requires the image path")
        path = Path(path)
        with self._lock:
            subprocess.run(self.command + [str(path)], check=True)
        sc = sidecar_path(path)
        if not sc.exists():
            raise ProvenanceError(f"external command did not write {sc}")
        caption = sc.read_text(encoding="utf-8").strip()
        return PromptRecord(caption=caption, source="external", instruction=self.instruction)


def make_caption_provider(cfg: ConditioningConfig):
    if cfg.provider == "stub":
        return StubCaptionProvider(cfg.instruction)
    if cfg.provider == "sidecar":
        return SidecarCaptionProvider(cfg.instruction)
    return ExternalCaptionProvider(cfg.external_command, cfg.instruction)


def get_caption(lq: np.ndarray, provider, path: Path | None = None) -> PromptRecord:
    return provider.get_caption(lq, path)


# --------------------------------------------------------------------------
# text encoding with a fixed 75-token window


class StubTextEncoder:
    """Deterministic drop-in for a fixed-window text encoder.

    Tokens are lowercase words / punctuation marks hashed into a fixed
    vocabulary; each window position gets table[token] + positions[slot],
    both drawn once from a seeded PCG64 stream. Window layout mirrors the
    common 77-slot convention: begin marker, up to 75 content tokens, end
    marker, then padding.
    """

    PAD, BOS, EOS = 0, 1, 2
    _WORD = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")

    def __init__(self, d_txt: int = 64, vocab_size: int = 4096, window: int = 75, seed: int = 2001):
        if vocab_size < 8:
            raise ValueError(f"vocab_size {vocab_size} too small")
        self.d_txt = d_txt
        self.vocab_size = vocab_size
        self.window = window
        rng = np.random.Generator(np.random.PCG64(seed))
        self.table = (rng.standard_normal((vocab_size, d_txt)) / np.sqrt(d_txt)).astype(np.float32)
        self.positions = (rng.standard_normal((window + 2, d_txt)) / np.sqrt(d_txt)).astype(np.float32)

    def tokenize(self, text: str) -> list[int]:
        ids = []
        for word in self._WORD.findall(text.lower()):
            digest = hashlib.sha256(word.encode("utf-8")).digest()
            ids.append(3 + int.from_bytes(digest[:8], "big") % (self.vocab_size - 3))
        return ids

    def encode_window(self, ids: list[int]) -> torch.Tensor:
        """Encode at most `window` content tokens into [window + 2, d_txt]."""
        if len(ids) > self.window:
            raise ValueError(f"{len(ids)} tokens exceed window {self.window}")
        seq = [self.BOS] + list(ids) + [self.EOS]
        seq += [self.PAD] * (self.window + 2 - len(seq))
        emb = self.table[np.asarray(seq)] + self.positions
        return torch.from_numpy(emb)


def encode_long_prompt(caption: str, encoder: StubTextEncoder) -> TextEmbedding:
    """Chunked encoding for prompts longer than one encoder window.

    Token ids split into consecutive chunks of at most `window`; each chunk is
    encoded independently with its own begin/end markers and the outputs are
    concatenated along the sequence axis. The empty caption yields a single
    all-marker chunk.
    """
    ids = encoder.tokenize(caption)
    w = encoder.window
    chunks = [ids[i : i + w] for i in range(0, len(ids), w)] or [[]]
    tokens = torch.cat([encoder.encode_window(chunk) for chunk in chunks], dim=0)
    return TextEmbedding(tokens=tokens, chunk_count=len(chunks), window=w)


# --------------------------------------------------------------------------
# image encoding and the refiner


class StubImageEncoder:
    """Deterministic patch-token image encoder.

    The image is area-resized onto a fixed canvas, cut into a g x g patch
    grid, and each flattened patch goes through one seeded pseudo-random
    projection. A mean token is appended as the global summary.
    """

    def __init__(self, d_img: int = 48, n_tokens: int = 17, seed: int = 2002, canvas: int = 32):
        grid = int(round((n_tokens - 1) ** 0.5))
        if grid * grid != n_tokens - 1:
            raise ValueError(f"n_tokens {n_tokens} must be a square patch count plus one")
        self.d_img = d_img
        self.n_tokens = n_tokens
        self.grid = grid
        self.canvas = canvas
        patch = canvas // grid
        rng = np.random.Generator(np.random.PCG64(seed))
        dim_in = patch * patch * 3
        self.proj = (rng.standard_normal((dim_in, d_img)) / np.sqrt(dim_in)).astype(np.float32)
        self.positions = (rng.standard_normal((n_tokens, d_img)) / np.sqrt(d_img)).astype(np.float32)

    def encode(self, image: np.ndarray) -> ImageEmbedding:
        canvas = cv2.resize(
            image.astype(np.float64), (self.canvas, self.canvas), interpolation=cv2.INTER_AREA
        ).astype(np.float32)
        p = self.canvas // self.grid
        patches = canvas.reshape(self.grid, p, self.grid, p, 3).transpose(0, 2, 1, 3, 4)
        flat = patches.reshape(self.grid * self.grid, p * p * 3)
        toks = flat @ self.proj
        toks = np.concatenate([toks, toks.mean(axis=0, keepdims=True)], axis=0)
        toks = toks + self.positions
        return ImageEmbedding(tokens=torch.from_numpy(toks), refined=False)


class EmbeddingRefiner(nn.Module):
    """Per-token correction MLP applied to raw image tokens.

    Two [affine -> layer-norm -> leaky-ReLU] stages followed by a plain
    affine projection onto the cross-attention width.
    """

    def __init__(self, d_in: int, d_hidden: int, d_out: int, negative_slope: float = 0.01):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.ln1 = nn.LayerNorm(d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_hidden)
        self.ln2 = nn.LayerNorm(d_hidden)
        self.fc3 = nn.Linear(d_hidden, d_out)
        self.act = nn.LeakyReLU(negative_slope)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        h = self.act(self.ln1(self.fc1(tokens)))
        h = self.act(self.ln2(self.fc2(h)))
        return self.fc3(h)


def refine_image_embedding(raw: ImageEmbedding, refiner: EmbeddingRefiner) -> ImageEmbedding:
    if raw.refined:
        raise ValueError("embedding is already refined")
    out = refiner(raw.tokens.to(next(refiner.parameters()).dtype))
    return ImageEmbedding(tokens=out, refined=True)


# --------------------------------------------------------------------------
# bundles


@dataclass(frozen=True)
class ConditioningBundle:
    """Everything the denoiser consumes at the textual level, plus the
    matching null branch for classifier-free guidance."""

    text: TextEmbedding
    image: ImageEmbedding
    null_text: TextEmbedding
    null_image: ImageEmbedding

    def __post_init__(self):
        if not self.image.refined or not self.null_image.refined:
            raise ValueError("bundle image embeddings must be refined")


def make_null_conditioning(
    encoder: StubTextEncoder, n_tokens: int, d_cross: int
) -> tuple[TextEmbedding, ImageEmbedding]:
    null_text = encode_long_prompt("", encoder)
    null_image = ImageEmbedding(tokens=torch.zeros(n_tokens, d_cross), refined=True)
    return null_text, null_image


def build_conditioning(
    lq: np.ndarray,
    caption_provider,
    text_encoder: StubTextEncoder,
    image_encoder: StubImageEncoder,
    refiner: EmbeddingRefiner,
    path: Path | None = None,
) -> ConditioningBundle:
    record = get_caption(lq, caption_provider, path)
    text = encode_long_prompt(record.caption, text_encoder)
    with torch.no_grad():
        image = refine_image_embedding(image_encoder.encode(lq), refiner)
    null_text, null_image = make_null_conditioning(
        text_encoder, image_encoder.n_tokens, refiner.fc3.out_features
    )
    return ConditioningBundle(text=text, image=image, null_text=null_text, null_image=null_image)
