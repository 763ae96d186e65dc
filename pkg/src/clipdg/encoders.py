"""Vision/text encoder bundles behind one interface.

A bundle exposes the vision path as ``f_v = p . f_I`` (intermediate features,
then a linear projector into the shared space of width ``c_f``), the text
encoder ``f_t`` with access to its token-embedding table, and a tokenizer. The
text side can run on raw embedding sequences, which is how image-conditioned
tokens are spliced into a prompt.

Toy bundles are small deterministic modules fully determined by their dims
and seed; pretrained bundles wrap on-disk HuggingFace CLIP/BERT weights.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class BundleDims:
    d_i: int = 64
    c_f: int = 32
    d_t: int = 32
    context_length: int = 32
    channels: int = 3
    image_side: int = 16

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- tokenizers

DR_WORDS = ("a", "photo", "of", "an", "the", "fundus", "image", "No", "no", "DR", "mild", "moderate",
            "severe", "proliferative", "Diabetic", "Retinopathy", "diabetic", "retinopathy", "x")


class WhitespaceTokenizer:
    """Whitespace tokenizer over a fixed vocabulary.

    Sequences are framed as ``[<sot>, words..., <eot>]``; unknown words map to
    ``<unk>``. Casing is preserved.
    """

    PAD, SOT, EOT, UNK = 0, 1, 2, 3
    SPECIALS = ("<pad>", "<sot>", "<eot>", "<unk>")

    def __init__(self, words: Sequence[str]):
        vocab = list(self.SPECIALS)
        for w in words:
            if w not in vocab:
                vocab.append(w)
        self.vocab = tuple(vocab)
        self._index = {w: i for i, w in enumerate(self.vocab)}

    @classmethod
    def default(cls, n_class_words: int = 64) -> "WhitespaceTokenizer":
        return cls(DR_WORDS + tuple(f"class_{i}" for i in range(n_class_words)))

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def eot_id(self) -> int:
        return self.EOT

    def encode(self, text: str) -> list[int]:
        return [self.SOT, *(self._index.get(w, self.UNK) for w in text.split()), self.EOT]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.vocab[i] for i in ids if i not in (self.PAD, self.SOT, self.EOT))

    def eot_position(self, ids: Sequence[int]) -> int:
        return len(ids) - 1


class HFTokenizer:
    """Adapter giving a HuggingFace tokenizer the framing used here."""

    def __init__(self, tok):
        self.tok = tok
        self.PAD = tok.pad_token_id if tok.pad_token_id is not None else 0

    @property
    def vocab_size(self) -> int:
        return len(self.tok)

    def encode(self, text: str) -> list[int]:
        return list(self.tok(text, add_special_tokens=True)["input_ids"])

    def decode(self, ids: Sequence[int]) -> str:
        return self.tok.decode(ids, skip_special_tokens=True)

    def eot_position(self, ids: Sequence[int]) -> int:
        return len(ids) - 1


# ---------------------------------------------------------------- toy modules

class LinearVisionEncoder(nn.Module):
    """Flatten the image and apply one affine map: ``f_I(x) = vec(x) @ W + b``."""

    def __init__(self, in_shape: tuple[int, int, int], d_i: int):
        super().__init__()
        self.in_shape = tuple(in_shape)
        n_in = int(np.prod(in_shape))
        self.weight = nn.Parameter(torch.empty(n_in, d_i))
        self.bias = nn.Parameter(torch.zeros(d_i))
        self.out_dim = d_i

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[1:]) != self.in_shape:
            raise EncoderError(f"vision encoder expects images of shape {self.in_shape}, got {tuple(x.shape[1:])}")
        return x.flatten(1) @ self.weight + self.bias


class ToyTextEncoder(nn.Module):
    """Token embeddings, then either one pre-norm causal self-attention block
    or a plain sum over positions, read out at the end-of-text position and
    projected to ``c_f``."""

    def __init__(self, vocab_size: int, d_t: int, c_f: int, context_length: int, arch: str = "attention"):
        super().__init__()
        if arch not in ("attention", "bag"):
            raise EncoderError(f"unknown toy text architecture {arch!r}")
        self.arch = arch
        self.context_length = context_length
        self.width = d_t
        self.out_dim = c_f
        self.token_embedding = nn.Embedding(vocab_size, d_t)
        self.proj = nn.Parameter(torch.empty(d_t, c_f))
        if arch == "attention":
            self.positional_embedding = nn.Parameter(torch.empty(context_length, d_t))
            self.ln_1 = nn.LayerNorm(d_t)
            self.qkv = nn.Linear(d_t, 3 * d_t)
            self.out = nn.Linear(d_t, d_t)
            self.ln_2 = nn.LayerNorm(d_t)
            self.mlp = nn.Sequential(nn.Linear(d_t, 2 * d_t), nn.GELU(), nn.Linear(2 * d_t, d_t))
            self.ln_final = nn.LayerNorm(d_t)

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        return self.token_embedding(ids)

    def forward_embeddings(self, x: torch.Tensor, eot_pos: torch.Tensor) -> torch.Tensor:
        n, length, _ = x.shape
        rows = torch.arange(n)
        if self.arch == "bag":
            keep = (torch.arange(length)[None, :] <= eot_pos[:, None]).to(x.dtype)
            return (x * keep[..., None]).sum(1) @ self.proj

        h = x + self.positional_embedding[:length]
        q, k, v = self.qkv(self.ln_1(h)).chunk(3, dim=-1)
        scores = q @ k.transpose(1, 2) / math.sqrt(self.width)
        causal = torch.ones(length, length, dtype=torch.bool).triu(1)
        attn = scores.masked_fill(causal, float("-inf")).softmax(-1)
        h = h + self.out(attn @ v)
        h = h + self.mlp(self.ln_2(h))
        return self.ln_final(h[rows, eot_pos]) @ self.proj


# ---------------------------------------------------------------- HF wrappers

class HFClipVision(nn.Module):
    def __init__(self, vision_model):
        super().__init__()
        self.model = vision_model
        self.out_dim = vision_model.config.hidden_size

    def forward(self, x):
        return self.model(pixel_values=x).pooler_output


class HFClipText(nn.Module):
    def __init__(self, text_model, projection: nn.Module):
        super().__init__()
        self.model = text_model
        self.proj_layer = projection
        self.context_length = text_model.config.max_position_embeddings
        self.width = text_model.config.hidden_size
        self.out_dim = projection.out_features

    def embed(self, ids):
        return self.model.embeddings.token_embedding(ids)

    def forward_embeddings(self, x, eot_pos):
        from transformers.masking_utils import create_causal_mask

        h = self.model.embeddings(inputs_embeds=x)
        mask = create_causal_mask(config=self.model.config, inputs_embeds=h, attention_mask=None,
                                  past_key_values=None)
        h = self.model.encoder(inputs_embeds=h, attention_mask=mask, is_causal=True).last_hidden_state
        h = self.model.final_layer_norm(h)
        return self.proj_layer(h[torch.arange(len(h)), eot_pos])


class HFBertText(nn.Module):
    def __init__(self, bert, projection: nn.Module | None):
        super().__init__()
        self.model = bert
        self.proj_layer = projection
        self.context_length = bert.config.max_position_embeddings
        self.width = bert.config.hidden_size
        self.out_dim = projection.out_features if projection is not None else self.width

    def embed(self, ids):
        return self.model.embeddings.word_embeddings(ids)

    def forward_embeddings(self, x, eot_pos):
        keep = (torch.arange(x.shape[1])[None, :] <= eot_pos[:, None]).long()
        h = self.model(inputs_embeds=x, attention_mask=keep).last_hidden_state
        h = h[torch.arange(len(h)), eot_pos]
        return self.proj_layer(h) if self.proj_layer is not None else h


# ---------------------------------------------------------------- bundle

class EncoderBundle(nn.Module):
    """``vision`` (f_I), ``projector`` (p) and ``text`` (f_t) plus a tokenizer."""

    def __init__(self, vision: nn.Module, projector: nn.Module, text: nn.Module, tokenizer,
                 dims: BundleDims, spec: Mapping | None = None):
        super().__init__()
        self.vision = vision
        self.projector = projector
        self.text = text
        self.tokenizer = tokenizer
        self.dims = dims
        self.spec = dict(spec or {})
        if projector.in_features != vision.out_dim:
            raise EncoderError(
                f"projector expects width {projector.in_features} but f_I emits {vision.out_dim}")
        if projector.out_features != text.out_dim:
            raise EncoderError(
                f"vision features have width {projector.out_features} but text features have "
                f"width {text.out_dim}; configure a text projector")

    @property
    def dtype(self) -> torch.dtype:
        return self.projector.weight.dtype

    def set_trainable(self, vision: bool | None = None, projector: bool | None = None,
                      text: bool | None = None) -> "EncoderBundle":
        for part, flag in ((self.vision, vision), (self.projector, projector), (self.text, text)):
            if flag is not None:
                part.requires_grad_(flag)
        return self

    def trainable(self) -> dict[str, bool]:
        return {name: any(p.requires_grad for p in getattr(self, name).parameters())
                for name in ("vision", "projector", "text")}


def normalize_rows(z: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    norms = z.norm(dim=-1, keepdim=True)
    if bool((norms <= eps).any()):
        raise EncoderError("cannot normalize a zero feature row")
    return z / norms


def _as_images(bundle: EncoderBundle, images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images.to(bundle.dtype)
    return torch.as_tensor(np.asarray(images), dtype=bundle.dtype)


def encode_image_intermediate(bundle: EncoderBundle, images) -> torch.Tensor:
    """``f_I(images)``, unnormalized, shape ``(B, d_i)``."""
    feats = bundle.vision(_as_images(bundle, images))
    if feats.shape[-1] != bundle.projector.in_features:
        raise EncoderError(f"f_I emitted width {feats.shape[-1]}, projector expects {bundle.projector.in_features}")
    return feats


def project_image_features(bundle: EncoderBundle, intermediate: torch.Tensor) -> torch.Tensor:
    return normalize_rows(bundle.projector(intermediate))


def encode_image(bundle: EncoderBundle, images) -> torch.Tensor:
    """Row-normalized ``p(f_I(images))``, shape ``(B, c_f)``."""
    return project_image_features(bundle, encode_image_intermediate(bundle, images))


def _ids_tensor(seq) -> torch.Tensor:
    return torch.as_tensor(list(seq), dtype=torch.long)


def build_injected_sequence(bundle: EncoderBundle, token_ids: Sequence[Sequence[int]],
                            injected: torch.Tensor | None) -> tuple[torch.Tensor, torch.Tensor]:
    """Token embeddings with ``injected[i]`` spliced in before each end-of-text token.

    ``token_ids`` holds framed sequences (ending in end-of-text); ``injected``
    has shape ``(N, n_p, d_t)`` in token-embedding space. Returns the padded
    ``(N, L, d_t)`` embedding batch and each row's end-of-text index. Raises
    :class:`EncoderError` if a sequence would exceed the context length.
    """
    text = bundle.text
    n = len(token_ids)
    n_p = 0 if injected is None else injected.shape[1]
    if injected is not None and (injected.shape[0] != n or injected.shape[2] != text.width):
        raise EncoderError(f"injected embeddings must have shape ({n}, n_p, {text.width}), got {tuple(injected.shape)}")
    lengths = [len(s) + n_p for s in token_ids]
    for s, total in zip(token_ids, lengths):
        if total > text.context_length:
            raise EncoderError(
                f"sequence of {len(s)} tokens + {n_p} injected exceeds context length {text.context_length}")
    width = max(lengths)
    pad = getattr(bundle.tokenizer, "PAD", 0)
    rows = []
    for i, seq in enumerate(token_ids):
        emb = text.embed(_ids_tensor(list(seq) + [pad] * (width - len(seq) - n_p)))
        k = len(seq) - 1
        parts = [emb[:k]]
        if n_p:
            parts.append(injected[i].to(emb.dtype))
        parts.append(emb[k:])
        rows.append(torch.cat(parts))
    return torch.stack(rows), torch.as_tensor([l - 1 for l in lengths], dtype=torch.long)


def encode_text_with_injected_embeddings(bundle: EncoderBundle, token_ids: Sequence[Sequence[int]],
                                         injected: torch.Tensor | None) -> torch.Tensor:
    """Encode token sequences with injected embeddings placed before end-of-text.

    The end-of-text token moves after the injected block and position
    embeddings run over the whole sequence. Returns row-normalized
    ``(N, c_f)`` features; gradients flow to ``injected``.
    """
    x, eot = build_injected_sequence(bundle, token_ids, injected)
    return normalize_rows(bundle.text.forward_embeddings(x, eot))


def encode_text(bundle: EncoderBundle, token_sequences: Sequence[Sequence[int]]) -> torch.Tensor:
    """Row-normalized text features read at each sequence's end-of-text position."""
    return encode_text_with_injected_embeddings(bundle, token_sequences, None)


def token_embeddings(bundle: EncoderBundle, ids: Sequence[int]) -> torch.Tensor:
    return bundle.text.embed(_ids_tensor(ids))


def parameter_hash(module: nn.Module) -> str:
    """SHA-256 over every parameter's name, dtype, shape and raw bytes."""
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        t = p.detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- factories

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def build_toy_bundle(dims: BundleDims | Mapping | None = None, seed: int = 0, text_arch: str = "attention",
                     dtype: str | torch.dtype = torch.float32) -> EncoderBundle:
    """Small deterministic encoders fully determined by ``(dims, seed)``."""
    if dims is None:
        dims = BundleDims()
    elif isinstance(dims, Mapping):
        dims = BundleDims(**dims)
    dtype = _DTYPES.get(dtype, dtype) if isinstance(dtype, str) else dtype
    tokenizer = WhitespaceTokenizer.default()
    g = torch.Generator().manual_seed(int(seed))

    vision = LinearVisionEncoder((dims.channels, dims.image_side, dims.image_side), dims.d_i)
    projector = nn.Linear(dims.d_i, dims.c_f, bias=False)
    text = ToyTextEncoder(tokenizer.vocab_size, dims.d_t, dims.c_f, dims.context_length, text_arch)

    with torch.no_grad():
        n_in = vision.weight.shape[0]
        vision.weight.copy_(torch.randn(vision.weight.shape, generator=g) / math.sqrt(n_in))
        projector.weight.copy_(torch.randn(projector.weight.shape, generator=g) / math.sqrt(dims.d_i))
        for name, p in text.named_parameters():
            if name.startswith(("ln_", "ln_final")):
                continue
            if name.endswith("bias"):
                p.zero_()
            elif name == "proj":
                p.copy_(torch.randn(p.shape, generator=g) / math.sqrt(dims.d_t))
            elif name in ("token_embedding.weight", "positional_embedding"):
                p.copy_(torch.randn(p.shape, generator=g) * (0.5 if name == "positional_embedding" else 1.0))
            else:
                p.copy_(torch.randn(p.shape, generator=g) / math.sqrt(p.shape[-1]))

    spec = {"kind": "toy", **dims.to_dict(), "seed": int(seed), "text_arch": text_arch,
            "dtype": "float64" if dtype == torch.float64 else "float32"}
    return EncoderBundle(vision, projector, text, tokenizer, dims, spec).to(dtype)


def _check_path(path, what: str, expected: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise EncoderError(f"{what} weights not found at {p} (expected {expected})")
    return p


def _load_projector(spec: Mapping | None, in_dim: int, out_dim: int, what: str) -> nn.Linear | None:
    if spec is None:
        return None
    layer = nn.Linear(in_dim, out_dim, bias=False)
    if "path" in spec:
        p = _check_path(spec["path"], f"{what} projector", "a torch file holding a (c_f, width) 'weight' tensor")
        state = torch.load(p, map_location="cpu", weights_only=True)
        layer.load_state_dict({"weight": state["weight"]})
    else:
        g = torch.Generator().manual_seed(int(spec.get("seed", 0)))
        with torch.no_grad():
            layer.weight.copy_(torch.randn(layer.weight.shape, generator=g) / math.sqrt(in_dim))
    return layer


def load_pretrained_bundle(spec: Mapping) -> EncoderBundle:
    """Wrap on-disk HuggingFace weights behind the bundle interface.

    ``spec`` looks like::

        {"vision": {"kind": "clip", "path": DIR},
         "text": {"kind": "clip" | "bert", "path": DIR,
                  "projector": {"path": FILE} | {"seed": 0}}}   # projector only for bert

    CLIP directories hold a ``CLIPModel`` checkpoint (``save_pretrained``
    layout); ``bert`` directories hold a ``BertModel`` and its tokenizer. A BERT
    text encoder must name a projector into the CLIP space unless its width
    already equals ``c_f``.
    """
    from transformers import AutoTokenizer, BertModel, CLIPModel

    vspec, tspec = spec.get("vision"), spec.get("text")
    if not isinstance(vspec, Mapping) or not isinstance(tspec, Mapping):
        raise EncoderError("pretrained encoder spec needs 'vision' and 'text' sections")
    if vspec.get("kind", "clip") != "clip":
        raise EncoderError(f"unsupported vision encoder kind {vspec.get('kind')!r}")
    vpath = _check_path(vspec["path"], "vision", "a CLIPModel directory saved with save_pretrained")
    clip = CLIPModel.from_pretrained(vpath)
    vision = HFClipVision(clip.vision_model)
    projector = clip.visual_projection
    c_f = projector.out_features

    kind = tspec.get("kind", "clip")
    tpath = _check_path(tspec["path"], "text", "a CLIPModel or BertModel directory saved with save_pretrained")
    if kind == "clip":
        tclip = clip if Path(tpath) == Path(vpath) else CLIPModel.from_pretrained(tpath)
        text = HFClipText(tclip.text_model, tclip.text_projection)
    elif kind == "bert":
        bert = BertModel.from_pretrained(tpath, add_pooling_layer=False)
        width = bert.config.hidden_size
        proj = _load_projector(tspec.get("projector"), width, c_f, "text")
        if proj is None and width != c_f:
            raise EncoderError(
                f"text encoder width {width} differs from vision feature width {c_f} and no text projector is configured")
        text = HFBertText(bert, proj)
    else:
        raise EncoderError(f"unsupported text encoder kind {kind!r}")

    tok_path = tspec.get("tokenizer", tpath)
    if tok_path == "toy":
        tokenizer = WhitespaceTokenizer.default()
    else:
        tokenizer = HFTokenizer(AutoTokenizer.from_pretrained(tok_path))
    image_side = getattr(clip.config.vision_config, "image_size", 224)
    dims = BundleDims(d_i=vision.out_dim, c_f=c_f, d_t=text.width, context_length=text.context_length,
                      channels=3, image_side=image_side)
    return EncoderBundle(vision, projector, text, tokenizer, dims, {"kind": "pretrained", **spec})


def build_bundle(spec: Mapping) -> EncoderBundle:
    """Dispatch on ``spec['kind']`` (``toy`` or ``pretrained``)."""
    kind = spec.get("kind")
    if kind == "toy":
        fields = {k: spec[k] for k in BundleDims.__dataclass_fields__ if k in spec}
        return build_toy_bundle(BundleDims(**fields), seed=spec.get("seed", 0),
                                text_arch=spec.get("text_arch", "attention"), dtype=spec.get("dtype", "float32"))
    if kind == "pretrained":
        return load_pretrained_bundle(spec)
    raise EncoderError(f"unknown encoder kind {kind!r}")
