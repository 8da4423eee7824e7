"""Three-stream transformer: image encoder, text encoder and a fusion
encoder over the concatenated projected streams, plus the task heads.

All encoders share the same pre-norm block layout. Each residual branch
carries a learned output scale (initialized to one; zero starves tiny
models of early signal), weights are truncated-normal(0.02), biases zero.
Masked patches are replaced by a learned embedding after projection,
before positions.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, IntegrityError, UsageError
from .imageops import ImageMaskPlan, PatchGrid
from .textproc import TokenSequence

NEG_ATTN = -1e9  # finite additive mask; exp underflows to exactly 0


@dataclass
class EncoderConfig:
    depth: int = 2
    width: int = 64
    heads: int = 4
    mlp_ratio: int = 2
    max_positions: int = 64

    def __post_init__(self):
        if self.width < 1 or self.heads < 1 or self.mlp_ratio < 1 or self.max_positions < 1:
            raise ConfigError(f"encoder config fields must be >= 1: {self}")
        if self.depth < 0:
            raise ConfigError("encoder depth cannot be negative")
        if self.width % self.heads:
            raise ConfigError(
                f"width {self.width} not divisible by heads {self.heads}")


@dataclass
class ModelConfig:
    patch_size: int = 16
    caption_len: int = 16
    vocab_size: int = 64
    image: EncoderConfig = field(default_factory=EncoderConfig)
    text: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: EncoderConfig = field(default_factory=EncoderConfig)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    @property
    def fused_width(self) -> int:
        return self.fusion.width


@dataclass
class ImageEncoding:
    """Batched hidden states; row 0 of each sequence is CLS_I."""
    seq: Tensor                 # (B, 1+M, d)
    num_patches: int
    block_outputs: List[Tensor]
    attention: List[np.ndarray] = field(default_factory=list)

    def patch_states(self) -> Tensor:
        return ad.slice_axis(self.seq, 1, 1, 1 + self.num_patches)

    def cls(self) -> Tensor:
        b, _, d = self.seq.shape
        return ad.reshape(ad.slice_axis(self.seq, 1, 0, 1), (b, d))


@dataclass
class TextEncoding:
    seq: Tensor                  # (B, L, d)
    attention_mask: np.ndarray   # (B, L) bool

    def cls(self) -> Tensor:
        b, _, d = self.seq.shape
        return ad.reshape(ad.slice_axis(self.seq, 1, 0, 1), (b, d))


@dataclass
class MultimodalEncoding:
    """Fused states: [CLS_M; image span; text span], traceable by index."""
    seq: Tensor                  # (B, 1+M+L, d_m)
    image_span: Tuple[int, int]  # [start, stop) rows of the image stream
    text_span: Tuple[int, int]
    attention_mask: np.ndarray   # (B, 1+M+L) bool

    def cls(self) -> Tensor:
        b, _, d = self.seq.shape
        return ad.reshape(ad.slice_axis(self.seq, 1, 0, 1), (b, d))

    def image_states(self) -> Tensor:
        return ad.slice_axis(self.seq, 1, *self.image_span)

    def text_states(self) -> Tensor:
        return ad.slice_axis(self.seq, 1, *self.text_span)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _attention_bias(mask: Optional[np.ndarray], batch: int, heads: int, length: int) -> Optional[Tensor]:
    """Additive key-mask, materialized to (B, H, L, L)."""
    if mask is None:
        return None
    bias = np.where(mask[:, None, None, :], 0.0, NEG_ATTN)
    return Tensor(np.broadcast_to(bias, (batch, heads, length, length)).copy())


class Model:
    """Parameter container plus the forward paths of all three encoders."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.params: Dict[str, Tensor] = {}
        self._build(rng)

    # ------------------------------------------------------------------
    # parameter construction
    # ------------------------------------------------------------------

    def _add(self, name: str, array: np.ndarray) -> None:
        self.params[name] = ad.parameter(array)

    def _linear(self, rng, name: str, d_in: int, d_out: int, zero: bool = False) -> None:
        w = np.zeros((d_in, d_out)) if zero else trunc_normal(rng, (d_in, d_out))
        self._add(f"{name}.w", w)
        self._add(f"{name}.b", np.zeros(d_out))

    def _stack(self, rng, prefix: str, cfg: EncoderConfig) -> None:
        d = cfg.width
        for i in range(cfg.depth):
            b = f"{prefix}.b{i}"
            self._add(f"{b}.ln1.g", np.ones(d))
            self._add(f"{b}.ln1.b", np.zeros(d))
            for proj in ("wq", "wk", "wv", "wo"):
                self._add(f"{b}.attn.{proj}", trunc_normal(rng, (d, d)))
                self._add(f"{b}.attn.{proj[1]}b", np.zeros(d))
            self._add(f"{b}.scale_attn", np.array(1.0))
            self._add(f"{b}.ln2.g", np.ones(d))
            self._add(f"{b}.ln2.b", np.zeros(d))
            self._linear(rng, f"{b}.mlp.fc1", d, d * cfg.mlp_ratio)
            self._linear(rng, f"{b}.mlp.fc2", d * cfg.mlp_ratio, d)
            self._add(f"{b}.scale_mlp", np.array(1.0))
        if cfg.depth > 0:
            self._add(f"{prefix}.ln_f.g", np.ones(d))
            self._add(f"{prefix}.ln_f.b", np.zeros(d))

    def _build(self, rng: np.random.Generator) -> None:
        cfg = self.cfg
        di, dt, dm = cfg.image.width, cfg.text.width, cfg.fusion.width

        self._linear(rng, "img.patch_proj", cfg.patch_dim, di)
        self._add("img.cls", trunc_normal(rng, (di,)))
        self._add("img.mask", trunc_normal(rng, (di,)))
        self._add("img.pos", trunc_normal(rng, (cfg.image.max_positions, di)))
        self._stack(rng, "img", cfg.image)

        self._add("txt.tok", trunc_normal(rng, (cfg.vocab_size, dt)))
        self._add("txt.pos", trunc_normal(rng, (cfg.text.max_positions, dt)))
        self._stack(rng, "txt", cfg.text)

        self._linear(rng, "mm.proj_img", di, dm)
        self._linear(rng, "mm.proj_txt", dt, dm)
        self._add("mm.cls", trunc_normal(rng, (dm,)))
        self._stack(rng, "mm", cfg.fusion)

        self._linear(rng, "head.mim", di, cfg.patch_dim)
        self._linear(rng, "head.mlm", dt, cfg.vocab_size)
        self._linear(rng, "head.mmm_img", dm, cfg.patch_dim)
        self._linear(rng, "head.mmm_txt", dm, cfg.vocab_size)
        self._linear(rng, "head.itm", dm, 2)

    def ensure_id_head(self, num_classes: int, feature_dim: int,
                       rng: np.random.Generator) -> None:
        """Create (or validate) the identity classification head."""
        if "head.id.w" in self.params:
            w = self.params["head.id.w"]
            if w.shape != (feature_dim, num_classes):
                raise ConfigError(
                    f"existing id head has shape {w.shape}, "
                    f"need ({feature_dim}, {num_classes})")
            return
        self._linear(rng, "head.id", feature_dim, num_classes)

    @property
    def num_id_classes(self) -> Optional[int]:
        w = self.params.get("head.id.w")
        return None if w is None else w.shape[1]

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def param_names(self, prefix: str = "") -> List[str]:
        return [n for n in self.params if n.startswith(prefix)]

    # ------------------------------------------------------------------
    # transformer forward
    # ------------------------------------------------------------------

    def _run_stack(self, prefix: str, cfg: EncoderConfig, x: Tensor,
                   attn_mask: Optional[np.ndarray],
                   collect_attn: bool = False):
        batch, length, d = x.shape
        heads = cfg.heads
        hd = d // heads
        bias = _attention_bias(attn_mask, batch, heads, length)
        outputs: List[Tensor] = []
        attention: List[np.ndarray] = []
        p = self._p
        for i in range(cfg.depth):
            b = f"{prefix}.b{i}"
            h = ad.layer_norm(x, p(f"{b}.ln1.g"), p(f"{b}.ln1.b"))
            q = ad.add_broadcast(ad.matmul(h, p(f"{b}.attn.wq")), p(f"{b}.attn.qb"))
            k = ad.add_broadcast(ad.matmul(h, p(f"{b}.attn.wk")), p(f"{b}.attn.kb"))
            v = ad.add_broadcast(ad.matmul(h, p(f"{b}.attn.wv")), p(f"{b}.attn.vb"))
            q = ad.transpose(ad.reshape(q, (batch, length, heads, hd)), (0, 2, 1, 3))
            k = ad.transpose(ad.reshape(k, (batch, length, heads, hd)), (0, 2, 1, 3))
            v = ad.transpose(ad.reshape(v, (batch, length, heads, hd)), (0, 2, 1, 3))
            scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), hd ** -0.5)
            if bias is not None:
                scores = ad.add(scores, bias)
            attn = ad.softmax(scores, axis=-1)
            if collect_attn:
                attention.append(attn.data.copy())
            ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)),
                             (batch, length, d))
            ctx = ad.add_broadcast(ad.matmul(ctx, p(f"{b}.attn.wo")), p(f"{b}.attn.ob"))
            x = ad.add(x, ad.scale_by(ctx, p(f"{b}.scale_attn")))
            h = ad.layer_norm(x, p(f"{b}.ln2.g"), p(f"{b}.ln2.b"))
            h = ad.gelu(ad.add_broadcast(ad.matmul(h, p(f"{b}.mlp.fc1.w")),
                                         p(f"{b}.mlp.fc1.b")))
            h = ad.add_broadcast(ad.matmul(h, p(f"{b}.mlp.fc2.w")), p(f"{b}.mlp.fc2.b"))
            x = ad.add(x, ad.scale_by(h, p(f"{b}.scale_mlp")))
            outputs.append(x)
        if cfg.depth > 0:
            x = ad.layer_norm(x, p(f"{prefix}.ln_f.g"), p(f"{prefix}.ln_f.b"))
            outputs[-1] = x
        return x, outputs, attention

    # ------------------------------------------------------------------
    # the three encoders
    # ------------------------------------------------------------------

    def encode_image(self, grids: Sequence[PatchGrid],
                     plans: Optional[Sequence[Optional[ImageMaskPlan]]] = None,
                     collect_attn: bool = False) -> ImageEncoding:
        cfg = self.cfg.image
        batch = len(grids)
        m = grids[0].num_patches
        if any(g.num_patches != m for g in grids):
            raise UsageError("encode_image: mixed patch counts in one batch")
        if 1 + m > cfg.max_positions:
            raise ConfigError(
                f"image sequence 1+{m} exceeds max_positions {cfg.max_positions}")

        pixels = Tensor(np.stack([g.patches for g in grids]))  # (B, M, pd)
        x = ad.add_broadcast(ad.matmul(pixels, self._p("img.patch_proj.w")),
                             self._p("img.patch_proj.b"))
        if plans is not None:
            keep = np.ones((batch, m, 1))
            for i, plan in enumerate(plans):
                if plan is not None and len(plan):
                    keep[i, plan.positions] = 0.0
            keep = np.broadcast_to(keep, (batch, m, cfg.width)).copy()
            masked = ad.mul(ad.broadcast_rows(self._p("img.mask"), (batch, m)),
                            Tensor(1.0 - keep))
            x = ad.add(ad.mul(x, Tensor(keep)), masked)
        cls = ad.broadcast_rows(ad.reshape(self._p("img.cls"), (1, cfg.width)), (batch,))
        x = ad.concat([cls, x], axis=1)
        x = ad.add_broadcast(x, ad.slice_axis(self._p("img.pos"), 0, 0, 1 + m))
        embedded = x
        x, outputs, attention = self._run_stack("img", cfg, x, None, collect_attn)
        # embedding-level states first; the final entry is the encoder output
        return ImageEncoding(x, m, [embedded] + outputs, attention)

    def encode_text(self, seqs: Sequence[TokenSequence],
                    collect_attn: bool = False) -> TextEncoding:
        cfg = self.cfg.text
        ids = np.stack([s.ids for s in seqs])
        mask = np.stack([s.attention_mask for s in seqs])
        batch, length = ids.shape
        if length > cfg.max_positions:
            raise ConfigError(
                f"text sequence {length} exceeds max_positions {cfg.max_positions}")
        x = ad.embedding(self._p("txt.tok"), ids)
        x = ad.add_broadcast(x, ad.slice_axis(self._p("txt.pos"), 0, 0, length))
        x, _, _ = self._run_stack("txt", cfg, x, mask, collect_attn)
        return TextEncoding(x, mask)

    def fuse(self, img: ImageEncoding, txt: TextEncoding,
             collect_attn: bool = False) -> MultimodalEncoding:
        cfg = self.cfg.fusion
        batch, lt, _ = txt.seq.shape
        m = img.num_patches
        total = 1 + m + lt
        if total > cfg.max_positions:
            raise ConfigError(
                f"fused sequence {total} exceeds max_positions {cfg.max_positions}")
        pi = ad.add_broadcast(ad.matmul(img.patch_states(), self._p("mm.proj_img.w")),
                              self._p("mm.proj_img.b"))
        pt = ad.add_broadcast(ad.matmul(txt.seq, self._p("mm.proj_txt.w")),
                              self._p("mm.proj_txt.b"))
        cls = ad.broadcast_rows(ad.reshape(self._p("mm.cls"), (1, cfg.width)), (batch,))
        x = ad.concat([cls, pi, pt], axis=1)
        mask = np.concatenate([np.ones((batch, 1 + m), dtype=bool),
                               txt.attention_mask], axis=1)
        x, _, _ = self._run_stack("mm", cfg, x, mask, collect_attn)
        return MultimodalEncoding(x, (1, 1 + m), (1 + m, total), mask)

    # ------------------------------------------------------------------
    # heads
    # ------------------------------------------------------------------

    def head(self, name: str, x: Tensor) -> Tensor:
        return ad.add_broadcast(ad.matmul(x, self._p(f"head.{name}.w")),
                                self._p(f"head.{name}.b"))


# ---------------------------------------------------------------------------
# checkpoint container: versioned header + named blocks
# ---------------------------------------------------------------------------

_MAGIC = b"FRCKPT\x00\x01"
_KIND_ARRAY = 0
_KIND_JSON = 1


def save_checkpoint(path, arrays: Dict[str, np.ndarray],
                    extra: Optional[dict] = None) -> None:
    """Named float64 parameter blocks plus one optional JSON block."""
    with open(path, "wb") as fh:
        blocks = len(arrays) + (1 if extra is not None else 0)
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", blocks))
        for name in arrays:
            data = np.asarray(arrays[name], dtype="<f8")
            enc = name.encode("utf-8")
            fh.write(struct.pack("<BH", _KIND_ARRAY, len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(np.ascontiguousarray(data).tobytes())
        if extra is not None:
            payload = json.dumps(extra, sort_keys=True).encode("utf-8")
            enc = b"__meta__"
            fh.write(struct.pack("<BH", _KIND_JSON, len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], Optional[dict]]:
    p = Path(path)
    if not p.exists():
        raise DataError(f"checkpoint not found: {path}")
    raw = p.read_bytes()
    if raw[:8] != _MAGIC:
        raise DataError(f"{path}: not a fusionreid checkpoint")
    (count,) = struct.unpack_from("<I", raw, 8)
    pos = 12
    arrays: Dict[str, np.ndarray] = {}
    extra = None
    for _ in range(count):
        kind, name_len = struct.unpack_from("<BH", raw, pos)
        pos += 3
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        if kind == _KIND_ARRAY:
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            arr = np.frombuffer(raw, dtype="<f8", count=n, offset=pos)
            pos += 8 * n
            arrays[name] = arr.reshape(shape).astype(np.float64)
        elif kind == _KIND_JSON:
            (size,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            extra = json.loads(raw[pos:pos + size].decode("utf-8"))
            pos += size
        else:
            raise DataError(f"{path}: unknown block kind {kind}")
    return arrays, extra


def load_into_model(model: Model, arrays: Dict[str, np.ndarray],
                    strict: bool = False) -> List[str]:
    """Copy named arrays into model parameters.

    Shape mismatches are rejected by name. Non-strict loads allow missing
    names on either side (finetune from a pretraining checkpoint); strict
    loads require the exact parameter set. Returns names actually loaded.
    """
    mismatched = [n for n in arrays
                  if n in model.params and model.params[n].shape != arrays[n].shape]
    if mismatched:
        details = ", ".join(
            f"{n}: file {arrays[n].shape} vs model {model.params[n].shape}"
            for n in mismatched)
        raise IntegrityError(f"checkpoint shape mismatch: {details}")
    if strict:
        missing = sorted(set(model.params) - set(arrays))
        unexpected = sorted(set(arrays) - set(model.params))
        if missing or unexpected:
            raise IntegrityError(
                f"checkpoint parameter set mismatch: missing {missing}, "
                f"unexpected {unexpected}")
    loaded = []
    for name, arr in arrays.items():
        if name in model.params:
            model.params[name].data[...] = arr
            loaded.append(name)
    return loaded


def model_arrays(model: Model) -> Dict[str, np.ndarray]:
    return {name: t.data for name, t in model.params.items()}


def restore_model(cfg: ModelConfig, arrays: Dict[str, np.ndarray],
                  rng: np.random.Generator) -> Model:
    """Build a model for cfg and load the checkpoint arrays into it,
    recreating the identity head when the checkpoint carries one."""
    model = Model(cfg, rng)
    if "head.id.w" in arrays:
        d_feat, n_cls = arrays["head.id.w"].shape
        model.ensure_id_head(n_cls, d_feat, rng)
    load_into_model(model, arrays)
    return model
