"""Visual-language decoder with visual-expert self-attention and a
per-layer high-resolution cross-attention branch.

Each decoder layer computes::

    X'    = MSA(layernorm(X_in)) + X_in          # expert weights on image rows
    X_out = MCA(layernorm(X'), X_hi) + X'        # queries from X', keys/values from X_hi
    X_nxt = FFN(layernorm(X_out)) + X_out        # expert FFN on image rows

The cross branch has no biases and its output projection starts at zero,
so a freshly added branch leaves the decoder's function unchanged.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .blocks import Module, linear, mlp, multihead_attention
from .encoder import EncoderConfig, VisionEncoder
from .numerics import Tensor


class DecoderError(ValueError):
    pass


@dataclass
class DecoderConfig:
    layers: int = 2
    hidden: int = 48            # D_dec
    heads: int = 4              # H_dec
    cross_hidden: int = 32      # D_cross
    cross_heads: int = 4        # H_cross
    hi_hidden: int = 32         # D_hi
    vocab: int = 100
    max_text: int = 64          # max L_T
    mlp_ratio: int = 4
    use_cross: bool = True

    def __post_init__(self):
        if self.hidden % self.heads:
            raise DecoderError(f"D_dec={self.hidden} not divisible by H_dec={self.heads}")
        if self.cross_hidden % self.cross_heads:
            raise DecoderError(f"D_cross={self.cross_hidden} not divisible by H_cross={self.cross_heads}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def cross_head_dim(self) -> int:
        return self.cross_hidden // self.cross_heads


@dataclass
class ModelConfig:
    lo: EncoderConfig = field(default_factory=lambda: EncoderConfig(side=28, patch=14, layers=1, hidden=32, heads=4))
    hi: EncoderConfig = field(default_factory=lambda: EncoderConfig(side=112, patch=14, layers=1, hidden=32, heads=4))
    dec: DecoderConfig = field(default_factory=DecoderConfig)

    def __post_init__(self):
        if self.dec.use_cross and self.hi.hidden != self.dec.hi_hidden:
            raise DecoderError(f"high-res encoder width {self.hi.hidden} != D_hi {self.dec.hi_hidden}")

    def without_cross(self) -> "ModelConfig":
        return replace(self, dec=replace(self.dec, use_cross=False))


def attention_mask(image_mask: np.ndarray) -> np.ndarray:
    """Allowed (query, key) pairs for a position-type mask (True = image).

    Image positions see every image position; text positions see every
    image position plus text positions at or before themselves.
    """
    img = np.asarray(image_mask, dtype=bool)
    n = img.size
    causal = np.tril(np.ones((n, n), dtype=bool))
    return (img[None, :] & np.ones((n, 1), dtype=bool)) | (~img[:, None] & causal)


def _route(x: Tensor, image_mask: np.ndarray, f_image, f_text) -> Tensor:
    """Apply ``f_image`` to image rows and ``f_text`` to text rows of [B, L, D]."""
    img_idx = np.flatnonzero(image_mask)
    txt_idx = np.flatnonzero(~image_mask)
    parts, order = [], []
    if img_idx.size:
        parts.append(f_image(nx.take(x, img_idx, axis=1)))
        order.append(img_idx)
    if txt_idx.size:
        parts.append(f_text(nx.take(x, txt_idx, axis=1)))
        order.append(txt_idx)
    if len(parts) == 1:
        return parts[0]
    inv = np.argsort(np.concatenate(order))
    return nx.take(nx.concat(parts, axis=1), inv, axis=1)


class HiResVLM(Module):
    """Low-res encoder + adapter, decoder stack, optional high-res cross branch."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        super().__init__(seed, dtype)
        self.cfg = cfg
        self.lo_encoder = VisionEncoder(cfg.lo, seed, dtype, prefix="lo_enc.")
        self.params.update(self.lo_encoder.params)
        self.hi_encoder = None
        if cfg.dec.use_cross:
            self.hi_encoder = VisionEncoder(cfg.hi, seed, dtype, prefix="hi_enc.")
            self.params.update(self.hi_encoder.params)
        d = cfg.dec
        D = d.hidden
        self.prefix = "dec."
        self.xavier("adapter.w", cfg.lo.hidden, D)
        self.zeros("adapter.b", (D,))
        self.normal("tok_emb", (d.vocab, D))
        self.normal("pos_emb", (cfg.lo.tokens + d.max_text, D))
        for i in range(d.layers):
            p = f"layers.{i}."
            self.ones(p + "ln1.g", (D,))
            self.zeros(p + "ln1.b", (D,))
            for w in ("wq", "wk", "wv"):
                self.xavier(p + w, D, D)
                self.xavier(p + "expert." + w, D, D)
            self.xavier(p + "wo", D, D)
            if d.use_cross:
                c = p + "cross."
                self.ones(c + "ln.g", (D,))
                self.zeros(c + "ln.b", (D,))
                self.xavier(c + "wq", D, d.cross_hidden)
                self.xavier(c + "wk", d.hi_hidden, d.cross_hidden)
                self.xavier(c + "wv", d.hi_hidden, d.cross_hidden)
                self.zeros(c + "wo", (d.cross_hidden, D))
            self.ones(p + "ln2.g", (D,))
            self.zeros(p + "ln2.b", (D,))
            for sub in ("mlp.", "expert.mlp."):
                self.xavier(p + sub + "w1", D, d.mlp_ratio * D)
                self.zeros(p + sub + "b1", (d.mlp_ratio * D,))
                self.xavier(p + sub + "w2", d.mlp_ratio * D, D)
                self.zeros(p + sub + "b2", (D,))
        self.ones("ln_f.g", (D,))
        self.zeros("ln_f.b", (D,))
        self.xavier("head.w", D, d.vocab)
        self.prefix = ""

    # -- sublayers ---------------------------------------------------------

    def p(self, name: str) -> Tensor:
        return self.params["dec." + name]

    def msa_layer(self, x: Tensor, image_mask: np.ndarray, i: int, weights_out: list | None = None) -> Tensor:
        """X' = MSA(layernorm(X_in)) + X_in with image rows routed through the expert QKV."""
        image_mask = np.asarray(image_mask, dtype=bool)
        if image_mask.size != x.shape[1]:
            raise DecoderError(f"mask length {image_mask.size} != sequence length {x.shape[1]}")
        p = f"layers.{i}."
        h = nx.layernorm(x, self.p(p + "ln1.g"), self.p(p + "ln1.b"))
        qkv = []
        for w in ("wq", "wk", "wv"):
            we, wb = self.p(p + "expert." + w), self.p(p + w)
            qkv.append(_route(h, image_mask, lambda t, we=we: linear(t, we), lambda t, wb=wb: linear(t, wb)))
        att = multihead_attention(*qkv, self.cfg.dec.heads, mask=attention_mask(image_mask), weights_out=weights_out)
        return nx.add(linear(att, self.p(p + "wo")), x)

    def mca_layer(self, x: Tensor, x_hi: Tensor, i: int, weights_out: list | None = None) -> Tensor:
        """X_out = MCA(layernorm(X'), X_hi) + X'."""
        d = self.cfg.dec
        if x_hi.shape[-1] != d.hi_hidden:
            raise DecoderError(f"X_hi width {x_hi.shape[-1]} != D_hi {d.hi_hidden}")
        if x_hi.shape[-2] == 0:
            raise DecoderError("cross-attention over an empty high-res sequence")
        c = f"layers.{i}.cross."
        h = nx.layernorm(x, self.p(c + "ln.g"), self.p(c + "ln.b"))
        q = linear(h, self.p(c + "wq"))
        k = linear(x_hi, self.p(c + "wk"))
        v = linear(x_hi, self.p(c + "wv"))
        att = multihead_attention(q, k, v, d.cross_heads, weights_out=weights_out)
        return nx.add(linear(att, self.p(c + "wo")), x)

    def ffn_layer(self, x: Tensor, image_mask: np.ndarray, i: int) -> Tensor:
        p = f"layers.{i}."
        h = nx.layernorm(x, self.p(p + "ln2.g"), self.p(p + "ln2.b"))

        def ffn(sub):
            return lambda t: mlp(t, self.p(sub + "w1"), self.p(sub + "b1"), self.p(sub + "w2"), self.p(sub + "b2"))

        return nx.add(_route(h, image_mask, ffn(p + "expert.mlp."), ffn(p + "mlp.")), x)

    # -- full forward ------------------------------------------------------

    def embed(self, lo_patches, text_ids: np.ndarray) -> tuple[Tensor, np.ndarray]:
        cfg = self.cfg
        text_ids = np.asarray(text_ids, dtype=np.intp)
        if text_ids.ndim != 2:
            raise DecoderError("text ids must be (B, L_T)")
        lt = text_ids.shape[1]
        if lt > cfg.dec.max_text:
            raise DecoderError(f"text length {lt} exceeds max {cfg.dec.max_text}")
        if text_ids.size and (text_ids.min() < 0 or text_ids.max() >= cfg.dec.vocab):
            raise DecoderError(f"token id outside vocabulary of {cfg.dec.vocab}")
        x_lo = linear(self.lo_encoder(lo_patches), self.p("adapter.w"), self.p("adapter.b"))
        tok = nx.embedding(self.p("tok_emb"), text_ids)
        x = nx.concat([x_lo, tok], axis=1)
        n = cfg.lo.tokens + lt
        x = nx.add(x, nx.take(self.p("pos_emb"), np.arange(n), axis=0))
        image_mask = np.zeros(n, dtype=bool)
        image_mask[: cfg.lo.tokens] = True
        return x, image_mask

    def encode_hi(self, hi_patches) -> Tensor | None:
        return self.hi_encoder(hi_patches) if self.hi_encoder is not None else None

    def forward(self, lo_patches, hi_patches, text_ids: np.ndarray, x_hi: Tensor | None = None) -> Tensor:
        """Logits at text positions, shape (B, L_T, vocab)."""
        x, image_mask = self.embed(lo_patches, text_ids)
        if self.cfg.dec.use_cross and x_hi is None:
            if hi_patches is None:
                raise DecoderError("cross model needs high-res patches")
            x_hi = self.encode_hi(hi_patches)
        for i in range(self.cfg.dec.layers):
            x = self.msa_layer(x, image_mask, i)
            if self.cfg.dec.use_cross:
                x = self.mca_layer(x, x_hi, i)
            x = self.ffn_layer(x, image_mask, i)
        n_img = self.cfg.lo.tokens
        x = nx.take(x, np.arange(n_img, x.shape[1]), axis=1)
        x = nx.layernorm(x, self.p("ln_f.g"), self.p("ln_f.b"))
        return linear(x, self.p("head.w"))

    __call__ = forward

    def generate(self, lo_patches, hi_patches, prefix: np.ndarray, max_new: int, eos: int | None = None) -> np.ndarray:
        """Greedy decode; returns only the new tokens, (B, max_new), padded with eos after stopping."""
        ids = np.asarray(prefix, dtype=np.intp)
        x_hi = self.encode_hi(hi_patches) if self.cfg.dec.use_cross else None
        done = np.zeros(ids.shape[0], dtype=bool)
        out = []
        for _ in range(max_new):
            if ids.shape[1] >= self.cfg.dec.max_text:
                break
            logits = self.forward(lo_patches, None, ids, x_hi=x_hi)
            nxt = logits.data[:, -1].argmax(-1)
            if eos is not None:
                nxt = np.where(done, eos, nxt)
                done |= nxt == eos
            out.append(nxt)
            ids = np.concatenate([ids, nxt[:, None]], axis=1)
            if eos is not None and done.all():
                break
        new = np.stack(out, axis=1) if out else np.zeros((ids.shape[0], 0), dtype=np.intp)
        if new.shape[1] < max_new and eos is not None:
            new = np.concatenate([new, np.full((ids.shape[0], max_new - new.shape[1]), eos)], axis=1)
        return new


def decoder_forward(model: HiResVLM, images: tuple, text_ids: np.ndarray) -> Tensor:
    lo, hi = images
    return model.forward(lo, hi, text_ids)


GROUPS = ("cross_module", "visual_expert", "base")


def group_of(name: str) -> str:
    if name.startswith("hi_enc.") or ".cross." in name:
        return "cross_module"
    if ".expert." in name:
        return "visual_expert"
    return "base"


def param_groups(model: Module) -> dict[str, list[str]]:
    """Disjoint, exhaustive partition of parameter names."""
    groups: dict[str, list[str]] = {g: [] for g in GROUPS}
    for name in model.params:
        groups[group_of(name)].append(name)
    return groups


def group_sizes(model: Module) -> dict[str, int]:
    return {g: sum(model.params[n].size for n in names) for g, names in param_groups(model).items()}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"HRXCKPT\0"
_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


def save_checkpoint(params: dict[str, Tensor | np.ndarray], path: str | Path) -> str:
    """Write named arrays (sorted by name) little-endian; returns the sha256 of the file."""
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(params))]
    for name in sorted(params):
        arr = params[name]
        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise DecoderError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    blob = b"".join(chunks)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:8] != _MAGIC:
        raise DecoderError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != _VERSION:
        raise DecoderError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + n].decode()
        off += n
        code, ndim = struct.unpack_from("<BB", blob, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        dt = _DTYPES[code]
        size = int(np.prod(shape)) * dt.itemsize
        out[name] = np.frombuffer(blob[off : off + size], dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        off += size
    return out


def load_into(model: Module, state: dict[str, np.ndarray]) -> None:
    missing = set(model.params) - set(state)
    if missing:
        raise DecoderError(f"checkpoint lacks {sorted(missing)[:3]}...")
    for name, t in model.params.items():
        if state[name].shape != t.shape:
            raise DecoderError(f"shape mismatch for {name}: {state[name].shape} vs {t.shape}")
        t.data = np.ascontiguousarray(state[name], dtype=model.dtype)
