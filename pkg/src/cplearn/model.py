"""Trainable head: cross-attention projector, task adapter fusion, classifier.

The projector is a single pre-norm transformer decoder block reduced to what
the job needs: per-level input projections turn pooled visual summaries into
tokens (plus a learnable level embedding), class text features become
queries, one multi-head cross-attention sublayer and one feed-forward
sublayer (both with residuals) produce refined queries, and a final linear
map returns to text space.  There is no self-attention among the class
queries: classes should not interact, and the inputs are exactly the text
features and the pooled visual stack.

Fusion adds the projected visual context and a per-class adapter row to the
raw text features: ``f_t + alpha * f_tv + beta * A``.  Rows are deliberately
not re-normalized; the cosine in the classifier absorbs scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .binio import Reader, Writer
from .errors import DegenerateInputError, DimensionError
from .feature_store import FORMAT_VERSION
from .numcore import Tensor

CHECKPOINT_MAGIC = b"CPLM"

DEFAULT_TEMPERATURE = 0.01  # frozen CLIP logit scale of 100
DEFAULT_HEADS = 4
TINY_RESIDUAL_INIT = 1e-4


@dataclass
class ProjectorParams:
    """All trainable weights of the cross-attention projector."""

    channel_dims: list[int]
    d_t: int
    d_m: int
    heads: int
    d_ff: int
    level_in: list[Tensor] = field(default_factory=list)   # Q x (C_q, d_m)
    level_embed: Tensor | None = None                      # (Q, d_m)
    query_in: Tensor | None = None                         # (d_t, d_m)
    w_q: list[Tensor] = field(default_factory=list)        # per head (d_m, d_h)
    w_k: list[Tensor] = field(default_factory=list)
    w_v: list[Tensor] = field(default_factory=list)
    w_o: list[Tensor] = field(default_factory=list)        # per head (d_h, d_m)
    ffn_in: Tensor | None = None                           # (d_m, d_ff)
    ffn_out: Tensor | None = None                          # (d_ff, d_m)
    ln1_gain: Tensor | None = None
    ln1_bias: Tensor | None = None
    ln2_gain: Tensor | None = None
    ln2_bias: Tensor | None = None
    out_proj: Tensor | None = None                         # (d_m, d_t)

    @property
    def head_dim(self) -> int:
        return self.d_m // self.heads

    def block_names(self) -> list[str]:
        """Canonical block order, derivable from dims alone."""
        names = [f"level_in.{q}" for q in range(len(self.channel_dims))]
        names += ["level_embed", "query_in"]
        for h in range(self.heads):
            names += [f"attn.{h}.wq", f"attn.{h}.wk", f"attn.{h}.wv", f"attn.{h}.wo"]
        names += ["ffn_in", "ffn_out", "ln1_gain", "ln1_bias",
                  "ln2_gain", "ln2_bias", "out_proj"]
        return names

    def named_blocks(self) -> dict[str, Tensor]:
        """Stable name -> tensor map; iteration order is the block order."""
        blocks: dict[str, Tensor] = {}
        for q, t in enumerate(self.level_in):
            blocks[f"level_in.{q}"] = t
        blocks["level_embed"] = self.level_embed
        blocks["query_in"] = self.query_in
        for h in range(self.heads):
            blocks[f"attn.{h}.wq"] = self.w_q[h]
            blocks[f"attn.{h}.wk"] = self.w_k[h]
            blocks[f"attn.{h}.wv"] = self.w_v[h]
            blocks[f"attn.{h}.wo"] = self.w_o[h]
        blocks["ffn_in"] = self.ffn_in
        blocks["ffn_out"] = self.ffn_out
        blocks["ln1_gain"] = self.ln1_gain
        blocks["ln1_bias"] = self.ln1_bias
        blocks["ln2_gain"] = self.ln2_gain
        blocks["ln2_bias"] = self.ln2_bias
        blocks["out_proj"] = self.out_proj
        return blocks

    def replace_blocks(self, tensors: Sequence[Tensor]) -> "ProjectorParams":
        """Copy of this params object with blocks swapped in named order."""
        names = self.block_names()
        if len(tensors) != len(names):
            raise DimensionError(f"expected {len(names)} blocks, got {len(tensors)}")
        lookup = dict(zip(names, tensors))
        out = ProjectorParams(channel_dims=list(self.channel_dims), d_t=self.d_t,
                              d_m=self.d_m, heads=self.heads, d_ff=self.d_ff)
        out.level_in = [lookup[f"level_in.{q}"] for q in range(len(self.channel_dims))]
        out.level_embed = lookup["level_embed"]
        out.query_in = lookup["query_in"]
        out.w_q = [lookup[f"attn.{h}.wq"] for h in range(self.heads)]
        out.w_k = [lookup[f"attn.{h}.wk"] for h in range(self.heads)]
        out.w_v = [lookup[f"attn.{h}.wv"] for h in range(self.heads)]
        out.w_o = [lookup[f"attn.{h}.wo"] for h in range(self.heads)]
        out.ffn_in = lookup["ffn_in"]
        out.ffn_out = lookup["ffn_out"]
        out.ln1_gain = lookup["ln1_gain"]
        out.ln1_bias = lookup["ln1_bias"]
        out.ln2_gain = lookup["ln2_gain"]
        out.ln2_bias = lookup["ln2_bias"]
        out.out_proj = lookup["out_proj"]
        return out


def init_projector(channel_dims: Sequence[int], d_t: int, d_m: int | None = None,
                   heads: int = DEFAULT_HEADS, d_ff: int | None = None,
                   seed: int = 0) -> ProjectorParams:
    """One decoder block, symmetric uniform fan-in init, unit layer norms."""
    d_m = d_t if d_m is None else d_m
    d_ff = 4 * d_m if d_ff is None else d_ff
    if d_m % heads != 0:
        raise DimensionError(f"head count {heads} must divide model dim {d_m}")
    rng = np.random.default_rng(seed)
    d_h = d_m // heads
    p = ProjectorParams(channel_dims=list(channel_dims), d_t=d_t, d_m=d_m,
                        heads=heads, d_ff=d_ff)
    p.level_in = [nc.uniform_fan_in((c, d_m), rng) for c in channel_dims]
    p.level_embed = nc.uniform_fan_in((len(channel_dims), d_m), rng)
    p.query_in = nc.uniform_fan_in((d_t, d_m), rng)
    p.w_q = [nc.uniform_fan_in((d_m, d_h), rng) for _ in range(heads)]
    p.w_k = [nc.uniform_fan_in((d_m, d_h), rng) for _ in range(heads)]
    p.w_v = [nc.uniform_fan_in((d_m, d_h), rng) for _ in range(heads)]
    p.w_o = [nc.uniform_fan_in((d_h, d_m), rng) for _ in range(heads)]
    p.ffn_in = nc.uniform_fan_in((d_m, d_ff), rng)
    p.ffn_out = nc.uniform_fan_in((d_ff, d_m), rng)
    p.ln1_gain = Tensor(np.ones(d_m), requires_grad=True)
    p.ln1_bias = Tensor(np.zeros(d_m), requires_grad=True)
    p.ln2_gain = Tensor(np.ones(d_m), requires_grad=True)
    p.ln2_bias = Tensor(np.zeros(d_m), requires_grad=True)
    p.out_proj = nc.uniform_fan_in((d_m, d_t), rng)
    return p


@dataclass
class FusionState:
    """Task adapter matrix plus the two residual scales."""

    adapter: Tensor          # (D, d_t)
    alpha: Tensor            # scalar
    beta: Tensor             # scalar


def init_fusion(num_classes: int, d_t: int,
                residual_init: float = TINY_RESIDUAL_INIT) -> FusionState:
    """Adapter starts at zero and both scales start diminutive, so the head
    initially reproduces the raw text features."""
    return FusionState(
        adapter=Tensor(np.zeros((num_classes, d_t)), requires_grad=True),
        alpha=Tensor(residual_init, requires_grad=True),
        beta=Tensor(residual_init, requires_grad=True),
    )


@dataclass
class ClassifierConfig:
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if not self.temperature > 0:
            raise DegenerateInputError(f"temperature {self.temperature} must be > 0")


def project(f_t: Tensor, level_rows: Sequence[np.ndarray | Tensor],
            params: ProjectorParams, collect: dict | None = None) -> Tensor:
    """Map class text features + pooled visual levels to visual context rows."""
    f_t = nc.as_tensor(f_t)
    if f_t.data.ndim != 2 or f_t.shape[1] != params.d_t:
        raise DimensionError(f"text features {f_t.shape} incompatible with d_t={params.d_t}")
    if len(level_rows) != len(params.channel_dims):
        raise DimensionError(
            f"{len(level_rows)} levels given, projector built for {len(params.channel_dims)}")

    token_rows = []
    for q, row in enumerate(level_rows):
        row = nc.as_tensor(row)
        if row.shape[-1] != params.channel_dims[q]:
            raise DimensionError(
                f"level {q} dim {row.shape} != declared {params.channel_dims[q]}")
        if row.data.ndim == 1:
            row = nc.reshape(row, (1, row.shape[0]))
        token_rows.append(nc.matmul(row, params.level_in[q]))
    tokens = nc.add(nc.concat(token_rows, axis=0), params.level_embed)  # (Q, d_m)

    x = nc.matmul(f_t, params.query_in)  # (D, d_m)

    xn = nc.layer_norm(x, params.ln1_gain, params.ln1_bias)
    scale = 1.0 / math.sqrt(params.head_dim)
    attn_out = None
    for h in range(params.heads):
        qh = nc.matmul(xn, params.w_q[h])                    # (D, d_h)
        kh = nc.matmul(tokens, params.w_k[h])                # (Q, d_h)
        vh = nc.matmul(tokens, params.w_v[h])                # (Q, d_h)
        scores = nc.mul(nc.matmul(qh, nc.transpose(kh)), scale)
        weights = nc.softmax(scores, axis=-1)                # (D, Q)
        if collect is not None:
            collect.setdefault("attention", []).append(weights.data)
        head = nc.matmul(nc.matmul(weights, vh), params.w_o[h])
        attn_out = head if attn_out is None else nc.add(attn_out, head)
    x = nc.add(x, attn_out)

    yn = nc.layer_norm(x, params.ln2_gain, params.ln2_bias)
    y = nc.matmul(nc.gelu(nc.matmul(yn, params.ffn_in)), params.ffn_out)
    x = nc.add(x, y)

    return nc.matmul(x, params.out_proj)


def fuse(f_t: Tensor, f_tv: Tensor, fusion: FusionState) -> Tensor:
    """Refined text features: f_t + alpha * f_tv + beta * adapter."""
    f_t, f_tv = nc.as_tensor(f_t), nc.as_tensor(f_tv)
    if not (f_t.shape == f_tv.shape == fusion.adapter.shape):
        raise DimensionError(
            f"fuse shapes disagree: {f_t.shape}, {f_tv.shape}, {fusion.adapter.shape}")
    return nc.add(f_t, nc.add(nc.mul(fusion.alpha, f_tv),
                              nc.mul(fusion.beta, fusion.adapter)))


def class_logits(f_tilde: Tensor, f_v: np.ndarray, cfg: ClassifierConfig) -> Tensor:
    """Cosine similarity of each refined class row with the image, over tau."""
    f_tilde = nc.as_tensor(f_tilde)
    f_v = np.asarray(f_v, dtype=np.float64)
    if f_tilde.shape[1] != f_v.shape[0]:
        raise DimensionError(
            f"text dim {f_tilde.shape[1]} != image dim {f_v.shape[0]}")
    v_norm = np.linalg.norm(f_v)
    if v_norm == 0.0:
        raise DegenerateInputError("zero image feature")
    row_norms = np.linalg.norm(f_tilde.data, axis=1)
    if np.any(row_norms == 0.0):
        raise DegenerateInputError(
            f"zero-norm refined text row at class {int(np.argmin(row_norms))}")
    rows_hat = nc.l2_normalize(f_tilde)
    sims = nc.tsum(nc.matmul(rows_hat, nc.Tensor((f_v / v_norm)[:, None])), axis=1)
    return nc.mul(sims, 1.0 / cfg.temperature)


def classify(f_tilde: Tensor, f_v: np.ndarray, cfg: ClassifierConfig) -> Tensor:
    """Class probabilities for one image; sums to one."""
    return nc.softmax(class_logits(f_tilde, f_v, cfg), axis=-1)


# -- checkpointing -------------------------------------------------------------


@dataclass
class Checkpoint:
    """Everything needed to run inference: weights plus prompt policy."""

    params: ProjectorParams
    fusion: FusionState
    config: ClassifierConfig
    template: str
    k_concepts: int
    class_names: list[str]


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    p = ckpt.params
    with open(Path(path), "wb") as fh:
        w = Writer(fh)
        w.magic(CHECKPOINT_MAGIC)
        w.u32(FORMAT_VERSION)
        w.string(ckpt.template)
        w.u32(ckpt.k_concepts)
        w.f64(ckpt.config.temperature)
        w.u32(len(ckpt.class_names))
        for name in ckpt.class_names:
            w.string(name)
        w.u32(p.d_t)
        w.u32(p.d_m)
        w.u32(p.heads)
        w.u32(p.d_ff)
        w.u32(len(p.channel_dims))
        for c in p.channel_dims:
            w.u32(c)
        blocks = dict(p.named_blocks())
        blocks["fusion.adapter"] = ckpt.fusion.adapter
        blocks["fusion.alpha"] = ckpt.fusion.alpha
        blocks["fusion.beta"] = ckpt.fusion.beta
        w.u32(len(blocks))
        for name, tensor in blocks.items():
            w.string(name)
            w.u8(tensor.data.ndim)
            for extent in tensor.shape:
                w.u32(extent)
            w.f64_array(tensor.data)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        r = Reader(fh, name=path.name)
        r.magic(CHECKPOINT_MAGIC)
        r.version(FORMAT_VERSION)
        template = r.string()
        k_concepts = r.u32()
        temperature = r.f64()
        class_names = [r.string() for _ in range(r.u32())]
        d_t, d_m, heads, d_ff = r.u32(), r.u32(), r.u32(), r.u32()
        channel_dims = [r.u32() for _ in range(r.u32())]
        blocks: dict[str, Tensor] = {}
        for _ in range(r.u32()):
            name = r.string()
            ndim = r.u8()
            shape = tuple(r.u32() for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            data = r.f64_array(count).reshape(shape)
            blocks[name] = Tensor(data, requires_grad=True)
        r.expect_eof()

    params = ProjectorParams(channel_dims=channel_dims, d_t=d_t, d_m=d_m,
                             heads=heads, d_ff=d_ff)
    params = params.replace_blocks([blocks[name] for name in params.block_names()])
    fusion = FusionState(adapter=blocks["fusion.adapter"],
                         alpha=blocks["fusion.alpha"],
                         beta=blocks["fusion.beta"])
    return Checkpoint(params=params, fusion=fusion,
                      config=ClassifierConfig(temperature=temperature),
                      template=template, k_concepts=k_concepts,
                      class_names=class_names)
