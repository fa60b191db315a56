"""Cross-modal fusion mechanisms and full two-branch model assembly.

Three fusion families are implemented, plus the single-direction baselines:

* late transformer: one cross-attention transformer block per branch on the
  stage-2 outputs, pooled outputs concatenated into the prediction head;
* intermediate transformer: the same blocks after stage 1, with the fused
  sequence added residually (through a learned projection) to that branch's
  stage-1 output before stage 2 runs;
* intermediate attention: only a scaled dot-product similarity between the
  stage-1 sequences is computed; aggregating its softmax over the query axis
  yields a per-timestep attention vector that rescales the other modality's
  rows. No feature values cross modalities, so a zeroed modality (with
  bias-free query/key projections) produces a constant similarity, a uniform
  softmax and an all-ones vector: the surviving branch is left untouched;
* single-direction (audio-to-vision or vision-to-audio): one transformer
  block on the stage-2 outputs, pooled, linear.

Multi-head attention splits the latent dimension across heads and scales
each head's similarity by sqrt(d/heads); intermediate attention averages the
per-head attention vectors, which preserves their mean-one property.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .layers import (
    Branch,
    Linear,
    LayerNorm,
    audio_branch_config,
    global_avg_pool,
    he_init,
    vision_branch_config,
)
from .rng import Rng
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    matmul,
    mean,
    mul,
    reduce_sum,
    relu,
    reshape,
    scale,
    softmax,
    transpose,
)


class FusionKind(Enum):
    LATE_TRANSFORMER = "LT"
    INTERMEDIATE_TRANSFORMER = "IT"
    INTERMEDIATE_ATTENTION = "IA"
    SINGLE_DIRECTION_AV = "TAV"
    SINGLE_DIRECTION_VA = "TVA"

    @classmethod
    def parse(cls, name: str) -> "FusionKind":
        key = name.strip().upper()
        aliases = {
            "LT": cls.LATE_TRANSFORMER,
            "LATETRANSFORMER": cls.LATE_TRANSFORMER,
            "IT": cls.INTERMEDIATE_TRANSFORMER,
            "INTERMEDIATETRANSFORMER": cls.INTERMEDIATE_TRANSFORMER,
            "IA": cls.INTERMEDIATE_ATTENTION,
            "INTERMEDIATEATTENTION": cls.INTERMEDIATE_ATTENTION,
            "TAV": cls.SINGLE_DIRECTION_AV,
            "SINGLEDIRECTIONAV": cls.SINGLE_DIRECTION_AV,
            "TVA": cls.SINGLE_DIRECTION_VA,
            "SINGLEDIRECTIONVA": cls.SINGLE_DIRECTION_VA,
        }
        if key not in aliases:
            raise ValueError(f"unknown fusion kind {name!r}; expected one of LT, IT, IA, TAV, TVA")
        return aliases[key]


class AttentionProjections:
    """Learned query/key(/value) projections into an h-head latent space."""

    def __init__(self, d_q_in: int, d_kv_in: int, latent: int, heads: int, rng: Rng,
                 bias: bool = False, values: bool = True):
        if heads < 1 or latent % heads != 0:
            raise ValueError(f"latent dim {latent} not divisible by heads {heads}")
        self.latent = latent
        self.heads = heads
        self.head_dim = latent // heads
        self.w_q = he_init((d_q_in, latent), fan_in=d_q_in, seed_or_rng=rng.split("wq"))
        self.w_k = he_init((d_kv_in, latent), fan_in=d_kv_in, seed_or_rng=rng.split("wk"))
        self.w_v = (he_init((d_kv_in, latent), fan_in=d_kv_in, seed_or_rng=rng.split("wv"))
                    if values else None)
        self.b_q = Tensor(np.zeros(latent), requires_grad=True) if bias else None
        self.b_k = Tensor(np.zeros(latent), requires_grad=True) if bias else None
        self.b_v = Tensor(np.zeros(latent), requires_grad=True) if bias and values else None

    def queries(self, phi_q: Tensor) -> Tensor:
        q = matmul(phi_q, self.w_q)
        return add(q, self.b_q) if self.b_q is not None else q

    def keys(self, phi_k: Tensor) -> Tensor:
        k = matmul(phi_k, self.w_k)
        return add(k, self.b_k) if self.b_k is not None else k

    def values(self, phi_v: Tensor) -> Tensor:
        if self.w_v is None:
            raise ValueError("this projection set was built without value weights")
        v = matmul(phi_v, self.w_v)
        return add(v, self.b_v) if self.b_v is not None else v

    def params(self, prefix: str) -> dict[str, Tensor]:
        named = {f"{prefix}.wq": self.w_q, f"{prefix}.wk": self.w_k}
        if self.w_v is not None:
            named[f"{prefix}.wv"] = self.w_v
        for tag, t in (("bq", self.b_q), ("bk", self.b_k), ("bv", self.b_v)):
            if t is not None:
                named[f"{prefix}.{tag}"] = t
        return named


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(B, N, d) -> (B, heads, N, d/heads)."""
    bsz, n, d = x.shape
    return transpose(reshape(x, (bsz, n, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """(B, heads, N, dk) -> (B, N, heads*dk)."""
    bsz, heads, n, dk = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (bsz, n, heads * dk))


def scaled_similarity(phi_q: Tensor, phi_k: Tensor, proj: AttentionProjections) -> Tensor:
    """Pre-softmax similarity (B, heads, N_q, N_k), scaled by sqrt(head dim)."""
    if phi_q.ndim != 3 or phi_k.ndim != 3:
        raise ShapeError(f"expected (batch, time, features) inputs, got {phi_q.shape} and {phi_k.shape}")
    q = split_heads(proj.queries(phi_q), proj.heads)
    k = split_heads(proj.keys(phi_k), proj.heads)
    s = matmul(q, transpose(k, (0, 1, 3, 2)))
    return scale(s, 1.0 / np.sqrt(proj.head_dim))


def attention_vector(similarity: Tensor) -> Tensor:
    """Aggregate a softmaxed similarity over the query axis.

    For similarity of shape (..., N_q, N_k) returns (..., N_k): the softmax
    over the key axis is summed over queries and rescaled by N_k/N_q so the
    result always averages to exactly 1. A constant similarity (e.g. one
    modality zeroed with bias-free projections) gives the all-ones vector.
    """
    n_q, n_k = similarity.shape[-2], similarity.shape[-1]
    attn = softmax(similarity, axis=-1)
    return scale(reduce_sum(attn, axes=(-2,)), n_k / n_q)


def cross_attention(phi_q: Tensor, phi_kv: Tensor, proj: AttentionProjections,
                    out_proj: Linear) -> Tensor:
    """Multi-head attention with queries from one modality, keys/values from
    the other; heads are concatenated and passed through `out_proj`."""
    attn = softmax(scaled_similarity(phi_q, phi_kv, proj), axis=-1)
    v = split_heads(proj.values(phi_kv), proj.heads)
    return out_proj(merge_heads(matmul(attn, v)))


class TransformerBlock:
    """Post-norm cross-attention block.

    y1 = LN(res_proj(phi_q) + attention(phi_q, phi_kv))
    y2 = LN(y1 + FF(y1)), FF a 2-layer ReLU net with hidden dim 2*latent.
    The residual source is the query-side input projected into the latent
    space, so mismatched branch widths are absorbed here.
    """

    def __init__(self, d_q_in: int, d_kv_in: int, latent: int, heads: int, rng: Rng,
                 qkv_bias: bool = False):
        self.proj = AttentionProjections(d_q_in, d_kv_in, latent, heads,
                                         rng.split("attn"), bias=qkv_bias)
        self.out_proj = Linear(latent, latent, rng.split("out"))
        self.res_proj = Linear(d_q_in, latent, rng.split("res"), bias=False)
        self.ff1 = Linear(latent, 2 * latent, rng.split("ff1"))
        self.ff2 = Linear(2 * latent, latent, rng.split("ff2"))
        self.ln1 = LayerNorm(latent)
        self.ln2 = LayerNorm(latent)

    def __call__(self, phi_q: Tensor, phi_kv: Tensor) -> Tensor:
        attended = cross_attention(phi_q, phi_kv, self.proj, self.out_proj)
        y1 = self.ln1(add(self.res_proj(phi_q), attended))
        y2 = self.ln2(add(y1, self.ff2(relu(self.ff1(y1)))))
        return y2

    def params(self, prefix: str) -> dict[str, Tensor]:
        named = {}
        named.update(self.proj.params(f"{prefix}.attn"))
        named.update(self.out_proj.params(f"{prefix}.out"))
        named.update(self.res_proj.params(f"{prefix}.res"))
        named.update(self.ff1.params(f"{prefix}.ff1"))
        named.update(self.ff2.params(f"{prefix}.ff2"))
        named.update(self.ln1.params(f"{prefix}.ln1"))
        named.update(self.ln2.params(f"{prefix}.ln2"))
        return named


def intermediate_attention_fuse(phi_a: Tensor, phi_v: Tensor,
                                proj_av: AttentionProjections,
                                proj_va: AttentionProjections) -> tuple[Tensor, Tensor]:
    """Rescale each modality's rows by the attention vector computed from the
    cross-modal similarity; no feature values cross modalities.

    `proj_av` takes audio queries against vision keys and yields the vision
    vector; `proj_va` the reverse. With several heads the per-head vectors
    are averaged, which keeps the mean-one property.
    """
    v_vision = attention_vector(scaled_similarity(phi_a, phi_v, proj_av))
    v_audio = attention_vector(scaled_similarity(phi_v, phi_a, proj_va))
    if proj_av.heads > 1:
        v_vision = mean(v_vision, axes=(1,))
        v_audio = mean(v_audio, axes=(1,))
    else:
        v_vision = reshape(v_vision, (phi_v.shape[0], phi_v.shape[1]))
        v_audio = reshape(v_audio, (phi_a.shape[0], phi_a.shape[1]))
    phi_v_out = mul(phi_v, reshape(v_vision, (phi_v.shape[0], phi_v.shape[1], 1)))
    phi_a_out = mul(phi_a, reshape(v_audio, (phi_a.shape[0], phi_a.shape[1], 1)))
    return phi_a_out, phi_v_out


# ---------------------------------------------------------------------------
# full model


@dataclass
class ModelConfig:
    fusion: FusionKind = FusionKind.INTERMEDIATE_ATTENTION
    heads: int = 1
    latent: int = 64
    task: str = "classification"
    classes: int = 7
    d_audio: int = 74
    d_vision: int = 35
    qkv_bias: bool = False
    audio_widths: list | None = None
    vision_widths: list | None = None

    def __post_init__(self):
        if isinstance(self.fusion, str):
            self.fusion = FusionKind.parse(self.fusion)
        if self.task not in ("classification", "regression"):
            raise ValueError(f"task must be classification or regression, got {self.task!r}")
        if self.task == "classification" and self.classes < 2:
            raise ValueError(f"classification needs >= 2 classes, got {self.classes}")

    @property
    def out_dim(self) -> int:
        return self.classes if self.task == "classification" else 1


class FusionModel:
    """Two-branch audiovisual model with one of the five fusion mechanisms."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = Rng(seed).split("init")
        self.audio = Branch(audio_branch_config(cfg.d_audio, cfg.audio_widths),
                            rng.split("audio"))
        self.vision = Branch(vision_branch_config(cfg.d_vision, cfg.vision_widths),
                             rng.split("vision"))
        a1, a2 = self.audio.out_channels
        v1, v2 = self.vision.out_channels
        d, h = cfg.latent, cfg.heads
        kind = cfg.fusion

        self.block_a = self.block_v = self.block_single = None
        self.back_a = self.back_v = None
        self.proj_av = self.proj_va = None

        if kind == FusionKind.LATE_TRANSFORMER:
            self.block_a = TransformerBlock(a2, v2, d, h, rng.split("block_a"), cfg.qkv_bias)
            self.block_v = TransformerBlock(v2, a2, d, h, rng.split("block_v"), cfg.qkv_bias)
            head_in = 2 * d
        elif kind == FusionKind.INTERMEDIATE_TRANSFORMER:
            self.block_a = TransformerBlock(a1, v1, d, h, rng.split("block_a"), cfg.qkv_bias)
            self.block_v = TransformerBlock(v1, a1, d, h, rng.split("block_v"), cfg.qkv_bias)
            self.back_a = Linear(d, a1, rng.split("back_a"), bias=False)
            self.back_v = Linear(d, v1, rng.split("back_v"), bias=False)
            head_in = a2 + v2
        elif kind == FusionKind.INTERMEDIATE_ATTENTION:
            self.proj_av = AttentionProjections(a1, v1, d, h, rng.split("proj_av"),
                                                bias=cfg.qkv_bias, values=False)
            self.proj_va = AttentionProjections(v1, a1, d, h, rng.split("proj_va"),
                                                bias=cfg.qkv_bias, values=False)
            head_in = a2 + v2
        elif kind == FusionKind.SINGLE_DIRECTION_AV:
            # audio fused into the vision branch: vision queries, audio keys/values
            self.block_single = TransformerBlock(v2, a2, d, h, rng.split("block"), cfg.qkv_bias)
            head_in = d
        elif kind == FusionKind.SINGLE_DIRECTION_VA:
            self.block_single = TransformerBlock(a2, v2, d, h, rng.split("block"), cfg.qkv_bias)
            head_in = d
        else:  # pragma: no cover
            raise ValueError(f"unhandled fusion kind {kind}")

        self.head = Linear(head_in, cfg.out_dim, rng.split("head"))

    def forward(self, audio, vision, training: bool = False) -> Tensor:
        """Predict logits (B, classes) or scores (B, 1) from raw feature
        sequences audio (B, N_a, d_a) and vision (B, N_v, d_v)."""
        a = audio if isinstance(audio, Tensor) else Tensor(audio)
        v = vision if isinstance(vision, Tensor) else Tensor(vision)
        kind = self.cfg.fusion

        if kind == FusionKind.LATE_TRANSFORMER:
            a2 = self.audio(a, training)
            v2 = self.vision(v, training)
            ya = self.block_a(a2, v2)
            yv = self.block_v(v2, a2)
            pooled = concat([global_avg_pool(ya), global_avg_pool(yv)], axis=-1)
        elif kind == FusionKind.INTERMEDIATE_TRANSFORMER:
            a1 = self.audio.stage1(a, training)
            v1 = self.vision.stage1(v, training)
            # both blocks consume the raw stage-1 sequences (parallel fusion)
            fused_a = self.back_a(self.block_a(a1, v1))
            fused_v = self.back_v(self.block_v(v1, a1))
            a2 = self.audio.stage2(add(a1, fused_a), training)
            v2 = self.vision.stage2(add(v1, fused_v), training)
            pooled = concat([global_avg_pool(a2), global_avg_pool(v2)], axis=-1)
        elif kind == FusionKind.INTERMEDIATE_ATTENTION:
            a1 = self.audio.stage1(a, training)
            v1 = self.vision.stage1(v, training)
            a1, v1 = intermediate_attention_fuse(a1, v1, self.proj_av, self.proj_va)
            a2 = self.audio.stage2(a1, training)
            v2 = self.vision.stage2(v1, training)
            pooled = concat([global_avg_pool(a2), global_avg_pool(v2)], axis=-1)
        elif kind == FusionKind.SINGLE_DIRECTION_AV:
            a2 = self.audio(a, training)
            v2 = self.vision(v, training)
            pooled = global_avg_pool(self.block_single(v2, a2))
        else:
            a2 = self.audio(a, training)
            v2 = self.vision(v, training)
            pooled = global_avg_pool(self.block_single(a2, v2))

        return self.head(pooled)

    def params(self) -> dict[str, Tensor]:
        named = {}
        named.update(self.audio.params("audio"))
        named.update(self.vision.params("vision"))
        for tag, part in (("block_a", self.block_a), ("block_v", self.block_v),
                          ("block", self.block_single), ("back_a", self.back_a),
                          ("back_v", self.back_v), ("proj_av", self.proj_av),
                          ("proj_va", self.proj_va)):
            if part is not None:
                named.update(part.params(tag))
        named.update(self.head.params("head"))
        return named

    def state(self) -> dict[str, np.ndarray]:
        """All arrays needed to restore the model: parameters + BN statistics."""
        arrays = {name: t.data.copy() for name, t in self.params().items()}
        arrays.update({k: v.copy() for k, v in self.audio.buffers("audio").items()})
        arrays.update({k: v.copy() for k, v in self.vision.buffers("vision").items()})
        return arrays

    def load_state(self, arrays: dict[str, np.ndarray]):
        params = self.params()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)[:4]}...")
        for name, t in params.items():
            if tuple(arrays[name].shape) != t.shape:
                raise ShapeError(f"state array {name!r} has shape {arrays[name].shape}, "
                                 f"expected {t.shape}")
            t.data = arrays[name].astype(np.float64).copy()
            t.grad = None
        self.audio.load_buffers("audio", arrays)
        self.vision.load_buffers("vision", arrays)

    def zero_grads(self):
        for t in self.params().values():
            t.grad = None
