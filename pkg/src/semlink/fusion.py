"""Cross-attention fusion of image and text features into one vector.

The block projects both modalities into a shared space, runs multi-head
cross-attention with the text rows as queries and the (single-token)
image feature as key and value, applies residual + layer norm, a 4x
feed-forward, a second residual + layer norm, and finally averages over
the text rows.  Parameters are randomly initialized once and frozen;
transmitter and receiver hold identical copies as part of the shared
knowledge base.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .autodiff import LAYER_NORM_EPS
from .checkpoint import MAGIC_FUSION, load_tensors, save_tensors
from .rng import Rng

__all__ = ["FusionParams", "init_fusion_params", "fuse", "fuse_trace",
           "concat_multisem", "SequentialPayload",
           "save_fusion", "load_fusion"]


@dataclass(frozen=True)
class FusionParams:
    """Frozen weights of the fusion block."""
    d_image: int
    d_text: int
    d_fusion: int
    n_heads: int
    w_image: np.ndarray   # (d_fusion, d_image)
    b_image: np.ndarray
    w_text: np.ndarray    # (d_fusion, d_text)
    b_text: np.ndarray
    w_q: np.ndarray       # (d_fusion, d_fusion) x4 attention projections
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    w_ffn1: np.ndarray    # (4*d_fusion, d_fusion)
    b_ffn1: np.ndarray
    w_ffn2: np.ndarray    # (d_fusion, 4*d_fusion)
    b_ffn2: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray

    @property
    def head_dim(self) -> int:
        return self.d_fusion // self.n_heads


def init_fusion_params(seed: int, d_image: int = 32, d_text: int = 32,
                       d_fusion: int = 64, n_heads: int = 4) -> FusionParams:
    """Seeded Gaussian init scaled by 1/sqrt(fan-in); biases zero,
    layer-norm affine at identity.

    Raises:
        ValueError: d_fusion not divisible by n_heads.
    """
    if d_fusion % n_heads != 0:
        raise ValueError(
            f"d_fusion={d_fusion} not divisible by n_heads={n_heads}")

    stream = iter(range(100))

    def w(out_dim, in_dim):
        rng = Rng(seed, next(stream))
        return rng.normal((out_dim, in_dim)) / np.sqrt(in_dim)

    d = d_fusion
    return FusionParams(
        d_image=d_image, d_text=d_text, d_fusion=d, n_heads=n_heads,
        w_image=w(d, d_image), b_image=np.zeros(d),
        w_text=w(d, d_text), b_text=np.zeros(d),
        w_q=w(d, d), b_q=np.zeros(d),
        w_k=w(d, d), b_k=np.zeros(d),
        w_v=w(d, d), b_v=np.zeros(d),
        w_o=w(d, d), b_o=np.zeros(d),
        ln1_gamma=np.ones(d), ln1_beta=np.zeros(d),
        w_ffn1=w(4 * d, d), b_ffn1=np.zeros(4 * d),
        w_ffn2=w(d, 4 * d), b_ffn2=np.zeros(d),
        ln2_gamma=np.ones(d), ln2_beta=np.zeros(d),
    )


def _layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return gamma * (x - mu) / np.sqrt(var + LAYER_NORM_EPS) + beta


def fuse_trace(p: FusionParams, image_feature: np.ndarray,
               text_feature: np.ndarray) -> dict[str, np.ndarray]:
    """Run the fusion pipeline and return every intermediate stage.

    Keys: img_proj, txt_proj, attn_weights, attn_output, residual,
    ffn_out, normed, fused.
    """
    img = np.asarray(image_feature, dtype=np.float64)
    txt = np.asarray(text_feature, dtype=np.float64)
    if img.shape != (p.d_image,):
        raise ValueError(f"image feature shape {img.shape}, "
                         f"expected ({p.d_image},)")
    if txt.ndim != 2 or txt.shape[1] != p.d_text:
        raise ValueError(f"text feature shape {txt.shape}, "
                         f"expected (n_text, {p.d_text})")

    img_proj = p.w_image @ img + p.b_image              # (d,)
    txt_proj = txt @ p.w_text.T + p.b_text              # (n, d)

    n_text = txt_proj.shape[0]
    dh = p.head_dim
    q = (txt_proj @ p.w_q.T + p.b_q).reshape(n_text, p.n_heads, dh)
    k = (img_proj @ p.w_k.T + p.b_k).reshape(p.n_heads, dh)
    v = (img_proj @ p.w_v.T + p.b_v).reshape(p.n_heads, dh)

    # One key/value token per head: (n, heads, 1) scores.
    scores = np.einsum("nhd,hd->nh", q, k)[:, :, None] / np.sqrt(dh)
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=-1, keepdims=True)
    heads = attn * v[None, :, :]                        # (n, heads, dh)
    attn_output = heads.reshape(n_text, p.d_fusion) @ p.w_o.T + p.b_o

    residual = _layer_norm(attn_output + txt_proj, p.ln1_gamma, p.ln1_beta)
    hidden = np.maximum(residual @ p.w_ffn1.T + p.b_ffn1, 0.0)
    ffn_out = hidden @ p.w_ffn2.T + p.b_ffn2
    normed = _layer_norm(ffn_out + residual, p.ln2_gamma, p.ln2_beta)
    fused = normed.mean(axis=0)

    return {"img_proj": img_proj, "txt_proj": txt_proj,
            "attn_weights": attn, "attn_output": attn_output,
            "residual": residual, "ffn_out": ffn_out, "normed": normed,
            "fused": fused}


def fuse(p: FusionParams, image_feature: np.ndarray,
         text_feature: np.ndarray) -> np.ndarray:
    """Fuse one image feature with one text-feature matrix."""
    return fuse_trace(p, image_feature, text_feature)["fused"]


@dataclass(frozen=True)
class SequentialPayload:
    """The un-fused multimodal representation: (text, image) in that order."""
    text: np.ndarray    # (n_text, d_text)
    image: np.ndarray   # (d_image,)

    @property
    def scalar_count(self) -> int:
        return self.text.size + self.image.size

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.text.ravel(), self.image])

    @staticmethod
    def unflatten(flat: np.ndarray, n_text: int, d_text: int,
                  d_image: int) -> "SequentialPayload":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != n_text * d_text + d_image:
            raise ValueError("flat payload has the wrong length")
        return SequentialPayload(
            text=flat[:n_text * d_text].reshape(n_text, d_text),
            image=flat[n_text * d_text:])


def concat_multisem(image_feature: np.ndarray,
                    text_feature: np.ndarray) -> SequentialPayload:
    """Package both modalities for sequential transmission (text first)."""
    return SequentialPayload(text=np.asarray(text_feature, dtype=np.float64),
                             image=np.asarray(image_feature, dtype=np.float64))


def save_fusion(p: FusionParams, path) -> None:
    tensors = {"dims": np.array([p.d_image, p.d_text, p.d_fusion, p.n_heads],
                                dtype=np.float64)}
    for f in fields(p):
        if isinstance(getattr(p, f.name), np.ndarray):
            tensors[f.name] = getattr(p, f.name)
    save_tensors(path, MAGIC_FUSION, tensors)


def load_fusion(path) -> FusionParams:
    t = load_tensors(path, MAGIC_FUSION)
    d_image, d_text, d_fusion, n_heads = (int(x) for x in t.pop("dims"))
    return FusionParams(d_image=d_image, d_text=d_text, d_fusion=d_fusion,
                        n_heads=n_heads, **t)
