"""Context modules over primitive and cluster feature maps.

* geometric context (``gcm``): attention over all primitives of one kind,
  ``LN(softmax(s * theta(F) phi(F)^T) g(F))``;
* proposal context (``pcm``): per-vote MLP, the same attention inside each
  cluster, layer norm, then a channel max over the cluster's votes;
* hybrid context (``hcm``): an MLP over the pooled pre-attention cluster and
  primitive features, broadcast-added to the proposal-context output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import (
    ConfigurationError,
    LayerNormParams,
    LinearParams,
    Tape,
    Tensor,
    init_layer_norm,
    init_linear,
    mlp_forward,
)


@dataclass
class AttentionParams:
    theta: LinearParams
    phi: LinearParams
    g: LinearParams
    ln: LayerNormParams

    def __post_init__(self):
        widths = {self.theta.d_out, self.phi.d_out, self.g.d_out}
        if len(widths) != 1:
            raise ConfigurationError(f"theta/phi/g must share output width, got {sorted(widths)}")
        if self.ln.gain.shape != (self.g.d_out,):
            raise ConfigurationError("layer norm width must equal attention output width")

    @property
    def d_out(self) -> int:
        return self.g.d_out


def init_attention(rng: np.random.Generator, d_in: int, d_out: int) -> AttentionParams:
    return AttentionParams(
        init_linear(rng, d_in, d_out, 0.5),
        init_linear(rng, d_in, d_out, 0.5),
        init_linear(rng, d_in, d_out),
        init_layer_norm(d_out),
    )


@dataclass
class ContextConfig:
    enable_gcm: bool = True
    enable_pcm: bool = True
    enable_hcm: bool = True
    attention_scale: float | None = None  # None -> 1/sqrt(D')
    pcm_across_clusters: bool = False

    def __post_init__(self):
        if self.attention_scale is not None and not self.attention_scale > 0:
            raise ValueError("attention_scale must be positive")

    def scale_for(self, d: int) -> float:
        return self.attention_scale if self.attention_scale is not None else 1.0 / math.sqrt(d)


def attention(
    tape: Tape, x: Tensor, p: AttentionParams, scale: float, mask: np.ndarray | None = None
) -> Tensor:
    """``LN(softmax(scale * theta(x) phi(x)^T) g(x))`` over the row axis.

    ``x`` is ``(n, D)`` or a batch ``(B, n, D)``; ``mask`` (``(B, n)``) hides
    padded rows from every query.
    """
    if x.shape[-1] != p.theta.d_in:
        raise ConfigurationError(f"attention expects width {p.theta.d_in}, got {x.shape}")
    q = tape.linear(x, p.theta)
    k = tape.linear(x, p.phi)
    v = tape.linear(x, p.g)
    logits = tape.scale(tape.matmul(q, tape.transpose(k)), scale)
    keymask = None if mask is None else mask[:, None, :]
    a = tape.softmax(logits, keymask)
    return tape.layer_norm(tape.matmul(a, v), p.ln)


def gcm(tape: Tape, F: Tensor, p: AttentionParams, scale: float | None = None) -> Tensor:
    if F.data.ndim != 2:
        raise ConfigurationError(f"gcm expects an (n, D) feature map, got {F.shape}")
    return attention(tape, F, p, scale if scale is not None else 1.0 / math.sqrt(p.d_out))


def pcm(
    tape: Tape,
    members: Tensor,
    mask: np.ndarray,
    mlp: Sequence[LinearParams],
    attn: AttentionParams | None,
    scale: float | None = None,
    across_clusters: bool = False,
) -> tuple[Tensor, Tensor]:
    """Proposal context over padded cluster members.

    ``members`` is ``(N, m, D_in)`` raw per-vote inputs, ``mask`` ``(N, m)``.
    Returns ``(K_P, k_pre)``: the context output and the plain max-pooled
    per-vote embedding that the hybrid branch taps. ``attn=None`` disables
    the attention (``K_P = k_pre``).
    """
    if mask.shape != members.shape[:2]:
        raise ConfigurationError(f"mask {mask.shape} does not match members {members.shape}")
    if not mask.any(axis=1).all():
        raise RuntimeError("pcm got an empty cluster")
    emb = mlp_forward(tape, members, mlp)
    k_pre, _ = tape.max_pool(emb, mask)
    if attn is None:
        return k_pre, k_pre
    s = scale if scale is not None else 1.0 / math.sqrt(attn.d_out)
    if across_clusters:
        return attention(tape, k_pre, attn, s), k_pre
    ctx = attention(tape, emb, attn, s, mask)
    k_p, _ = tape.max_pool(ctx, mask)
    return k_p, k_pre


def hcm(tape: Tape, G: Tensor, K_P: Tensor, k_pre: Tensor, mlp: Sequence[LinearParams]) -> Tensor:
    """``K_h = MLP([max(k_pre); max(G)]) + K_P`` with the MLP output added to every row."""
    if mlp[0].d_in != k_pre.shape[-1] + G.shape[-1] or mlp[-1].d_out != K_P.shape[-1]:
        raise ConfigurationError(
            f"hcm MLP {mlp[0].d_in}->{mlp[-1].d_out} does not fit k {k_pre.shape}, G {G.shape}, K_P {K_P.shape}"
        )
    pk, _ = tape.max_pool(k_pre)
    pg, _ = tape.max_pool(G)
    s = tape.reshape(tape.concat([pk, pg]), (1, -1))
    scene = tape.reshape(mlp_forward(tape, s, mlp), (-1,))
    return tape.add(K_P, scene)


@dataclass
class ContextParams:
    gcm: dict[str, AttentionParams]
    pcm: dict[str, AttentionParams]
    hcm: dict[str, list[LinearParams]]


@dataclass
class ContextState:
    """Inputs and outputs of the context stack for one scene.

    ``primitives`` are per-kind ``(P, D)`` maps; ``cluster_embeddings`` are
    per-kind ``(N, m, D')`` per-vote embeddings with their masks. After
    :func:`apply_context`, ``proposals`` holds per-kind ``(N, D')`` maps.
    """

    primitives: dict[str, Tensor]
    backbone: Tensor
    cluster_embeddings: dict[str, tuple[Tensor, np.ndarray]] = field(default_factory=dict)
    proposals: dict[str, Tensor] = field(default_factory=dict)


def geometric_context(tape: Tape, F: Tensor, p: AttentionParams, cfg: ContextConfig) -> Tensor:
    return gcm(tape, F, p, cfg.scale_for(p.d_out)) if cfg.enable_gcm else F


def cluster_context(
    tape: Tape,
    embeddings: Tensor,
    mask: np.ndarray,
    G: Tensor,
    kind: str,
    params: ContextParams,
    cfg: ContextConfig,
) -> Tensor:
    """Proposal and hybrid context for one kind, from per-vote embeddings."""
    k_pre, _ = tape.max_pool(embeddings, mask)
    K_P = k_pre
    if cfg.enable_pcm:
        ap = params.pcm[kind]
        s = cfg.scale_for(ap.d_out)
        if cfg.pcm_across_clusters:
            K_P = attention(tape, k_pre, ap, s)
        else:
            K_P, _ = tape.max_pool(attention(tape, embeddings, ap, s, mask), mask)
    if cfg.enable_hcm:
        return hcm(tape, G, K_P, k_pre, params.hcm[kind])
    return K_P


def apply_context(tape: Tape, state: ContextState, params: ContextParams, cfg: ContextConfig) -> ContextState:
    """Run the enabled modules; disabled ones pass features through unchanged."""
    prims = {k: geometric_context(tape, f, params.gcm[k], cfg) for k, f in state.primitives.items()}
    props = {
        k: cluster_context(tape, emb, mask, state.backbone, k, params, cfg)
        for k, (emb, mask) in state.cluster_embeddings.items()
    }
    return ContextState(prims, state.backbone, state.cluster_embeddings, props)
