"""Learned pruning policies: token trimmers, head trimmers, mask sampling.

A token trimmer scores each token as the sum of a local score (a small MLP
over a width-reduced view of the token) and a global score (a bilinear
match between the token and a fused cross-modal summary of both streams'
CLS vectors, standardized over the sequence). A head trimmer scores each
attention head of a module from the CLS vector(s) feeding that module.

Scores become masks through a two-noise Gumbel-sigmoid relaxation during
training and through thresholding (or optional Bernoulli draws) at
inference. Final score layers start at zero so every gate opens at
probability 1/2 and the curriculum owns early training behavior.
"""

from __future__ import annotations

import numpy as np

from .backbone import Linear, head_trim_sites, token_trim_sites
from .config import ModelConfig
from .rng import RngStream
from .tensor import Tensor, concat, gelu, sigmoid, sqrt

_STD_EPS = 1e-8


def standardize(scores: Tensor) -> Tensor:
    """Zero-mean/unit-variance over the last axis, eps-guarded.

    Constant rows map to exactly zero, and adding a constant to every entry
    leaves the output unchanged.
    """
    mu = scores.mean(axis=-1, keepdims=True)
    centered = scores - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / sqrt(var + _STD_EPS)


class TokenTrimmer:
    """Per-site token importance scorer (local MLP + global bilinear match)."""

    def __init__(self, rng: RngStream, cfg: ModelConfig):
        d, dr = cfg.d_model, cfg.d_reduce
        self.reduce = Linear(rng, d, dr)
        self.local_fc1 = Linear(rng, dr, dr)
        self.local_fc2 = Linear(rng, dr, 1, zero=True)
        self.fuse = Linear(rng, 2 * d, dr)
        self.w_g = Tensor(np.zeros((dr, dr)), requires_grad=True)

    def scores(self, x: Tensor, own_cls: Tensor, other_cls: Tensor) -> Tensor:
        """Token scores (B, N) from block-entry tokens (B, N, D) and the two
        streams' CLS vectors (B, D); own modality first in the fusion."""
        b, n = x.shape[0], x.shape[1]
        reduced = self.reduce(x)                                   # (B, N, D')
        local = self.local_fc2(gelu(self.local_fc1(reduced)))      # (B, N, 1)
        local = local.reshape(b, n)
        g = self.fuse(concat([own_cls, other_cls], axis=-1))       # (B, D')
        match = (g @ self.w_g).reshape(b, 1, -1) @ reduced.mT      # (B, 1, N)
        global_score = standardize(match.reshape(b, n))
        return local + global_score

    def params(self, prefix: str):
        yield from self.reduce.params(f"{prefix}.reduce")
        yield from self.local_fc1.params(f"{prefix}.local_fc1")
        yield from self.local_fc2.params(f"{prefix}.local_fc2")
        yield from self.fuse.params(f"{prefix}.fuse")
        yield f"{prefix}.w_g", self.w_g

    def n_params(self) -> int:
        return (self.reduce.n_params() + self.local_fc1.n_params()
                + self.local_fc2.n_params() + self.fuse.n_params() + self.w_g.size)


class HeadTrimmer:
    """Per-module head scorer: an MLP over the module's CLS summary.

    Self-attention modules read their own stream's CLS; cross-attention
    modules read [own CLS; other CLS].
    """

    def __init__(self, rng: RngStream, cfg: ModelConfig):
        d, dr, h = cfg.d_model, cfg.d_reduce, cfg.n_heads
        self.self_fc1 = Linear(rng, d, dr)
        self.self_fc2 = Linear(rng, dr, h, zero=True)
        self.cross_fc1 = Linear(rng, 2 * d, dr)
        self.cross_fc2 = Linear(rng, dr, h, zero=True)

    def scores(self, kind: str, own_cls: Tensor, other_cls: Tensor | None = None) -> Tensor:
        """Head scores (B, H); kind is 'self' or 'cross'."""
        if kind == "self":
            return self.self_fc2(gelu(self.self_fc1(own_cls)))
        if kind == "cross":
            if other_cls is None:
                raise ValueError("cross-attention head scores need the other stream's CLS")
            return self.cross_fc2(gelu(self.cross_fc1(concat([own_cls, other_cls], axis=-1))))
        raise ValueError(f"unknown attention kind {kind!r}")

    def params(self, prefix: str):
        yield from self.self_fc1.params(f"{prefix}.self_fc1")
        yield from self.self_fc2.params(f"{prefix}.self_fc2")
        yield from self.cross_fc1.params(f"{prefix}.cross_fc1")
        yield from self.cross_fc2.params(f"{prefix}.cross_fc2")

    def n_params(self) -> int:
        return (self.self_fc1.n_params() + self.self_fc2.n_params()
                + self.cross_fc1.n_params() + self.cross_fc2.n_params())


class TrimmerBank:
    """All trimmer parameters for a config, addressable by site.

    Token trimmers exist per token site. Head trimmers exist per
    (cross block, stream) and serve that stream's self and cross attention
    modules through their respective MLPs; uni-modal head sites (when
    enabled) get per-layer trimmers using the self MLP only.
    """

    def __init__(self, cfg: ModelConfig, rng: RngStream):
        self.cfg = cfg
        self.token = {site: TokenTrimmer(rng, cfg) for site in token_trim_sites(cfg)}
        self.head = {}
        for site in head_trim_sites(cfg):
            owner = site.rsplit(".", 1)[0]  # e.g. "cross.0.txt" or "txt.0"
            if owner not in self.head:
                self.head[owner] = HeadTrimmer(rng, cfg)

    def head_scores(self, module: str, own_cls: Tensor, other_cls: Tensor | None) -> Tensor:
        owner, kind = module.rsplit(".", 1)
        return self.head[owner].scores(kind, own_cls, other_cls)

    def params(self) -> dict:
        out = {}
        for site, t in self.token.items():
            out.update(t.params(f"trim.token.{site}"))
        for owner, t in self.head.items():
            out.update(t.params(f"trim.head.{owner}"))
        return out

    def n_params(self) -> int:
        return sum(t.size for t in self.params().values())


# -- mask sampling ------------------------------------------------------------


def gumbel_sigmoid_sample(pi: Tensor, tau: float, rng: RngStream | None,
                          noise: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
    """Relaxed Bernoulli gate M = sigmoid((pi + G' - G'') / tau).

    G', G'' are independent standard Gumbel draws (from `rng`, or passed
    explicitly via `noise` for fixed-noise gradient checks). Equals the
    numerator/denominator form exp((pi+G')/tau) / (exp((pi+G')/tau) +
    exp(G''/tau)) but computed in log space. Differentiable in pi;
    P(M > 0.5) = sigmoid(pi) for every tau.
    """
    if tau <= 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    if noise is None:
        if rng is None:
            raise ValueError("need an RngStream (or explicit noise)")
        g1 = rng.gumbel(pi.shape)
        g2 = rng.gumbel(pi.shape)
    else:
        g1, g2 = noise
    return sigmoid((pi + Tensor(g1 - g2)) * (1.0 / tau))


def straight_through(mask: Tensor) -> Tensor:
    """Hard {0,1} forward values with the soft mask's gradient."""
    hard = (mask.data > 0.5).astype(np.float64)
    return mask + Tensor(hard - mask.data)


def inference_mask(pi: np.ndarray, mode: str = "deterministic",
                   rng: RngStream | None = None, cls_index: int | None = 0) -> np.ndarray:
    """Binary keep/drop decisions from scores.

    deterministic: keep iff pi > 0 (i.e. sigmoid(pi) > 1/2). bernoulli:
    keep with probability sigmoid(pi) using `rng`. cls_index (if not None)
    is forced to 1 afterwards.
    """
    pi = np.asarray(pi, dtype=np.float64)
    if mode == "deterministic":
        m = (pi > 0.0).astype(np.float64)
    elif mode == "bernoulli":
        if rng is None:
            raise ValueError("bernoulli mask mode needs an RngStream")
        p = 1.0 / (1.0 + np.exp(-pi))
        m = (rng.uniform(pi.shape) < p).astype(np.float64)
    else:
        raise ValueError(f"unknown inference mask mode {mode!r}")
    if cls_index is not None:
        m[..., cls_index] = 1.0
    return m


def cls_and_other(stream: str, txt_cls: Tensor, vis_cls: Tensor) -> tuple[Tensor, Tensor]:
    """(own, other) CLS pair for a stream name."""
    if stream == "txt":
        return txt_cls, vis_cls
    return vis_cls, txt_cls
