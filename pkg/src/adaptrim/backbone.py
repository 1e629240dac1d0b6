"""Two-stream cross-modal transformer backbone.

Text and visual token sequences run through uni-modal encoders (self
attention + FFN per layer), then a co-attention cross-modal encoder where
each block updates both streams symmetrically: self attention, cross
attention against a block-entry snapshot of the other stream, FFN.
Classification reads a linear head over the two final CLS vectors.

Every block accepts externally supplied gates:

* token masks scale attention-softmax numerators on the key side and gate
  each token's FFN residual update. At binary values this is exactly
  equivalent to deleting the masked tokens from the sequence, which is the
  property the pruning runtime relies on.
* head masks scale each head's context before the output projection, which
  is exactly equivalent to removing the head (the output projection is
  linear in the concatenated contexts).

Position 0 of both streams is the CLS summary token and must never be
masked; mask application checks this.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .rng import RngStream
from .tensor import Tensor, concat, embedding, gelu, layer_norm, masked_softmax

LN_EPS = 1e-5
EMBED_STD = 0.1
POS_STD = 0.02
RESIDUAL_OUT_SCALE = 0.1
ATTN_QK_SCALE = 1.0  # wq/wk init multiplier


# -- parameter containers ------------------------------------------------------


class Linear:
    def __init__(self, rng: RngStream, d_in: int, d_out: int, zero: bool = False,
                 scale: float = 1.0):
        if zero:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.normal((d_in, d_out), std=scale * d_in ** -0.5)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b

    def params(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b

    def n_params(self) -> int:
        return self.w.size + self.b.size


class LayerNormParams:
    def __init__(self, d: int):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, LN_EPS)

    def params(self, prefix: str):
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.bias", self.bias

    def n_params(self) -> int:
        return self.gain.size + self.bias.size


# -- mask bundle ---------------------------------------------------------------


@dataclass
class MaskSet:
    """Per-site token masks and per-attention-module head masks.

    Token masks are full-length vectors over the stream's original token
    positions; masks applied at successive sites compose by elementwise
    product, so a token dropped at block k stays dropped afterwards. Values
    live in [0, 1]; at inference they are exactly {0, 1}. Index 0 (CLS) is
    always 1.
    """

    token_masks: dict = field(default_factory=dict)
    head_masks: dict = field(default_factory=dict)

    @staticmethod
    def all_ones(cfg: ModelConfig, batch: int = 1) -> "MaskSet":
        ms = MaskSet()
        for site in token_trim_sites(cfg):
            n = site_token_count(cfg, site)
            ms.token_masks[site] = np.ones((batch, n))
        for site in head_trim_sites(cfg):
            ms.head_masks[site] = np.ones((batch, cfg.n_heads))
        return ms

    def is_binary(self) -> bool:
        vecs = list(self.token_masks.values()) + list(self.head_masks.values())
        return all(np.all((v == 0.0) | (v == 1.0)) for v in vecs)


# -- site naming ---------------------------------------------------------------


def token_trim_sites(cfg: ModelConfig) -> list[str]:
    """Token-trimmer sites in execution order."""
    sites = []
    if cfg.trim_text_uni_tokens:
        sites += [f"txt.{i}" for i in range(cfg.n_uni_layers)]
    if cfg.trim_visual_tokens:
        sites += [f"vis.{i}" for i in range(cfg.n_uni_layers)]
    if cfg.trim_cross_tokens:
        for i in range(cfg.n_cross_layers):
            sites += [f"cross.{i}.txt", f"cross.{i}.vis"]
    return sites


def head_trim_sites(cfg: ModelConfig) -> list[str]:
    """Head-trimmer sites (= governed attention module names), in order."""
    sites = []
    if cfg.trim_uni_heads:
        sites += [f"txt.{i}.self" for i in range(cfg.n_uni_layers)]
        sites += [f"vis.{i}.self" for i in range(cfg.n_uni_layers)]
    if cfg.trim_cross_heads:
        for i in range(cfg.n_cross_layers):
            for stream in ("txt", "vis"):
                sites += [f"cross.{i}.{stream}.self", f"cross.{i}.{stream}.cross"]
    return sites


def site_stream(site: str) -> str:
    """'txt' or 'vis' for any site/module name."""
    parts = site.split(".")
    return parts[2] if parts[0] == "cross" else parts[0]


def site_token_count(cfg: ModelConfig, site: str) -> int:
    return cfg.n_text_tokens if site_stream(site) == "txt" else cfg.n_visual_tokens


def _check_token_mask(site: str, m: np.ndarray) -> None:
    if np.any(m[..., 0] != 1.0):
        raise ValueError(f"token mask at {site} must keep CLS (index 0) at exactly 1")
    if np.any((m < 0.0) | (m > 1.0)):
        raise ValueError(f"token mask at {site} has values outside [0, 1]")


# -- attention / FFN -----------------------------------------------------------


class Attention:
    """Multi-head attention; cross=True adds a separate key/value layer norm."""

    def __init__(self, rng: RngStream, cfg: ModelConfig, cross: bool):
        d = cfg.d_model
        self.cfg = cfg
        self.cross = cross
        self.ln_q = LayerNormParams(d)
        self.ln_kv = LayerNormParams(d) if cross else None
        self.wq = Linear(rng, d, d, scale=ATTN_QK_SCALE)
        self.wk = Linear(rng, d, d, scale=ATTN_QK_SCALE)
        self.wv = Linear(rng, d, d)
        self.wo = Linear(rng, d, d, scale=RESIDUAL_OUT_SCALE)

    def __call__(self, x: Tensor, kv: Tensor | None = None,
                 key_mask: Tensor | None = None, head_mask: Tensor | None = None,
                 heads: np.ndarray | None = None):
        """Residual attention update.

        x: (B, Nq, D); kv: (B, Nk, D) for cross attention, else x is reused.
        key_mask: (B, Nk) numerator scaling per key. head_mask: (B, H) context
        scaling per head. heads: sorted index array for structured execution
        with only those heads (inference path); mutually exclusive with
        head_mask.

        Returns (updated x, attention probs (B, h, Nq, Nk), raw per-head
        context (B, h, Nq, d_head) before any head gating).
        """
        cfg = self.cfg
        xq = self.ln_q(x)
        xkv = self.ln_kv(kv) if self.cross else xq
        b, n_q = xq.shape[0], xq.shape[1]
        n_kv = xkv.shape[1]

        if heads is not None:
            if len(heads) == 0:
                return x, None, None
            cols = (np.asarray(heads)[:, None] * cfg.d_head + np.arange(cfg.d_head)).ravel()
            q = (xq @ self.wq.w[:, cols] + self.wq.b[cols])
            k = (xkv @ self.wk.w[:, cols] + self.wk.b[cols])
            v = (xkv @ self.wv.w[:, cols] + self.wv.b[cols])
            h = len(heads)
        else:
            q, k, v = self.wq(xq), self.wk(xkv), self.wv(xkv)
            h = cfg.n_heads

        q = q.reshape(b, n_q, h, cfg.d_head).transpose((0, 2, 1, 3))
        k = k.reshape(b, n_kv, h, cfg.d_head).transpose((0, 2, 1, 3))
        v = v.reshape(b, n_kv, h, cfg.d_head).transpose((0, 2, 1, 3))

        scores = (q @ k.mT) * (cfg.d_head ** -0.5)
        if key_mask is not None:
            key_mask = key_mask.reshape(b, 1, 1, n_kv)
        probs = masked_softmax(scores, key_mask)
        ctx = probs @ v

        gated = ctx if head_mask is None else ctx * head_mask.reshape(b, h, 1, 1)
        merged = gated.transpose((0, 2, 1, 3)).reshape(b, n_q, h * cfg.d_head)
        if heads is not None:
            out = merged @ self.wo.w[cols, :] + self.wo.b
        else:
            out = self.wo(merged)
        return x + out, probs, ctx

    def params(self, prefix: str):
        yield from self.ln_q.params(f"{prefix}.ln_q")
        if self.ln_kv is not None:
            yield from self.ln_kv.params(f"{prefix}.ln_kv")
        for name, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            yield from lin.params(f"{prefix}.{name}")

    def n_params(self) -> int:
        total = self.ln_q.n_params() + (self.ln_kv.n_params() if self.ln_kv else 0)
        return total + sum(l.n_params() for l in (self.wq, self.wk, self.wv, self.wo))


class FeedForward:
    def __init__(self, rng: RngStream, cfg: ModelConfig):
        self.ln = LayerNormParams(cfg.d_model)
        self.fc1 = Linear(rng, cfg.d_model, cfg.d_ff)
        self.fc2 = Linear(rng, cfg.d_ff, cfg.d_model, scale=RESIDUAL_OUT_SCALE)

    def __call__(self, x: Tensor, token_mask: Tensor | None = None) -> Tensor:
        """Residual FFN update; token_mask (B, N) gates each row's update."""
        h = self.fc2(gelu(self.fc1(self.ln(x))))
        if token_mask is not None:
            b, n = token_mask.shape
            h = h * token_mask.reshape(b, n, 1)
        return x + h

    def params(self, prefix: str):
        yield from self.ln.params(f"{prefix}.ln")
        yield from self.fc1.params(f"{prefix}.fc1")
        yield from self.fc2.params(f"{prefix}.fc2")

    def n_params(self) -> int:
        return self.ln.n_params() + self.fc1.n_params() + self.fc2.n_params()


class UniLayer:
    def __init__(self, rng: RngStream, cfg: ModelConfig):
        self.attn = Attention(rng, cfg, cross=False)
        self.ffn = FeedForward(rng, cfg)

    def params(self, prefix: str):
        yield from self.attn.params(f"{prefix}.attn")
        yield from self.ffn.params(f"{prefix}.ffn")

    def n_params(self) -> int:
        return self.attn.n_params() + self.ffn.n_params()


class CrossStreamLayer:
    """One stream's modules within one cross-modal block."""

    def __init__(self, rng: RngStream, cfg: ModelConfig):
        self.self_attn = Attention(rng, cfg, cross=False)
        self.cross_attn = Attention(rng, cfg, cross=True)
        self.ffn = FeedForward(rng, cfg)

    def params(self, prefix: str):
        yield from self.self_attn.params(f"{prefix}.self")
        yield from self.cross_attn.params(f"{prefix}.cross")
        yield from self.ffn.params(f"{prefix}.ffn")

    def n_params(self) -> int:
        return self.self_attn.n_params() + self.cross_attn.n_params() + self.ffn.n_params()


# -- activations bundle ----------------------------------------------------------


@dataclass
class Activations:
    """Optional per-layer capture for analysis: block-entry token
    representations per stream and attention probs/contexts per module."""

    tokens: dict = field(default_factory=dict)    # "txt.0" -> Tensor (B, N, D)
    attn: dict = field(default_factory=dict)      # module name -> probs Tensor
    context: dict = field(default_factory=dict)   # module name -> ctx Tensor


@dataclass
class EncodeResult:
    logits: Tensor
    txt_cls: Tensor
    vis_cls: Tensor
    activations: Activations | None = None


# -- backbone ---------------------------------------------------------------------


class Backbone:
    """Parameters plus the fixed-mask forward pass.

    encode() runs with either no masks at all (vanilla path, no masking ops
    in the graph) or a complete MaskSet covering every trimmed site of the
    config. Trimmer-driven forwards live in the pruning runtime.
    """

    def __init__(self, cfg: ModelConfig, rng: RngStream):
        self.cfg = cfg
        d = cfg.d_model
        self.token_table = Tensor(rng.normal((cfg.vocab_size, d), std=EMBED_STD), requires_grad=True)
        self.txt_pos = Tensor(rng.normal((cfg.n_text_tokens, d), std=POS_STD), requires_grad=True)
        self.patch_proj = Linear(rng, cfg.patch_dim, d)
        self.vis_cls = Tensor(rng.normal((d,), std=EMBED_STD), requires_grad=True)
        self.vis_pos = Tensor(rng.normal((cfg.n_visual_tokens, d), std=POS_STD), requires_grad=True)
        self.txt_layers = [UniLayer(rng, cfg) for _ in range(cfg.n_uni_layers)]
        self.vis_layers = [UniLayer(rng, cfg) for _ in range(cfg.n_uni_layers)]
        self.cross_layers = [
            {"txt": CrossStreamLayer(rng, cfg), "vis": CrossStreamLayer(rng, cfg)}
            for _ in range(cfg.n_cross_layers)
        ]
        self.txt_final_ln = LayerNormParams(d)
        self.vis_final_ln = LayerNormParams(d)
        self.classifier = Linear(rng, 2 * d, cfg.n_classes)

    # -- embeddings ------------------------------------------------------------

    def embed_text(self, ids: np.ndarray) -> Tensor:
        """(B, N_t) int ids -> (B, N_t, D); position 0 carries the CLS id."""
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.shape[1] != self.cfg.n_text_tokens:
            raise ValueError(f"expected {self.cfg.n_text_tokens} text tokens, got {ids.shape[1]}")
        return embedding(self.token_table, ids) + self.txt_pos

    def embed_patches(self, patches: np.ndarray | Tensor) -> Tensor:
        """(B, N_v-1, patch_dim) -> (B, N_v, D) with CLS prepended."""
        t = patches if isinstance(patches, Tensor) else Tensor(patches)
        if t.ndim == 2:
            t = t.reshape(1, *t.shape)
        if t.shape[1] != self.cfg.n_visual_tokens - 1 or t.shape[2] != self.cfg.patch_dim:
            raise ValueError(
                f"expected patches ({self.cfg.n_visual_tokens - 1}, {self.cfg.patch_dim}), "
                f"got {t.shape[1:]}"
            )
        b = t.shape[0]
        rows = self.patch_proj(t)
        cls_row = self.vis_cls.reshape(1, 1, -1) + Tensor(np.zeros((b, 1, self.cfg.d_model)))
        return concat([cls_row, rows], axis=1) + self.vis_pos

    # -- fixed-mask forward ------------------------------------------------------

    def encode(self, text_ids: np.ndarray, patches, masks: MaskSet | None = None,
               capture: bool = False) -> EncodeResult:
        cfg = self.cfg
        x_t = self.embed_text(text_ids)
        x_v = self.embed_patches(patches)
        b = x_t.shape[0]

        token_sites = token_trim_sites(cfg)
        head_sites = head_trim_sites(cfg)
        if masks is not None:
            missing = [s for s in token_sites if s not in masks.token_masks]
            missing += [s for s in head_sites if s not in masks.head_masks]
            if missing:
                raise ValueError(f"MaskSet missing masks for sites: {missing}")
            extra = [s for s in masks.token_masks if s not in token_sites]
            extra += [s for s in masks.head_masks if s not in head_sites]
            if extra:
                raise ValueError(f"MaskSet has masks for unknown sites: {extra}")

        acts = Activations() if capture else None
        run_mask = {"txt": None, "vis": None}  # cumulative token masks, Tensors

        def apply_site(stream: str, site: str):
            if masks is None or site not in masks.token_masks:
                return
            m = np.asarray(masks.token_masks[site], dtype=np.float64)
            if m.ndim == 1:
                m = np.broadcast_to(m, (b, m.shape[0]))
            _check_token_mask(site, m)
            cur = run_mask[stream]
            run_mask[stream] = Tensor(m) if cur is None else cur * Tensor(m)

        def head_mask_for(module: str) -> Tensor | None:
            if masks is None or module not in masks.head_masks:
                return None
            hm = np.asarray(masks.head_masks[module], dtype=np.float64)
            if hm.ndim == 1:
                hm = np.broadcast_to(hm, (b, hm.shape[0]))
            return Tensor(hm)

        def record(name: str, x: Tensor, attn=None, ctx=None):
            if acts is None:
                return
            if x is not None:
                acts.tokens[name] = x
            if attn is not None:
                acts.attn[name] = attn
            if ctx is not None:
                acts.context[name] = ctx

        # uni-modal encoders
        for stream, layers in (("txt", self.txt_layers), ("vis", self.vis_layers)):
            x = x_t if stream == "txt" else x_v
            for i, layer in enumerate(layers):
                record(f"{stream}.{i}", x)
                apply_site(stream, f"{stream}.{i}")
                m = run_mask[stream]
                x, probs, ctx = layer.attn(x, key_mask=m, head_mask=head_mask_for(f"{stream}.{i}.self"))
                record(f"{stream}.{i}.self", None, probs, ctx)
                x = layer.ffn(x, token_mask=m)
            if stream == "txt":
                x_t = x
            else:
                x_v = x

        # cross-modal encoder: parallel symmetric update from block-entry snapshots
        for i, block in enumerate(self.cross_layers):
            record(f"cross.{i}.txt", x_t)
            record(f"cross.{i}.vis", x_v)
            apply_site("txt", f"cross.{i}.txt")
            apply_site("vis", f"cross.{i}.vis")
            snap = {"txt": x_t, "vis": x_v}
            new = {}
            for stream, other in (("txt", "vis"), ("vis", "txt")):
                sl = block[stream]
                m_own, m_other = run_mask[stream], run_mask[other]
                x, probs, ctx = sl.self_attn(
                    snap[stream], key_mask=m_own,
                    head_mask=head_mask_for(f"cross.{i}.{stream}.self"))
                record(f"cross.{i}.{stream}.self", None, probs, ctx)
                x, probs, ctx = sl.cross_attn(
                    x, kv=snap[other], key_mask=m_other,
                    head_mask=head_mask_for(f"cross.{i}.{stream}.cross"))
                record(f"cross.{i}.{stream}.cross", None, probs, ctx)
                new[stream] = sl.ffn(x, token_mask=m_own)
            x_t, x_v = new["txt"], new["vis"]

        record("final.txt", x_t)
        record("final.vis", x_v)
        txt_cls = self.txt_final_ln(x_t[:, 0])
        vis_cls = self.vis_final_ln(x_v[:, 0])
        logits = self.classifier(concat([txt_cls, vis_cls], axis=-1))
        return EncodeResult(logits, txt_cls, vis_cls, acts)

    # -- parameters ---------------------------------------------------------------

    def params(self) -> dict:
        out = {
            "embed.token_table": self.token_table,
            "embed.txt_pos": self.txt_pos,
            "embed.vis_cls": self.vis_cls,
            "embed.vis_pos": self.vis_pos,
        }
        out.update(self.patch_proj.params("embed.patch_proj"))
        for i, layer in enumerate(self.txt_layers):
            out.update(layer.params(f"txt.{i}"))
        for i, layer in enumerate(self.vis_layers):
            out.update(layer.params(f"vis.{i}"))
        for i, block in enumerate(self.cross_layers):
            out.update(block["txt"].params(f"cross.{i}.txt"))
            out.update(block["vis"].params(f"cross.{i}.vis"))
        out.update(self.txt_final_ln.params("final.txt_ln"))
        out.update(self.vis_final_ln.params("final.vis_ln"))
        out.update(self.classifier.params("head.classifier"))
        return out

    def n_params(self) -> int:
        return sum(t.size for t in self.params().values())
