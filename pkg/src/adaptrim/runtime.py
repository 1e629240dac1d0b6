"""Trimmer-driven forward passes and retention accounting.

Two paths share the backbone's layer modules:

* forward_train: batched, differentiable. Trimmer scores become soft gates
  via Gumbel-sigmoid sampling; gates compose multiplicatively across sites,
  so a token softly dropped at block k stays suppressed afterwards. Returns
  per-example retention ratios as graph tensors for the cost loss.

* forward_infer: single instance. Scores are thresholded to binary
  decisions and pruned tokens are physically gathered out of the sequence
  (never recomputed downstream); dropped heads are skipped structurally by
  slicing the attention projections. At equal binary masks the two paths
  produce identical retained-token outputs.

Token decisions can be overridden per call: `mask_override` imposes a full
MaskSet (trimmer scores still run, so FLOPs instrumentation sees the same
work the adaptive path does), `token_policy` swaps the decision rule
(ablation baselines), `head_override` pins per-module head masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import (Backbone, MaskSet, head_trim_sites, site_stream,
                       site_token_count, token_trim_sites)
from .config import ModelConfig
from .rng import RngStream
from .tensor import Tensor, concat, no_grad, take_tokens
from .trimmers import TrimmerBank, gumbel_sigmoid_sample, inference_mask, straight_through


@dataclass
class TrainForward:
    logits: Tensor                       # (B, C)
    logits_full: Tensor | None           # (B, C) all-ones companion pass
    beta_t: Tensor                       # (B,) token retention per example
    beta_h: Tensor                       # (B,) head retention per example
    mask_set: MaskSet                    # numpy snapshot of the soft masks


@dataclass
class InferForward:
    logits: np.ndarray                   # (C,)
    mask_set: MaskSet                    # binary, full-length, cumulative
    prediction: int = 0


@dataclass
class SiteContext:
    """What a token-decision policy sees at one trimmer site."""

    site: str
    x: Tensor                            # (1, n, D) current surviving tokens
    own_cls: Tensor
    other_cls: Tensor
    cls_attn: np.ndarray | None          # (n,) CLS attention over current tokens
    bank: TrimmerBank
    rng: RngStream | None
    mode: str


@dataclass
class RetentionStats:
    beta_t: float
    beta_h: float
    per_site: dict = field(default_factory=dict)


class AdaptiveModel:
    """Backbone plus trimmers, with the adaptive forward passes."""

    def __init__(self, cfg: ModelConfig, rng: RngStream):
        self.cfg = cfg
        self.backbone = Backbone(cfg, rng.child("backbone"))
        self.trimmers = TrimmerBank(cfg, rng.child("trimmers"))

    def params(self) -> dict:
        out = self.backbone.params()
        out.update(self.trimmers.params())
        return out

    # -- training path ----------------------------------------------------------

    def forward_train(self, text_ids: np.ndarray, patches: np.ndarray, tau: float,
                      rng: RngStream, straight: bool = False,
                      with_full_pass: bool = True) -> TrainForward:
        cfg, bb, bank = self.cfg, self.backbone, self.trimmers
        x_t = bb.embed_text(text_ids)
        x_v = bb.embed_patches(patches)
        b = x_t.shape[0]

        token_sites = set(token_trim_sites(cfg))
        head_sites = set(head_trim_sites(cfg))
        run = {"txt": None, "vis": None}
        snap_tok: dict[str, np.ndarray] = {}
        snap_head: dict[str, np.ndarray] = {}
        ratios_t: list[Tensor] = []
        ratios_h: list[Tensor] = []
        ones_col = Tensor(np.ones((b, 1)))

        def trim_tokens(site: str, x: Tensor, own_cls: Tensor, other_cls: Tensor):
            stream = site_stream(site)
            pi = bank.token[site].scores(x, own_cls, other_cls)
            m = gumbel_sigmoid_sample(pi, tau, rng)
            if straight:
                m = straight_through(m)
            m = concat([ones_col, m[:, 1:]], axis=1)   # CLS stays at exactly 1
            cur = run[stream]
            m = m if cur is None else cur * m
            run[stream] = m
            snap_tok[site] = m.data.copy()
            n = site_token_count(cfg, site)
            ratios_t.append(m.sum(axis=-1) * (1.0 / n))

        def head_gate(module: str, own_cls: Tensor, other_cls: Tensor | None):
            if module not in head_sites:
                return None
            pi = bank.head_scores(module, own_cls, other_cls)
            m = gumbel_sigmoid_sample(pi, tau, rng)
            if straight:
                m = straight_through(m)
            snap_head[module] = m.data.copy()
            ratios_h.append(m.sum(axis=-1) * (1.0 / cfg.n_heads))
            return m

        # text uni encoder (other-modality summary: visual embedding CLS)
        vis_embed_cls = x_v[:, 0]
        for i, layer in enumerate(bb.txt_layers):
            site = f"txt.{i}"
            if site in token_sites:
                trim_tokens(site, x_t, x_t[:, 0], vis_embed_cls)
            m = run["txt"]
            hm = head_gate(f"txt.{i}.self", x_t[:, 0], None)
            x_t, _, _ = layer.attn(x_t, key_mask=m, head_mask=hm)
            x_t = layer.ffn(x_t, token_mask=m)

        # visual uni encoder (other-modality summary: encoded text CLS)
        txt_uni_cls = x_t[:, 0]
        for i, layer in enumerate(bb.vis_layers):
            site = f"vis.{i}"
            if site in token_sites:
                trim_tokens(site, x_v, x_v[:, 0], txt_uni_cls)
            m = run["vis"]
            hm = head_gate(f"vis.{i}.self", x_v[:, 0], None)
            x_v, _, _ = layer.attn(x_v, key_mask=m, head_mask=hm)
            x_v = layer.ffn(x_v, token_mask=m)

        # cross-modal encoder
        for i, block in enumerate(bb.cross_layers):
            if f"cross.{i}.txt" in token_sites:
                trim_tokens(f"cross.{i}.txt", x_t, x_t[:, 0], x_v[:, 0])
            if f"cross.{i}.vis" in token_sites:
                trim_tokens(f"cross.{i}.vis", x_v, x_v[:, 0], x_t[:, 0])
            snap = {"txt": x_t, "vis": x_v}
            new = {}
            for stream, other in (("txt", "vis"), ("vis", "txt")):
                sl = block[stream]
                own_cls, other_cls = snap[stream][:, 0], snap[other][:, 0]
                m_own, m_other = run[stream], run[other]
                hm = head_gate(f"cross.{i}.{stream}.self", own_cls, other_cls)
                x, _, _ = sl.self_attn(snap[stream], key_mask=m_own, head_mask=hm)
                hm = head_gate(f"cross.{i}.{stream}.cross", own_cls, other_cls)
                x, _, _ = sl.cross_attn(x, kv=snap[other], key_mask=m_other, head_mask=hm)
                new[stream] = sl.ffn(x, token_mask=m_own)
            x_t, x_v = new["txt"], new["vis"]

        txt_cls = bb.txt_final_ln(x_t[:, 0])
        vis_cls = bb.vis_final_ln(x_v[:, 0])
        logits = bb.classifier(concat([txt_cls, vis_cls], axis=-1))

        beta_t = _mean_ratio(ratios_t, b)
        beta_h = _mean_ratio(ratios_h, b)

        logits_full = None
        if with_full_pass:
            logits_full = bb.encode(text_ids, patches, masks=None).logits

        return TrainForward(logits, logits_full, beta_t, beta_h,
                            MaskSet(snap_tok, snap_head))

    # -- inference path ------------------------------------------------------------

    def forward_infer(self, text_ids: np.ndarray, patches: np.ndarray,
                      mode: str = "deterministic", rng: RngStream | None = None,
                      mask_override: MaskSet | None = None,
                      token_policy=None, head_override: dict | None = None) -> InferForward:
        """Single-instance forward with physical token removal.

        Pruned tokens are gathered out at each trimmer site and never touch
        later blocks; dropped heads are skipped by slicing the attention
        projections (structured execution). Returns the full-length binary
        cumulative MaskSet actually realized.
        """
        with no_grad():
            return self._infer(text_ids, patches, mode, rng, mask_override,
                               token_policy, head_override)

    def _infer(self, text_ids, patches, mode, rng, mask_override, token_policy,
               head_override) -> InferForward:
        cfg, bb, bank = self.cfg, self.backbone, self.trimmers
        text_ids = np.asarray(text_ids)
        if text_ids.ndim == 2 and text_ids.shape[0] != 1:
            raise ValueError("inference runs one instance at a time (no padding)")
        x_t = bb.embed_text(text_ids)
        x_v = bb.embed_patches(patches)

        token_sites = set(token_trim_sites(cfg))
        head_sites = set(head_trim_sites(cfg))
        alive = {"txt": np.arange(cfg.n_text_tokens), "vis": np.arange(cfg.n_visual_tokens)}
        last_self_attn = {"txt": None, "vis": None}
        out = MaskSet()

        def decide_tokens(site: str, x: Tensor, own_cls: Tensor, other_cls: Tensor,
                          stream: str) -> np.ndarray:
            # trimmer scores always run so instrumented FLOPs match the
            # analytical accounting, even when the decision is imposed
            if token_policy is None or mask_override is not None:
                pi = bank.token[site].scores(x, own_cls, other_cls)
            if mask_override is not None:
                full = np.asarray(mask_override.token_masks[site], dtype=np.float64)
                full = full[0] if full.ndim == 2 else full
                return full[alive[stream]]
            if token_policy is not None:
                cls_attn = None
                if last_self_attn[stream] is not None:
                    probs = last_self_attn[stream].data
                    cls_attn = probs[0, :, 0, :].mean(axis=0)
                ctx = SiteContext(site, x, own_cls, other_cls, cls_attn, bank, rng, mode)
                return token_policy(ctx)
            return inference_mask(pi.data[0], mode, rng)

        def trim(site: str, x: Tensor, own_cls: Tensor, other_cls: Tensor,
                 stream: str) -> Tensor:
            m = decide_tokens(site, x, own_cls, other_cls, stream)
            if m[0] != 1.0:
                raise ValueError(f"token decision at {site} dropped CLS")
            keep = np.nonzero(m)[0]
            if len(keep) != len(m):
                x = take_tokens(x, keep)
                alive[stream] = alive[stream][keep]
            full = np.zeros(site_token_count(cfg, site))
            full[alive[stream]] = 1.0
            out.token_masks[site] = full
            return x

        def decide_heads(module: str, own_cls: Tensor, other_cls: Tensor | None) -> np.ndarray:
            if head_override is not None and module in head_override:
                return np.asarray(head_override[module], dtype=np.float64)
            pi = bank.head_scores(module, own_cls, other_cls)
            if mask_override is not None:
                hm = np.asarray(mask_override.head_masks[module], dtype=np.float64)
                return hm[0] if hm.ndim == 2 else hm
            return inference_mask(pi.data[0], mode, rng, cls_index=None)

        def attn_call(module: str, attn, x, kv, own_cls, other_cls, stream=None):
            heads = None
            if module in head_sites:
                hm = decide_heads(module, own_cls, other_cls)
                out.head_masks[module] = hm
                heads = np.nonzero(hm)[0]
                if len(heads) == cfg.n_heads:
                    heads = None
            x, probs, _ = attn(x, kv=kv, heads=heads)
            if stream is not None and probs is not None:
                last_self_attn[stream] = probs
            return x

        # text uni encoder
        vis_embed_cls = x_v[:, 0]
        for i, layer in enumerate(bb.txt_layers):
            site = f"txt.{i}"
            if site in token_sites:
                x_t = trim(site, x_t, x_t[:, 0], vis_embed_cls, "txt")
            x_t = attn_call(f"txt.{i}.self", layer.attn, x_t, None, x_t[:, 0], None, "txt")
            x_t = layer.ffn(x_t)

        # visual uni encoder
        txt_uni_cls = x_t[:, 0]
        for i, layer in enumerate(bb.vis_layers):
            site = f"vis.{i}"
            if site in token_sites:
                x_v = trim(site, x_v, x_v[:, 0], txt_uni_cls, "vis")
            x_v = attn_call(f"vis.{i}.self", layer.attn, x_v, None, x_v[:, 0], None, "vis")
            x_v = layer.ffn(x_v)

        # cross-modal encoder
        for i, block in enumerate(bb.cross_layers):
            if f"cross.{i}.txt" in token_sites:
                x_t = trim(f"cross.{i}.txt", x_t, x_t[:, 0], x_v[:, 0], "txt")
            if f"cross.{i}.vis" in token_sites:
                x_v = trim(f"cross.{i}.vis", x_v, x_v[:, 0], x_t[:, 0], "vis")
            snap = {"txt": x_t, "vis": x_v}
            new = {}
            for stream, other in (("txt", "vis"), ("vis", "txt")):
                sl = block[stream]
                own_cls, other_cls = snap[stream][:, 0], snap[other][:, 0]
                x = attn_call(f"cross.{i}.{stream}.self", sl.self_attn,
                              snap[stream], None, own_cls, other_cls, stream)
                x = attn_call(f"cross.{i}.{stream}.cross", sl.cross_attn,
                              x, snap[other], own_cls, other_cls)
                new[stream] = sl.ffn(x)
            x_t, x_v = new["txt"], new["vis"]

        txt_cls = bb.txt_final_ln(x_t[:, 0])
        vis_cls = bb.vis_final_ln(x_v[:, 0])
        logits = bb.classifier(concat([txt_cls, vis_cls], axis=-1)).data[0]
        return InferForward(logits, out, int(np.argmax(logits)))


def _mean_ratio(ratios: list[Tensor], batch: int) -> Tensor:
    if not ratios:
        return Tensor(np.ones(batch))
    total = ratios[0]
    for r in ratios[1:]:
        total = total + r
    return total * (1.0 / len(ratios))


# -- retention accounting ------------------------------------------------------


def retention_stats(mask_set: MaskSet, cfg: ModelConfig) -> RetentionStats:
    """Mean retention over trimmed sites; soft masks contribute their sum,
    binary masks their count (the two agree at {0,1} values)."""
    per_site = {}
    t_ratios, h_ratios = [], []
    for site, m in mask_set.token_masks.items():
        m = np.asarray(m, dtype=np.float64)
        n = m.shape[-1]
        ratio = float(np.mean(m.sum(axis=-1) / n))
        per_site[site] = ratio
        t_ratios.append(ratio)
    for site, m in mask_set.head_masks.items():
        m = np.asarray(m, dtype=np.float64)
        ratio = float(np.mean(m.sum(axis=-1) / m.shape[-1]))
        per_site[site] = ratio
        h_ratios.append(ratio)
    beta_t = float(np.mean(t_ratios)) if t_ratios else 1.0
    beta_h = float(np.mean(h_ratios)) if h_ratios else 1.0
    return RetentionStats(beta_t, beta_h, per_site)


# -- mask trace export -----------------------------------------------------------


def format_mask_trace(cfg: ModelConfig, mask_set: MaskSet, header_lines: list[str]) -> str:
    """Ordered (site, mask vector) rows as tab-separated text.

    Token sites appear in execution order with their full-length cumulative
    masks, then head sites with per-head masks. Mask entries are
    comma-joined repr floats (0/1 at inference).
    """
    lines = list(header_lines)
    lines.append("site\tkind\tmask")
    for site in token_trim_sites(cfg):
        if site in mask_set.token_masks:
            m = np.asarray(mask_set.token_masks[site])
            m = m[0] if m.ndim == 2 else m
            lines.append(f"{site}\ttoken\t{','.join(repr(float(v)) for v in m)}")
    for site in head_trim_sites(cfg):
        if site in mask_set.head_masks:
            m = np.asarray(mask_set.head_masks[site])
            m = m[0] if m.ndim == 2 else m
            lines.append(f"{site}\thead\t{','.join(repr(float(v)) for v in m)}")
    return "\n".join(lines) + "\n"
