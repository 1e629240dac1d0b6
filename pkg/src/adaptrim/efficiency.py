"""Analytical FLOPs accounting under binary masks.

Conventions (shared with the tensor core's instrumented counter, so the
two agree exactly): one multiply-accumulate = 2 FLOPs, GeLU = 1 FLOP per
element; bias adds, residual adds, softmax, layer norm, and score scaling
are excluded. Pruned heads are costed as structured execution (their
projection slices are skipped), matching what the inference path actually
runs. Trimmer scorer costs are charged on the token counts entering each
site, in both the pruned total and the all-ones baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import MaskSet, head_trim_sites, token_trim_sites
from .config import ModelConfig


@dataclass
class AttnFlops:
    qkv: int
    score_context: int
    out: int

    @property
    def total(self) -> int:
        return self.qkv + self.score_context + self.out


def flops_attention(n_q: int, n_kv: int, d_model: int, h_retained: int,
                    d_head: int) -> AttnFlops:
    """One attention module: QKV projections, scores+context, output proj."""
    hd = h_retained * d_head
    return AttnFlops(
        qkv=2 * (n_q + 2 * n_kv) * d_model * hd,
        score_context=2 * 2 * n_q * n_kv * hd,
        out=2 * n_q * hd * d_model,
    )


def flops_ffn(n: int, d_model: int, d_ff: int) -> int:
    """Two linear layers plus the GeLU element count."""
    return 2 * n * d_model * d_ff * 2 + n * d_ff


def flops_token_trimmer(n: int, d_model: int, d_reduce: int) -> int:
    reduce = 2 * n * d_model * d_reduce
    local = 2 * n * d_reduce * d_reduce + n * d_reduce + 2 * n * d_reduce
    fuse = 2 * (2 * d_model) * d_reduce
    bilinear = 2 * d_reduce * d_reduce + 2 * n * d_reduce
    return reduce + local + fuse + bilinear


def flops_head_trimmer(kind: str, d_model: int, d_reduce: int, n_heads: int) -> int:
    d_in = d_model if kind == "self" else 2 * d_model
    return 2 * d_in * d_reduce + d_reduce + 2 * d_reduce * n_heads


@dataclass
class FlopsBreakdown:
    attn_qkv: int = 0
    attn_score_context: int = 0
    attn_out: int = 0
    ffn: int = 0
    trimmers: int = 0
    embed: int = 0
    head: int = 0
    baseline_total: int = 0

    @property
    def total(self) -> int:
        return (self.attn_qkv + self.attn_score_context + self.attn_out
                + self.ffn + self.trimmers + self.embed + self.head)

    @property
    def speedup(self) -> float:
        return self.baseline_total / self.total


def _site_vec(mask_set: MaskSet, site: str, n: int) -> np.ndarray:
    m = np.asarray(mask_set.token_masks[site], dtype=np.float64)
    m = m[0] if m.ndim == 2 else m
    if m.shape != (n,):
        raise ValueError(f"token mask at {site} has shape {m.shape}, expected ({n},)")
    if np.any((m != 0.0) & (m != 1.0)):
        raise ValueError(f"model_flops needs binary masks; {site} has soft values")
    if m[0] != 1.0:
        raise ValueError(f"token mask at {site} drops CLS")
    return m


def _head_count(mask_set: MaskSet, module: str, n_heads: int) -> int:
    m = np.asarray(mask_set.head_masks[module], dtype=np.float64)
    m = m[0] if m.ndim == 2 else m
    if np.any((m != 0.0) & (m != 1.0)):
        raise ValueError(f"model_flops needs binary masks; {module} has soft values")
    return int(m.sum())


def _walk(cfg: ModelConfig, tok_mask_fn, head_count_fn) -> FlopsBreakdown:
    """Accumulate module costs in forward-execution order.

    tok_mask_fn(site, n) returns that site's full-length binary vector;
    head_count_fn(module) the retained head count. Token masks compose by
    running intersection per stream, exactly like the runtime.
    """
    bd = FlopsBreakdown()
    d, dh, dff = cfg.d_model, cfg.d_head, cfg.d_ff
    token_sites = set(token_trim_sites(cfg))
    head_sites = set(head_trim_sites(cfg))
    alive = {
        "txt": np.ones(cfg.n_text_tokens),
        "vis": np.ones(cfg.n_visual_tokens),
    }

    def visit_site(site: str, stream: str):
        if site not in token_sites:
            return
        n_in = int(alive[stream].sum())
        bd.trimmers += flops_token_trimmer(n_in, d, cfg.d_reduce)
        alive[stream] = alive[stream] * tok_mask_fn(site, len(alive[stream]))

    def visit_attn(module: str, n_q: int, n_kv: int):
        if module in head_sites:
            kind = module.rsplit(".", 1)[1]
            bd.trimmers += flops_head_trimmer(kind, d, cfg.d_reduce, cfg.n_heads)
            h = head_count_fn(module)
        else:
            h = cfg.n_heads
        af = flops_attention(n_q, n_kv, d, h, dh)
        bd.attn_qkv += af.qkv
        bd.attn_score_context += af.score_context
        bd.attn_out += af.out

    bd.embed += 2 * (cfg.n_visual_tokens - 1) * cfg.patch_dim * d
    bd.head += 2 * (2 * d) * cfg.n_classes

    for stream in ("txt", "vis"):
        for i in range(cfg.n_uni_layers):
            visit_site(f"{stream}.{i}", stream)
            n = int(alive[stream].sum())
            visit_attn(f"{stream}.{i}.self", n, n)
            bd.ffn += flops_ffn(n, d, dff)

    for i in range(cfg.n_cross_layers):
        visit_site(f"cross.{i}.txt", "txt")
        visit_site(f"cross.{i}.vis", "vis")
        n = {s: int(alive[s].sum()) for s in ("txt", "vis")}
        for stream, other in (("txt", "vis"), ("vis", "txt")):
            visit_attn(f"cross.{i}.{stream}.self", n[stream], n[stream])
            visit_attn(f"cross.{i}.{stream}.cross", n[stream], n[other])
            bd.ffn += flops_ffn(n[stream], d, dff)

    return bd


def model_flops(cfg: ModelConfig, mask_set: MaskSet) -> FlopsBreakdown:
    """Per-instance FLOPs under a binary MaskSet, plus the all-ones baseline."""
    missing = [s for s in token_trim_sites(cfg) if s not in mask_set.token_masks]
    missing += [s for s in head_trim_sites(cfg) if s not in mask_set.head_masks]
    if missing:
        raise ValueError(f"MaskSet missing masks for sites: {missing}")

    bd = _walk(cfg,
               lambda site, n: _site_vec(mask_set, site, n),
               lambda module: _head_count(mask_set, module, cfg.n_heads))
    baseline = _walk(cfg,
                     lambda site, n: np.ones(n),
                     lambda module: cfg.n_heads)
    bd.baseline_total = baseline.total
    return bd


def baseline_flops(cfg: ModelConfig) -> FlopsBreakdown:
    """All-ones accounting (its own baseline, so speedup is exactly 1)."""
    bd = _walk(cfg, lambda site, n: np.ones(n), lambda module: cfg.n_heads)
    bd.baseline_total = bd.total
    return bd


def trimmer_overhead_fraction(cfg: ModelConfig) -> float:
    """Trimmer share of the all-ones forward cost."""
    bd = baseline_flops(cfg)
    return bd.trimmers / bd.total


# -- report data -------------------------------------------------------------


def flops_histogram(values, n_bins: int = 10) -> list[tuple[float, float, int]]:
    """Equal-width bins over [min, max]; degenerate spread collapses to one bin."""
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        return []
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return [(lo, hi, int(values.size))]
    edges = np.linspace(lo, hi, n_bins + 1)
    counts, _ = np.histogram(values, bins=edges)
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(n_bins)]


def format_flops_records(records: list[dict], header_lines: list[str]) -> str:
    """Per-instance rows: index, difficulty, total, baseline, speedup, retention."""
    lines = list(header_lines)
    lines.append("instance\tdifficulty\tflops\tbaseline\tspeedup\tbeta_t\tbeta_h")
    for r in records:
        lines.append("\t".join([
            str(r["instance"]), str(r["difficulty"]), str(r["flops"]),
            str(r["baseline"]), repr(r["speedup"]), repr(r["beta_t"]), repr(r["beta_h"]),
        ]))
    return "\n".join(lines) + "\n"


def format_histogram(bins: list[tuple[float, float, int]], header_lines: list[str]) -> str:
    lines = list(header_lines)
    lines.append("bin_lo\tbin_hi\tcount")
    for lo, hi, c in bins:
        lines.append(f"{repr(lo)}\t{repr(hi)}\t{c}")
    return "\n".join(lines) + "\n"


def format_pareto_points(points: list[dict], header_lines: list[str]) -> str:
    """Accuracy-vs-FLOPs points (one per method/budget)."""
    lines = list(header_lines)
    lines.append("label\tflops_ratio\taccuracy")
    for p in points:
        lines.append(f"{p['label']}\t{repr(p['flops_ratio'])}\t{repr(p['accuracy'])}")
    return "\n".join(lines) + "\n"
