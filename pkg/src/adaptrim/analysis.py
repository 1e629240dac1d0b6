"""Redundancy measurement and pruning-ablation baselines.

Similarity metrics quantify how interchangeable tokens (S_T) and attention
heads (S_A) are: average pairwise cosine similarity of token
representations, and of per-token attention distributions across heads.

Baselines provide non-learned pruning rules for comparison against the
trained trimmers: random/attention-score/local-only token pruning and
random/gradient-importance head pruning, all applied at inference time to
a trained model through the runtime's policy hooks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .backbone import head_trim_sites
from .rng import RngStream
from .runtime import AdaptiveModel, SiteContext
from .tensor import gelu
from .training import task_loss


# -- similarity metrics --------------------------------------------------------


def token_similarity(x: np.ndarray) -> float:
    """Mean pairwise cosine similarity over token rows (N x D)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"need a 2-d matrix with >= 2 rows, got {x.shape}")
    norms = np.linalg.norm(x, axis=1)
    zero = np.nonzero(norms == 0.0)[0]
    if zero.size:
        raise ValueError(f"zero-norm token row at index {int(zero[0])}")
    unit = x / norms[:, None]
    gram = unit @ unit.T
    n = x.shape[0]
    return float((gram.sum() - n) / (n * (n - 1)))


def head_similarity(attn: np.ndarray) -> float:
    """Mean pairwise cosine similarity between heads' attention maps.

    attn: (H, N, N_kv); each row attn[h, k, :] is token k's attention
    distribution under head h. Pairs of heads are compared row-by-row.
    """
    attn = np.asarray(attn, dtype=np.float64)
    if attn.ndim != 3 or attn.shape[0] < 2:
        raise ValueError(f"need (H, N, N_kv) with H >= 2, got {attn.shape}")
    h, n = attn.shape[0], attn.shape[1]
    norms = np.linalg.norm(attn, axis=2, keepdims=True)
    unit = attn / np.maximum(norms, 1e-300)
    gram = np.einsum("ikd,jkd->ij", unit, unit)
    off_diag = gram.sum() - np.trace(gram)
    return float(off_diag / (h * (h - 1) * n))


@dataclass
class RedundancyRow:
    kind: str      # "token" or "head"
    name: str      # layer / module name
    mean: float
    std: float
    count: int


def redundancy_profile(model: AdaptiveModel, instances) -> list[RedundancyRow]:
    """Per-layer S_T / per-module S_A over an all-ones (unpruned) forward."""
    from .tensor import no_grad

    token_vals: dict[str, list[float]] = {}
    head_vals: dict[str, list[float]] = {}
    with no_grad():
        for inst in instances:
            res = model.backbone.encode(inst.text_ids[None, :], inst.patches[None, :, :],
                                        capture=True)
            for name, x in res.activations.tokens.items():
                token_vals.setdefault(name, []).append(token_similarity(x.data[0]))
            for name, probs in res.activations.attn.items():
                head_vals.setdefault(name, []).append(head_similarity(probs.data[0]))
    rows = []
    for name, vals in token_vals.items():
        rows.append(RedundancyRow("token", name, float(np.mean(vals)), float(np.std(vals)), len(vals)))
    for name, vals in head_vals.items():
        rows.append(RedundancyRow("head", name, float(np.mean(vals)), float(np.std(vals)), len(vals)))
    return rows


def format_redundancy(rows: list[RedundancyRow], header_lines: list[str]) -> str:
    lines = list(header_lines)
    lines.append("kind\tname\tmean\tstd\tcount")
    for r in rows:
        lines.append(f"{r.kind}\t{r.name}\t{repr(r.mean)}\t{repr(r.std)}\t{r.count}")
    return "\n".join(lines) + "\n"


# -- token-pruning baselines ------------------------------------------------------


def baseline_token_prune(kind: str, n_tokens: int, ratio: float,
                         rng: RngStream | None = None,
                         cls_attn: np.ndarray | None = None,
                         local_scores: np.ndarray | None = None) -> np.ndarray:
    """Binary keep mask over the current n_tokens (CLS at index 0 always kept).

    random: uniform choice of ceil(ratio * n) content tokens. attn: the
    top ceil(ratio * n) content tokens by CLS attention received (falls
    back to keep-all when no attention map exists yet, e.g. before the
    first block). local: threshold the trimmer's local scores at 0,
    ignoring ratio (the adaptive no-global-guidance variant).
    """
    if not (0.0 < ratio <= 1.0):
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    mask = np.zeros(n_tokens)
    mask[0] = 1.0
    n_content = n_tokens - 1
    k = min(int(math.ceil(ratio * n_tokens)), n_content)
    if kind == "random":
        if rng is None:
            raise ValueError("random pruning needs an RngStream")
        keep = rng.choice(n_content, k, replace=False) + 1
        mask[keep] = 1.0
    elif kind == "attn":
        if cls_attn is None:
            return np.ones(n_tokens)
        scores = np.asarray(cls_attn, dtype=np.float64)[1:]
        order = np.argsort(-scores, kind="stable")
        mask[order[:k] + 1] = 1.0
    elif kind == "local":
        if local_scores is None:
            raise ValueError("local pruning needs the trimmer's local scores")
        mask[1:] = (np.asarray(local_scores)[1:] > 0.0).astype(np.float64)
    else:
        raise ValueError(f"unknown token baseline {kind!r}")
    return mask


def make_token_policy(kind: str, ratio: float):
    """Adapt a baseline rule to the runtime's per-site decision hook."""

    def policy(ctx: SiteContext) -> np.ndarray:
        n = ctx.x.shape[1]
        if kind == "local":
            t = ctx.bank.token[ctx.site]
            reduced = t.reduce(ctx.x)
            local = t.local_fc2(gelu(t.local_fc1(reduced))).data[0, :, 0]
            return baseline_token_prune("local", n, ratio, local_scores=local)
        if kind == "attn":
            return baseline_token_prune("attn", n, ratio, cls_attn=ctx.cls_attn)
        return baseline_token_prune("random", n, ratio, rng=ctx.rng)

    return policy


# -- head-pruning baselines ---------------------------------------------------------


def grad_head_importance(model: AdaptiveModel, instances) -> dict[str, np.ndarray]:
    """Taylor-style head importance I_h = mean_x |sum(ctx_h * dL/dctx_h)|.

    Loss is cross-entropy against the model's own argmax prediction
    (pseudo-labels), computed on an unpruned forward; ctx_h is head h's
    context (pre output-projection). Returns per-module (H,) arrays for
    every head-trimmed module.
    """
    cfg = model.cfg
    modules = head_trim_sites(cfg)
    totals = {m: np.zeros(cfg.n_heads) for m in modules}
    params = model.params()
    count = 0
    for inst in instances:
        res = model.backbone.encode(inst.text_ids[None, :], inst.patches[None, :, :],
                                    capture=True)
        pseudo = np.array([int(np.argmax(res.logits.data[0]))])
        loss = task_loss(res.logits, pseudo)
        loss.backward()
        for m in modules:
            ctx = res.activations.context[m]
            if ctx.grad is None:
                continue
            contraction = (ctx.data * ctx.grad).sum(axis=(0, 2, 3))   # (H,)
            totals[m] += np.abs(contraction)
        count += 1
        for p in params.values():
            p.grad = None
    if count == 0:
        raise ValueError("need at least one instance")
    return {m: totals[m] / count for m in modules}


def baseline_head_prune(kind: str, importance: dict[str, np.ndarray], ratio: float,
                        rng: RngStream | None = None,
                        n_heads: int | None = None) -> dict[str, np.ndarray]:
    """Per-module binary head masks at a retention ratio.

    random: uniform per module. grad_local: top ceil(ratio*H) by importance
    within each module. grad_all: top ceil(ratio*H*M) across the whole
    model; ties break lexicographically by (module order, head index).
    """
    if not (0.0 < ratio <= 1.0):
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    modules = list(importance)
    h = n_heads if n_heads is not None else len(next(iter(importance.values())))
    masks = {m: np.zeros(h) for m in modules}
    k_local = min(int(math.ceil(ratio * h)), h)
    if kind == "random":
        if rng is None:
            raise ValueError("random head pruning needs an RngStream")
        for m in modules:
            keep = rng.choice(h, k_local, replace=False)
            masks[m][keep] = 1.0
    elif kind == "grad_local":
        for m in modules:
            order = np.argsort(-np.asarray(importance[m]), kind="stable")
            masks[m][order[:k_local]] = 1.0
    elif kind == "grad_all":
        entries = []
        for mi, m in enumerate(modules):
            for hi in range(h):
                entries.append((-float(importance[m][hi]), mi, hi))
        entries.sort()
        k_all = min(int(math.ceil(ratio * h * len(modules))), h * len(modules))
        for _, mi, hi in entries[:k_all]:
            masks[modules[mi]][hi] = 1.0
    else:
        raise ValueError(f"unknown head baseline {kind!r}")
    return masks


def format_ablation(rows: list[dict], header_lines: list[str]) -> str:
    lines = list(header_lines)
    lines.append("method\tratio\taccuracy\tflops_ratio\tspeedup")
    for r in rows:
        lines.append("\t".join([
            r["method"], repr(float(r["ratio"])), repr(float(r["accuracy"])),
            repr(float(r["flops_ratio"])), repr(float(r["speedup"])),
        ]))
    return "\n".join(lines) + "\n"
