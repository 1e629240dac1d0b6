"""Synthetic cross-modal grid task.

Each instance is a G x G grid holding `difficulty` colored shapes plus a
templated yes/no query about it ("is there any red square ?", "more green
than blue ?"). Patch features encode presence/color/shape one-hots with
additive Gaussian noise; the label is the brute-force evaluation of the
query against the ground-truth objects.

Generation is a pure function of (data_seed, index): template kinds are
drawn uniformly, then arguments are resampled (and occasionally the object
placement redrawn) until the label matches the index-alternating target,
so labels are balanced both overall and per template - text alone carries
no label signal. Splits are disjoint, contiguous index ranges.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .config import DataConfig, ModelConfig
from .rng import RngStream

COLORS = ("red", "green", "blue")
SHAPES = ("square", "circle", "triangle")
WORDS = ("<pad>", "<cls>", "is", "there", "any", "more", "than",
         *COLORS, *SHAPES, "?")
PAD_ID = 0
CLS_ID = 1
WORD_ID = {w: i for i, w in enumerate(WORDS)}

QUERY_KINDS = ("exists_cs", "exists_c", "exists_s", "more_c", "more_s")

# channel layout: presence, color one-hot, shape one-hot, (color x shape)
# combo one-hot, empty marker
N_PATCH_CHANNELS = 2 + len(COLORS) + len(SHAPES) + len(COLORS) * len(SHAPES)


@dataclass(frozen=True)
class Query:
    kind: str
    args: tuple


@dataclass(frozen=True)
class SyntheticInstance:
    index: int
    difficulty: int
    objects: tuple          # ((cell, color_idx, shape_idx), ...)
    query: Query
    label: int
    text_ids: np.ndarray    # (n_text_tokens,) int64, CLS at position 0
    patches: np.ndarray     # (grid^2, patch_dim) float64


def evaluate_query(query: Query, objects) -> int:
    """Ground-truth answer of a query against an object list."""
    colors = [o[1] for o in objects]
    shapes = [o[2] for o in objects]
    if query.kind == "exists_cs":
        c, s = query.args
        return int(any(o[1] == c and o[2] == s for o in objects))
    if query.kind == "exists_c":
        return int(query.args[0] in colors)
    if query.kind == "exists_s":
        return int(query.args[0] in shapes)
    if query.kind == "more_c":
        a, b = query.args
        return int(colors.count(a) > colors.count(b))
    if query.kind == "more_s":
        a, b = query.args
        return int(shapes.count(a) > shapes.count(b))
    raise ValueError(f"unknown query kind {query.kind!r}")


def render_words(query: Query) -> list[str]:
    if query.kind == "exists_cs":
        c, s = query.args
        return ["is", "there", "any", COLORS[c], SHAPES[s], "?"]
    if query.kind == "exists_c":
        return ["is", "there", "any", COLORS[query.args[0]], "?"]
    if query.kind == "exists_s":
        return ["is", "there", "any", SHAPES[query.args[0]], "?"]
    if query.kind == "more_c":
        a, b = query.args
        return ["more", COLORS[a], "than", COLORS[b], "?"]
    if query.kind == "more_s":
        a, b = query.args
        return ["more", SHAPES[a], "than", SHAPES[b], "?"]
    raise ValueError(f"unknown query kind {query.kind!r}")


def _text_ids(query: Query, n_text_tokens: int) -> np.ndarray:
    words = render_words(query)
    ids = [CLS_ID] + [WORD_ID[w] for w in words]
    if len(ids) > n_text_tokens:
        raise ValueError(f"query needs {len(ids)} tokens, config allows {n_text_tokens}")
    ids += [PAD_ID] * (n_text_tokens - len(ids))
    return np.asarray(ids, dtype=np.int64)


def _draw_args(kind: str, rng: RngStream) -> tuple:
    if kind == "exists_cs":
        return (int(rng.integers(0, len(COLORS))), int(rng.integers(0, len(SHAPES))))
    if kind in ("exists_c", "exists_s"):
        n = len(COLORS) if kind == "exists_c" else len(SHAPES)
        return (int(rng.integers(0, n)),)
    n = len(COLORS) if kind == "more_c" else len(SHAPES)
    a = int(rng.integers(0, n))
    b = (a + 1 + int(rng.integers(0, n - 1))) % n
    return (a, b)


def _draw_objects(rng: RngStream, n_cells: int, count: int) -> tuple:
    cells = rng.choice(n_cells, count, replace=False)
    return tuple(
        (int(cell), int(rng.integers(0, len(COLORS))), int(rng.integers(0, len(SHAPES))))
        for cell in sorted(cells.tolist())
    )


def parse_templates(spec: str) -> tuple:
    kinds = tuple(k.strip() for k in spec.split(",") if k.strip())
    unknown = [k for k in kinds if k not in QUERY_KINDS]
    if unknown or not kinds:
        raise ValueError(f"templates must be a comma list from {QUERY_KINDS}, got {spec!r}")
    return kinds


def make_instance(data_cfg: DataConfig, model_cfg: ModelConfig, index: int) -> SyntheticInstance:
    rng = RngStream(data_cfg.data_seed).child("instance", index)
    n_cells = data_cfg.grid_size ** 2
    kinds = parse_templates(data_cfg.templates)
    difficulty = int(rng.integers(data_cfg.difficulty_min, data_cfg.difficulty_max + 1))
    objects = _draw_objects(rng, n_cells, difficulty)
    kind = kinds[int(rng.integers(0, len(kinds)))]
    target = index % 2

    query = Query(kind, _draw_args(kind, rng))
    label = evaluate_query(query, objects)
    attempts = 0
    while label != target and attempts < 60:
        attempts += 1
        if attempts % 20 == 0:
            objects = _draw_objects(rng, n_cells, difficulty)
        query = Query(kind, _draw_args(kind, rng))
        label = evaluate_query(query, objects)

    # occupied cells carry presence/color/shape/combo one-hots; empty cells
    # carry a constant marker channel so their normalized embeddings are a
    # stable signature rather than amplified noise
    patches = np.zeros((n_cells, model_cfg.patch_dim))
    patches[:, -1] = 1.0
    combo_base = 1 + len(COLORS) + len(SHAPES)
    for cell, color, shape in objects:
        patches[cell, 0] = 1.0
        patches[cell, 1 + color] = 1.0
        patches[cell, 1 + len(COLORS) + shape] = 1.0
        patches[cell, combo_base + color * len(SHAPES) + shape] = 1.0
        patches[cell, -1] = 0.0
    patches += rng.normal(patches.shape, std=data_cfg.noise_sigma)

    return SyntheticInstance(index, difficulty, objects, query, label,
                             _text_ids(query, model_cfg.n_text_tokens), patches)


class GridDataset:
    """Deterministic instance source with disjoint train/val/test index ranges."""

    def __init__(self, data_cfg: DataConfig, model_cfg: ModelConfig):
        if model_cfg.patch_dim < N_PATCH_CHANNELS:
            raise ValueError(f"patch_dim must be >= {N_PATCH_CHANNELS}")
        if model_cfg.vocab_size < len(WORDS):
            raise ValueError(f"vocab_size must be >= {len(WORDS)}")
        parse_templates(data_cfg.templates)
        self.data_cfg = data_cfg
        self.model_cfg = model_cfg
        t, v, s = data_cfg.train_size, data_cfg.val_size, data_cfg.test_size
        self.split_ranges = {
            "train": range(0, t),
            "val": range(t, t + v),
            "test": range(t + v, t + v + s),
        }

    def instance(self, global_index: int) -> SyntheticInstance:
        return make_instance(self.data_cfg, self.model_cfg, global_index)

    def split(self, name: str):
        if name not in self.split_ranges:
            raise ValueError(f"unknown split {name!r}; have {sorted(self.split_ranges)}")
        for i in self.split_ranges[name]:
            yield self.instance(i)

    def split_size(self, name: str) -> int:
        return len(self.split_ranges[name])

    def batch(self, rng: RngStream, size: int):
        """Uniform-with-replacement training batch; stacked arrays."""
        lo, hi = self.split_ranges["train"].start, self.split_ranges["train"].stop
        idx = rng.integers(lo, hi, (size,))
        instances = [self.instance(int(i)) for i in idx]
        text = np.stack([inst.text_ids for inst in instances])
        patches = np.stack([inst.patches for inst in instances])
        labels = np.asarray([inst.label for inst in instances], dtype=np.int64)
        return text, patches, labels


def serialize_instances(instances) -> str:
    """Canonical JSON-lines dump (sorted keys, full-precision floats)."""
    rows = []
    for inst in instances:
        rows.append(json.dumps({
            "index": inst.index,
            "difficulty": inst.difficulty,
            "objects": [list(o) for o in inst.objects],
            "query": {"kind": inst.query.kind, "args": list(inst.query.args)},
            "label": inst.label,
            "text_ids": inst.text_ids.tolist(),
            "patches": inst.patches.tolist(),
        }, sort_keys=True))
    return "\n".join(rows) + "\n"
