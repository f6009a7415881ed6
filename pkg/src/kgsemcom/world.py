"""Synthetic scene generator with ground truth and a matching knowledge
graph.

Scenes are square RGB images of procedural glyphs on a noisy gray
background. Category identity correlates with a scene-level context type
through a per-context co-occurrence table; one confusable glyph pair is
near-identical in appearance and disambiguated only by the categories it
co-occurs with, which is exactly the auxiliary signal the knowledge graph
carries.

Everything derives deterministically from (spec.seed, scene_index), so
datasets never need to be materialized to be reproducible.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .kg import KnowledgeGraph

log = logging.getLogger(__name__)

DEFAULT_CATEGORY_NAMES = ("diamond_a", "diamond_b", "disk", "cross", "ring", "stripes")
DEFAULT_CONTEXTS = {
    "harbor": {0: 0.40, 2: 0.40, 4: 0.20},
    "plaza": {1: 0.40, 3: 0.40, 5: 0.20},
}

_COLORS = (
    (0.85, 0.22, 0.22),   # diamond_a
    (0.85, 0.22, 0.22),   # diamond_b shares the pair color
    (0.20, 0.45, 0.90),
    (0.20, 0.75, 0.30),
    (0.92, 0.80, 0.20),
    (0.70, 0.30, 0.80),
)


@dataclass
class WorldSpec:
    n_categories: int = 6
    category_names: tuple = DEFAULT_CATEGORY_NAMES
    confusable_pairs: tuple = ((0, 1),)
    contexts: dict = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_CONTEXTS.items()})
    glyph_size: tuple = (14, 26)
    scene_size: int = 128
    objects_per_scene: tuple = (2, 4)
    seed: int = 0

    def __post_init__(self):
        if len(self.category_names) != self.n_categories:
            raise ConfigError(
                f"{self.n_categories} categories but {len(self.category_names)} names")
        for ctx, table in self.contexts.items():
            total = sum(table.values())
            if abs(total - 1.0) > 1e-9:
                raise ConfigError(f"context {ctx!r} probabilities sum to {total}, not 1")
            if any(c < 0 or c >= self.n_categories for c in table):
                raise ConfigError(f"context {ctx!r} references an unknown category")
        self._check_disambiguation()

    def _check_disambiguation(self):
        """Every confusable pair must be separated by at least one
        context-correlated category, otherwise the KG carries no signal."""
        def support(cat):
            return {ctx for ctx, table in self.contexts.items()
                    if table.get(cat, 0.0) > 0}

        for a, b in self.confusable_pairs:
            sa, sb = support(a), support(b)
            if sa & sb:
                raise ConfigError(
                    f"confusable pair ({a},{b}) shares contexts {sa & sb}; "
                    "members must live in disjoint contexts")
            ok = False
            for c in range(self.n_categories):
                if c in (a, b):
                    continue
                sc = support(c)
                if (sc >= sa and not (sc & sb)) or (sc >= sb and not (sc & sa)):
                    ok = True
                    break
            if not ok:
                raise ConfigError(
                    f"confusable pair ({a},{b}) has no disambiguating category")

    @property
    def context_names(self) -> list:
        return sorted(self.contexts)


@dataclass
class Scene:
    index: int
    context: str
    categories: np.ndarray       # (n,) int
    boxes: np.ndarray            # (n, 4) corner form
    image: np.ndarray | None     # (3, s, s) float64 in [0, 1], None if not rendered


def _scene_rng(spec: WorldSpec, index: int, attempt: int = 0):
    return np.random.default_rng(np.random.SeedSequence((spec.seed, index, attempt)))


def sample_layout(spec: WorldSpec, index: int):
    """Context, categories, and non-overlapping boxes for one scene."""
    for attempt in range(8):
        rng = _scene_rng(spec, index, attempt)
        names = spec.context_names
        context = names[rng.integers(len(names))]
        table = spec.contexts[context]
        cats = sorted(table)
        probs = np.array([table[c] for c in cats])
        n_obj = int(rng.integers(spec.objects_per_scene[0],
                                 spec.objects_per_scene[1] + 1))
        categories = rng.choice(cats, size=n_obj, p=probs)

        boxes = []
        failed = False
        for _ in categories:
            size = int(rng.integers(spec.glyph_size[0], spec.glyph_size[1] + 1))
            placed = False
            for _ in range(40):
                margin = size / 2 + 2
                cx = rng.uniform(margin, spec.scene_size - margin)
                cy = rng.uniform(margin, spec.scene_size - margin)
                box = np.array([cx - size / 2, cy - size / 2,
                                cx + size / 2, cy + size / 2])
                if all(_box_iou(box, other) < 0.15 for other in boxes):
                    boxes.append(box)
                    placed = True
                    break
            if not placed:
                failed = True
                break
        if not failed:
            return context, np.asarray(categories, dtype=np.int64), np.stack(boxes)
        log.warning("scene %d attempt %d: glyph placement failed, regenerating",
                    index, attempt)
    raise ConfigError(
        f"scene {index}: could not place glyphs after 8 attempts; "
        "lower objects_per_scene or enlarge the scene")


def _box_iou(a, b):
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(0.0, ix2 - ix1) * max(0.0, iy2 - iy1)
    if inter == 0:
        return 0.0
    area = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / area


# ---------------------------------------------------------------------------
# glyph rendering
# ---------------------------------------------------------------------------

def _draw_glyph(image: np.ndarray, category: int, box: np.ndarray, color):
    s = image.shape[1]
    x1, y1, x2, y2 = box
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    r = (x2 - x1) / 2
    yy, xx = np.mgrid[0:s, 0:s]
    dx = xx - cx
    dy = yy - cy

    if category in (0, 1):
        mask = np.abs(dx) + np.abs(dy) <= r
    elif category == 2:
        mask = dx * dx + dy * dy <= r * r
    elif category == 3:
        inside = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        mask = inside & ((np.abs(dx) <= r / 3) | (np.abs(dy) <= r / 3))
    elif category == 4:
        m = np.maximum(np.abs(dx), np.abs(dy))
        mask = (m <= r) & (m >= 0.55 * r)
    else:
        inside = np.abs(dx) <= r
        mask = inside & ((np.abs(dy + 0.6 * r) <= 0.25 * r)
                         | (np.abs(dy - 0.6 * r) <= 0.25 * r))

    for ch in range(3):
        image[ch][mask] = color[ch]

    # the confusable pair differs only by a faint 2x2 mark near one vertex
    if category in (0, 1):
        off = -0.5 * r if category == 0 else 0.5 * r
        my, mx = int(round(cy + off)), int(round(cx))
        mark = image[:, max(0, my - 1):my + 1, max(0, mx - 1):mx + 1]
        mark *= 0.82


def render_layout(spec: WorldSpec, index: int, context: str,
                  categories: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, index, 9999)))
    s = spec.scene_size
    image = np.full((3, s, s), 0.35)
    image += rng.uniform(-0.04, 0.04, size=(3, s, s))
    for cat, box in zip(categories, boxes):
        jitter = rng.uniform(-0.05, 0.05, size=3)
        color = np.clip(np.asarray(_COLORS[cat]) + jitter, 0.0, 1.0)
        _draw_glyph(image, int(cat), box, color)
    return np.clip(image, 0.0, 1.0)


class Dataset:
    """Lazily rendered scene collection, deterministic per (spec, index)."""

    def __init__(self, spec: WorldSpec, n_scenes: int):
        self.spec = spec
        self.n_scenes = n_scenes

    def __len__(self) -> int:
        return self.n_scenes

    def layout(self, index: int):
        return sample_layout(self.spec, index)

    def scene(self, index: int, render: bool = True) -> Scene:
        context, categories, boxes = sample_layout(self.spec, index)
        image = (render_layout(self.spec, index, context, categories, boxes)
                 if render else None)
        return Scene(index=index, context=context, categories=categories,
                     boxes=boxes, image=image)


def generate_dataset(spec: WorldSpec, n_scenes: int) -> tuple[Dataset, KnowledgeGraph]:
    """Dataset plus the knowledge graph of the generator's true structure."""
    return Dataset(spec, n_scenes), build_knowledge_graph(spec)


def build_knowledge_graph(spec: WorldSpec) -> KnowledgeGraph:
    """Triples recording the generator's co-occurrence and similarity."""
    kg = KnowledgeGraph()
    for i in range(spec.n_categories):
        kg.add_entity(spec.category_names[i], "category")
    for ctx in spec.context_names:
        kg.add_entity(ctx, "context")
    for ctx in spec.context_names:
        table = spec.contexts[ctx]
        present = sorted(c for c, p in table.items() if p > 0)
        for c in present:
            kg.add_triple(spec.category_names[c], "appears_in", ctx)
        for i, a in enumerate(present):
            for b in present[i + 1:]:
                kg.add_triple(spec.category_names[a], "co_occurs_with",
                              spec.category_names[b])
    for a, b in spec.confusable_pairs:
        kg.add_triple(spec.category_names[a], "similar_appearance",
                      spec.category_names[b])
    return kg
