"""Pilot-study tooling: per-target-count comparison of the concept model
against the per-token baseline, and the embedding-separability probe.

The probe set is class-balanced by construction: for every (color, shape)
category it builds single-target scenes whose target center sweeps the
3x3 position bins, with distractors drawn from other categories. Vectors
are extracted under teacher forcing so every vector carries exact category
and position labels.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch

from .core import BinaryMask
from .evaluation import SeparabilityReport, cluster_separability, f1_at, position_bin
from .interface import extract_spans
from .lm import Vocabulary, build_sequence
from .shapeworld import (
    COLORS,
    SHAPES,
    GenConfig,
    Scene,
    ShapeInstance,
    serialize_response,
)
from .shapeworld.queries import _SET_TEMPLATES
from .training import ConceptSegModel, scene_image


@dataclass
class ProbeItem:
    scene: Scene
    category: str
    position: int
    query_text: str
    response_text: str


def _place_probe_instance(rng, config, placed, idx, shape, color, center=None):
    from .shapeworld.scenes import SIZES

    for _ in range(200):
        size_class = SIZES[int(rng.integers(2))]
        lo, hi = config.small_extent if size_class == "small" else config.large_extent
        extent = int(rng.integers(lo, hi + 1))
        if center is not None:
            r, c = center
            if not (extent <= r < config.height - extent and extent <= c < config.width - extent):
                continue
        else:
            r = int(rng.integers(extent, config.height - extent))
            c = int(rng.integers(extent, config.width - extent))
        ok = all(
            np.hypot(r - o.center[0], c - o.center[1]) >= extent + o.extent + config.min_gap
            for o in placed
        )
        if ok:
            return ShapeInstance(id=idx, shape=shape, color=color, size_class=size_class,
                                 center=(r, c), extent=extent)
    return None


def build_probe_set(seed: int, per_category: int = 9,
                    config: GenConfig | None = None) -> list[ProbeItem]:
    """Deduplicated, class-balanced single-target probe scenes.

    Each category receives `per_category` items whose target centers cycle
    through the nine position bins.
    """
    config = config or GenConfig()
    rng = np.random.default_rng([seed, 0x9E0B])
    items: list[ProbeItem] = []
    grid = 3
    cell_h, cell_w = config.height // grid, config.width // grid
    for color in COLORS:
        for shape in SHAPES:
            made = 0
            attempt = 0
            while made < per_category and attempt < per_category * 30:
                attempt += 1
                bin_idx = made % 9
                br, bc = bin_idx // grid, bin_idx % grid
                r = int(rng.integers(br * cell_h, (br + 1) * cell_h))
                c = int(rng.integers(bc * cell_w, (bc + 1) * cell_w))
                target = _place_probe_instance(rng, config, [], 0, shape, color, center=(r, c))
                if target is None:
                    continue
                placed = [target]
                ok = True
                for d in range(3):
                    for _ in range(30):
                        dc_color = COLORS[int(rng.integers(len(COLORS)))]
                        dc_shape = SHAPES[int(rng.integers(len(SHAPES)))]
                        if (dc_color, dc_shape) != (color, shape):
                            break
                    inst = _place_probe_instance(rng, config, placed, d + 1, dc_shape, dc_color)
                    if inst is None:
                        ok = False
                        break
                    placed.append(inst)
                if not ok:
                    continue
                scene = Scene(height=config.height, width=config.width,
                              instances=tuple(placed), seed=int(rng.integers(2**31)))
                category = f"{color} {shape}"
                set_concept = _SET_TEMPLATES["category"][0].format(v=category)
                items.append(ProbeItem(
                    scene=scene,
                    category=category,
                    position=position_bin(target.center, config.height, config.width),
                    query_text=f"the {category}",
                    response_text=serialize_response(set_concept, [category]),
                ))
                made += 1
    return items


def probe_vectors(model: ConceptSegModel, vocab: Vocabulary, items: list[ProbeItem],
                  mode: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Teacher-forced condition vectors with category and position labels."""
    vectors = []
    cats, positions = [], []
    model.eval()
    with torch.no_grad():
        for item in items:
            image = scene_image(item.scene)
            prompt_ids = vocab.encode(item.query_text) + [vocab.asst_id]
            if mode == "concept":
                response_ids = vocab.encode(item.response_text) + [vocab.eos_id]
            else:
                response_ids = [vocab.seg_id, vocab.eos_id]
            seq = build_sequence(model.lm_config.n_patches, prompt_ids, response_ids, vocab.pad_id)
            _, hidden = model.lm.forward_sequence(seq, image)
            if mode == "concept":
                spans = extract_spans(seq, vocab)
                projected = model.projector(torch.stack([
                    hidden[spans[0].start:spans[0].end].mean(dim=0),
                    hidden[spans[1].start:spans[1].end].mean(dim=0),
                ]))
                fused = model.fuser(projected[0:1], projected[1:2])[0]
                vectors.append(fused.numpy().copy())
            else:
                seg_pos = [i for i in seq.positions("response") if seq.ids[i] == vocab.seg_id][0]
                vectors.append(model.projector(hidden[seg_pos]).numpy().copy())
            cats.append(item.category)
            positions.append(item.position)
    return np.stack(vectors), np.array(cats), np.array(positions)


def pooled_f1(results: list[list[BinaryMask]], gts: list[list[BinaryMask]],
              counts: list[int], want) -> float:
    """Pooled F1@0.5 over the samples whose GT cardinality satisfies `want`."""
    tp = fp = fn = 0
    for preds, gt, n in zip(results, gts, counts):
        if not want(n):
            continue
        _, t, p_, n_ = f1_at(preds, gt)
        tp, fp, fn = tp + t, fp + p_, fn + n_
    if tp == fp == fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


@dataclass
class PilotReport:
    per_count_concept: dict[int, float]
    per_count_baseline: dict[int, float]
    f1_concept_at_one: float
    f1_concept_high: float
    f1_baseline_at_one: float
    f1_baseline_high: float
    separability_concept: SeparabilityReport
    separability_baseline: SeparabilityReport

    @property
    def baseline_drop(self) -> float:
        return self.f1_baseline_at_one - self.f1_baseline_high

    @property
    def gap_at_one(self) -> float:
        return self.f1_concept_at_one - self.f1_baseline_at_one

    @property
    def gap_high(self) -> float:
        return self.f1_concept_high - self.f1_baseline_high

    def to_json(self) -> dict:
        return {
            "per_count_concept": {str(k): v for k, v in sorted(self.per_count_concept.items())},
            "per_count_baseline": {str(k): v for k, v in sorted(self.per_count_baseline.items())},
            "f1_concept_at_one": self.f1_concept_at_one,
            "f1_concept_high": self.f1_concept_high,
            "f1_baseline_at_one": self.f1_baseline_at_one,
            "f1_baseline_high": self.f1_baseline_high,
            "baseline_drop": self.baseline_drop,
            "gap_at_one": self.gap_at_one,
            "gap_high": self.gap_high,
            "separability_concept": self.separability_concept.to_json(),
            "separability_baseline": self.separability_baseline.to_json(),
        }


def build_pilot_report(
    concept_preds: list[list[BinaryMask]],
    baseline_preds: list[list[BinaryMask]],
    gts: list[list[BinaryMask]],
    sep_concept: SeparabilityReport,
    sep_baseline: SeparabilityReport,
    high_count: int = 4,
) -> PilotReport:
    from .evaluation import per_count_breakdown

    counts = [len(g) for g in gts]
    return PilotReport(
        per_count_concept=per_count_breakdown(concept_preds, gts),
        per_count_baseline=per_count_breakdown(baseline_preds, gts),
        f1_concept_at_one=pooled_f1(concept_preds, gts, counts, lambda n: n == 1),
        f1_concept_high=pooled_f1(concept_preds, gts, counts, lambda n: n >= high_count),
        f1_baseline_at_one=pooled_f1(baseline_preds, gts, counts, lambda n: n == 1),
        f1_baseline_high=pooled_f1(baseline_preds, gts, counts, lambda n: n >= high_count),
        separability_concept=sep_concept,
        separability_baseline=sep_baseline,
    )


def save_pilot_plots(report: PilotReport, vectors_by_mode: dict, out_dir) -> list[str]:
    """Static per-count bar chart plus 2-D projections of condition vectors."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from pathlib import Path

    out_dir = Path(out_dir)
    written = []

    counts = sorted(set(report.per_count_concept) | set(report.per_count_baseline))
    x = np.arange(len(counts))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(x - 0.2, [report.per_count_concept.get(c, 0.0) for c in counts], 0.4, label="concept")
    ax.bar(x + 0.2, [report.per_count_baseline.get(c, 0.0) for c in counts], 0.4, label="per-token baseline")
    ax.set_xticks(x, [str(c) for c in counts])
    ax.set_xlabel("target count")
    ax.set_ylabel("F1@0.5")
    ax.legend()
    fig.tight_layout()
    path = out_dir / "per_count_f1.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(str(path))

    for mode, (vectors, cats, positions) in vectors_by_mode.items():
        centered = vectors - vectors.mean(axis=0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        proj = centered @ vt[:2].T
        fig, axes = plt.subplots(1, 2, figsize=(10, 4))
        for ax, labels, title in ((axes[0], cats, "by category"), (axes[1], positions, "by position")):
            for lab in np.unique(labels):
                sel = labels == lab
                ax.scatter(proj[sel, 0], proj[sel, 1], s=8, label=str(lab))
            ax.set_title(f"{mode} conditions {title}")
        axes[1].legend(fontsize=6, markerscale=0.7, ncol=2)
        fig.tight_layout()
        path = out_dir / f"conditions_{mode}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(str(path))
    return written
