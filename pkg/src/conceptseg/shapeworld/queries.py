"""Queries, predicates, and hierarchical annotations over scenes.

A query carries an evaluable predicate; the annotation groups the selected
instances into (color, shape) sub-categories under a templated set-level
concept phrase, and serializes the whole thing into the marker-delimited
response the language model is trained on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import BinaryMask
from .scenes import COLORS, SHAPES, GenConfig, Scene, ShapeInstance, visible_masks, _QUERY_STREAM

MARKER_OPEN = "<ref>"
MARKER_CLOSE = "</ref>"
ABSTAIN_TEXT = "no target"

COLOR_GROUPS = {"warm": ("red", "yellow"), "cool": ("green", "blue")}
MOTIONS = ("left", "right", "up", "down")

KINDS = ("single", "multi-same", "multi-cross", "open-ended", "no-target")


class AnnotationError(ValueError):
    """Annotation references an instance id the scene does not contain."""


@dataclass(frozen=True)
class Predicate:
    """Attribute condition over instances; `attr` names the rule family."""

    attr: str  # category | category_set | color | shape | size | color_group | all | motion
    value: str = ""

    def to_json(self) -> dict:
        return {"attr": self.attr, "value": self.value}

    @classmethod
    def from_json(cls, obj: dict) -> "Predicate":
        return cls(attr=obj["attr"], value=obj["value"])


@dataclass(frozen=True)
class SceneQuery:
    text: str
    kind: str
    predicate: Predicate

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown query kind {self.kind!r}")


@dataclass(frozen=True)
class HierAnnotation:
    """Set-level concept plus ordered sub-category groups and the response text."""

    set_concept: str
    sub_concepts: tuple[tuple[str, tuple[int, ...]], ...]
    response_text: str

    def __post_init__(self) -> None:
        n_words = len(self.set_concept.split())
        if not 5 <= n_words <= 20:
            raise ValueError(f"set concept must be 5..20 words, got {n_words}: {self.set_concept!r}")
        phrases = [p for p, _ in self.sub_concepts]
        if len(set(phrases)) != len(phrases):
            raise ValueError(f"sub-concept phrases must be distinct: {phrases}")
        seen: set[int] = set()
        for phrase, ids in self.sub_concepts:
            if not 1 <= len(phrase.split()) <= 6:
                raise ValueError(f"sub-concept phrase must be 1..6 words: {phrase!r}")
            if seen & set(ids):
                raise ValueError("an instance appears in more than one sub-concept group")
            seen.update(ids)
        if self.response_text.count(MARKER_OPEN) != len(self.sub_concepts) + 1:
            raise ValueError("response must contain one set-level span plus one span per sub-concept")

    @property
    def selected_ids(self) -> tuple[int, ...]:
        out: list[int] = []
        for _, ids in self.sub_concepts:
            out.extend(ids)
        return tuple(out)


def serialize_response(set_concept: str, sub_phrases: list[str]) -> str:
    parts = ["sure", ":", f"{MARKER_OPEN} {set_concept} {MARKER_CLOSE}"]
    for i, phrase in enumerate(sub_phrases):
        parts.append(":" if i == 0 else ",")
        parts.append(f"{MARKER_OPEN} {phrase} {MARKER_CLOSE}")
    return " ".join(parts)


def category_phrase(color: str, shape: str) -> str:
    return f"{color} {shape}"


def categories_present(scene: Scene) -> dict[tuple[str, str], list[int]]:
    """(color, shape) -> ascending instance ids, keyed in canonical order."""
    found: dict[tuple[str, str], list[int]] = {}
    for inst in scene.instances:
        found.setdefault((inst.color, inst.shape), []).append(inst.id)
    ordered = {}
    for color in COLORS:
        for shape in SHAPES:
            if (color, shape) in found:
                ordered[(color, shape)] = sorted(found[(color, shape)])
    return ordered


def predicate_selects(
    pred: Predicate,
    scene: Scene,
    displacements: dict[int, tuple[int, int]] | None = None,
) -> list[int]:
    """Instance ids matching the predicate, ascending."""
    from .video import motion_label  # circular-light: only needed for motion predicates

    def matches(inst: ShapeInstance) -> bool:
        if pred.attr == "all":
            return True
        if pred.attr == "category":
            color, shape = pred.value.split()
            return inst.color == color and inst.shape == shape
        if pred.attr == "category_set":
            cats = {tuple(v.split()) for v in pred.value.split("+")}
            return (inst.color, inst.shape) in cats
        if pred.attr == "color":
            return inst.color == pred.value
        if pred.attr == "shape":
            return inst.shape == pred.value
        if pred.attr == "size":
            return inst.size_class == pred.value
        if pred.attr == "color_group":
            return inst.color in COLOR_GROUPS[pred.value]
        if pred.attr == "motion":
            if displacements is None:
                return False
            return motion_label(displacements.get(inst.id, (0, 0))) == pred.value
        raise ValueError(f"unknown predicate attribute {pred.attr!r}")

    return sorted(inst.id for inst in scene.instances if matches(inst))


# --- surface templates ------------------------------------------------------
# Query texts are short imperative or noun phrases; set-level concepts are
# 5..20-word descriptions keyed by predicate family. Both banks define the
# training vocabulary, so new words belong here.

_QUERY_TEMPLATES = {
    "category_single": (
        "the {v}", "find the {v}", "segment the {v}", "please mark the {v}",
        "show me the {v}", "locate the {v} for me", "pick out the {v}",
    ),
    "category_multi": (
        "all the {v} shapes", "every {v} of the scene", "find each {v}",
        "highlight each {v} drawn here", "select every {v} you can spot",
    ),
    "category_set": (
        "the {a} and the {b}", "find the {a} and the {b}",
        "segment the {a} and the {b}", "mark both the {a} and the {b}",
    ),
    "color": (
        "all the {v} shapes", "every {v} thing here", "find the {v} shapes",
        "highlight whatever is {v}", "show me each {v} item on the canvas",
    ),
    "shape": (
        "all the {v} shapes", "every {v} in the image", "find each {v} here",
        "outline every {v} on the board",
    ),
    "size": (
        "all the {v} shapes", "every {v} thing in the scene", "find the {v} shapes",
        "pick out each {v} item",
    ),
    "color_group": (
        "all the {v} colored shapes", "every {v} colored thing",
        "find the {v} colored shapes", "highlight the {v} toned items",
    ),
    "all": (
        "all the shapes", "everything in the scene", "every shape in the image",
        "segment the whole collection", "mark everything drawn on the canvas",
    ),
    "motion": (
        "the shapes moving {v}", "everything moving {v}", "find the shapes moving {v}",
        "highlight whatever is heading {v}",
    ),
}

_SET_TEMPLATES = {
    "category": (
        "all of the {v} shapes present in the scene",
        "the group of {v} shapes requested by the query",
        "the entire family of {v} figures placed on the canvas",
    ),
    "category_set": (
        "the requested group made of {a} and {b} shapes",
        "the set holding every {a} and every {b}",
        "the mixed collection joining each {a} with each {b}",
    ),
    "color": (
        "all the {v} shapes scattered across the scene",
        "the full set of {v} things in the image",
        "every figure painted {v} anywhere on the canvas",
    ),
    "shape": (
        "every {v} drawn anywhere in the picture",
        "the complete group of {v} shapes in view",
        "the whole collection of {v} figures spread over the board",
    ),
    "size": (
        "all the {v} shapes visible in the image",
        "the set of every {v} thing in the scene",
        "the bunch of {v} figures dotted around the canvas",
    ),
    "color_group": (
        "all the {v} colored shapes scattered across the scene",
        "the group of {v} colored things in the picture",
        "every {v} toned figure resting on the board",
    ),
    "all": (
        "the complete set of shapes drawn in the picture",
        "every single shape present in the scene",
        "the whole assembly of figures laid out on the canvas",
    ),
    "motion": (
        "all the shapes drifting {v} across the scene",
        "the set of shapes moving {v} in the clip",
        "every figure traveling {v} through the frame",
    ),
}


def _pick(rng: np.random.Generator, options):
    return options[int(rng.integers(len(options)))]


def _set_concept(rng: np.random.Generator, pred: Predicate) -> str:
    if pred.attr == "category_set":
        a, b, *rest = pred.value.split("+")
        text = _pick(rng, _SET_TEMPLATES["category_set"]).format(a=a, b=b)
        if rest:
            text = text + " plus the " + rest[0]
        return text
    return _pick(rng, _SET_TEMPLATES[pred.attr]).format(v=pred.value)


def _query_text(rng: np.random.Generator, pred: Predicate, kind: str) -> str:
    if pred.attr == "category":
        bank = _QUERY_TEMPLATES["category_single" if kind == "single" else "category_multi"]
        return _pick(rng, bank).format(v=pred.value)
    if pred.attr == "category_set":
        parts = pred.value.split("+")
        text = _pick(rng, _QUERY_TEMPLATES["category_set"]).format(a=parts[0], b=parts[1])
        if len(parts) > 2:
            text = text + " and the " + parts[2]
        return text
    return _pick(rng, _QUERY_TEMPLATES[pred.attr]).format(v=pred.value)


def _group_selection(scene: Scene, ids: list[int]) -> tuple[tuple[str, tuple[int, ...]], ...]:
    by_inst = {inst.id: inst for inst in scene.instances}
    groups: dict[tuple[str, str], list[int]] = {}
    for i in ids:
        inst = by_inst[i]
        groups.setdefault((inst.color, inst.shape), []).append(i)
    ordered = []
    for color in COLORS:
        for shape in SHAPES:
            if (color, shape) in groups:
                ordered.append((category_phrase(color, shape), tuple(sorted(groups[(color, shape)]))))
    return tuple(ordered)


def _phantom_sub(pred: Predicate) -> str:
    """A plausible sub-category phrase for a predicate with no matches."""
    if pred.attr == "category":
        return pred.value
    if pred.attr == "color":
        return f"{pred.value} shape"
    if pred.attr == "shape":
        return pred.value
    if pred.attr == "size":
        return f"{pred.value} shape"
    if pred.attr == "color_group":
        return f"{pred.value} shape"
    if pred.attr == "motion":
        return "moving shape"
    return "shape"


def _no_target_predicates(scene: Scene, displacements=None) -> list[Predicate]:
    cats = categories_present(scene)
    preds = [
        Predicate("category", f"{c} {s}") for c in COLORS for s in SHAPES if (c, s) not in cats
    ]
    present_colors = {i.color for i in scene.instances}
    present_shapes = {i.shape for i in scene.instances}
    present_sizes = {i.size_class for i in scene.instances}
    preds += [Predicate("color", c) for c in COLORS if c not in present_colors]
    preds += [Predicate("shape", s) for s in SHAPES if s not in present_shapes]
    preds += [Predicate("size", s) for s in ("small", "large") if s not in present_sizes]
    for g, members in COLOR_GROUPS.items():
        if not present_colors & set(members):
            preds.append(Predicate("color_group", g))
    if displacements is not None:
        from .video import motion_label

        labels = {motion_label(d) for d in displacements.values()}
        preds += [Predicate("motion", m) for m in MOTIONS if m not in labels]
    return preds


def _candidate_open_predicates(scene: Scene) -> list[Predicate]:
    """Property predicates whose selection spans at least two categories."""
    cats = categories_present(scene)
    out = []
    for attr, values in (
        ("color", COLORS),
        ("shape", SHAPES),
        ("size", ("small", "large")),
        ("color_group", tuple(COLOR_GROUPS)),
    ):
        for v in values:
            pred = Predicate(attr, v)
            ids = predicate_selects(pred, scene)
            if not ids:
                continue
            spanned = {key for key, members in cats.items() if set(members) & set(ids)}
            if len(spanned) >= 2:
                out.append(pred)
    if len(cats) >= 2:
        out.append(Predicate("all"))
    return out


def generate_query(
    scene: Scene,
    seed: int,
    config: GenConfig | None = None,
    displacements: dict[int, tuple[int, int]] | None = None,
) -> tuple[SceneQuery, HierAnnotation]:
    """Draw a query kind, realize a predicate the scene supports, and annotate.

    When the drawn kind cannot be realized (for example multi-same on a
    scene with no repeated category) the generator cascades to a kind that
    can, ending at single.
    """
    config = config or GenConfig()
    rng = np.random.default_rng([seed, _QUERY_STREAM])
    cats = categories_present(scene)

    kind = _draw_kind(rng, config, displacements is not None)
    pred, kind = _realize(rng, scene, kind, cats, config, displacements)

    ids = predicate_selects(pred, scene, displacements)
    if kind == "no-target":
        groups = ((_phantom_sub(pred), ()),)
    else:
        groups = _group_selection(scene, ids)
    set_concept = _set_concept(rng, pred)
    response = serialize_response(set_concept, [p for p, _ in groups])
    annotation = HierAnnotation(set_concept=set_concept, sub_concepts=groups, response_text=response)
    query = SceneQuery(text=_query_text(rng, pred, kind), kind=kind, predicate=pred)
    return query, annotation


def _draw_kind(rng: np.random.Generator, config: GenConfig, video: bool) -> str:
    if rng.random() < config.no_target_rate:
        return "no-target"
    if video and config.motion_rate > 0 and rng.random() < config.motion_rate:
        return "motion"
    names = [k for k, _ in config.kind_weights]
    weights = np.array([w for _, w in config.kind_weights], dtype=np.float64)
    return str(names[int(rng.choice(len(names), p=weights / weights.sum()))])


def _realize(rng, scene, kind, cats, config, displacements):
    """Pick a predicate for the drawn kind, cascading when unsupported."""
    if kind == "no-target":
        options = _no_target_predicates(scene, displacements)
        return _pick(rng, options), "no-target"

    if kind == "motion":
        from .video import motion_label

        labels = sorted({motion_label(d) for d in (displacements or {}).values()} & set(MOTIONS))
        if labels:
            pred = Predicate("motion", _pick(rng, labels))
            ids = predicate_selects(pred, scene, displacements)
            spanned = len({(i.color, i.shape) for i in scene.instances if i.id in set(ids)})
            realized = "multi-cross" if spanned >= 2 else ("multi-same" if len(ids) >= 2 else "single")
            # motion queries keep the open-ended kind label: cardinality is
            # query-determined, not category-determined
            return pred, "open-ended"
        kind = "open-ended"

    if kind == "multi-cross":
        if len(cats) >= 2:
            k = int(rng.integers(2, min(3, len(cats)) + 1))
            chosen = [list(cats) [int(i)] for i in rng.choice(len(cats), size=k, replace=False)]
            chosen.sort(key=lambda cs: (COLORS.index(cs[0]), SHAPES.index(cs[1])))
            value = "+".join(category_phrase(c, s) for c, s in chosen)
            return Predicate("category_set", value), "multi-cross"
        kind = "open-ended"

    if kind == "open-ended":
        options = _candidate_open_predicates(scene)
        if options:
            return _pick(rng, options), "open-ended"
        kind = "multi-same"

    if kind == "multi-same":
        repeated = [key for key, ids in cats.items() if len(ids) >= 2]
        if repeated:
            c, s = _pick(rng, repeated)
            return Predicate("category", category_phrase(c, s)), "multi-same"
        kind = "single"

    unique = [key for key, ids in cats.items() if len(ids) == 1]
    if unique:
        c, s = _pick(rng, unique)
        return Predicate("category", category_phrase(c, s)), "single"
    # every category is repeated: a category query is a multi-same query
    c, s = _pick(rng, list(cats))
    return Predicate("category", category_phrase(c, s)), "multi-same"


def render_gt_masks(
    scene: Scene, annotation: HierAnnotation
) -> tuple[list[BinaryMask], list[list[BinaryMask]]]:
    """Per-instance target masks: the global set concatenates the sub groups."""
    vis = visible_masks(scene)
    per_sub: list[list[BinaryMask]] = []
    global_set: list[BinaryMask] = []
    for _, ids in annotation.sub_concepts:
        group = []
        for i in ids:
            if i not in vis:
                raise AnnotationError(f"annotation references unknown instance id {i}")
            group.append(vis[i])
        per_sub.append(group)
        global_set.extend(group)
    return global_set, per_sub
