"""The language-to-decoder bridge: concept spans, pooling, projection, fusion.

The first marker-delimited span of a response is the set-level concept;
every later span names one sub-category. Span hidden states are mean
pooled, projected into the decoder's condition space, and each sub
condition is fused with the global one before decoding.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .lm.model import TokenSequence
from .lm.vocab import Vocabulary
from .shapeworld.queries import ABSTAIN_TEXT


class SpanParseError(ValueError):
    def __init__(self, message: str, position: int | None = None):
        super().__init__(message if position is None else f"{message} (at position {position})")
        self.position = position


@dataclass(frozen=True)
class ConceptSpan:
    start: int  # half-open token positions, markers excluded
    end: int
    text: str
    level: str  # "set" | "sub"
    order: int

    def __post_init__(self) -> None:
        if self.start >= self.end:
            raise SpanParseError(f"empty span at order {self.order}", self.start)


@dataclass
class ConditionVector:
    values: torch.Tensor
    role: str  # "global" | "sub" | "fused"

    def __post_init__(self) -> None:
        if not torch.isfinite(self.values).all():
            raise ValueError("condition vector has non-finite entries")


def extract_spans(response: TokenSequence, vocab: Vocabulary) -> list[ConceptSpan]:
    """Maximal token runs strictly between matched marker pairs, in order."""
    spans: list[ConceptSpan] = []
    open_at: int | None = None
    for pos in response.positions("response"):
        tid = response.ids[pos]
        if tid == vocab.ref_open_id:
            if open_at is not None:
                raise SpanParseError("nested marker open", pos)
            open_at = pos
        elif tid == vocab.ref_close_id:
            if open_at is None:
                raise SpanParseError("marker close without open", pos)
            start, end = open_at + 1, pos
            if start >= end:
                raise SpanParseError("empty concept span", pos)
            text = vocab.decode(response.ids[start:end])
            order = len(spans)
            spans.append(ConceptSpan(start=start, end=end, text=text,
                                     level="set" if order == 0 else "sub", order=order))
            open_at = None
    if open_at is not None:
        raise SpanParseError("marker open without close", open_at)
    return spans


def pool_span(hidden: torch.Tensor, span: ConceptSpan) -> torch.Tensor:
    """Arithmetic mean of the hidden vectors over [start, end)."""
    if span.end > hidden.shape[0]:
        raise SpanParseError(f"span end {span.end} outside hidden length {hidden.shape[0]}")
    return hidden[span.start:span.end].mean(dim=0)


class ConditionProjector(nn.Module):
    """Two affine maps with a GELU between, model width -> condition width."""

    def __init__(self, model_width: int, cond_width: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(model_width, model_width),
            nn.GELU(),
            nn.Linear(model_width, cond_width),
        )

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(pooled).all():
            raise ValueError("projector input has non-finite entries")
        return self.net(pooled)

    def project(self, pooled: torch.Tensor, role: str) -> ConditionVector:
        return ConditionVector(values=self.forward(pooled), role=role)


class ConceptFuser(nn.Module):
    """Elementwise sum of global and sub conditions, then a learned affine map.

    Initialized to the identity so fusion starts as a pass-through of the
    summed conditions.
    """

    def __init__(self, cond_width: int):
        super().__init__()
        self.affine = nn.Linear(cond_width, cond_width)
        with torch.no_grad():
            self.affine.weight.copy_(torch.eye(cond_width))
            self.affine.bias.zero_()

    def forward(self, global_values: torch.Tensor, sub_values: torch.Tensor) -> torch.Tensor:
        return self.affine(global_values + sub_values)

    def fuse(self, global_cond: ConditionVector, sub_cond: ConditionVector) -> ConditionVector:
        if global_cond.role != "global" or sub_cond.role != "sub":
            raise ValueError(f"fuse expects roles (global, sub), got ({global_cond.role}, {sub_cond.role})")
        if global_cond.values.shape != sub_cond.values.shape:
            raise ValueError("condition widths differ")
        return ConditionVector(values=self.forward(global_cond.values, sub_cond.values), role="fused")


@dataclass
class ConditionSet:
    """Decoder conditions for one response: one global, one fused per sub."""

    global_cond: ConditionVector | None
    sub_conds: list[ConditionVector]
    sub_labels: list[str]
    abstained: bool


def is_abstention(response: TokenSequence, vocab: Vocabulary) -> bool:
    """Exact match against the abstention phrase, markers stripped."""
    words = [
        vocab.tokens[response.ids[i]]
        for i in response.positions("response")
        if response.ids[i] not in (vocab.ref_open_id, vocab.ref_close_id, vocab.eos_id, vocab.pad_id)
    ]
    return " ".join(words).strip() == ABSTAIN_TEXT


def build_conditions(
    response: TokenSequence,
    hidden: torch.Tensor,
    vocab: Vocabulary,
    projector: ConditionProjector,
    fuser: ConceptFuser,
) -> ConditionSet:
    """Pool, project, and fuse every concept span of a response."""
    if is_abstention(response, vocab):
        return ConditionSet(global_cond=None, sub_conds=[], sub_labels=[], abstained=True)
    spans = extract_spans(response, vocab)
    if not spans:
        raise SpanParseError("no concept spans in a non-abstention response")
    global_cond = projector.project(pool_span(hidden, spans[0]), role="global")
    sub_conds = []
    sub_labels = []
    for span in spans[1:]:
        sub = projector.project(pool_span(hidden, span), role="sub")
        sub_conds.append(fuser.fuse(global_cond, sub))
        sub_labels.append(span.text)
    return ConditionSet(global_cond=global_cond, sub_conds=sub_conds, sub_labels=sub_labels, abstained=False)
