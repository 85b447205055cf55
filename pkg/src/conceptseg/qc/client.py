"""Annotator clients: the wire protocol and a fully deterministic mock.

The remote annotator is a large instruction-following vision model; only
the protocol is in scope here. The mock synthesizes responses from a hash
of the request so every pipeline test runs offline and reproducibly.
"""

from __future__ import annotations

import hashlib
import json
import urllib.error
import urllib.request
from collections import Counter
from dataclasses import dataclass
from typing import Protocol, Sequence


class TransportError(RuntimeError):
    """Client could not reach the annotator service; the call is retriable."""


@dataclass(frozen=True)
class MergeOrSplit:
    action: str  # "merge" | "split"
    replacements: tuple[str, str] | None = None

    def __post_init__(self) -> None:
        if self.action not in ("merge", "split"):
            raise ValueError(f"unknown action {self.action!r}")
        if self.action == "split" and (self.replacements is None or len(self.replacements) != 2):
            raise ValueError("split needs exactly two replacement phrases")


class AnnotatorClient(Protocol):
    def label_subcategory(self, image_ref: str, mask_ids: Sequence[int],
                          source_label: str, temperature: float) -> str: ...

    def synthesize_set_concept(self, image_ref: str, query: str,
                               phrases: Sequence[str], temperature: float) -> str: ...

    def judge_labels(self, phrases: Sequence[str]) -> set[str]: ...

    def decide_merge_split(self, image_ref: str, group_a: Sequence[int],
                           group_b: Sequence[int], phrase: str) -> MergeOrSplit: ...


_ADJECTIVES = (
    "bright", "plain", "vivid", "solid", "bold", "tinted", "clean", "sharp",
    "glossy", "matte", "deep", "pale",
)


def _digest(*parts) -> int:
    blob = json.dumps(parts, sort_keys=True).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big")


class MockAnnotator:
    """Deterministic stand-in keyed by the request hash.

    `overrides` maps (task, key) to a response or a list of responses that
    are consumed in order, which lets tests script retry behavior. Unkeyed
    requests fall back to the hash-derived synthesizer.
    """

    def __init__(self, overrides: dict | None = None):
        self.overrides = {k: list(v) if isinstance(v, list) else [v]
                          for k, v in (overrides or {}).items()}
        self.calls: Counter = Counter()

    def _take(self, task: str, key):
        queue = self.overrides.get((task, key))
        if queue:
            return queue.pop(0)
        return None

    def label_subcategory(self, image_ref, mask_ids, source_label, temperature):
        self.calls["label_subcategory"] += 1
        scripted = self._take("label", source_label)
        if scripted is not None:
            return scripted
        adj = _ADJECTIVES[_digest(image_ref, list(mask_ids), source_label) % len(_ADJECTIVES)]
        return f"{adj} {source_label}"

    def synthesize_set_concept(self, image_ref, query, phrases, temperature):
        self.calls["set_concept"] += 1
        scripted = self._take("set_concept", query)
        if scripted is not None:
            return scripted
        head = " and ".join(phrases[:2]) if phrases else "shapes"
        return f"the collection of {head} picked out by the query"

    def judge_labels(self, phrases):
        self.calls["judge"] += 1
        scripted = self._take("judge", None)
        if scripted is not None:
            if scripted == "transport-error":
                raise TransportError("judge unavailable")
            return set(scripted)
        return set()

    def decide_merge_split(self, image_ref, group_a, group_b, phrase):
        self.calls["merge_split"] += 1
        scripted = self._take("merge_split", phrase)
        if scripted is not None:
            return scripted
        return MergeOrSplit(action="split",
                            replacements=(f"first {phrase}", f"second {phrase}"))


class HttpAnnotatorClient:
    """Thin JSON-over-HTTP client for a remote annotator service."""

    def __init__(self, endpoint: str, timeout: float = 30.0, opener=None):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self._open = opener or urllib.request.urlopen

    def _post(self, body: dict) -> dict:
        data = json.dumps(body, sort_keys=True).encode()
        req = urllib.request.Request(
            self.endpoint + "/annotate", data=data,
            headers={"Content-Type": "application/json"}, method="POST",
        )
        try:
            with self._open(req, timeout=self.timeout) as resp:
                return json.loads(resp.read().decode())
        except (urllib.error.URLError, TimeoutError, OSError, ValueError) as exc:
            raise TransportError(f"annotator request failed: {exc}") from exc

    def label_subcategory(self, image_ref, mask_ids, source_label, temperature):
        out = self._post({
            "task": "label_subcategory", "image": image_ref, "masks": list(mask_ids),
            "source_label": source_label, "temperature": temperature,
        })
        return out["text"]

    def synthesize_set_concept(self, image_ref, query, phrases, temperature):
        out = self._post({
            "task": "set_concept", "image": image_ref, "query": query,
            "phrases": list(phrases), "temperature": temperature,
        })
        return out["text"]

    def judge_labels(self, phrases):
        out = self._post({"task": "judge_labels", "phrases": sorted(phrases)})
        return set(out["flagged"])

    def decide_merge_split(self, image_ref, group_a, group_b, phrase):
        out = self._post({
            "task": "merge_split", "image": image_ref,
            "group_a": list(group_a), "group_b": list(group_b), "phrase": phrase,
        })
        if out["action"] == "merge":
            return MergeOrSplit(action="merge")
        return MergeOrSplit(action="split", replacements=tuple(out["replacements"]))
