"""Two-stage hierarchical annotation and its quality-control passes.

Stage 1 labels every mask group with a short free-form phrase anchored to
the source label; stage 2 synthesizes a set-level concept over the group
phrases. QC then runs a rule scan plus an LLM-judge scan into a global
blacklist, regenerates only the blacklisted labels, and de-duplicates
phrase collisions within each sample via merge-or-split decisions, with a
second pass to catch residual collisions.
"""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .client import AnnotatorClient, MergeOrSplit, TransportError


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class QcRules:
    error_tokens: tuple[str, ...]
    generic_phrases: tuple[str, ...]
    boilerplate_prefixes: tuple[str, ...]
    min_chars: int = 2
    max_label_words: int = 6
    set_concept_min_words: int = 5
    set_concept_max_words: int = 20
    stage1_temperature: float = 0.2
    stage2_temperature: float = 0.7
    retry_budget: int = 2

    @classmethod
    def load(cls, path: str | Path | None = None) -> "QcRules":
        if path is None:
            text = resources.files("conceptseg.qc").joinpath("rules.json").read_text()
        else:
            text = Path(path).read_text(encoding="utf-8")
        obj = json.loads(text)
        return cls(
            error_tokens=tuple(obj["error_tokens"]),
            generic_phrases=tuple(obj["generic_phrases"]),
            boilerplate_prefixes=tuple(obj["boilerplate_prefixes"]),
            min_chars=obj.get("min_chars", 2),
            max_label_words=obj.get("max_label_words", 6),
            set_concept_min_words=obj.get("set_concept_min_words", 5),
            set_concept_max_words=obj.get("set_concept_max_words", 20),
            stage1_temperature=obj.get("stage1_temperature", 0.2),
            stage2_temperature=obj.get("stage2_temperature", 0.7),
            retry_budget=obj.get("retry_budget", 2),
        )


@dataclass
class QcGroup:
    label: str
    mask_ids: list[int]
    source_label: str | None = None


@dataclass
class CorpusSample:
    sample_id: int
    image_ref: str
    query: str
    groups: list[QcGroup]
    set_concept: str | None = None

    def __post_init__(self) -> None:
        seen: set[int] = set()
        for g in self.groups:
            if seen & set(g.mask_ids):
                raise ValueError(f"sample {self.sample_id}: mask ids overlap across groups")
            seen.update(g.mask_ids)


@dataclass
class QcReport:
    flagged: list[tuple[str, str]] = field(default_factory=list)
    regeneration_count: int = 0
    reverts: int = 0
    merges: int = 0
    splits: int = 0
    suffix_disambiguations: int = 0
    set_concept_truncations: int = 0
    set_concept_fallbacks: int = 0
    residual_collisions: int = -1
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")


_URL_RE = re.compile(r"(https?://\S+|www\.\S+)")
_MARKDOWN_CHARS = "*_#`"


def clean_phrase(raw: str, rules: QcRules) -> str:
    """In-line cleaning: markup, URLs, quotes, boilerplate, whitespace."""
    text = _URL_RE.sub(" ", raw)
    text = "".join(ch for ch in text if ch not in _MARKDOWN_CHARS)
    text = text.strip().strip("\"'").strip()
    lowered = text.lower()
    changed = True
    while changed:
        changed = False
        for prefix in rules.boilerplate_prefixes:
            if lowered.startswith(prefix):
                text = text[len(prefix):].lstrip()
                lowered = text.lower()
                changed = True
    return " ".join(text.split())


def _label_acceptable(label: str, rules: QcRules) -> bool:
    if not label:
        return False
    if len(label.split()) > rules.max_label_words:
        return False
    if label.lower() in rules.generic_phrases:
        return False
    return True


def stage1_label(sample: CorpusSample, client: AnnotatorClient,
                 rules: QcRules | None = None) -> CorpusSample:
    """One low-temperature client call per group; rejects fall back to the
    source label."""
    rules = rules or QcRules.load()
    new_groups = []
    for g in sample.groups:
        source = g.source_label if g.source_label is not None else g.label
        raw = client.label_subcategory(sample.image_ref, g.mask_ids, source,
                                       rules.stage1_temperature)
        label = clean_phrase(raw, rules)
        if not _label_acceptable(label, rules):
            label = source
        new_groups.append(QcGroup(label=label, mask_ids=list(g.mask_ids), source_label=source))
    return CorpusSample(sample_id=sample.sample_id, image_ref=sample.image_ref,
                        query=sample.query, groups=new_groups, set_concept=sample.set_concept)


def _fallback_concept(query: str) -> str:
    words = [w.strip(".,!?") for w in query.split() if w.strip(".,!?")]
    head = words[-1] if words else "shapes"
    return f"the set of {head} referred to by the query"


def stage2_concept(sample: CorpusSample, client: AnnotatorClient,
                   rules: QcRules | None = None) -> str:
    """Moderate-temperature synthesis, bounded to the configured word window."""
    rules = rules or QcRules.load()
    phrases = [g.label for g in sample.groups]
    raw = client.synthesize_set_concept(sample.image_ref, sample.query, phrases,
                                        rules.stage2_temperature)
    text = clean_phrase(raw, rules)
    words = text.split()
    if len(words) > rules.set_concept_max_words:
        return " ".join(words[: rules.set_concept_max_words])
    if len(words) < rules.set_concept_min_words:
        return _fallback_concept(sample.query)
    return text


def repair_set_concept(sample: CorpusSample, rules: QcRules, report: QcReport) -> None:
    """Deterministically enforce the word window on an existing concept."""
    if sample.set_concept is None:
        return
    words = sample.set_concept.split()
    if len(words) > rules.set_concept_max_words:
        sample.set_concept = " ".join(words[: rules.set_concept_max_words])
        report.set_concept_truncations += 1
    elif len(words) < rules.set_concept_min_words:
        sample.set_concept = _fallback_concept(sample.query)
        report.set_concept_fallbacks += 1


def _rule_flags(label: str, rules: QcRules) -> str | None:
    for token in rules.error_tokens:
        if re.search(rf"(?<!\w){re.escape(token)}(?!\w)", label):
            return "error-token"
    if any(ch in label for ch in _MARKDOWN_CHARS) or "](" in label:
        return "markdown"
    if _URL_RE.search(label):
        return "url"
    if label.startswith("!"):
        return "leading-exclamation"
    if len(label) < rules.min_chars:
        return "too-short"
    return None


def sanity_scan(corpus: list[CorpusSample], client: AnnotatorClient,
                rules: QcRules | None = None) -> tuple[set[str], QcReport]:
    """Rule pass over unique labels, then one judge call on the survivors."""
    rules = rules or QcRules.load()
    report = QcReport()
    unique: list[str] = []
    seen: set[str] = set()
    for sample in corpus:
        for g in sample.groups:
            if g.label not in seen:
                seen.add(g.label)
                unique.append(g.label)
    blacklist: set[str] = set()
    survivors: list[str] = []
    for label in unique:
        reason = _rule_flags(label, rules)
        if reason is not None:
            blacklist.add(label)
            report.flagged.append((label, reason))
        else:
            survivors.append(label)
    try:
        judged = client.judge_labels(survivors)
    except TransportError as exc:
        report.warnings.append(f"judge pass skipped: {exc}")
        judged = set()
    for label in sorted(judged):
        blacklist.add(label)
        report.flagged.append((label, "judge"))
    return blacklist, report


def regenerate(corpus: list[CorpusSample], blacklist: set[str], client: AnnotatorClient,
               rules: QcRules | None = None, report: QcReport | None = None) -> list[CorpusSample]:
    """Re-label only blacklisted groups; everything else is copied verbatim."""
    rules = rules or QcRules.load()
    report = report if report is not None else QcReport()
    out = []
    for sample in corpus:
        new_groups = []
        for g in sample.groups:
            if g.label not in blacklist:
                new_groups.append(QcGroup(label=g.label, mask_ids=list(g.mask_ids),
                                          source_label=g.source_label))
                continue
            source = g.source_label if g.source_label is not None else g.label
            accepted = None
            for _ in range(rules.retry_budget):
                raw = client.label_subcategory(sample.image_ref, g.mask_ids, source,
                                               rules.stage1_temperature)
                report.regeneration_count += 1
                candidate = clean_phrase(raw, rules)
                if _label_acceptable(candidate, rules) and candidate not in blacklist \
                        and _rule_flags(candidate, rules) is None:
                    accepted = candidate
                    break
            if accepted is None:
                accepted = source
                report.reverts += 1
            new_groups.append(QcGroup(label=accepted, mask_ids=list(g.mask_ids),
                                      source_label=source))
        out.append(CorpusSample(sample_id=sample.sample_id, image_ref=sample.image_ref,
                                query=sample.query, groups=new_groups,
                                set_concept=sample.set_concept))
    return out


def _first_duplicate(groups: list[QcGroup]) -> tuple[int, int] | None:
    seen: dict[str, int] = {}
    for i, g in enumerate(groups):
        if g.label in seen:
            return seen[g.label], i
        seen[g.label] = i
    return None


def dedup(sample: CorpusSample, client: AnnotatorClient,
          rules: QcRules | None = None, report: QcReport | None = None) -> CorpusSample:
    """Resolve duplicate phrases via merge-or-split; no duplicates, no calls."""
    rules = rules or QcRules.load()
    report = report if report is not None else QcReport()
    groups = [QcGroup(label=g.label, mask_ids=list(g.mask_ids), source_label=g.source_label)
              for g in sample.groups]
    budget = 2 * max(1, len(groups))
    while budget > 0:
        dup = _first_duplicate(groups)
        if dup is None:
            break
        budget -= 1
        i, j = dup
        a, b = groups[i], groups[j]
        decision = client.decide_merge_split(sample.image_ref, a.mask_ids, b.mask_ids, a.label)
        if decision.action == "merge":
            a.mask_ids = sorted(set(a.mask_ids) | set(b.mask_ids))
            groups.pop(j)
            report.merges += 1
            continue
        p1, p2 = decision.replacements
        retries = 0
        while p1 == p2 and retries < rules.retry_budget:
            decision = client.decide_merge_split(sample.image_ref, a.mask_ids, b.mask_ids, a.label)
            if decision.action == "merge":
                break
            p1, p2 = decision.replacements
            retries += 1
        if decision.action == "merge":
            a.mask_ids = sorted(set(a.mask_ids) | set(b.mask_ids))
            groups.pop(j)
            report.merges += 1
            continue
        if p1 == p2:
            p2 = f"{p1} (group 2)"
            report.suffix_disambiguations += 1
        a.label, b.label = p1, p2
        report.splits += 1
    return CorpusSample(sample_id=sample.sample_id, image_ref=sample.image_ref,
                        query=sample.query, groups=groups, set_concept=sample.set_concept)


def run_qc(corpus: list[CorpusSample], client: AnnotatorClient,
           rules: QcRules | None = None) -> tuple[list[CorpusSample], QcReport]:
    """Full pipeline: scan, targeted regeneration, two dedup passes, repair."""
    rules = rules or QcRules.load()
    blacklist, report = sanity_scan(corpus, client, rules)
    corpus = regenerate(corpus, blacklist, client, rules, report)
    corpus = [dedup(s, client, rules, report) for s in corpus]
    corpus = [dedup(s, client, rules, report) for s in corpus]
    for sample in corpus:
        repair_set_concept(sample, rules, report)
    residual = 0
    for sample in corpus:
        labels = [g.label for g in sample.groups]
        residual += len(labels) - len(set(labels))
    report.residual_collisions = residual
    return corpus, report


@dataclass
class CorpusStats:
    sample_count: int
    phrase_count: int
    mean_subs_per_sample: float
    max_subs_per_sample: int
    multi_sub_fraction: float
    mean_words_per_phrase: float

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def corpus_stats(corpus: list[CorpusSample]) -> CorpusStats:
    """Counts cover sub-category phrases plus each present set-level concept."""
    if not corpus:
        raise UsageError("corpus_stats on an empty corpus")
    phrases: list[str] = []
    subs_per_sample = []
    multi = 0
    for sample in corpus:
        subs = [g.label for g in sample.groups]
        subs_per_sample.append(len(subs))
        phrases.extend(subs)
        if sample.set_concept is not None:
            phrases.append(sample.set_concept)
        if len(subs) > 1:
            multi += 1
    words = [len(p.split()) for p in phrases]
    return CorpusStats(
        sample_count=len(corpus),
        phrase_count=len(phrases),
        mean_subs_per_sample=sum(subs_per_sample) / len(corpus),
        max_subs_per_sample=max(subs_per_sample),
        multi_sub_fraction=multi / len(corpus),
        mean_words_per_phrase=sum(words) / len(words) if words else 0.0,
    )


# --- corpus files -------------------------------------------------------------

def write_corpus(corpus: list[CorpusSample], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        f.write(json.dumps({"format_version": 1, "kind": "qc-corpus"}, sort_keys=True) + "\n")
        for s in corpus:
            rec = {
                "sample_id": s.sample_id,
                "image_ref": s.image_ref,
                "query_text": s.query,
                "set_concept": s.set_concept,
                "sub_concepts": [
                    {"phrase": g.label, "instance_ids": list(g.mask_ids),
                     "source_label": g.source_label}
                    for g in s.groups
                ],
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_corpus(path: str | Path) -> list[CorpusSample]:
    """Reads native QC corpora and plain shapeworld dataset files alike."""
    corpus = []
    with Path(path).open("r", encoding="utf-8") as f:
        header_seen = False
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if not header_seen:
                header_seen = True
                continue
            image_ref = rec.get("image_ref", f"seed:{rec.get('seed')}")
            corpus.append(CorpusSample(
                sample_id=rec["sample_id"],
                image_ref=image_ref,
                query=rec["query_text"],
                groups=[QcGroup(label=g["phrase"], mask_ids=list(g["instance_ids"]),
                                source_label=g.get("source_label"))
                        for g in rec["sub_concepts"]],
                set_concept=rec["set_concept"],
            ))
    return corpus
