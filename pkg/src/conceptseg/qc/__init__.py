from .client import AnnotatorClient, HttpAnnotatorClient, MergeOrSplit, MockAnnotator, TransportError
from .pipeline import (
    CorpusSample,
    QcGroup,
    QcReport,
    QcRules,
    UsageError,
    clean_phrase,
    corpus_stats,
    dedup,
    read_corpus,
    regenerate,
    repair_set_concept,
    run_qc,
    sanity_scan,
    stage1_label,
    stage2_concept,
    write_corpus,
)

__all__ = [
    "AnnotatorClient",
    "CorpusSample",
    "HttpAnnotatorClient",
    "MergeOrSplit",
    "MockAnnotator",
    "QcGroup",
    "QcReport",
    "QcRules",
    "TransportError",
    "UsageError",
    "clean_phrase",
    "corpus_stats",
    "dedup",
    "read_corpus",
    "regenerate",
    "repair_set_concept",
    "run_qc",
    "sanity_scan",
    "stage1_label",
    "stage2_concept",
    "write_corpus",
]
