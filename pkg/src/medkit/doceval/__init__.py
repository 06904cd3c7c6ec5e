"""Medical-document evaluation: lab tables, field scoring and text metrics."""
from .scoring import (
    FieldScores,
    JudgeError,
    Match,
    consensus_bucket,
    edit_similarity,
    judge_many,
    match_entries,
    prf,
    run_judge,
    score_complex_qa,
    score_full_parse,
    score_simple_qa,
)
from .tables import (
    FIELDS,
    LabRow,
    LabTable,
    ReferenceInterval,
    TableParseError,
    canonicalize,
    canonicalize_with_flag,
    classify_abnormality,
    parse_markdown_table,
    parse_reference_interval,
)
from .textmetrics import cider, cider_scores, lcs_length, rouge_l, tokenize
