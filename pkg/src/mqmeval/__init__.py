"""Hierarchical multi-agent MQM translation evaluation.

The package runs per-subtype evaluation agents over translation segments,
refines their findings through self-reflection and, when confidence is low,
a two-tier collaborative discussion; confirmed findings are scored with MQM
severity weights.  Supporting modules handle corpora, prompt assembly,
threshold calibration, span matching, and metric meta-evaluation, all behind
a replayable, cache-first chat gateway.
"""

__version__ = "0.1.0"

from .typology import (  # noqa: F401
    Severity,
    Subtype,
    CoreCategory,
    Typology,
    default_typology,
    load_typology,
)
from .corpus import (  # noqa: F401
    Dataset,
    GoldAnnotation,
    Segment,
    gold_score,
    load_dataset,
    save_dataset,
)
from .gateway import (  # noqa: F401
    ChatMessage,
    ChatRequest,
    ChatResponse,
    Gateway,
    LiveBackend,
    MockBackend,
    confidence,
    fingerprint,
)
from .orchestrator import (  # noqa: F401
    ErrorFinding,
    EvalRecord,
    PipelineContext,
    SegmentResult,
    evaluate_dataset,
    parse_findings,
    score_segment,
)
from .calibration import (  # noqa: F401
    CalibrationResult,
    ThresholdStore,
    calibrate_threshold,
    percentile_nearest_rank,
)
from .spanmatch import MatchVerdict, TokenSpan, match, prf, sweep, tokenize  # noqa: F401
from .metrics import (  # noqa: F401
    MetaReport,
    ScoreSeries,
    accuracy_t,
    kendall_tau,
    mae_mse,
    meta_evaluate,
    meta_score,
    pearson,
    spearman,
    system_pairwise_accuracy,
)
