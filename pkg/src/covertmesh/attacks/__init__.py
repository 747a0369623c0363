from .correlator import Correlator, DegenerateLabels, compute_auc, pair_features, train_correlator
from .features import EmptyTrace, WindowConfig, extract_features
from .metrics import AttackMetrics, InsufficientTrials, Verdict, resistance_verdict
from .trace import FlowTrace, TraceError, Vantage, capture, merge
from .watermark import (TraceTooShort, WatermarkPattern, apply_watermark, calibrate_threshold,
                        detect_watermark, inject_watermark, watermark_score)

__all__ = [
    "AttackMetrics", "Correlator", "DegenerateLabels", "EmptyTrace", "FlowTrace",
    "InsufficientTrials", "TraceError", "TraceTooShort", "Vantage", "Verdict",
    "WatermarkPattern", "WindowConfig", "apply_watermark", "calibrate_threshold", "capture",
    "compute_auc", "detect_watermark", "extract_features", "inject_watermark", "merge",
    "pair_features", "resistance_verdict", "train_correlator", "watermark_score",
]
