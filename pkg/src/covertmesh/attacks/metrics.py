from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field

MIN_TRIALS = 50
FPR_FLOOR = 0.10
ACCURACY_CEILING = 0.80


class InsufficientTrials(ValueError):
    pass


class Verdict(str, enum.Enum):
    RESISTANT = "RESISTANT"
    VULNERABLE = "VULNERABLE"


@dataclass
class AttackMetrics:
    auc: float
    accuracy: float
    fpr: float
    n_positive: int
    n_negative: int
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("auc", "accuracy", "fpr"):
            v = getattr(self, name)
            if v == v and not 0.0 <= v <= 1.0:  # NaN allowed for "not measured"
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.n_positive <= 0 or self.n_negative <= 0:
            raise ValueError("metrics need positive and negative trials")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AttackMetrics":
        return cls(**json.loads(text))


def resistance_verdict(m: AttackMetrics) -> Verdict:
    """RESISTANT when the attacker's FPR stays at or above 10% or its accuracy at or below 80%."""
    if m.n_positive < MIN_TRIALS or m.n_negative < MIN_TRIALS:
        raise InsufficientTrials(
            f"need {MIN_TRIALS}+{MIN_TRIALS} trials, have {m.n_positive}+{m.n_negative}")
    if m.fpr >= FPR_FLOOR or m.accuracy <= ACCURACY_CEILING:
        return Verdict.RESISTANT
    return Verdict.VULNERABLE
