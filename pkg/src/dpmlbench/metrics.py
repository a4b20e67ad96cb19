"""Relative utility and leakage metrics comparing a private model to its baseline."""

from __future__ import annotations

from .errors import DomainError


def tailored_auc(raw: float) -> float:
    """Clamp below-chance attack AUC to 0.5 (an attack cannot do worse than guessing)."""
    if not 0 <= raw <= 1:
        raise DomainError(f"AUC must lie in [0, 1], got {raw}")
    return max(raw, 0.5)


def utility_loss(acc_pri: float, acc_base: float) -> float:
    """Fractional accuracy drop relative to the non-private baseline."""
    if not acc_base > 0:
        raise DomainError("baseline accuracy must be positive")
    return 1 - acc_pri / acc_base


def privacy_leakage(auc_pri: float, auc_base: float) -> float | None:
    """Share of the baseline's above-chance attack AUC that survives.

    Inputs are tailored AUCs.  Returns ``None`` when the baseline itself is at
    chance, where the ratio is undefined.
    """
    for v in (auc_pri, auc_base):
        if not 0.5 <= v <= 1:
            raise DomainError(f"tailored AUC must lie in [0.5, 1], got {v}")
    if auc_base == 0.5:
        return None
    return (auc_pri - 0.5) / (auc_base - 0.5)
