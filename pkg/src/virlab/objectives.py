"""Training losses: vanilla AT, VIR-AT, TRADES, and VIR-TRADES.

All objectives reduce by batch mean. VIR weights multiply only the term
their formulation targets: the adversarial CE for VIR-AT, the KL
regularizer for VIR-TRADES (whose natural CE term stays unweighted).
Weights always enter as plain arrays, i.e. constants in the graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError, ShapeError
from .models import Classifier
from .reweight import Ablation, WeightScheme, vir_weight, vulnerability_score
from .tensor import Tensor, cross_entropy_rows, kl_divergence, softmax


class ObjectiveFamily(Enum):
    AT = "AT"
    VIR_AT = "VIR_AT"
    TRADES = "TRADES"
    VIR_TRADES = "VIR_TRADES"


@dataclass(frozen=True)
class ObjectiveSpec:
    family: ObjectiveFamily
    trade_off: float = 5.0
    weight_scheme: WeightScheme = field(
        default_factory=lambda: WeightScheme.vir_at()
    )
    ablation: Ablation = Ablation.FULL

    def __post_init__(self):
        if isinstance(self.family, str):
            object.__setattr__(self, "family", ObjectiveFamily(self.family))
        if isinstance(self.ablation, str):
            object.__setattr__(self, "ablation", Ablation(self.ablation))
        if self.family in (ObjectiveFamily.TRADES, ObjectiveFamily.VIR_TRADES):
            if self.trade_off <= 0:
                raise ConfigError(f"trade_off must be positive, got {self.trade_off}")


def _check_weights(weights, batch: int) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (batch,):
        raise ShapeError(f"weights shape {w.shape} does not match batch {batch}")
    return w


def vir_at_loss(model: Classifier, x_nat, x_adv, y, weights) -> Tensor:
    """Mean over the batch of w_i * CE(f(x_adv_i), y_i).

    With unit weights this is exactly the vanilla AT objective.
    """
    x_adv = np.asarray(x_adv, dtype=np.float64)
    w = _check_weights(weights, x_adv.shape[0])
    rows = cross_entropy_rows(model.forward(Tensor(x_adv)), y)
    return (Tensor(w) * rows).mean()


def at_loss(model: Classifier, x_adv, y) -> Tensor:
    """Vanilla adversarial training: mean CE on attacked inputs."""
    x_adv = np.asarray(x_adv, dtype=np.float64)
    return cross_entropy_rows(model.forward(Tensor(x_adv)), y).mean()


def trades_loss(model: Classifier, x_nat, x_adv, y, trade_off: float) -> Tensor:
    """Mean of CE(f(x_i), y_i) + trade_off * KL(f(x_i) || f(x_adv_i)).

    trade_off is the 1/lambda factor; gradient flows through both the
    natural and adversarial logits of the KL term.
    """
    if trade_off <= 0:
        raise ConfigError(f"trade_off must be positive, got {trade_off}")
    x_nat = np.asarray(x_nat, dtype=np.float64)
    x_adv = np.asarray(x_adv, dtype=np.float64)
    if x_nat.shape != x_adv.shape:
        raise ShapeError(f"x_nat {x_nat.shape} and x_adv {x_adv.shape} differ")
    z_nat = model.forward(Tensor(x_nat))
    z_adv = model.forward(Tensor(x_adv))
    ce = cross_entropy_rows(z_nat, y)
    kl = kl_divergence(softmax(z_nat), softmax(z_adv))
    return (ce + trade_off * kl).mean()


def vir_trades_loss(model: Classifier, x_nat, x_adv, y, trade_off: float,
                    weights) -> Tensor:
    """TRADES with the KL term reweighted per sample; natural CE unweighted."""
    if trade_off <= 0:
        raise ConfigError(f"trade_off must be positive, got {trade_off}")
    x_nat = np.asarray(x_nat, dtype=np.float64)
    x_adv = np.asarray(x_adv, dtype=np.float64)
    if x_nat.shape != x_adv.shape:
        raise ShapeError(f"x_nat {x_nat.shape} and x_adv {x_adv.shape} differ")
    w = _check_weights(weights, x_nat.shape[0])
    z_nat = model.forward(Tensor(x_nat))
    z_adv = model.forward(Tensor(x_adv))
    ce = cross_entropy_rows(z_nat, y)
    kl = kl_divergence(softmax(z_nat), softmax(z_adv))
    return (ce + trade_off * (Tensor(w) * kl)).mean()


def ablation_weights(scheme: WeightScheme, ablation: Ablation, prob_true,
                     discrepancies) -> np.ndarray:
    """Weight vector for one ablation row: the full product-plus-floor, the
    vulnerability score alone, or the discrepancy score alone (no floor)."""
    if isinstance(ablation, str):
        ablation = Ablation(ablation)
    s_v = vulnerability_score(np.asarray(prob_true, dtype=np.float64),
                              scheme.alpha, scheme.gamma)
    s_d = np.asarray(discrepancies, dtype=np.float64)
    if ablation is Ablation.FULL:
        return vir_weight(s_v, s_d, scheme.beta)
    if ablation is Ablation.SV_ONLY:
        return np.asarray(s_v)
    return s_d.copy()
