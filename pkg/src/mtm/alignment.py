"""Masked adversarial feature alignment.

Two flavors, each applied to every retained encoder and decoder layer:

* domain-query alignment: the layer's row-0 domain token is Bernoulli-masked
  elementwise and classified by a discriminator (one BCE term per layer);
* token-wise alignment: the remaining rows are masked with a smaller
  threshold (eta * theta) and classified per token, BCE averaged over tokens.

Masked copies feed only the discriminators (through gradient reversal); the
unmasked features continue through the detector untouched.  Masks are drawn
fresh for every layer of every forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError
from .nn import Mlp, Module


@dataclass
class MaskSpec:
    """Masking thresholds plus the RNG stream producing the draws."""

    theta_mask: float = 0.40
    eta: float = 0.50
    seed: int = 0
    rng: np.random.Generator = None

    def __post_init__(self):
        if not 0.0 <= self.theta_mask <= 1.0:
            raise ContractError(f"theta_mask must be in [0,1], got {self.theta_mask}")
        if not 0.0 < self.eta <= 1.0:
            raise ContractError(f"eta must be in (0,1], got {self.eta}")
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)

    @property
    def token_threshold(self) -> float:
        return self.eta * self.theta_mask


@dataclass
class LossWeights:
    lambda_mdqfa: float = 0.1
    lambda_mtwfa: float = 1.0
    lambda_grl: float = 1.0

    def __post_init__(self):
        if min(self.lambda_mdqfa, self.lambda_mtwfa, self.lambda_grl) < 0:
            raise ContractError("loss weights must be nonnegative")


class Discriminator(Module):
    """Per-token domain classifier: width -> width/2 -> width/4 -> 1 logit."""

    def __init__(self, width, rng):
        self.net = Mlp([width, max(width // 2, 1), max(width // 4, 1), 1], rng)

    def __call__(self, features: Tensor) -> Tensor:
        return self.net(features)


def build_discriminators(width, rng) -> dict[str, Discriminator]:
    """The four roles: {mdqfa, mtwfa} x {enc, dec}, shared across layers."""
    return {
        role: Discriminator(width, rng)
        for role in ("mdqfa_enc", "mdqfa_dec", "mtwfa_enc", "mtwfa_dec")
    }


def make_mask(shape, threshold, rng) -> Tensor:
    """Bernoulli keep-mask: each entry is 0 with probability `threshold`."""
    if not 0.0 <= threshold <= 1.0:
        raise ContractError(f"mask threshold must be in [0,1], got {threshold}")
    return Tensor((rng.random(shape) >= threshold).astype(np.float64))


@dataclass
class AlignmentOutcome:
    """One loss term plus the per-token logits/labels for accuracy logging."""

    loss: Tensor
    logits: np.ndarray
    label: float


def mdqfa_loss(layers, d, spec: MaskSpec, disc: Discriminator,
               lambda_grl=1.0) -> AlignmentOutcome:
    """Masked domain-query alignment: per layer, mask row 0, reverse
    gradients, classify; sum of per-layer BCE terms."""
    if not layers:
        raise ContractError("no layer features retained for alignment")
    total = None
    logits = []
    for feat in layers:
        token = feat[0:1]
        mask = make_mask(token.data.shape, spec.theta_mask, spec.rng)
        masked = ag.mul(token, mask)
        logit = disc(ag.grad_reverse(masked, lambda_grl))
        logits.append(float(logit.data.reshape(())))
        term = ag.bce_with_logits(logit, d)
        total = term if total is None else ag.add(total, term)
    return AlignmentOutcome(total, np.array(logits), float(d))


def mtwfa_loss(layers, d, spec: MaskSpec, disc: Discriminator,
               lambda_grl=1.0) -> AlignmentOutcome:
    """Masked token-wise alignment: per layer, mask all token rows (threshold
    eta * theta), classify each token, average the BCE over tokens; summed
    over layers."""
    if not layers:
        raise ContractError("no layer features retained for alignment")
    total = None
    logits = []
    for feat in layers:
        tokens = feat[1:]  # domain-token row excluded
        mask = make_mask(tokens.data.shape, spec.token_threshold, spec.rng)
        masked = ag.mul(tokens, mask)
        logit = disc(ag.grad_reverse(masked, lambda_grl))
        logits.append(logit.data.reshape(-1).copy())
        term = ag.bce_with_logits(logit, d)  # mean over tokens
        total = term if total is None else ag.add(total, term)
    return AlignmentOutcome(total, np.concatenate(logits), float(d))


@dataclass
class AdvLossResult:
    total: Tensor
    components: dict[str, float]
    outcomes: dict[str, AlignmentOutcome]


def adv_loss_total(enc_state, dec_state, d, spec: MaskSpec,
                   discriminators: dict[str, Discriminator],
                   weights: LossWeights) -> AdvLossResult:
    """Weighted sum of the four alignment losses for one image's features."""
    for role in ("mdqfa_enc", "mdqfa_dec", "mtwfa_enc", "mtwfa_dec"):
        if role not in discriminators:
            raise ContractError(f"missing discriminator for role {role}")
    grl = weights.lambda_grl
    outcomes = {
        "mdqfa_enc": mdqfa_loss(enc_state.layers, d, spec, discriminators["mdqfa_enc"], grl),
        "mtwfa_enc": mtwfa_loss(enc_state.layers, d, spec, discriminators["mtwfa_enc"], grl),
        "mdqfa_dec": mdqfa_loss(dec_state.layers, d, spec, discriminators["mdqfa_dec"], grl),
        "mtwfa_dec": mtwfa_loss(dec_state.layers, d, spec, discriminators["mtwfa_dec"], grl),
    }
    total = ag.add(
        ag.mul(ag.add(outcomes["mdqfa_enc"].loss, outcomes["mdqfa_dec"].loss),
               weights.lambda_mdqfa),
        ag.mul(ag.add(outcomes["mtwfa_enc"].loss, outcomes["mtwfa_dec"].loss),
               weights.lambda_mtwfa),
    )
    components = {k: float(v.loss.data) for k, v in outcomes.items()}
    return AdvLossResult(total, components, outcomes)


def discriminator_accuracy(logits, labels) -> float:
    """Fraction of logits whose predicted domain matches the label.
    sigmoid(logit) > 0.5 predicts domain 1; an exact 0 logit counts as 0."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if logits.size == 0:
        raise ContractError("accuracy of an empty batch")
    if logits.shape != labels.shape:
        raise ContractError(f"logits/labels lengths differ: {logits.size}/{labels.size}")
    predicted = (logits > 0.0).astype(np.float64)
    return float((predicted == labels).mean())
