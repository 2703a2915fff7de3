"""Gradient estimators for the discrete token layer.

Five ways to turn a per-step categorical distribution into something the
listener can consume while still producing a useful gradient for the speaker:

* ``REINFORCE``        one-hot sample, no pathwise gradient; the score-function
                       surrogate (:func:`reinforce_surrogate`) carries the signal.
* ``ST_MULTINOMIAL``   one-hot sample forward, gradient routed to ``probs``.
* ``ST_GUMBEL``        one-hot argmax of a Gumbel-softmax sample forward,
                       gradient routed to the relaxed sample.
* ``PSST_*``           as the matching ST method, except that a fraction
                       ``rho`` of examples emit the dense distribution itself.

All randomness is drawn from the caller's ``numpy.random.Generator``. Every
call to :func:`emit_token` consumes the same number of uniforms regardless of
kind or gate outcome, so a PSST run with ``rho=0`` replays the ST run exactly.
"""

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DomainError

PROB_FLOOR = 1e-12


class Kind(str, enum.Enum):
    REINFORCE = "reinforce"
    ST_MULTINOMIAL = "st-mn"
    ST_GUMBEL = "st-gs"
    PSST_MULTINOMIAL = "psst-mn"
    PSST_GUMBEL = "psst-gs"


class Baseline(str, enum.Enum):
    NONE = "none"
    GREEDY = "greedy"
    GROUND_TRUTH = "ground-truth"


_PSST = (Kind.PSST_MULTINOMIAL, Kind.PSST_GUMBEL)
_GUMBEL = (Kind.ST_GUMBEL, Kind.PSST_GUMBEL)


@dataclass(frozen=True)
class EstimatorConfig:
    """Estimator selection plus its hyperparameters.

    ``rho`` must be given exactly for the PSST kinds; ``tau`` only applies to
    the Gumbel kinds and defaults to 1 there. ``per_token_gate`` is an
    experimental switch that redraws the PSST gate at every step instead of
    once per caption.
    """

    kind: Kind
    rho: float | None = None
    tau: float | None = None
    baseline: Baseline = Baseline.NONE
    per_token_gate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "baseline", Baseline(self.baseline))
        if self.kind in _PSST:
            if self.rho is None:
                raise ContractError(f"{self.kind.value} requires rho")
            if not 0.0 <= self.rho <= 1.0:
                raise DomainError(f"rho must lie in [0, 1], got {self.rho}")
        elif self.rho is not None:
            raise ContractError(f"rho is only meaningful for PSST kinds, not {self.kind.value}")
        if self.kind in _GUMBEL:
            if self.tau is None:
                object.__setattr__(self, "tau", 1.0)
            elif self.tau <= 0:
                raise DomainError(f"tau must be positive, got {self.tau}")
        elif self.tau is not None:
            raise ContractError(f"tau is only meaningful for Gumbel kinds, not {self.kind.value}")
        if self.per_token_gate and self.kind not in _PSST:
            raise ContractError("per_token_gate requires a PSST kind")

    @property
    def is_psst(self):
        return self.kind in _PSST

    @property
    def is_gumbel(self):
        return self.kind in _GUMBEL

    @property
    def gate_rho(self):
        """Relaxation probability used by the gate (0 for non-PSST kinds)."""
        return self.rho if self.is_psst else 0.0

    def straight_through_twin(self):
        """The ST config that PSST reduces to at ``rho=0``."""
        if self.kind == Kind.PSST_MULTINOMIAL:
            return EstimatorConfig(Kind.ST_MULTINOMIAL, baseline=self.baseline)
        if self.kind == Kind.PSST_GUMBEL:
            return EstimatorConfig(Kind.ST_GUMBEL, tau=self.tau, baseline=self.baseline)
        return self

    def label(self):
        parts = [self.kind.value]
        if self.rho is not None:
            parts.append(f"rho={self.rho:g}")
        if self.tau is not None:
            parts.append(f"tau={self.tau:g}")
        if self.kind == Kind.REINFORCE:
            parts.append(f"baseline={self.baseline.value}")
        return " ".join(parts)


def make_config(method, rho=None, tau=None, baseline="none", per_token_gate=False):
    """Build a config from loose CLI-style values, dropping irrelevant knobs."""
    kind = Kind(method)
    return EstimatorConfig(
        kind,
        rho=rho if kind in _PSST else None,
        tau=tau if kind in _GUMBEL else None,
        baseline=Baseline(baseline),
        per_token_gate=per_token_gate and kind in _PSST,
    )


@dataclass
class CategoricalDist:
    """Per-step token distribution; leading axis is the batch."""

    logits: ad.Node
    probs: ad.Node
    log_probs: ad.Node

    @classmethod
    def from_logits(cls, logits):
        return cls(logits, ad.softmax(logits), ad.log_softmax(logits))


@dataclass
class PathDecision:
    """PSST gate outcome; ``relaxed[i]`` is True when example i emits densely."""

    relaxed: np.ndarray


@dataclass
class TokenEmission:
    """Batched emission for one step.

    ``vector`` holds a one-hot row for sampled examples and the dense
    distribution for relaxed ones. ``token_index`` is -1 on dense rows.
    """

    vector: ad.Node
    token_index: np.ndarray
    dense: np.ndarray

    def mode(self, i):
        return "DENSE" if self.dense[i] else "ONE_HOT"


def uniforms(rng, shape):
    """Uniform draws on the open interval (0, 1)."""
    u = rng.random(shape)
    return np.where(u == 0.0, np.nextafter(0.0, 1.0), u)


def gumbel_noise(u):
    """Standard Gumbel variate ``-log(-log u)``."""
    u = np.asarray(u, dtype=np.float64)
    if ((u <= 0.0) | (u >= 1.0)).any():
        raise DomainError("gumbel_noise needs 0 < u < 1")
    g = -np.log(-np.log(u))
    return float(g) if g.ndim == 0 else g


def _log_probs_clamped(probs):
    return np.log(np.maximum(probs, PROB_FLOOR))


def gumbel_max_sample(probs, rng=None, noise=None):
    """Sample indices by ``argmax(log p + g)`` along the last axis.

    ``probs`` may be an array or a :class:`CategoricalDist`. Pass ``noise`` to
    reuse precomputed Gumbel noise instead of drawing from ``rng``.
    """
    if isinstance(probs, CategoricalDist):
        probs = probs.probs.value
    probs = np.asarray(probs, dtype=np.float64)
    if noise is None:
        noise = gumbel_noise(uniforms(rng, probs.shape))
    return np.argmax(_log_probs_clamped(probs) + noise, axis=-1)


def gumbel_softmax_relax(dist, g, tau):
    """Temperature-``tau`` softmax of ``log p + g``, differentiable in the logits."""
    if tau <= 0:
        raise DomainError(f"tau must be positive, got {tau}")
    return ad.softmax(ad.mul(ad.add(dist.log_probs, g), 1.0 / tau))


def psst_gate(rho, rng, size=None):
    """Draw the relaxed/sampled decision; always consumes ``size`` uniforms."""
    if not 0.0 <= rho <= 1.0:
        raise DomainError(f"rho must lie in [0, 1], got {rho}")
    relaxed = rng.random(size) < rho
    return PathDecision(np.atleast_1d(relaxed))


def emit_token(dist, config, decision, rng):
    """Produce the step's emission under ``config``.

    ``decision`` is ignored for non-PSST kinds. One ``[B, V]`` block of
    uniforms is drawn per call whatever the kind.
    """
    probs = dist.probs
    batch, vocab = probs.shape
    g = gumbel_noise(uniforms(rng, (batch, vocab)))
    relaxed = np.zeros(batch, dtype=bool)
    if config.is_psst and decision is not None:
        relaxed = np.broadcast_to(np.asarray(decision.relaxed, dtype=bool), (batch,)).copy()

    if config.is_gumbel:
        base = gumbel_softmax_relax(dist, g, config.tau)
        index = np.argmax(base.value, axis=-1)
    else:
        base = probs
        index = gumbel_max_sample(probs.value, noise=g)
    onehot = np.zeros((batch, vocab))
    onehot[np.arange(batch), index] = 1.0

    if config.kind == Kind.REINFORCE:
        vector = probs.tape.constant(onehot)
    else:
        forward = np.where(relaxed[:, None], base.value, onehot)
        vector = ad.straight_through(forward, base)
    token_index = np.where(relaxed, -1, index)
    return TokenEmission(vector, token_index, relaxed)


def reinforce_surrogate(log_prob, reward, baseline=0.0):
    """Score-function surrogate ``-mean((reward - baseline) * log_prob)``.

    ``log_prob`` is the per-example sum of log-probabilities of the sampled
    tokens. Reward and baseline are treated as constants, so backward yields
    ``-(reward - baseline) * grad log p``: minimizing the surrogate ascends the
    expected reward.
    """
    advantage = np.asarray(reward, dtype=np.float64) - np.asarray(baseline, dtype=np.float64)
    advantage = np.broadcast_to(advantage, log_prob.shape)
    return ad.neg(ad.mean(ad.mul(log_prob, advantage)))


def baseline_value(kind, reference_reward=None, greedy_reward=None):
    """Baseline for the score-function estimator.

    ``reference_reward`` is the reward earned by a ground-truth caption and
    ``greedy_reward`` the reward of the greedy decode; only the one matching
    ``kind`` is required.
    """
    kind = Baseline(kind)
    if kind == Baseline.NONE:
        return 0.0
    if kind == Baseline.GREEDY:
        if greedy_reward is None:
            raise ContractError("GREEDY baseline needs the greedy rollout's reward")
        return greedy_reward
    if reference_reward is None:
        raise ContractError("GROUND_TRUTH baseline needs a reference caption's reward")
    return reference_reward
