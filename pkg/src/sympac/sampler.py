"""Constrained autoregressive sampling.

Each step intersects the model's distribution with the state machine's
legal sub-vocabulary: masked-out ids get zero probability, temperature
and top-k/top-p act only on the surviving ids, the result is
renormalized, one token is drawn, and the machine advances.  Filtering
after masking means high-probability illegal tokens can never starve
the constraint set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fsm import (
    ControlSpec,
    RuleSet,
    compile_control,
    get_sub_vocab,
    initial_state,
    update_state,
)
from .lm import NextTokenModel
from .vocab import BAR_ID, VOCAB_SIZE


@dataclass(frozen=True)
class SamplerConfig:
    """Sampling hyperparameters; output is reproducible from the seed."""

    temperature: float = 1.0
    top_k: int | None = None
    top_p: float | None = None
    max_tokens: int = 2000
    rng_seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.top_p is not None and not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.max_tokens < 2:
            raise ValueError("max_tokens must be >= 2")


@dataclass(slots=True)
class SampleResult:
    tokens: list[int]
    truncated: bool


def renormalize(
    scores: np.ndarray,
    mask: np.ndarray,
    temperature: float = 1.0,
    top_k: int | None = None,
    top_p: float | None = None,
) -> np.ndarray:
    """Probabilities over the full vocabulary, zero outside the mask.

    Inside the mask: softmax(scores / temperature), then top-k, then
    top-p (both computed among masked ids only), renormalized to one.
    """
    ids = np.flatnonzero(mask)
    if len(ids) == 0:
        raise ValueError("empty mask")
    logits = scores[ids] / temperature
    weights = np.exp(logits - logits.max())
    if top_k is not None and top_k < len(ids):
        order = np.argsort(-weights, kind="stable")
        weights[order[top_k:]] = 0.0
    if top_p is not None and top_p < 1.0:
        order = np.argsort(-weights, kind="stable")
        cumulative = np.cumsum(weights[order]) / weights.sum()
        keep = int(np.searchsorted(cumulative, top_p, side="left")) + 1
        weights[order[keep:]] = 0.0
    out = np.zeros(VOCAB_SIZE)
    out[ids] = weights / weights.sum()
    return out


def _draw(rng: np.random.Generator, probs: np.ndarray) -> int:
    cumulative = np.cumsum(probs)
    r = rng.random() * cumulative[-1]
    return int(np.searchsorted(cumulative, r, side="right"))


def constrained_sample(
    model: NextTokenModel,
    rules: RuleSet,
    control: ControlSpec | None = None,
    config: SamplerConfig | None = None,
) -> SampleResult:
    """Sample one token sequence under grammar and control constraints.

    Starts from the ``bar`` token, loops sample/advance until the
    machine reaches its terminal state, and stops early (flagging the
    result truncated) after ``max_tokens`` tokens.  Constraint
    conflicts from the state machine propagate with step context.
    """
    config = config or SamplerConfig()
    cc = compile_control(control)
    state = initial_state(control)
    rng = np.random.default_rng(config.rng_seed)
    seq = [BAR_ID]
    while not state.terminal:
        if len(seq) >= config.max_tokens:
            return SampleResult(seq, truncated=True)
        mask = get_sub_vocab(rules, state, seq[-1], cc)
        scores = model.score(seq)
        probs = renormalize(scores, mask, config.temperature, config.top_k, config.top_p)
        token = _draw(rng, probs)
        seq.append(token)
        state = update_state(rules, state, token)
    return SampleResult(seq, truncated=False)
