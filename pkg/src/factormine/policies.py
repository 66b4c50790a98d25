"""The two policies and the low-level baseline network.

The high-level policy scores options by scaled dot-product attention of a
learned query against the option-embedding matrix.  The low-level policy
decodes an expression token-by-token from a per-token MLP under legality
masks, conditioned on the day state and the chosen option's embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ExprError
from .expr import FactorExpr, Vocabulary, is_complete, legal_next_tokens
from .nn import (
    MLP,
    CategoricalDist,
    OptionEmbedding,
    Tensor,
    attention_scores,
    attention_scores_array,
    masked_log_softmax_array,
    sample_masked,
)

N_DAY_FEATURES = 6


@dataclass(frozen=True)
class HighLevelState:
    """Day summary (z-scored cross-sectional feature means) plus the
    previous option, recorded with the embedding row seen at the time."""

    features: np.ndarray
    prev_option: int
    prev_embedding: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.features, self.prev_embedding])


class HighLevelPolicy:
    """Categorical policy over the option catalog.

    Scores are attention logits of a query MLP output against the option
    embedding rows.  With value_readout enabled, the attention-weighted
    mixture of rows refines the query once before rescoring.
    """

    def __init__(
        self,
        n_options: int,
        embed_dim: int,
        hidden: int,
        rng: np.random.Generator,
        heads: int = 1,
        value_readout: bool = False,
    ):
        self.embedding = OptionEmbedding(n_options, embed_dim, rng)
        self.query_net = MLP([N_DAY_FEATURES + embed_dim, hidden, embed_dim], rng, "high")
        self.heads = heads
        self.value_readout = value_readout
        self.n_options = n_options

    def _scores(self, query: Tensor) -> Tensor:
        scores = attention_scores(query, self.embedding, self.heads)
        if self.value_readout:
            full = np.ones(scores.shape, dtype=bool)
            mix = scores.masked_log_softmax(full).exp()
            refined = query + mix.matmul(self.embedding.matrix)
            scores = attention_scores(refined, self.embedding, self.heads)
        return scores

    def dist(self, state_vector: np.ndarray) -> CategoricalDist:
        return CategoricalDist(self._scores(self.query_net.forward(Tensor(state_vector))))

    def logits_array(self, state_vector: np.ndarray) -> np.ndarray:
        """Graph-free twin of dist() for the sampling hot path."""
        matrix = self.embedding.matrix.data
        query = self.query_net.forward_array(state_vector)
        scores = attention_scores_array(query, matrix, self.heads)
        if self.value_readout:
            full = np.ones(scores.shape, dtype=bool)
            mix = np.exp(masked_log_softmax_array(scores, full))
            refined = query + mix @ matrix
            scores = attention_scores_array(refined, matrix, self.heads)
        return scores

    def batched_log_probs(self, states: np.ndarray, options: np.ndarray) -> tuple[Tensor, Tensor]:
        """(per-row log-prob of the chosen option, full log-prob matrix)."""
        scores = self._scores(self.query_net.forward(Tensor(states)))
        logp = scores.masked_log_softmax(np.ones(scores.shape, dtype=bool))
        return logp.gather_rows(options), logp

    def policy_parameters(self) -> dict[str, Tensor]:
        return self.query_net.parameters()

    def embedding_parameters(self) -> dict[str, Tensor]:
        return self.embedding.parameters()

    def parameters(self) -> dict[str, Tensor]:
        return {**self.policy_parameters(), **self.embedding_parameters()}


class LowLevelPolicy:
    """Autoregressive token decoder.

    Each step feeds [state vector || option embedding || bag-of-token
    counts || one-hot of the last token] through an MLP; illegal tokens
    are masked out, so every decoded sequence is a complete expression
    within the length cap by construction.
    """

    def __init__(
        self,
        vocab: Vocabulary,
        embed_dim: int,
        hidden: int,
        rng: np.random.Generator,
        max_length: int,
    ):
        self.vocab = vocab
        self.max_length = max_length
        self.input_width = N_DAY_FEATURES + 2 * embed_dim + vocab.size + (vocab.size + 1)
        self.net = MLP([self.input_width, hidden, vocab.size], rng, "low")

    def token_input(
        self, state_vector: np.ndarray, option_embedding: np.ndarray, partial: list[int]
    ) -> np.ndarray:
        bag = np.zeros(self.vocab.size)
        for tok in partial:
            bag[tok] += 1.0
        last = np.zeros(self.vocab.size + 1)
        last[partial[-1] if partial else self.vocab.size] = 1.0
        return np.concatenate([state_vector, option_embedding, bag, last])

    def decode(
        self,
        state_vector: np.ndarray,
        option_embedding: np.ndarray,
        option_id: int,
        rng: np.random.Generator,
    ) -> tuple[FactorExpr, np.ndarray, float]:
        """Sample one complete expression; returns (expr, per-token log-probs,
        mean per-token entropy)."""
        tokens: list[int] = []
        logprobs: list[float] = []
        entropies: list[float] = []
        while True:
            legal = legal_next_tokens(tokens, self.max_length, self.vocab)
            mask = np.zeros(self.vocab.size, dtype=bool)
            mask[list(legal)] = True
            x = self.token_input(state_vector, option_embedding, tokens)
            tok, lp, ent = sample_masked(self.net.forward_array(x), mask, rng)
            tokens.append(tok)
            logprobs.append(lp)
            entropies.append(ent)
            if is_complete(tokens, self.vocab):
                break
            if len(tokens) >= self.max_length:
                raise ExprError("decoder exceeded max_length despite masking")
        return (
            FactorExpr(tuple(tokens), option_id),
            np.asarray(logprobs),
            float(np.mean(entropies)),
        )

    def batched_log_probs(
        self, inputs: np.ndarray, masks: np.ndarray, chosen: np.ndarray
    ) -> tuple[Tensor, Tensor]:
        """(per-row log-prob of the chosen token, full log-prob matrix)."""
        logits = self.net.forward(Tensor(inputs))
        logp = logits.masked_log_softmax(masks)
        return logp.gather_rows(chosen), logp

    def parameters(self) -> dict[str, Tensor]:
        return self.net.parameters()


class BaselineNet:
    """Value estimate b(state, option) for the low-level advantage; the
    high-level baseline is always its policy-weighted expectation."""

    def __init__(self, embed_dim: int, hidden: int, rng: np.random.Generator):
        self.input_width = N_DAY_FEATURES + 2 * embed_dim
        self.net = MLP([self.input_width, hidden, 1], rng, "baseline")

    def input_for(self, state_vector: np.ndarray, option_embedding: np.ndarray) -> np.ndarray:
        return np.concatenate([state_vector, option_embedding])

    def value(self, state_vector: np.ndarray, option_embedding: np.ndarray) -> float:
        x = self.input_for(state_vector, option_embedding)
        return float(self.net.forward_array(x)[0])

    def values_all_options(
        self, state_vector: np.ndarray, embedding_matrix: np.ndarray
    ) -> np.ndarray:
        """b(state, option) for every option in one batched forward."""
        k = embedding_matrix.shape[0]
        inputs = np.concatenate(
            [np.tile(state_vector, (k, 1)), embedding_matrix], axis=1
        )
        return self.net.forward_array(inputs)[:, 0]

    def parameters(self) -> dict[str, Tensor]:
        return self.net.parameters()


def baseline_high(
    state_vector: np.ndarray,
    policy: HighLevelPolicy,
    baseline_low: BaselineNet,
) -> float:
    """Exact expectation of the low-level baseline under the option policy."""
    logits = policy.logits_array(state_vector)
    full = np.ones(logits.shape, dtype=bool)
    probs = np.exp(masked_log_softmax_array(logits, full))
    values = baseline_low.values_all_options(state_vector, policy.embedding.matrix.data)
    return float(probs @ values)
