"""Denotation accuracy and the online length-ratio / coverage diagnostics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .executor import KnowledgeBase, denotation_match


class Undefined(ArithmeticError):
    pass


@dataclass
class DiagnosticsAccumulator:
    """Running sums over unlabeled utterances processed during training.

    ``|y|`` is the action-sequence length and ``|x|`` the token count.
    """

    ratio_num: float = 0.0  # sum_i sum_{y in P_SE(x_i)} |y|
    ratio_den: float = 0.0  # sum_i |x_i| |P_SE(x_i)|
    hits: int = 0
    count: int = 0
    utterance_tokens: int = 0

    def update(self, x_len: int, se_lengths: Sequence[int], gold_captured: bool) -> None:
        self.ratio_num += float(sum(se_lengths))
        self.ratio_den += float(x_len * len(se_lengths))
        self.hits += int(gold_captured)
        self.count += 1
        self.utterance_tokens += x_len

    def merge(self, other: "DiagnosticsAccumulator") -> "DiagnosticsAccumulator":
        return DiagnosticsAccumulator(
            self.ratio_num + other.ratio_num,
            self.ratio_den + other.ratio_den,
            self.hits + other.hits,
            self.count + other.count,
            self.utterance_tokens + other.utterance_tokens,
        )


def avg_ratio(acc: DiagnosticsAccumulator) -> float:
    if acc.ratio_den <= 0:
        raise Undefined("no utterance has had a seen executable program yet")
    return acc.ratio_num / acc.ratio_den


def coverage(acc: DiagnosticsAccumulator) -> float:
    """Fraction of processed utterances whose gold program was in P_SE."""
    if acc.count == 0:
        raise Undefined("no utterance processed")
    return acc.hits / acc.count


def coverage_per_token(acc: DiagnosticsAccumulator) -> float:
    """Hits divided by total utterance tokens, the literal printed formula."""
    if acc.utterance_tokens == 0:
        raise Undefined("no utterance processed")
    return acc.hits / acc.utterance_tokens


def gold_ratio(examples: Iterable, grammar) -> float:
    """Average ratio when P_SE holds exactly the gold program."""
    acc = DiagnosticsAccumulator()
    for e in examples:
        acc.update(len(e.tokens), [grammar.program_length(e.program)], True)
    return avg_ratio(acc)


def maybe(fn, acc) -> Optional[float]:
    try:
        return fn(acc)
    except Undefined:
        return None


def denotation_accuracy(parser, theta, examples, vocab, kb: KnowledgeBase,
                        batch: int = 128) -> float:
    """Share of examples whose greedy decode has the gold denotation."""
    from .search import beam_search_batch

    examples = list(examples)
    if not examples:
        return 0.0
    correct = 0
    for i in range(0, len(examples), batch):
        chunk = examples[i : i + batch]
        xs = [vocab.encode(e.tokens) for e in chunk]
        beams = beam_search_batch(parser, xs, theta, 1)
        for e, b in zip(chunk, beams):
            correct += denotation_match(b[0].program, e.program, kb)
    return correct / len(examples)
