"""Semi-supervised semantic parsing trained from program executability."""

from .executor import KnowledgeBase, denotation_match, execute, reward
from .minilang import Condition, Grammar, Program, parse, render
from .objectives import OBJECTIVES, get_loss, sparsemax

__version__ = "0.1.0"

__all__ = [
    "Condition", "Grammar", "KnowledgeBase", "OBJECTIVES", "Program",
    "denotation_match", "execute", "get_loss", "parse", "render", "reward", "sparsemax",
]
