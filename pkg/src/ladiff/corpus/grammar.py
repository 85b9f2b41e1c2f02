"""Template grammar for action descriptions and the frozen toy text embedder.

Every corpus text is rendered from (action, subject, phrase, pace) slots, so
the vocabulary is closed and known at corpus-generation time.  The embedder
maps each vocabulary word to a frozen random vector; a text embeds as the
L2-normalized mean of its word vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, VocabularyError

ACTIONS = ("walk", "circle", "sit", "throw", "jump", "wave")

SUBJECTS = ("a person", "a man", "a woman", "someone")

PHRASES = {
    "walk": ("walks forward", "walks in a straight line"),
    "circle": ("walks in a circle", "moves along a circle"),
    "sit": ("sits down", "sits down on a chair"),
    "throw": ("throws something", "throws an object"),
    "jump": ("jumps forward", "hops forward"),
    "wave": ("waves a hand", "waves hello"),
}

PACE_WORDS = {"slow": "slowly", "medium": "", "fast": "quickly"}

# Frame-count buckets that decide the pace adverb of a sample's text.
PACE_FAST_MAX_F = 80
PACE_SLOW_MIN_F = 140

TEXT_EMBED_DIM = 64
_EMBEDDER_SEED = 7919


def pace_for_length(num_frames: int) -> str:
    if num_frames < PACE_FAST_MAX_F:
        return "fast"
    if num_frames >= PACE_SLOW_MIN_F:
        return "slow"
    return "medium"


def render_text(action: str, subject_idx: int, phrase_idx: int, pace: str) -> str:
    """Deterministic template rendering; inverse of parse_text."""
    if action not in PHRASES:
        raise ConfigError(f"unknown action {action!r}")
    words = [SUBJECTS[subject_idx], PHRASES[action][phrase_idx]]
    adverb = PACE_WORDS[pace]
    if adverb:
        words.append(adverb)
    return " ".join(words)


def parse_text(text: str) -> tuple[str, int, int, str]:
    """Recover (action, subject_idx, phrase_idx, pace) from a rendered text."""
    for action, phrases in PHRASES.items():
        for phrase_idx, phrase in enumerate(phrases):
            for subject_idx, subject in enumerate(SUBJECTS):
                for pace, adverb in PACE_WORDS.items():
                    tail = f" {adverb}" if adverb else ""
                    if text == f"{subject} {phrase}{tail}":
                        return action, subject_idx, phrase_idx, pace
    raise VocabularyError(f"text {text!r} is not producible by the grammar")


@dataclass
class TextDescriptor:
    """Raw textual conditioning: the rendered string plus its provenance."""

    text: str
    action_id: str
    params: dict = field(default_factory=dict)

    @classmethod
    def from_slots(cls, action, subject_idx, phrase_idx, pace, extra=None):
        params = {"subject": subject_idx, "phrase": phrase_idx, "pace": pace}
        if extra:
            params.update(extra)
        text = render_text(action, subject_idx, phrase_idx, pace)
        return cls(text=text, action_id=action, params=params)

    @classmethod
    def from_text(cls, text: str) -> "TextDescriptor":
        action, subject_idx, phrase_idx, pace = parse_text(text)
        return cls.from_slots(action, subject_idx, phrase_idx, pace)


def vocabulary() -> tuple[str, ...]:
    """Sorted closed vocabulary of the grammar."""
    words = set()
    for subject in SUBJECTS:
        words.update(subject.split())
    for phrases in PHRASES.values():
        for phrase in phrases:
            words.update(phrase.split())
    for adverb in PACE_WORDS.values():
        if adverb:
            words.add(adverb)
    return tuple(sorted(words))


class TextEmbedder:
    """Frozen token table: word -> fixed random vector, text -> normalized mean."""

    def __init__(self, dim: int = TEXT_EMBED_DIM, seed: int = _EMBEDDER_SEED):
        self.dim = dim
        self.vocab = vocabulary()
        rng = np.random.default_rng([seed, dim])
        table = rng.standard_normal((len(self.vocab), dim))
        self._table = {w: table[i] for i, w in enumerate(self.vocab)}

    def embed(self, text: str) -> np.ndarray:
        tokens = text.split()
        if not tokens:
            raise VocabularyError("empty text")
        vectors = []
        for token in tokens:
            if token not in self._table:
                raise VocabularyError(f"token {token!r} not in the grammar vocabulary")
            vectors.append(self._table[token])
        mean = np.mean(vectors, axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0.0:
            raise VocabularyError(f"degenerate embedding for {text!r}")
        return mean / norm


def embed_text(descriptor: TextDescriptor, embedder: TextEmbedder) -> np.ndarray:
    return embedder.embed(descriptor.text)
