"""Article filtering, deduplication, and token-budgeted segmentation.

Long articles are split into sentence-ordered blocks: sentences are greedily
packed until the token limit, over-length sentences are cut at commas, then
semicolons, then hard token boundaries, and a too-short trailing block is
merged back into its predecessor when the merge stays under the limit.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Protocol, Sequence

_WS_RE = re.compile(r"\s+")
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
# Sentence boundary: terminal punctuation, optional closing quotes/brackets,
# then whitespace.
_SENT_BOUNDARY_RE = re.compile(r"([.!?][\"'”’)\]]*)(\s+)")


class TokenCounter(Protocol):
    def count(self, text: str) -> int: ...


class RegexTokenizer:
    """Default tokenizer: word runs and individual punctuation marks.

    Stands in for an external byte-pair tokenizer; exact counts can be
    supplied instead via :class:`SidecarTokenizer`.
    """

    def tokenize(self, text: str) -> list[str]:
        return _TOKEN_RE.findall(text)

    def spans(self, text: str) -> list[tuple[int, int]]:
        return [m.span() for m in _TOKEN_RE.finditer(text)]

    def count(self, text: str) -> int:
        return len(_TOKEN_RE.findall(text))


class SidecarTokenizer(RegexTokenizer):
    """Tokenizer whose counts come from a precomputed text -> count table.

    The table (e.g. exact byte-pair counts produced offline) overrides the
    regex count for texts it covers; anything else falls back to the regex
    count. Token boundaries for splitting still come from the regex.
    """

    def __init__(self, counts: dict[str, int]):
        self._counts = dict(counts)

    @classmethod
    def from_json(cls, path) -> "SidecarTokenizer":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(json.load(fh))

    def count(self, text: str) -> int:
        hit = self._counts.get(text)
        return hit if hit is not None else super().count(text)


@dataclass(frozen=True)
class SegmentConfig:
    token_limit: int
    overlap: int = 0
    min_block: int = 32
    tokenizer: RegexTokenizer | None = None

    def __post_init__(self) -> None:
        if self.token_limit <= 0:
            raise ValueError(f"token_limit must be positive, got {self.token_limit}")
        if not 0 <= self.overlap < self.token_limit:
            raise ValueError(f"overlap must be in [0, token_limit), got {self.overlap}")
        if not 0 <= self.min_block < self.token_limit:
            raise ValueError(f"min_block must be in [0, token_limit), got {self.min_block}")

    def get_tokenizer(self) -> RegexTokenizer:
        return self.tokenizer if self.tokenizer is not None else RegexTokenizer()


@dataclass(frozen=True)
class Block:
    index: int
    text: str
    token_count: int


def normalize_ws(text: str) -> str:
    return _WS_RE.sub(" ", text).strip()


def dedupe_and_filter(articles: Sequence[str], min_chars: int) -> list[str]:
    """Drop exact duplicates (after whitespace normalization) and short texts.

    Order-preserving; the first occurrence of a duplicate survives.
    """
    seen: set[str] = set()
    kept = []
    for article in articles:
        normalized = normalize_ws(article)
        if len(normalized) < min_chars or normalized in seen:
            continue
        seen.add(normalized)
        kept.append(article)
    return kept


def split_sentences(text: str) -> list[str]:
    """Split at terminal punctuation (. ! ? plus closing quotes) before whitespace."""
    text = text.strip()
    if not text:
        return []
    sentences = []
    pos = 0
    for match in _SENT_BOUNDARY_RE.finditer(text):
        end = match.end(1)
        sentence = text[pos:end].strip()
        if sentence:
            sentences.append(sentence)
        pos = match.end()
    tail = text[pos:].strip()
    if tail:
        sentences.append(tail)
    return sentences


def _split_at_chars(text: str, chars: str) -> list[str]:
    """Cut after each occurrence of any char in ``chars``, keeping it on the left."""
    pieces = []
    pos = 0
    for i, ch in enumerate(text):
        if ch in chars:
            piece = text[pos : i + 1].strip()
            if piece:
                pieces.append(piece)
            pos = i + 1
    tail = text[pos:].strip()
    if tail:
        pieces.append(tail)
    return pieces


def _hard_split(text: str, limit: int, tokenizer: RegexTokenizer) -> list[str]:
    """Cut at token span boundaries so no piece exceeds ``limit`` tokens."""
    spans = tokenizer.spans(text)
    if len(spans) <= limit:
        return [text.strip()] if text.strip() else []
    pieces = []
    for start in range(0, len(spans), limit):
        chunk = spans[start : start + limit]
        piece = text[chunk[0][0] : chunk[-1][1]].strip()
        if piece:
            pieces.append(piece)
    return pieces


def _fragment_sentence(sentence: str, limit: int, tokenizer: RegexTokenizer) -> list[str]:
    """Break an over-length sentence: commas, then semicolons, then hard cuts."""
    fragments = [sentence]
    for chars in (",", ";"):
        next_fragments = []
        for frag in fragments:
            if tokenizer.count(frag) > limit:
                next_fragments.extend(_split_at_chars(frag, chars))
            else:
                next_fragments.append(frag)
        fragments = next_fragments
    final = []
    for frag in fragments:
        if tokenizer.count(frag) > limit:
            final.extend(_hard_split(frag, limit, tokenizer))
        else:
            final.append(frag)
    return final


def segment_article(text: str, cfg: SegmentConfig) -> list[Block]:
    """Greedily pack sentence fragments into blocks under the token limit.

    Deterministic; block order follows the original sentence order. With
    overlap > 0 each block after the first is prefixed with the last
    ``overlap`` tokens of its predecessor (counted in its token_count).
    """
    tokenizer = cfg.get_tokenizer()
    # Blocks after the first carry an `overlap`-token prefix, so fragments
    # must fit the reduced budget to keep every block under the limit.
    budget = cfg.token_limit - cfg.overlap
    fragments: list[str] = []
    for sentence in split_sentences(text):
        if tokenizer.count(sentence) > budget:
            fragments.extend(_fragment_sentence(sentence, budget, tokenizer))
        else:
            fragments.append(sentence)
    if not fragments:
        return []

    groups: list[list[str]] = []
    current: list[str] = []
    current_count = 0
    for frag in fragments:
        n = tokenizer.count(frag)
        limit = cfg.token_limit if not groups else budget
        if current and current_count + n > limit:
            groups.append(current)
            current = []
            current_count = 0
        current.append(frag)
        current_count += n
    if current:
        groups.append(current)

    # Merge a short trailing group into its predecessor, but never push the
    # merged block over the token limit.
    if len(groups) > 1 and cfg.min_block > 0:
        tail_count = sum(tokenizer.count(f) for f in groups[-1])
        prev_count = sum(tokenizer.count(f) for f in groups[-2])
        if tail_count < cfg.min_block and prev_count + tail_count <= cfg.token_limit:
            tail = groups.pop()
            groups[-1].extend(tail)

    blocks = []
    prev_tokens: list[str] = []
    for index, group in enumerate(groups):
        body = " ".join(group)
        if index > 0 and cfg.overlap:
            prefix = " ".join(prev_tokens[-cfg.overlap :])
            body = f"{prefix} {body}" if prefix else body
        blocks.append(Block(index=index, text=body, token_count=tokenizer.count(body)))
        prev_tokens = tokenizer.tokenize(" ".join(group))
    return blocks
