import pytest

from instill.segment import (
    Block,
    RegexTokenizer,
    SegmentConfig,
    SidecarTokenizer,
    dedupe_and_filter,
    segment_article,
    split_sentences,
)


def test_dedupe_normalizes_whitespace():
    assert dedupe_and_filter(["a a", "a  a", "b"], min_chars=1) == ["a a", "b"]


def test_dedupe_length_filter():
    assert dedupe_and_filter(["short", "long enough text"], min_chars=10) == ["long enough text"]


def test_dedupe_empty():
    assert dedupe_and_filter([], min_chars=1) == []


def test_split_sentences_boundaries():
    assert split_sentences("A. B! C?") == ["A.", "B!", "C?"]


def test_split_sentences_no_terminal():
    assert split_sentences("no terminal punctuation") == ["no terminal punctuation"]


def test_split_sentences_empty():
    assert split_sentences("") == []


def test_split_sentences_closing_quote():
    assert split_sentences('He said "stop." Then left.') == ['He said "stop."', "Then left."]


def _counts(blocks: list[Block]) -> list[int]:
    return [b.token_count for b in blocks]


def test_greedy_break_at_limit():
    # three 5-token sentences with an 8-token budget: 5+5 > 8 forces breaks
    text = "one two three four five. six seven eight nine ten. a b c d e."
    cfg = SegmentConfig(token_limit=8, overlap=0, min_block=0)
    blocks = segment_article(text, cfg)
    assert len(blocks) == 3
    assert all(b.token_count == 6 for b in blocks)  # 5 words + terminal period


def test_greedy_packs_when_it_fits():
    text = "one two three. four five six."
    cfg = SegmentConfig(token_limit=10, overlap=0, min_block=0)
    blocks = segment_article(text, cfg)
    assert len(blocks) == 1
    assert blocks[0].text == "one two three. four five six."


def test_empty_text_gives_no_blocks():
    assert segment_article("", SegmentConfig(token_limit=8, min_block=0)) == []


def test_reconstruction_with_zero_overlap():
    text = " ".join(f"word{i} token filler sentence {i}." for i in range(40))
    cfg = SegmentConfig(token_limit=16, overlap=0, min_block=0)
    blocks = segment_article(text, cfg)
    assert " ".join(b.text for b in blocks) == " ".join(split_sentences(text))


def test_block_indices_are_sequential():
    text = " ".join(f"sentence number {i} with several words inside." for i in range(30))
    blocks = segment_article(text, SegmentConfig(token_limit=20, overlap=0, min_block=0))
    assert [b.index for b in blocks] == list(range(len(blocks)))


def test_no_block_exceeds_limit():
    text = " ".join(f"some sentence {i} runs on with many words." for i in range(50))
    cfg = SegmentConfig(token_limit=12, overlap=0, min_block=0)
    assert all(b.token_count <= 12 for b in segment_article(text, cfg))


def test_overlong_sentence_split_at_commas():
    text = "alpha beta gamma, delta epsilon zeta, eta theta iota."
    cfg = SegmentConfig(token_limit=5, overlap=0, min_block=0)
    blocks = segment_article(text, cfg)
    assert all(b.token_count <= 5 for b in blocks)
    joined = " ".join(b.text for b in blocks)
    assert joined.replace(" ", "") == text.replace(" ", "")


def test_overlong_sentence_hard_split():
    text = "w1 w2 w3 w4 w5 w6 w7 w8 w9 w10 w11"
    cfg = SegmentConfig(token_limit=4, overlap=0, min_block=0)
    blocks = segment_article(text, cfg)
    assert all(b.token_count <= 4 for b in blocks)
    assert " ".join(b.text for b in blocks) == text


def test_min_block_merges_short_tail():
    # tail of 2 tokens merges into the previous block when it still fits
    text = "one two three four. five six."
    cfg = SegmentConfig(token_limit=12, overlap=0, min_block=6)
    blocks = segment_article(text, cfg)
    assert len(blocks) == 1
    assert blocks[0].text == "one two three four. five six."


def test_min_block_merge_respects_limit():
    # merging would exceed the limit, so the short tail survives
    text = "one two three four five six seven eight. nine ten."
    cfg = SegmentConfig(token_limit=10, overlap=0, min_block=4)
    blocks = segment_article(text, cfg)
    assert len(blocks) == 2
    assert all(b.token_count <= 10 for b in blocks)


def test_overlap_prefixes_next_block():
    text = "one two three four. five six seven eight."
    cfg = SegmentConfig(token_limit=8, overlap=2, min_block=0)
    blocks = segment_article(text, cfg)
    assert len(blocks) == 2
    assert blocks[1].text.startswith("four .") or blocks[1].text.startswith("four.")
    assert all(b.token_count <= 8 for b in blocks)


def test_determinism():
    text = " ".join(f"sentence {i} has words, commas, and more." for i in range(25))
    cfg = SegmentConfig(token_limit=15, overlap=3, min_block=4)
    one = segment_article(text, cfg)
    two = segment_article(text, cfg)
    assert one == two


def test_config_validation():
    with pytest.raises(ValueError):
        SegmentConfig(token_limit=0)
    with pytest.raises(ValueError):
        SegmentConfig(token_limit=8, overlap=8)
    with pytest.raises(ValueError):
        SegmentConfig(token_limit=8, min_block=9)


def test_sidecar_tokenizer_overrides_counts():
    sidecar = SidecarTokenizer({"hello world": 99})
    assert sidecar.count("hello world") == 99
    assert sidecar.count("other text") == RegexTokenizer().count("other text")
