"""Prompt rendering, chat-completion calls, and response parsing.

This is the only module that performs network I/O. The default endpoint is
"mock": a deterministic in-process client that synthesizes responses keyed
by a hash of the prompt, so pipelines are reproducible without credentials.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import re
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .core import RatingVector, ValidationError

API_KEY_ENV = "INSTILL_API_KEY"

RATING_SCHEMA_BLOCK = """{"Rarity": <number, 1-10>,
 "Complexity": <number, 1-10>,
 "Informativeness": <number, 1-10>,
 "Overall rating": <number, 1-10>}"""

PAIR_FORMAT_BLOCK = """Instruction: <instruction 1>
Output: <output 1>

Instruction: <instruction 2>
Output: <output 2>

Instruction: <instruction 3>
Output: <output 3>"""

GEN_HIGH_TEMPLATE = f"""You are a knowledgeable assistant tasked with producing exceptionally high-quality {{task_type}} instances that will later be rated on four axes: Rarity, Complexity, Informativeness, and Overall.

Scoring criteria:
- Rarity (1-10): cover non-obvious, less-quoted aspects; avoid commonplace trivia.
- Complexity (1-10): require synthesis of multiple facts, causal or temporal links, or non-trivial reasoning; avoid single-sentence lookups.
- Informativeness (1-10): deliver dense, relevant, non-trivial content, even if concise; add value beyond superficial recall.
- Overall (1-10): aggregate impression; aim for the top tier when justified.

Requirements:
1. Generate 3-4 high-quality {{task_type}} instances based on the passage below.
2. For each instance, explicitly maximize the four criteria above.
3. You may quote or paraphrase the passage, but weave information to show reasoning and uniqueness; avoid verbatim copying when unnecessary.
4. Length is flexible; prioritize informativeness and reasoning over verbosity.
5. Use plain text only in the following exact format (no markdown):

{PAIR_FORMAT_BLOCK}

Passage:
{{passage}}"""

GEN_LOW_TEMPLATE = f"""You are a moderately skilled assistant tasked with producing {{n}} low-quality {{task_type}} instances derived from the given original data. Each generated instance should deliberately reflect average quality, aiming for scores between 3-6 (on a 10-point scale) on four evaluation axes: Rarity, Complexity, Informativeness, and Overall.

Scoring criteria:
- Rarity (3-6): cover reasonably common aspects; avoid both overly trivial and highly novel content.
- Complexity (3-6): allow some light inference but avoid deep reasoning or multi-step logic.
- Informativeness (3-6): ensure answers are mostly correct but lack nuance, depth, or precision.
- Overall (3-6): the overall impression should feel average, slightly useful, somewhat generic, and unpolished.

Hard constraints:
1. Same topic: all {{task_type}} instances must stay on the identical topic as the original.
2. Explicit subject: the main subject or event must be stated verbatim in every question and answer; avoid vague pronouns unless the noun is immediately repeated.
3. Self-contained: each {{task_type}} must be understandable in isolation; assume no external context.
4. No off-topic content: do not introduce unrelated domains or shift the factual focus.

Output requirements:
1. Generate {{n}} {{task_type}} instances based on the original data.
2. Maintain moderate quality (scores 3-6) on all four evaluation axes.
3. Use plain text only in the exact format below (no markdown):

{PAIR_FORMAT_BLOCK}

Original data:
{{orig}}"""

FUSION_TEMPLATE = """You are a data fusion expert tasked with merging two {task_type} instances into a single, coherent, and high-quality {task_type} instance. The goal is to synthesize both original samples into one unified output that naturally connects the information from both inputs while maintaining high quality.

Fusion requirements:
1. Merge the two original {task_type} samples into one concise, integrated instance.
2. The unified output must address both original inputs comprehensively while avoiding redundancy or contradiction.
3. The fusion should capture subtle conceptual links, rather than simply stacking facts together.
4. Ensure the final output maximizes Rarity, Complexity, Informativeness, and Overall quality.

Output format:
Instruction: <your merged instruction>
Output: <your merged output>

Original instances:
Instance-1:
{text1}

Instance-2:
{text2}"""

RATING_TEMPLATE = f"""As a data quality estimator, your task is to assess the quality of the data sample based on the criteria: Rarity, Complexity, and Informativeness. Please rate the sample on a scale from 1 to 10 for each criterion, and return an overall rating on a scale from 1 to 10, where a higher score indicates a higher level of quality. Ensure that the ratings are not overly concentrated around a specific score. If multiple samples have similar qualities, consider spreading the scores more evenly to reflect subtle differences.

Please carefully evaluate the following data sample and return the integral evaluation scores using the JSON format:
{RATING_SCHEMA_BLOCK}

Instruction: {{instruction}}
Input: {{input}}
Response: {{response}}"""

_TEMPLATE_BODIES = {
    "gen_high": GEN_HIGH_TEMPLATE,
    "gen_low": GEN_LOW_TEMPLATE,
    "fusion": FUSION_TEMPLATE,
    "rating": RATING_TEMPLATE,
}

_PLACEHOLDER_RE = re.compile(
    r"\{(task_type|passage|orig|n|text1|text2|instruction|input|response)\}"
)

_PAIR_RE = re.compile(
    r"Instruction:\s*(.*?)\s*Output:\s*(.*?)\s*(?=Instruction:|\Z)", re.DOTALL
)

_RATING_KEYS = {
    "Rarity": "rarity",
    "Complexity": "complexity",
    "Informativeness": "informativeness",
    "Overall rating": "overall",
}


class GatewayError(RuntimeError):
    """Base class for prompt/response and transport failures."""


class MissingPlaceholderError(GatewayError):
    pass


class RatingParseError(GatewayError):
    pass


class PairParseError(GatewayError):
    pass


class ExhaustedRetriesError(GatewayError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str

    @property
    def placeholders(self) -> frozenset[str]:
        return frozenset(_PLACEHOLDER_RE.findall(self.body))


def get_template(name: str) -> PromptTemplate:
    try:
        return PromptTemplate(name=name, body=_TEMPLATE_BODIES[name])
    except KeyError:
        raise GatewayError(f"unknown prompt template {name!r}") from None


def render_prompt(template: PromptTemplate, vars: dict) -> str:
    """Substitute named placeholders verbatim; any missing one is an error."""
    missing = template.placeholders - set(vars)
    if missing:
        raise MissingPlaceholderError(
            f"template {template.name!r} missing placeholders: {sorted(missing)}"
        )
    return _PLACEHOLDER_RE.sub(lambda m: str(vars[m.group(1)]), template.body)


def _first_json_object(raw: str) -> dict | None:
    for start in range(len(raw)):
        if raw[start] != "{":
            continue
        depth = 0
        in_string = False
        escaped = False
        for i in range(start, len(raw)):
            ch = raw[i]
            if in_string:
                if escaped:
                    escaped = False
                elif ch == "\\":
                    escaped = True
                elif ch == '"':
                    in_string = False
                continue
            if ch == '"':
                in_string = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    try:
                        obj = json.loads(raw[start : i + 1])
                    except json.JSONDecodeError:
                        break
                    if isinstance(obj, dict):
                        return obj
                    break
        # fall through: try the next opening brace
    return None


def parse_rating(raw: str) -> RatingVector:
    """Extract the first JSON object and map it onto the four 1..10 scores.

    Callers treat any failure here as quality label 0 (unparseable rating).
    """
    obj = _first_json_object(raw)
    if obj is None:
        raise RatingParseError("no JSON object found in rating response")
    values = {}
    for key, attr in _RATING_KEYS.items():
        if key not in obj:
            raise RatingParseError(f"rating response missing key {key!r}")
        value = obj[key]
        if isinstance(value, bool) or not isinstance(value, int):
            raise RatingParseError(f"rating key {key!r} is not an integer: {value!r}")
        if not 1 <= value <= 10:
            raise RatingParseError(f"rating key {key!r} out of range [1, 10]: {value}")
        values[attr] = value
    return RatingVector(**values)


def parse_generated_pairs(raw: str) -> list[tuple[str, str]]:
    """Split a plain-text response on Instruction:/Output: markers.

    Complete pairs are returned in order; an incomplete trailing pair is
    dropped. Zero complete pairs is an error.
    """
    pairs = [
        (instruction.strip(), output.strip())
        for instruction, output in _PAIR_RE.findall(raw)
        if instruction.strip() and output.strip()
    ]
    if not pairs:
        raise PairParseError("no complete Instruction/Output pairs in response")
    return pairs


@dataclass(frozen=True)
class LlmClientConfig:
    endpoint: str = "mock"
    model: str = "mock-judge"
    max_retries: int = 2
    timeout: float = 30.0
    temperature: float = 0.7
    retry_backoff: float = 0.5

    def __post_init__(self) -> None:
        if not 0 <= self.max_retries <= 10:
            raise ValidationError(f"max_retries must be in [0, 10], got {self.max_retries}")
        if self.timeout <= 0:
            raise ValidationError("timeout must be positive")


def prompt_key(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


_WORD_RE = re.compile(r"[A-Za-z][A-Za-z\-]+")


def _source_words(prompt: str, limit: int = 120) -> list[str]:
    """Content words from the tail of the prompt (the passage/data section)."""
    tail = prompt[-2000:]
    words = [w.lower() for w in _WORD_RE.findall(tail) if len(w) > 3]
    return words[-limit:] if words else ["topic"]


def _mock_sentence(rng: random.Random, words: list[str], length: int) -> str:
    chosen = [rng.choice(words) for _ in range(length)]
    chosen[0] = chosen[0].capitalize()
    return " ".join(chosen) + "."


def _mock_pairs(prompt: str, rng: random.Random, n_pairs: int, rich: bool) -> str:
    words = _source_words(prompt)
    sections = []
    for _ in range(n_pairs):
        q_len = rng.randint(8, 14) if rich else rng.randint(5, 9)
        a_sentences = rng.randint(3, 5) if rich else rng.randint(1, 2)
        a_len = rng.randint(12, 20) if rich else rng.randint(6, 10)
        instruction = _mock_sentence(rng, words, q_len)[:-1] + "?"
        output = " ".join(_mock_sentence(rng, words, a_len) for _ in range(a_sentences))
        sections.append(f"Instruction: {instruction}\nOutput: {output}")
    return "\n\n".join(sections)


def _mock_rating(prompt: str, rng: random.Random) -> str:
    # Heuristic judge: longer and lexically richer responses score higher,
    # with hash-seeded jitter standing in for judge noise.
    response_section = prompt.rsplit("Response:", 1)[-1]
    words = _WORD_RE.findall(response_section)
    unique = len({w.lower() for w in words})
    base = 3 + min(6, unique // 9)
    scores = {}
    for key in ("Rarity", "Complexity", "Informativeness"):
        scores[key] = max(1, min(10, base + rng.randint(-2, 1)))
    scores["Overall rating"] = max(1, min(10, base + rng.randint(-1, 1)))
    return json.dumps(scores)


def mock_complete(prompt: str, fixture_table: dict[str, str] | None = None) -> str:
    """Deterministic response synthesis keyed by a hash of the prompt.

    An entry in ``fixture_table`` (prompt sha256 -> response) takes
    precedence over synthesis, so exact transcripts can be replayed.
    """
    key = prompt_key(prompt)
    if fixture_table and key in fixture_table:
        return fixture_table[key]
    rng = random.Random(int(key[:16], 16))
    if '"Rarity"' in prompt:
        return _mock_rating(prompt, rng)
    if "data fusion expert" in prompt:
        words = _source_words(prompt)
        instruction = _mock_sentence(rng, words, rng.randint(10, 16))[:-1] + "?"
        body = " ".join(_mock_sentence(rng, words, rng.randint(14, 22)) for _ in range(4))
        if rng.random() < 0.7:
            plan = _mock_sentence(rng, words, rng.randint(8, 12))
            body = f"<think>{plan}</think><answer>{body}</answer>"
        return f"Instruction: {instruction}\nOutput: {body}"
    if "reasoning inside <think>" in prompt:
        # distillation request: one fused instance, usually in the
        # <think>/<answer> template so format scoring sees both outcomes
        words = _source_words(prompt)
        instruction = _mock_sentence(rng, words, rng.randint(9, 15))[:-1] + "?"
        output = " ".join(_mock_sentence(rng, words, rng.randint(12, 18)) for _ in range(3))
        pair = f"Instruction: {instruction}\nOutput: {output}"
        if rng.random() < 0.7:
            plan = _mock_sentence(rng, words, rng.randint(8, 12))
            return f"<think>{plan}</think><answer>{pair}</answer>"
        return pair
    rich = "exceptionally high-quality" in prompt
    n_pairs = 3 if rich else _requested_count(prompt, rng)
    return _mock_pairs(prompt, rng, n_pairs, rich)


def _requested_count(prompt: str, rng: random.Random) -> int:
    match = re.search(r"producing (\d+) low-quality", prompt)
    if match:
        return max(1, min(8, int(match.group(1))))
    return rng.randint(3, 4)


def load_fixture_table(path) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        table = json.load(fh)
    if not isinstance(table, dict):
        raise GatewayError("fixture table must be a JSON object of hash -> response")
    return table


def _http_complete(cfg: LlmClientConfig, prompt: str) -> str:
    payload = json.dumps(
        {
            "model": cfg.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": cfg.temperature,
        }
    ).encode("utf-8")
    headers = {"Content-Type": "application/json"}
    api_key = os.environ.get(API_KEY_ENV)
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    request = urllib.request.Request(cfg.endpoint, data=payload, headers=headers, method="POST")
    with urllib.request.urlopen(request, timeout=cfg.timeout) as response:
        body = json.loads(response.read().decode("utf-8"))
    try:
        return body["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise GatewayError(f"malformed completion response: {exc}") from exc


def complete_with_retry(cfg: LlmClientConfig, prompt: str, fixture_table: dict[str, str] | None = None) -> str:
    """Return the completion text, retrying transient transport failures.

    Mock mode never fails and never sleeps. Live mode attempts the call
    1 + max_retries times, backing off between attempts; the API key is
    read from the environment and never logged.
    """
    if cfg.endpoint == "mock":
        return mock_complete(prompt, fixture_table)
    last_error: Exception | None = None
    for attempt in range(cfg.max_retries + 1):
        try:
            return _http_complete(cfg, prompt)
        except (urllib.error.HTTPError, urllib.error.URLError, TimeoutError) as exc:
            if isinstance(exc, urllib.error.HTTPError) and exc.code < 500:
                raise GatewayError(f"endpoint rejected request: HTTP {exc.code}") from exc
            last_error = exc
            if attempt < cfg.max_retries and cfg.retry_backoff > 0:
                time.sleep(cfg.retry_backoff * (2**attempt))
    raise ExhaustedRetriesError(
        f"completion failed after {cfg.max_retries + 1} attempts: {last_error}"
    )


def complete_many(
    cfg: LlmClientConfig,
    prompts: list[str],
    max_concurrency: int = 4,
    fixture_table: dict[str, str] | None = None,
) -> list[str]:
    """Complete a batch; results are index-aligned, never arrival-ordered."""
    if cfg.endpoint == "mock" or max_concurrency <= 1:
        return [complete_with_retry(cfg, p, fixture_table) for p in prompts]
    with ThreadPoolExecutor(max_workers=max_concurrency) as pool:
        futures = [pool.submit(complete_with_retry, cfg, p, fixture_table) for p in prompts]
        return [f.result() for f in futures]


@dataclass(frozen=True)
class NoiseConfig:
    """Rates for the deterministic surface perturber (per-character)."""

    swap_rate: float = 0.01
    whitespace_rate: float = 0.005
    case_flip_rate: float = 0.005


def perturb_text(text: str, seed: int, cfg: NoiseConfig = NoiseConfig()) -> str:
    """Inject seeded surface noise: adjacent-character swaps, doubled
    whitespace, and case flips. Same (text, seed) -> same output."""
    rng = random.Random(seed)
    chars = list(text)
    i = 0
    out: list[str] = []
    while i < len(chars):
        ch = chars[i]
        if ch.isspace():
            out.append(ch * 2 if rng.random() < cfg.whitespace_rate else ch)
            i += 1
            continue
        roll = rng.random()
        if roll < cfg.swap_rate and i + 1 < len(chars) and not chars[i + 1].isspace():
            out.append(chars[i + 1])
            out.append(ch)
            i += 2
        elif roll < cfg.swap_rate + cfg.case_flip_rate and ch.isalpha():
            out.append(ch.lower() if ch.isupper() else ch.upper())
            i += 1
        else:
            out.append(ch)
            i += 1
    return "".join(out)
