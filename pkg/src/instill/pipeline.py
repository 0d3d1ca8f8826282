"""End-to-end orchestration: corpus -> rated samples -> calibration
artifacts -> cluster distillation -> ratio-mixed training set -> metrics.

Every stochastic stage derives its seed from (global seed, stage name), so
two runs with the same config and inputs produce byte-identical artifacts;
the manifest records a content hash per artifact to make that checkable.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cluster as clustering
from . import gateway, metrics, selection
from .core import (
    InstructionSample,
    ValidationError,
    discretize_rating,
    is_high_quality,
    write_samples,
)
from .embed import HashingEmbedder
from .rewards import RewardScorer, extract_answer, linearize_cluster
from .scoring import build_index, score_query, self_knn
from .segment import SegmentConfig, normalize_ws, segment_article
from .stm import consensus_stats, smooth_stm, solve_stm

TASK_CYCLE = ("qa", "mcq", "cs", "tfq", "para")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def log_event(stage: str, event: str, **fields) -> None:
    record = {"stage": stage, "event": event}
    record.update(fields)
    print(json.dumps(record, ensure_ascii=False), file=sys.stderr)


def stage_seed(global_seed: int, stage: str) -> int:
    digest = hashlib.blake2b(f"{global_seed}:{stage}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass(frozen=True)
class PipelineConfig:
    corpus: str
    out_dir: str = "out"
    seed: int = 0
    mode: str = "mock"
    # segmentation
    token_limit: int = 120
    overlap: int = 0
    min_block: int = 16
    min_chars: int = 200
    # generation
    variants_min: int = 2
    variants_max: int = 4
    cross_topic_fraction: float = 0.1
    noisy_fraction: float = 0.15
    # gateway
    endpoint: str = "mock"
    model: str = "mock-judge"
    max_retries: int = 2
    timeout: float = 30.0
    temperature: float = 0.7
    # embeddings
    embed_dim: int = 64
    # transition model
    stm_order: int = 3
    stm_knn: int = 2
    smoothing_alpha: float = 0.02
    # scoring
    score_k: int = 5
    score_weighting: str = "none"
    # rewards
    weights: tuple[float, float, float] = (0.5, 0.4, 0.1)
    tau: float = 0.7
    # clustering
    cluster_k: int = 0  # 0 = auto
    c_min: int = 2
    c_max: int = 8
    refine_steps: int = 10
    # selection
    budget: int = 100
    mix_ratio: float = 0.7
    k_longtail: int = 10
    # evaluation
    eval_fraction: float = 0.2
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if self.mode not in ("mock", "live"):
            raise ConfigError(f"mode must be mock or live, got {self.mode!r}")
        if self.mode == "mock" and self.endpoint != "mock":
            raise ConfigError("mock mode requires endpoint = 'mock'")
        if self.c_max > 20:
            raise ConfigError("c_max above 20 would exceed the distillation variant bound")

    def out_path(self, name: str) -> Path:
        return Path(self.out_dir) / name

    def gateway_config(self) -> gateway.LlmClientConfig:
        return gateway.LlmClientConfig(
            endpoint="mock" if self.mode == "mock" else self.endpoint,
            model=self.model,
            max_retries=self.max_retries,
            timeout=self.timeout,
            temperature=self.temperature,
        )


_SECTION_KEYS = {
    "segment": {"token_limit", "overlap", "min_block", "min_chars"},
    "generate": {"variants_min", "variants_max", "cross_topic_fraction", "noisy_fraction"},
    "gateway": {"endpoint", "model", "max_retries", "timeout", "temperature"},
    "embed": {"embed_dim"},
    "stm": {"stm_order", "stm_knn", "smoothing_alpha"},
    "scoring": {"score_k", "score_weighting"},
    "rewards": {"weights", "tau"},
    "cluster": {"cluster_k", "c_min", "c_max", "refine_steps"},
    "select": {"budget", "mix_ratio", "k_longtail"},
    "eval": {"eval_fraction"},
}

_SECTION_ALIASES = {
    "embed": {"dim": "embed_dim"},
    "stm": {"order": "stm_order", "knn": "stm_knn"},
    "scoring": {"k": "score_k", "weighting": "score_weighting"},
    "cluster": {"k": "cluster_k"},
}


def load_config(path) -> PipelineConfig:
    """Parse the TOML pipeline config into a validated PipelineConfig."""
    try:
        import tomllib  # Python >= 3.11
    except ImportError:
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    flat: dict = {}
    for key, value in raw.items():
        if isinstance(value, dict):
            known = _SECTION_KEYS.get(key)
            if known is None:
                raise ConfigError(f"unknown config section [{key}]")
            aliases = _SECTION_ALIASES.get(key, {})
            for sub, sub_value in value.items():
                target = aliases.get(sub, sub)
                if target not in known:
                    raise ConfigError(f"unknown key {sub!r} in section [{key}]")
                flat[target] = sub_value
        else:
            flat[key] = value
    if "weights" in flat:
        flat["weights"] = tuple(flat["weights"])
    if "corpus" not in flat:
        raise ConfigError("config must set 'corpus'")
    try:
        cfg = PipelineConfig(**flat)
    except TypeError as exc:
        raise ConfigError(f"bad config key: {exc}") from exc
    return cfg


def read_corpus(path) -> list[dict]:
    articles = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if "id" not in record or "text" not in record:
                raise ValidationError(f"{path}:{lineno}: corpus records need id and text")
            articles.append(record)
    return articles


def segment_corpus(articles: list[dict], cfg: PipelineConfig) -> list[dict]:
    seg_cfg = SegmentConfig(token_limit=cfg.token_limit, overlap=cfg.overlap, min_block=cfg.min_block)
    # same dedup rule as dedupe_and_filter, tracked per article so the first
    # occurrence keeps its article id
    seen: set[str] = set()
    blocks = []
    for article in articles:
        normalized = normalize_ws(article["text"])
        if len(normalized) < cfg.min_chars or normalized in seen:
            continue
        seen.add(normalized)
        for block in segment_article(article["text"], seg_cfg):
            blocks.append(
                {
                    "id": f"{article['id']}#b{block.index}",
                    "article_id": article["id"],
                    "index": block.index,
                    "text": block.text,
                    "token_count": block.token_count,
                }
            )
    return blocks


def generate_candidates(blocks: list[dict], cfg: PipelineConfig, fixture_table=None) -> list[InstructionSample]:
    """High-quality candidate samples from corpus blocks (one prompt per block)."""
    client = cfg.gateway_config()
    samples = []
    for i, block in enumerate(blocks):
        task_type = TASK_CYCLE[i % len(TASK_CYCLE)]
        prompt = gateway.render_prompt(
            gateway.get_template("gen_high"), {"task_type": task_type, "passage": block["text"]}
        )
        response = gateway.complete_with_retry(client, prompt, fixture_table)
        try:
            pairs = gateway.parse_generated_pairs(response)
        except gateway.PairParseError:
            continue
        for j, (instruction, output) in enumerate(pairs):
            samples.append(
                InstructionSample(
                    id=f"{block['id']}#g{j}",
                    instruction=instruction,
                    output=output,
                    task_type=task_type,
                    variant="normal",
                    source=block["article_id"],
                )
            )
    return samples


def generate_variants(
    high_samples: list[InstructionSample], cfg: PipelineConfig, fixture_table=None
) -> list[InstructionSample]:
    """Degraded/cross-topic/noisy variants derived from gated high samples."""
    client = cfg.gateway_config()
    rng = np.random.default_rng(stage_seed(cfg.seed, "variants"))
    variants: list[InstructionSample] = []
    for sample in high_samples:
        n = int(rng.integers(cfg.variants_min, cfg.variants_max + 1))
        orig = f"Instruction: {sample.instruction}\nOutput: {sample.output}"
        prompt = gateway.render_prompt(
            gateway.get_template("gen_low"), {"n": n, "task_type": sample.task_type, "orig": orig}
        )
        response = gateway.complete_with_retry(client, prompt, fixture_table)
        try:
            pairs = gateway.parse_generated_pairs(response)
        except gateway.PairParseError:
            continue
        for j, (instruction, output) in enumerate(pairs[:n]):
            kind = "normal"
            if rng.random() < cfg.noisy_fraction:
                seed = stage_seed(cfg.seed, f"noise:{sample.id}:{j}")
                instruction = gateway.perturb_text(instruction, seed)
                output = gateway.perturb_text(output, seed + 1)
                kind = "noisy"
            variants.append(
                InstructionSample(
                    id=f"{sample.id}#v{j}",
                    instruction=instruction,
                    output=output,
                    task_type=sample.task_type,
                    variant=kind,
                    source=sample.id,
                )
            )
    # cross-topic fusion of same-type highs from different articles
    by_type: dict[str, list[InstructionSample]] = {}
    for sample in high_samples:
        by_type.setdefault(sample.task_type, []).append(sample)
    for task_type, group in sorted(by_type.items()):
        n_pairs = int(len(group) * cfg.cross_topic_fraction / 2)
        for i in range(n_pairs):
            a, b = group[2 * i], group[2 * i + 1]
            if a.source == b.source:
                continue
            prompt = gateway.render_prompt(
                gateway.get_template("fusion"),
                {
                    "task_type": task_type,
                    "text1": f"Instruction: {a.instruction}\nOutput: {a.output}",
                    "text2": f"Instruction: {b.instruction}\nOutput: {b.output}",
                },
            )
            response = gateway.complete_with_retry(client, prompt, fixture_table)
            try:
                pairs = gateway.parse_generated_pairs(response)
            except gateway.PairParseError:
                continue
            instruction, output = pairs[0]
            variants.append(
                InstructionSample(
                    id=f"{a.id}+{b.id}#x",
                    instruction=instruction,
                    output=output,
                    task_type=task_type,
                    variant="cross_topic",
                    source=f"{a.id},{b.id}",
                )
            )
    return variants


def rate_samples(
    samples: list[InstructionSample], cfg: PipelineConfig, fixture_table=None
) -> list[InstructionSample]:
    """Judge each sample; parse failures become label 0."""
    client = cfg.gateway_config()
    rated = []
    for sample in samples:
        prompt = gateway.render_prompt(
            gateway.get_template("rating"),
            {"instruction": sample.instruction, "input": "", "response": sample.output},
        )
        response = gateway.complete_with_retry(client, prompt, fixture_table)
        try:
            vector = gateway.parse_rating(response)
            rated.append(sample.with_rating(vector.overall, discretize_rating(vector.overall)))
        except gateway.GatewayError:
            rated.append(sample.with_rating(None, 0))
    return rated


def embed_samples(samples: list[InstructionSample], cfg: PipelineConfig) -> list[InstructionSample]:
    embedder = HashingEmbedder(dim=cfg.embed_dim)
    return [s.with_embedding(embedder.embed(f"{s.instruction}\n{s.output}")) for s in samples]


def estimate_stm_from_samples(samples: list[InstructionSample], cfg: PipelineConfig):
    embeddings = np.stack([s.embedding for s in samples])
    labels = [s.rating for s in samples]
    knn = self_knn(embeddings, cfg.stm_knn)
    stats = consensus_stats(labels, knn, order=cfg.stm_order)
    model = solve_stm(stats)
    return smooth_stm(model, cfg.smoothing_alpha)


def auto_cluster_k(n: int, c_min: int, c_max: int, target_size: int = 5) -> int:
    lo = -(-n // c_max)  # ceil
    hi = n // c_min
    if lo > hi:
        raise clustering.InfeasibleCapacityError(
            f"no feasible cluster count for N={n} with bounds [{c_min}, {c_max}]"
        )
    return min(max(n // target_size, lo), hi)


def cluster_by_type(
    low_pool: list[InstructionSample], cfg: PipelineConfig
) -> tuple[clustering.ClusterPlan, np.ndarray] | None:
    """Cluster each task type separately and merge into one plan.

    Fused groups must be type-pure, but embedding clusters form around
    topics, so the pool is partitioned by task type first. Cluster ids are
    offset per type. Returns (plan over the kept rows, kept row indices
    into low_pool); types too small to cluster are dropped. None when no
    type is clusterable.
    """
    merged_assignment = np.full(len(low_pool), -1, dtype=np.int64)
    capacity_parts: list[np.ndarray] = []
    center_parts: list[np.ndarray] = []
    offset = 0
    for task_type in TASK_CYCLE:
        rows = np.asarray(
            [i for i, s in enumerate(low_pool) if s.task_type == task_type], dtype=np.int64
        )
        if rows.shape[0] < 2 * cfg.c_min:
            continue
        embeddings = np.stack([low_pool[i].embedding for i in rows])
        k = cfg.cluster_k or auto_cluster_k(rows.shape[0], cfg.c_min, cfg.c_max)
        capacities = clustering.draw_capacities(
            rows.shape[0], k, cfg.c_min, cfg.c_max,
            seed=stage_seed(cfg.seed, f"capacities:{task_type}"),
        )
        centers = clustering.init_centers(
            embeddings, k, seed=stage_seed(cfg.seed, f"centers:{task_type}")
        )
        plan = clustering.assign_with_capacity(embeddings, centers, capacities)
        plan = clustering.refine(plan, embeddings, steps=cfg.refine_steps)
        merged_assignment[rows] = plan.assignment + offset
        capacity_parts.append(plan.capacities.c)
        center_parts.append(plan.centers)
        offset += k
    if not capacity_parts:
        return None
    kept = np.flatnonzero(merged_assignment >= 0)
    centers = np.vstack(center_parts)
    assignment = merged_assignment[kept]
    kept_embeddings = np.stack([low_pool[i].embedding for i in kept])
    objective = float(np.mean(np.sum(kept_embeddings * centers[assignment], axis=1)))
    plan = clustering.ClusterPlan(
        assignment=assignment,
        centers=centers,
        capacities=clustering.CapacityVector(
            c=np.concatenate(capacity_parts),
            c_min=cfg.c_min,
            c_max=cfg.c_max,
            n_points=int(kept.shape[0]),
        ),
        objective=objective,
    )
    return plan, kept


def distill_clusters(
    low_samples: list[InstructionSample],
    plan: clustering.ClusterPlan,
    cfg: PipelineConfig,
    fixture_table=None,
) -> tuple[list[InstructionSample], dict[str, list[int]]]:
    """Fuse each feasible cluster (2..20 members) into one candidate sample.

    Returns the distilled samples and, per distilled id, the member row
    indices (used later for label-free alignment against the variant
    centroid).
    """
    client = cfg.gateway_config()
    distilled = []
    members_of: dict[str, list[int]] = {}
    for k in range(plan.capacities.k):
        rows = plan.members(k)
        if not 2 <= rows.shape[0] <= 20:
            continue
        variants = [low_samples[r] for r in rows]
        if len({v.task_type for v in variants}) != 1:
            # clusters are embedding-driven; skip mixed-type groups
            continue
        prompt = linearize_cluster(variants)
        response = gateway.complete_with_retry(client, prompt, fixture_table)
        answer = extract_answer(response)
        body = answer if answer is not None else response
        try:
            instruction, output = gateway.parse_generated_pairs(body)[0]
        except gateway.PairParseError:
            continue
        sample = InstructionSample(
            id=f"mix-{k:05d}",
            instruction=instruction,
            output=output,
            task_type=variants[0].task_type,
            variant="normal",
            source=",".join(v.id for v in variants),
            extra={"generated_text": response, "cluster": k},
        )
        distilled.append(sample)
        members_of[sample.id] = rows.tolist()
    return distilled, members_of


def run_pipeline(cfg: PipelineConfig, fixture_table=None) -> dict:
    """Execute every stage in dependency order and write the manifest."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts: dict[str, Path] = {}
    stage = "ingest"
    try:
        if not Path(cfg.corpus).exists():
            raise ConfigError(f"corpus path {cfg.corpus} does not exist")
        articles = read_corpus(cfg.corpus)
        blocks = segment_corpus(articles, cfg)
        blocks_path = cfg.out_path("blocks.jsonl")
        with open(blocks_path, "w", encoding="utf-8") as fh:
            for block in blocks:
                fh.write(json.dumps(block, ensure_ascii=False) + "\n")
        artifacts["blocks"] = blocks_path
        log_event(stage, "done", articles=len(articles), blocks=len(blocks))

        stage = "generate"
        candidates = generate_candidates(blocks, cfg, fixture_table)
        log_event(stage, "candidates", count=len(candidates))

        stage = "rate"
        rated_high_candidates = rate_samples(candidates, cfg, fixture_table)
        gated = [s for s in rated_high_candidates if is_high_quality(s.rating)]
        rejected = [s for s in rated_high_candidates if not is_high_quality(s.rating)]
        variants = generate_variants(gated, cfg, fixture_table)
        rated_variants = rate_samples(variants, cfg, fixture_table)
        corpus_samples = embed_samples(rated_high_candidates + rated_variants, cfg)
        rated_path = cfg.out_path("rated.jsonl")
        write_samples(rated_path, corpus_samples)
        artifacts["rated"] = rated_path
        log_event(stage, "done", gated_high=len(gated), rejected=len(rejected), variants=len(rated_variants))

        stage = "estimate-stm"
        reference = [s for s in corpus_samples if s.rating is not None]
        model = estimate_stm_from_samples(reference, cfg)
        stm_path = cfg.out_path("stm.json")
        model.save(stm_path)
        artifacts["stm"] = stm_path
        log_event(stage, "done", residual=model.residual, status=model.meta.get("status"))

        stage = "build-index"
        index = build_index(reference)
        index_path = cfg.out_path("index.bin")
        index.save(index_path)
        artifacts["index"] = index_path
        log_event(stage, "done", size=index.size, mode=index.metadata.get("mode"))

        stage = "cluster"
        low_pool = [s for s in corpus_samples if s.rating is not None and 1 <= s.rating <= 3]
        if len(low_pool) < 2 * cfg.c_min:
            raise ValidationError(f"low-quality pool too small to cluster: {len(low_pool)}")
        clustered = cluster_by_type(low_pool, cfg)
        if clustered is None:
            raise ValidationError("no task type has enough low-quality samples to cluster")
        plan, kept_rows = clustered
        clustered_pool = [low_pool[i] for i in kept_rows]
        plan_path = cfg.out_path("plan.json")
        plan.save(plan_path, seed=cfg.seed, params={"c_min": cfg.c_min, "c_max": cfg.c_max})
        artifacts["plan"] = plan_path
        log_event(stage, "done", clusters=plan.capacities.k, objective=plan.objective)

        stage = "linearize"
        distilled, members_of = distill_clusters(clustered_pool, plan, cfg, fixture_table)
        log_event(stage, "done", distilled=len(distilled))

        stage = "score"
        rated_mixup = embed_samples(rate_samples(distilled, cfg, fixture_table), cfg)
        scorer = RewardScorer(index, model, k=cfg.score_k, weighting=cfg.score_weighting)
        requests = []
        for sample in rated_mixup:
            rows = members_of[sample.id]  # indices into clustered_pool
            requests.append(
                {
                    "id": sample.id,
                    "generated_text": sample.extra.get("generated_text", sample.output),
                    "e_gen": sample.embedding.tolist(),
                    "e_variants": [clustered_pool[r].embedding.tolist() for r in rows],
                }
            )
        responses = scorer.score_batch(requests)
        scored_path = cfg.out_path("mixup_scored.jsonl")
        mixup_pool = []
        with open(scored_path, "w", encoding="utf-8") as fh:
            by_id = {s.id: s for s in rated_mixup}
            for response in responses:
                fh.write(json.dumps(response, ensure_ascii=False) + "\n")
                if "error" not in response:
                    mixup_pool.append(by_id[response["id"]])
        artifacts["mixup_scored"] = scored_path
        log_event(stage, "done", scored=len(mixup_pool), errors=len(responses) - len(mixup_pool))

        stage = "select"
        gated_ids = {s.id for s in gated}
        original_pool = [s for s in corpus_samples if s.id in gated_ids]
        mixup_embeddings = np.stack([s.embedding for s in mixup_pool])
        original_embeddings = np.stack([s.embedding for s in original_pool])
        sel_cfg = selection.SelectionConfig(
            budget=cfg.budget,
            mix_ratio=cfg.mix_ratio,
            k_longtail=min(cfg.k_longtail, len(mixup_pool) - 1, len(original_pool) - 1),
        )
        chosen = selection.mix_select(
            mixup_pool,
            selection.longtail_score(mixup_embeddings, sel_cfg.k_longtail),
            original_pool,
            selection.longtail_score(original_embeddings, sel_cfg.k_longtail),
            sel_cfg,
        )
        train_path = cfg.out_path("train.jsonl")
        write_samples(train_path, chosen)
        artifacts["train"] = train_path
        log_event(stage, "done", selected=len(chosen))

        stage = "eval"
        labels = np.asarray([s.rating for s in reference])
        ref_idx, eval_idx = stratified_eval_split(labels, cfg)
        ref_index = build_index([reference[i] for i in ref_idx])
        scores = []
        for i in eval_idx:
            _, s_hat, _ = score_query(
                ref_index, model, reference[i].embedding, k=cfg.score_k, weighting=cfg.score_weighting
            )
            scores.append(s_hat)
        report = metrics.consistency_report(scores, labels[eval_idx], model.num_labels)
        report_path = cfg.out_path("report.json")
        report.save(report_path)
        chart_path = cfg.out_path("residuals.svg")
        chart_path.write_text(metrics.residual_chart_svg(report.residual_hist), encoding="utf-8")
        text_path = cfg.out_path("residuals.txt")
        text_path.write_text(metrics.residual_chart_text(report.residual_hist), encoding="utf-8")
        artifacts["report"] = report_path
        artifacts["residuals_svg"] = chart_path
        artifacts["residuals_txt"] = text_path
        log_event(stage, "done", js=report.js, mae=report.mae, n=report.n)
    except (ConfigError, ValidationError, clustering.InfeasibleCapacityError, selection.QuotaError):
        raise
    except Exception as exc:
        raise StageError(stage, exc) from exc

    manifest = {
        "seed": cfg.seed,
        "mode": cfg.mode,
        "artifacts": [
            {
                "name": name,
                "path": str(path),
                "sha256": file_sha256(path),
                "bytes": path.stat().st_size,
            }
            for name, path in artifacts.items()
        ],
    }
    manifest_path = cfg.out_path("manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log_event("run", "manifest", path=str(manifest_path), artifacts=len(manifest["artifacts"]))
    return manifest


def stratified_eval_split(labels: np.ndarray, cfg: PipelineConfig):
    # classes with a single member cannot be stratified; fold them into the
    # reference side rather than failing the whole pipeline
    classes, counts = np.unique(labels, return_counts=True)
    singletons = set(classes[counts < 2].tolist())
    if singletons:
        keep = np.asarray([label not in singletons for label in labels])
        keep_idx = np.flatnonzero(keep)
        ref_rel, eval_rel = metrics.stratified_split(
            labels[keep_idx], cfg.eval_fraction, seed=stage_seed(cfg.seed, "split")
        )
        ref = np.sort(np.concatenate([keep_idx[ref_rel], np.flatnonzero(~keep)]))
        return ref, keep_idx[eval_rel]
    return metrics.stratified_split(labels, cfg.eval_fraction, seed=stage_seed(cfg.seed, "split"))
