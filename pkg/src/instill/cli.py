"""Command-line entrypoint wiring all pipeline stages.

Exit codes: 0 success, 2 configuration/validation error, 3 stage failure,
4 infeasible constraint (capacity or selection quota).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import cluster as clustering
from . import gateway, grpo, metrics, pipeline, selection, service
from .core import ValidationError, read_samples, write_samples
from .embed import HashingEmbedder
from .rewards import AlignmentParams, RewardScorer, RewardWeights, linearize_cluster
from .scoring import ReferenceIndex, build_index, score_query
from .stm import ScoreTransitionModel

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3
EXIT_INFEASIBLE = 4


def _load_fixture(path: str | None):
    return gateway.load_fixture_table(path) if path else None


def cmd_segment(args) -> int:
    articles = pipeline.read_corpus(args.infile)
    cfg = pipeline.PipelineConfig(
        corpus=args.infile,
        token_limit=args.token_limit,
        overlap=args.overlap,
        min_block=args.min_block,
        min_chars=args.min_chars,
    )
    blocks = pipeline.segment_corpus(articles, cfg)
    with open(args.out, "w", encoding="utf-8") as fh:
        for block in blocks:
            fh.write(json.dumps(block, ensure_ascii=False) + "\n")
    pipeline.log_event("segment", "done", blocks=len(blocks), out=args.out)
    return EXIT_OK


def _gateway_cfg(args) -> pipeline.PipelineConfig:
    return pipeline.PipelineConfig(
        corpus="-",
        mode="mock" if args.endpoint == "mock" else "live",
        endpoint=args.endpoint,
        model=args.model,
        seed=args.seed,
    )


def cmd_generate(args) -> int:
    blocks = [json.loads(line) for line in open(args.blocks, encoding="utf-8") if line.strip()]
    cfg = _gateway_cfg(args)
    samples = pipeline.generate_candidates(blocks, cfg, _load_fixture(args.fixtures))
    write_samples(args.out, samples)
    pipeline.log_event("generate", "done", samples=len(samples), out=args.out)
    return EXIT_OK


def cmd_rate(args) -> int:
    samples = read_samples(args.infile)
    cfg = _gateway_cfg(args)
    rated = pipeline.rate_samples(samples, cfg, _load_fixture(args.fixtures))
    if args.embed_dim:
        embedder = HashingEmbedder(dim=args.embed_dim)
        rated = [s.with_embedding(embedder.embed(f"{s.instruction}\n{s.output}")) for s in rated]
    write_samples(args.out, rated)
    pipeline.log_event("rate", "done", samples=len(rated), out=args.out)
    return EXIT_OK


def cmd_estimate_stm(args) -> int:
    samples = [s for s in read_samples(args.infile) if s.rating is not None and s.embedding is not None]
    if not samples:
        raise ValidationError("no rated, embedded samples in input")
    cfg = pipeline.PipelineConfig(
        corpus="-", stm_order=args.order, stm_knn=args.knn, smoothing_alpha=args.alpha
    )
    model = pipeline.estimate_stm_from_samples(samples, cfg)
    model.save(args.out)
    pipeline.log_event(
        "estimate-stm", "done", residual=model.residual, status=model.meta.get("status"), out=args.out
    )
    return EXIT_OK


def cmd_build_index(args) -> int:
    samples = read_samples(args.infile)
    index = build_index(samples)
    index.save(args.out)
    pipeline.log_event("build-index", "done", size=index.size, out=args.out)
    return EXIT_OK


def cmd_score(args) -> int:
    index = ReferenceIndex.load(args.index)
    model = ScoreTransitionModel.load(args.stm)
    n = 0
    with open(args.infile, encoding="utf-8") as fh, open(args.out, "w", encoding="utf-8") as out:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            embedding = record.get("embedding")
            if embedding is None:
                record["error"] = "missing embedding"
            else:
                post, s_hat, r_q = score_query(
                    index, model, np.asarray(embedding, dtype=np.float64),
                    k=args.k, weighting=args.weighting,
                )
                record["posterior"] = [float(x) for x in post]
                record["s_hat"] = s_hat
                record["r_q"] = r_q
            out.write(json.dumps(record, ensure_ascii=False) + "\n")
            n += 1
    pipeline.log_event("score", "done", records=n, out=args.out)
    return EXIT_OK


def cmd_cluster(args) -> int:
    samples = read_samples(args.infile)
    missing = [s.id for s in samples if s.embedding is None]
    if missing:
        raise ValidationError(f"samples missing embeddings: {missing[:5]}")
    embeddings = np.stack([s.embedding for s in samples])
    capacities = clustering.draw_capacities(
        embeddings.shape[0], args.k, args.cmin, args.cmax, seed=args.seed
    )
    centers = clustering.init_centers(embeddings, args.k, seed=args.seed)
    plan = clustering.assign_with_capacity(embeddings, centers, capacities)
    plan = clustering.refine(plan, embeddings, steps=args.refine_steps)
    plan.save(args.out, seed=args.seed, params={"k": args.k, "cmin": args.cmin, "cmax": args.cmax})
    pipeline.log_event("cluster", "done", clusters=args.k, objective=plan.objective, out=args.out)
    return EXIT_OK


def cmd_linearize(args) -> int:
    samples = read_samples(args.infile)
    plan = clustering.ClusterPlan.load(args.plan)
    if plan.assignment.shape[0] != len(samples):
        raise ValidationError("plan does not cover the input samples")
    n = 0
    with open(args.out, "w", encoding="utf-8") as out:
        for k in range(plan.capacities.k):
            rows = plan.members(k)
            if not 2 <= rows.shape[0] <= 20:
                continue
            variants = [samples[r] for r in rows]
            prompt = linearize_cluster(variants)
            out.write(
                json.dumps(
                    {"cluster": k, "variant_ids": [v.id for v in variants], "prompt": prompt},
                    ensure_ascii=False,
                )
                + "\n"
            )
            n += 1
    pipeline.log_event("linearize", "done", prompts=n, out=args.out)
    return EXIT_OK


def _parse_weights(text: str) -> RewardWeights:
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 3:
        raise ValidationError("weights must be three comma-separated numbers")
    return RewardWeights(*parts)


def cmd_serve(args) -> int:
    index = ReferenceIndex.load(args.index)
    model = ScoreTransitionModel.load(args.stm)
    scorer = RewardScorer(
        index,
        model,
        embedder=HashingEmbedder(dim=index.dim),
        weights=_parse_weights(args.weights),
        alignment=AlignmentParams(tau=args.tau),
        k=args.k,
    )
    if args.http:
        hashes = {"index": index.content_hash(), "stm": pipeline.file_sha256(args.stm)}
        server = service.make_http_server(scorer, hashes, port=args.http)
        pipeline.log_event("serve", "listening", port=args.http)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
        return EXIT_OK
    n = service.serve_ndjson(scorer, sys.stdin, sys.stdout)
    pipeline.log_event("serve", "done", responses=n)
    return EXIT_OK


def _read_groups(path) -> list[grpo.GroupRollout]:
    groups = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            groups.append(
                grpo.GroupRollout(
                    prompt_id=str(record["prompt_id"]),
                    rewards=tuple(record["rewards"]),
                    logp_new=_tuples(record.get("logp_new")),
                    logp_old=_tuples(record.get("logp_old")),
                    logp_ref=_tuples(record.get("logp_ref")),
                )
            )
    return groups


def _tuples(seqs):
    return None if seqs is None else tuple(tuple(s) for s in seqs)


def cmd_advantages(args) -> int:
    groups = _read_groups(args.infile)
    with open(args.out, "w", encoding="utf-8") as out:
        for group in groups:
            adv = grpo.group_normalize(group.rewards, args.eps)
            out.write(
                json.dumps({"prompt_id": group.prompt_id, "advantages": [float(a) for a in adv]})
                + "\n"
            )
    pipeline.log_event("advantages", "done", groups=len(groups), out=args.out)
    return EXIT_OK


def cmd_objective(args) -> int:
    groups = _read_groups(args.infile)
    params = grpo.GrpoParams(eps_std=args.eps, eps_clip=args.clip, beta_kl=args.beta_kl)
    result = grpo.grpo_objective(groups, params)
    json.dump(result, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return EXIT_OK


def cmd_select(args) -> int:
    mixup_pool = read_samples(args.mixup)
    original_pool = read_samples(args.original)
    for name, pool in (("mixup", mixup_pool), ("original", original_pool)):
        if any(s.embedding is None for s in pool):
            raise ValidationError(f"{name} pool has samples without embeddings")
    cfg = selection.SelectionConfig(budget=args.budget, mix_ratio=args.ratio, k_longtail=args.k_longtail)
    chosen = selection.mix_select(
        mixup_pool,
        selection.longtail_score(np.stack([s.embedding for s in mixup_pool]), cfg.k_longtail),
        original_pool,
        selection.longtail_score(np.stack([s.embedding for s in original_pool]), cfg.k_longtail),
        cfg,
    )
    write_samples(args.out, chosen)
    pipeline.log_event("select", "done", selected=len(chosen), out=args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    predictions = {}
    with open(args.pred, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                record = json.loads(line)
                if "s_hat" in record and record.get("id") is not None:
                    predictions[record["id"]] = float(record["s_hat"])
    raw = {s.id: s.rating for s in read_samples(args.raw) if s.rating is not None}
    shared = sorted(predictions.keys() & raw.keys())
    if not shared:
        raise ValidationError("no overlapping ids between predictions and raw ratings")
    scores = [predictions[i] for i in shared]
    labels = [raw[i] for i in shared]
    report = metrics.consistency_report(scores, labels, num_labels=6)
    report.save(args.report)
    if args.plot:
        Path(args.plot).write_text(metrics.residual_chart_svg(report.residual_hist), encoding="utf-8")
    pipeline.log_event("eval", "done", js=report.js, mae=report.mae, n=report.n)
    return EXIT_OK


def cmd_run(args) -> int:
    from dataclasses import replace

    cfg = pipeline.load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    if args.corpus is not None:
        overrides["corpus"] = args.corpus
    if overrides:
        cfg = replace(cfg, **overrides)
    if cfg.corpus == "bundled":
        cfg = replace(cfg, corpus=str(bundled_corpus_path()))
    manifest = pipeline.run_pipeline(cfg, _load_fixture(args.fixtures))
    json.dump(manifest, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return EXIT_OK


def bundled_corpus_path() -> Path:
    from importlib.resources import files

    return Path(str(files("instill").joinpath("data/fixture_corpus.jsonl")))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="instill", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="split articles into token-budgeted blocks")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--token-limit", type=int, required=True)
    p.add_argument("--overlap", type=int, default=0)
    p.add_argument("--min-block", type=int, default=32)
    p.add_argument("--min-chars", type=int, default=1)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("generate", help="generate candidate samples from blocks")
    p.add_argument("--blocks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--endpoint", default="mock")
    p.add_argument("--model", default="mock-judge")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fixtures", default=None, help="prompt-hash -> response JSON table")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("rate", help="judge samples and attach labels/embeddings")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--endpoint", default="mock")
    p.add_argument("--model", default="mock-judge")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--embed-dim", type=int, default=64, help="0 skips embedding")
    p.add_argument("--fixtures", default=None)
    p.set_defaults(func=cmd_rate)

    p = sub.add_parser("estimate-stm", help="fit the label-noise transition model")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--order", type=int, default=3, choices=(2, 3))
    p.add_argument("--knn", type=int, default=2)
    p.add_argument("--alpha", type=float, default=0.02)
    p.set_defaults(func=cmd_estimate_stm)

    p = sub.add_parser("build-index", help="build the rated-reference index")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("score", help="append posterior/s_hat/r_q to records")
    p.add_argument("--index", required=True)
    p.add_argument("--stm", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--weighting", default="none", choices=("none", "inverse-distance"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("cluster", help="capacity-constrained clustering")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--cmin", type=int, default=2)
    p.add_argument("--cmax", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--refine-steps", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("linearize", help="render cluster prompts for distillation")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_linearize)

    p = sub.add_parser("serve", help="reward scoring service (NDJSON stdio or HTTP)")
    p.add_argument("--index", required=True)
    p.add_argument("--stm", required=True)
    p.add_argument("--tau", type=float, default=0.7)
    p.add_argument("--weights", default="0.5,0.4,0.1")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--http", type=int, default=0, help="serve HTTP on this port instead of stdio")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("advantages", help="group-normalized advantages")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--eps", type=float, default=1e-8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_advantages)

    p = sub.add_parser("objective", help="clipped surrogate objective with KL penalty")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--eps", type=float, default=1e-8)
    p.add_argument("--clip", type=float, default=0.2)
    p.add_argument("--beta-kl", type=float, default=0.01)
    p.set_defaults(func=cmd_objective)

    p = sub.add_parser("select", help="ratio-mixed training set assembly")
    p.add_argument("--mixup", required=True)
    p.add_argument("--original", required=True)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--k-longtail", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("eval", help="consistency metrics between scores and ratings")
    p.add_argument("--pred", required=True)
    p.add_argument("--raw", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--plot", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="run the full pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--corpus", default=None)
    p.add_argument("--fixtures", default=None)
    p.set_defaults(func=cmd_run)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (clustering.InfeasibleCapacityError, selection.QuotaError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ValueError, gateway.GatewayError, OSError) as exc:
        # covers ConfigError/ValidationError plus parameter errors from the
        # stage modules
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
