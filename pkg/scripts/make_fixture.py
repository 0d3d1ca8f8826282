"""Regenerate the bundled 100-article fixture corpus.

Articles are synthetic topical prose: each topic owns a word pool, so
hashing embeddings of samples from the same topic cluster together. The
output is committed at src/instill/data/fixture_corpus.jsonl; rerunning
this script reproduces it byte-for-byte.
"""

import json
import random
from pathlib import Path

TOPICS = {
    "glaciology": """glacier icefield moraine crevasse ablation firn serac meltwater
        bergschrund calving terminus accumulation cirque arete nunatak drumlin esker
        outwash permafrost supraglacial subglacial englacial icefall seiche""",
    "horology": """escapement balance hairspring mainspring barrel fusee tourbillon
        remontoire pallet detent chronometer complication repeater pendulum verge
        lever jewel pivot arbor wheel pinion regulator isochronism amplitude""",
    "mycology": """mycelium hypha basidium spore sporocarp lamella stipe pileus
        volva annulus mycorrhiza saprotroph lichen ascus conidium rhizomorph
        sclerotium veil fruiting substrate decomposer chitin septum clamp""",
    "campanology": """bell tower peal toll clapper carillon bellfounder changeringing
        treble tenor sally rope wheel stay garter hunt dodge bob single method
        course touch quarter grandsire plain""",
    "vexillology": """flag banner ensign pennant standard canton fly hoist field
        charge fimbriation saltire chevron pale fess bend gules azure argent
        halyard finial tricolor bicolour defacement emblem""",
    "speleology": """cave karst stalactite stalagmite flowstone helictite sump
        passage chamber pitch squeeze grotto sinkhole doline resurgence phreatic
        vadose speleothem guano troglobite calcite gypsum survey rigging""",
    "apiculture": """hive apiary queen drone worker brood comb frame super excluder
        nectar pollen propolis royal swarm waggle forager nurse smoker extractor
        uncapping varroa cluster winterizing langstroth""",
    "philately": """stamp perforation gum watermark overprint surcharge imperforate
        definitive commemorative franking postmark cancellation cover cachet
        tete-beche selvage plate vignette engraving gutter booklet coil miniature""",
}

CONNECTIVES = """the a this that each its their another early later careful typical
    observed recorded measured described regional seasonal gradual distinct notable
    remains appears develops forms carries shows yields supports follows precedes
    during between within without against toward study survey record account""".split()


def make_sentence(rng: random.Random, pool: list[str]) -> str:
    length = rng.randint(8, 16)
    words = []
    for i in range(length):
        source = pool if rng.random() < 0.55 else CONNECTIVES
        words.append(rng.choice(source))
    words[0] = words[0].capitalize()
    closer = rng.choices([".", ".", ".", "!", "?"], k=1)[0]
    return " ".join(words) + closer


def make_article(rng: random.Random, topic: str, pool: list[str]) -> str:
    paragraphs = []
    for _ in range(rng.randint(2, 4)):
        sentences = [make_sentence(rng, pool) for _ in range(rng.randint(4, 8))]
        paragraphs.append(" ".join(sentences))
    return "\n\n".join(paragraphs)


def main() -> None:
    rng = random.Random(20240917)
    out = Path(__file__).resolve().parents[1] / "src" / "instill" / "data" / "fixture_corpus.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    topics = list(TOPICS.items())
    with out.open("w", encoding="utf-8") as fh:
        for i in range(100):
            topic, pool_text = topics[i % len(topics)]
            pool = pool_text.split()
            record = {
                "id": f"art-{i:03d}",
                "topic": topic,
                "text": make_article(rng, topic, pool),
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
