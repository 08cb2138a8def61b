"""Regenerate the bundled 30-item desk fixture.

    python3 tests/fixtures/make_desk30.py

Writes ``desk30/corpus`` (Amazon-style JSON Lines), records every LLM call of
a hash-synthetic pipeline run into ``desk30/llm``, and stores the resulting
``results.json`` as ``desk30/golden_results.json``.
"""

from __future__ import annotations

import json
import random
import shutil
import sys
import tempfile
from pathlib import Path

HERE = Path(__file__).resolve().parent
OUT = HERE / "desk30"

GENRES = {
    "Racing": ["Turbo Racing League", "Desert Rally Racing", "Neon Street Racing", "Kart Racing Frenzy",
               "Moto Racing Pro"],
    "Puzzle": ["Block Puzzle Quest", "Gem Puzzle Tower", "Pipe Puzzle Factory", "Color Puzzle Garden",
               "Logic Puzzle Vault"],
    "Shooter": ["Star Shooter Squadron", "Jungle Shooter Ops", "Arena Shooter Blitz", "Retro Shooter Arcade",
                "Sky Shooter Aces"],
    "Platformer": ["Pixel Platformer Hero", "Cloud Platformer Jump", "Cave Platformer Run",
                   "Castle Platformer Climb", "Robot Platformer Dash"],
    "Sports": ["Soccer Sports Stars", "Tennis Sports Open", "Hoops Sports Legends", "Golf Sports Tour",
               "Hockey Sports Rivals"],
    "Strategy": ["Empire Strategy Wars", "Galaxy Strategy Command", "Kingdom Strategy Siege",
                 "Ocean Strategy Fleet", "Tower Strategy Defense"],
}
PLATFORMS = ["Nintendo Switch", "PlayStation 4", "Xbox One", "PC"]
FEATURES = ["split-screen multiplayer", "online leaderboards", "single player campaign", "level editor"]


def items() -> list[dict]:
    out = []
    n = 0
    for genre, titles in GENRES.items():
        for j, title in enumerate(titles):
            n += 1
            out.append({
                "asin": f"B{n:04d}",
                "title": title,
                "description": [f"{title} is a {genre.lower()} game with {FEATURES[(n + j) % 4]}."],
                "category": ["Video Games", genre],
                "feature": [PLATFORMS[n % 4]],
            })
    return out


def interactions(catalog: list[dict], seed: int = 7) -> list[dict]:
    """Eight users per genre, each skipping one warm title; three of them end on the genre's cold title."""
    rng = random.Random(seed)
    by_genre: dict[str, list[str]] = {}
    for it in catalog:
        by_genre.setdefault(it["category"][1], []).append(it["asin"])
    rows = []
    user = 0
    for genre, ids in by_genre.items():
        warm, cold = ids[:-1], ids[-1]
        for u in range(8):
            user += 1
            picks = [a for a in warm if a != warm[u % 4]]
            rng.shuffle(picks)
            if u % 3 == 2:
                # a visitor from another genre
                picks.insert(0, by_genre[rng.choice([g for g in by_genre if g != genre])][0])
            seq = picks + ([cold] if u < 3 else [])
            for t, asin in enumerate(seq):
                rows.append({"reviewerID": f"U{user:03d}", "asin": asin, "unixReviewTime": 1_600_000_000 + 3600 * t,
                             "overall": 5.0, "reviewText": f"Played it {'a lot' if t % 2 else 'twice'}."})
    return rows


def write_corpus(root: Path) -> Path:
    corpus = root / "corpus"
    corpus.mkdir(parents=True, exist_ok=True)
    catalog = items()
    with open(corpus / "meta_games.jsonl", "w", encoding="utf-8") as fh:
        for it in catalog:
            fh.write(json.dumps(it, sort_keys=True) + "\n")
    with open(corpus / "games.jsonl", "w", encoding="utf-8") as fh:
        for row in interactions(catalog):
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return corpus


def main() -> int:
    sys.path.insert(0, str(HERE.parent.parent / "src"))
    from kgcoldrec.cli import main as cli

    if OUT.exists():
        shutil.rmtree(OUT)
    corpus = write_corpus(OUT)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        common = ["--backend", "hash_synthetic", "--record-fixtures", str(OUT / "llm")]
        steps = [
            ["ingest", "--corpus", str(corpus), "--out", str(tmp / "split"), "--threshold", "1",
             "--fraction", "0.2", "--sample-size", "50", "--seed", "0"],
            ["build", "--corpus", str(tmp / "split"), "--kb", str(tmp / "kb"), *common],
            ["eval", "--corpus", str(tmp / "split"), "--kb", str(tmp / "kb"), "--out", str(tmp / "eval"),
             "--runs", "5", "--k", "10", "--seed", "0", *common],
        ]
        for step in steps:
            code = cli(step)
            if code:
                return code
        shutil.copy(tmp / "eval" / "results.json", OUT / "golden_results.json")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
