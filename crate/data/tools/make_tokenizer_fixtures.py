"""Run the reference GPT-2 encoder (transformers' slow GPT2Tokenizer) over the
toy vocabulary and record id sequences used as test fixtures."""
import json
import sys
from pathlib import Path

from transformers import GPT2Tokenizer

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT.parent / "crates" / "core" / "tests" / "fixtures"

TEXTS = [
    "The girl",
    "His wife",
    "Pride and Prejudice",
    "\"I cannot think it right,\" said she.",
    "Mr. Darcy spoke.  Then   silence.\n\nCHAPTER II.\n",
    "It's a truth universally acknowledged; isn't it? 1813, 42 years!",
    "Café naïve — “quoted” æsthetic 中文 \U0001F600",
    "  leading spaces and trailing  ",
]


def main():
    tok = GPT2Tokenizer(str(ROOT / "vocab" / "toy-vocab.json"),
                        str(ROOT / "vocab" / "toy-merges.txt"))
    cases = [{"text": t, "ids": tok.encode(t)} for t in TEXTS]
    FIXTURES.mkdir(parents=True, exist_ok=True)
    (FIXTURES / "toy_encodings.json").write_text(json.dumps(cases, ensure_ascii=False, indent=1) + "\n")

    manifest = json.loads((ROOT / "sample-corpus" / "manifest.json").read_text())
    totals = {}
    for doc in manifest:
        text = (ROOT / "sample-corpus" / doc["filename"]).read_bytes().decode("utf-8")
        totals[doc["id"]] = len(tok.encode(text))
    (FIXTURES / "sample_corpus_token_counts.json").write_text(json.dumps(totals, indent=1) + "\n")

    golden = (FIXTURES / "raw_novel.cleaned.txt").read_bytes().decode("utf-8")
    (FIXTURES / "raw_novel.cleaned.tokens.json").write_text(
        json.dumps({"tokens": len(tok.encode(golden))}) + "\n")


if __name__ == "__main__":
    sys.exit(main())
