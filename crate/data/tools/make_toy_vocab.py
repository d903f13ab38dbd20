"""Train the bundled toy byte-level BPE vocabulary (<= 1000 entries) on the
sample corpus and write it in the GPT-2 vocab.json / merges.txt layout."""
import json
from pathlib import Path

from tokenizers import ByteLevelBPETokenizer

ROOT = Path(__file__).resolve().parent.parent
CORPUS = ROOT / "sample-corpus"
OUT = ROOT / "vocab"


def main():
    files = sorted(str(p) for p in CORPUS.glob("*.txt"))
    tok = ByteLevelBPETokenizer()
    tok.train(files, vocab_size=999, min_frequency=2, special_tokens=[], show_progress=False)
    vocab = tok.get_vocab()
    # end-of-text goes last, as in the published GPT-2 asset
    vocab["<|endoftext|>"] = len(vocab)
    OUT.mkdir(parents=True, exist_ok=True)
    (OUT / "toy-vocab.json").write_text(
        json.dumps(dict(sorted(vocab.items(), key=lambda kv: kv[1])), ensure_ascii=False))
    model = json.loads(tok.to_str())["model"]
    lines = ["#version: 0.2"]
    for m in model["merges"]:
        lines.append(m if isinstance(m, str) else " ".join(m))
    (OUT / "toy-merges.txt").write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
