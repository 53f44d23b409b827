#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Build the bundled train/valid/test sample from Moby-Dick chapter files.

The source text is the CC0 chapter dump shipped in the npm package
@stdlib/datasets-moby-dick (data/chapter_<n>.txt). Output follows the usual
PTB preprocessing: lowercase, one sentence per line, punctuation stripped,
numbers replaced by N, possessive clitics split off, and out-of-vocabulary
words written as <unk>.

    python3 tools/prepare_corpus.py /path/to/package/data data/
"""

import argparse
import collections
import pathlib
import re

SENTENCE_END = re.compile(r"(?<=[.!?;])\s+")
WORD = re.compile(r"[a-z]+(?:'[a-z]+)?|[0-9][0-9,.]*")


def sentences(text):
    text = text.replace("—", " ").replace("–", " ").replace("-", " ")
    text = text.replace("’", "'").replace("‘", "'")
    for para in text.split("\n"):
        para = para.strip()
        if not para or para.upper().startswith("CHAPTER"):
            continue
        for sent in SENTENCE_END.split(para):
            toks = []
            for w in WORD.findall(sent.lower()):
                if w[0].isdigit():
                    toks.append("N")
                elif w.endswith("'s"):
                    toks.extend([w[:-2], "'s"])
                else:
                    toks.append(w.replace("'", ""))
            if len(toks) >= 2:
                yield toks


def take(chapters, start, budget):
    out, i = [], start
    while i < len(chapters) and sum(len(s) + 1 for s in out) < budget:
        out.extend(sentences(chapters[i]))
        i += 1
    return out, i


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("src")
    ap.add_argument("dst")
    ap.add_argument("--train-tokens", type=int, default=42000)
    ap.add_argument("--heldout-tokens", type=int, default=4500)
    ap.add_argument("--vocab", type=int, default=1500)
    args = ap.parse_args()

    src = pathlib.Path(args.src)
    n = len(list(src.glob("chapter_*.txt")))
    chapters = [(src / f"chapter_{k}.txt").read_text(encoding="utf-8") for k in range(1, n + 1)]

    train, nxt = take(chapters, 0, args.train_tokens)
    valid, nxt = take(chapters, nxt, args.heldout_tokens)
    test, _ = take(chapters, nxt, args.heldout_tokens)

    counts = collections.Counter(w for s in train for w in s)
    keep = {w for w, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[: args.vocab - 2]}

    dst = pathlib.Path(args.dst)
    dst.mkdir(parents=True, exist_ok=True)
    for name, sents in (("train", train), ("valid", valid), ("test", test)):
        lines = [" ".join(w if w in keep else "<unk>" for w in s) for s in sents]
        (dst / f"{name}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(name, len(lines), "lines", sum(len(s) + 1 for s in sents), "tokens")


if __name__ == "__main__":
    main()
