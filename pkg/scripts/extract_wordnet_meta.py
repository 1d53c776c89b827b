#!/usr/bin/env python3
"""Extract synset metadata (lemmas, hypernym lemmas, gloss) into a JSON file.

Needs NLTK with the wordnet corpus downloaded:

    python -c "import nltk; nltk.download('wordnet')"
    python scripts/extract_wordnet_meta.py --classes classes.txt --out wordnet_meta.json

The output is the metadata source consumed by `clone catalog`. One record per
synset: underscores in lemma names become spaces; for each parent synset only
its first (head) lemma is kept, one entry per parent.
"""

import argparse
import json
import sys
from pathlib import Path


def extract(wnids):
    try:
        from nltk.corpus import wordnet as wn
    except ImportError:
        sys.exit("nltk is required: pip install nltk && python -c "
                 "\"import nltk; nltk.download('wordnet')\"")

    records = []
    for wnid in wnids:
        offset = int(wnid[1:])
        synset = wn.synset_from_pos_and_offset("n", offset)
        lemmas = [lemma.name().replace("_", " ") for lemma in synset.lemmas()]
        hypernyms = [parent.lemmas()[0].name().replace("_", " ")
                     for parent in synset.hypernyms()]
        records.append({
            "wnid": wnid,
            "lemmas": lemmas,
            "hypernym_lemmas": hypernyms,
            "definition": synset.definition(),
        })
    return records


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--classes", required=True, help="text file, one wnid per line")
    parser.add_argument("--out", required=True)
    args = parser.parse_args()

    wnids = [line.strip() for line in Path(args.classes).read_text().splitlines()
             if line.strip()]
    records = extract(wnids)
    Path(args.out).write_text(
        json.dumps(records, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    print(f"wrote {len(records)} synsets to {args.out}")


if __name__ == "__main__":
    main()
