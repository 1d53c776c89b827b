#!/usr/bin/env python3
"""Desk-scale end-to-end experiment on the procedural mock backend.

Generates a 10-class synthetic dataset with all six prompt templates, trains
the small encoder for a few epochs, evaluates held-out top-1/top-5, runs the
linear probe between the train and held-out feature sets, and prints the four
representation statistics. Everything lands under --workdir.

    python scripts/run_mock_e2e.py --workdir /tmp/clone_e2e
"""

import argparse
import json
import time
from pathlib import Path

from datasetclone.catalog import load_backgrounds, load_catalog
from datasetclone.evaluation import evaluate_topk, extract_features
from datasetclone.generation import MockBackend, run_plan
from datasetclone.metrics import compute_report
from datasetclone.probe import linear_probe
from datasetclone.prompts import GenParams, PromptTemplate, build_plan
from datasetclone.store import DatasetStore
from datasetclone.training import MultiCropConfig, TrainConfig, train

DATA = Path(__file__).resolve().parent.parent / "tests" / "data"

E2E_CLASSES = [
    "n02086910", "n91000001", "n91000002", "n91000003", "n91000004",
    "n91000005", "n91000006", "n91000007", "n91000008", "n91000009",
]


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--workdir", required=True)
    parser.add_argument("--per-class", type=int, default=100)
    parser.add_argument("--epochs", type=int, default=5)
    parser.add_argument("--workers", type=int, default=4)
    args = parser.parse_args()

    workdir = Path(args.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    catalog = load_catalog(DATA / "wordnet_meta.json", E2E_CLASSES, name="mock10")
    backgrounds = load_backgrounds(DATA / "backgrounds.txt")
    params = GenParams(width=160, height=120)
    templates = list(PromptTemplate)

    t0 = time.time()
    plan = build_plan(catalog, templates, {w: args.per_class for w in catalog.wnids},
                      backgrounds=backgrounds, plan_seed=7, gen_params=params)
    train_store = DatasetStore.create(workdir / "train", 7, catalog.name)
    report = run_plan(plan, MockBackend(), train_store, workers=args.workers)
    print(f"[gen] train set: {report.completed} images ({time.time() - t0:.1f}s)")

    heldout = build_plan(catalog, templates, {w: args.per_class // 5 for w in catalog.wnids},
                         backgrounds=backgrounds, plan_seed=999, gen_params=params)
    heldout_store = DatasetStore.create(workdir / "heldout", 999, catalog.name)
    run_plan(heldout, MockBackend(), heldout_store, workers=args.workers)
    print(f"[gen] held-out set: {len(heldout)} images")

    verify = train_store.verify()
    print(f"[verify] integrity errors: {verify.integrity_errors}")

    t1 = time.time()
    config = TrainConfig(
        epochs=args.epochs, batch_size=16, base_lr=0.1, seed=0,
        multicrop=MultiCropConfig(num_global=1, num_local=8, global_size=32, local_size=16),
    )
    checkpoint = train(train_store.view(), config)
    checkpoint.save(workdir / "ckpt")
    print(f"[train] {checkpoint.history['total_steps']} steps, "
          f"final loss {checkpoint.history['loss_per_epoch'][-1]:.3f} "
          f"({time.time() - t1:.1f}s)")

    accuracy = evaluate_topk(checkpoint, heldout_store.view(), ks=[1, 5])
    print(f"[eval] held-out top-1 {accuracy[1]:.3f}  top-5 {accuracy[5]:.3f}")

    train_feats = extract_features(checkpoint, train_store.view(), resolution=32)
    heldout_feats = extract_features(checkpoint, heldout_store.view(), resolution=32)
    probe = linear_probe(train_feats, heldout_feats, n_trials=25, seed=0)
    print(f"[probe] accuracy {probe.accuracy:.3f} "
          f"(best {probe.best_hparams}, {len(probe.trials)} trials)")

    stats = compute_report(heldout_feats.X, heldout_feats.labels, dataset_group="heldout")
    print(f"[stats] sparsity={stats.sparsity:.4f} intra={stats.intra_class_l2:.4f} "
          f"redundancy={stats.redundancy:.4f} coding_length={stats.coding_length:.4f}")

    summary = {
        "top1": accuracy[1], "top5": accuracy[5],
        "probe_accuracy": probe.accuracy,
        "metrics": stats.to_dict(),
    }
    (workdir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"[done] summary -> {workdir / 'summary.json'}")


if __name__ == "__main__":
    main()
