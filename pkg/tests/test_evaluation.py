import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from datasetclone.evaluation import (
    ClassMask,
    EvalError,
    FeatureMatrix,
    center_preprocess,
    evaluate_topk,
    extract_features,
    read_features,
    topk_accuracy,
    write_features,
)


def brute_force_topk(logits, labels, k, allowed=None, mask_logits=True):
    """Reference scorer: explicit per-row sort with index tie-break."""
    correct = 0
    for row, label in zip(logits, labels):
        classes = sorted(allowed) if (allowed and mask_logits) else list(range(len(row)))
        ranked = sorted(classes, key=lambda c: (-row[c], c))
        if label in ranked[:k]:
            correct += 1
    return correct / len(labels)


def test_perfect_predictor_scores_one():
    labels = np.array([0, 1, 2, 3])
    logits = np.eye(4) * 10.0
    result = topk_accuracy(logits, labels, ks=[1, 5])
    assert result[1] == 1.0
    assert result[5] == 1.0


def test_true_class_ranked_fifth():
    row = np.array([[9.0, 8.0, 7.0, 6.0, 5.0, 1.0]])
    labels = np.array([4])
    result = topk_accuracy(row, labels, ks=[1, 5])
    assert result[1] == 0.0
    assert result[5] == 1.0


def test_masked_argmax_outside_mask():
    # argmax is class 3 (excluded); best among {0,1} is the true class 0
    logits = np.array([[2.0, 1.0, 0.0, 5.0]])
    labels = np.array([0])
    mask = ClassMask.from_indices([0, 1])
    assert topk_accuracy(logits, labels, [1], mask=mask)[1] == 1.0
    assert topk_accuracy(logits, labels, [1])[1] == 0.0


def test_mask_of_all_classes_equals_unmasked():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(50, 6))
    labels = rng.integers(0, 6, size=50)
    full = ClassMask.from_indices(range(6))
    assert topk_accuracy(logits, labels, [1, 3]) == topk_accuracy(
        logits, labels, [1, 3], mask=full
    )


def test_k_equal_num_classes_is_always_one():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(30, 7))
    labels = rng.integers(0, 7, size=30)
    assert topk_accuracy(logits, labels, [7])[7] == 1.0


def test_label_outside_mask_is_fatal():
    logits = np.zeros((1, 4))
    with pytest.raises(EvalError, match="outside"):
        topk_accuracy(logits, np.array([3]), [1], mask=ClassMask.from_indices([0, 1]))


def test_tie_break_prefers_lower_class_index():
    logits = np.array([[1.0, 1.0, 1.0]])
    assert topk_accuracy(logits, np.array([0]), [1])[1] == 1.0
    assert topk_accuracy(logits, np.array([1]), [1])[1] == 0.0


def test_mask_logits_false_keeps_full_ranking():
    logits = np.array([[2.0, 1.0, 0.0, 5.0]])
    labels = np.array([0])
    mask = ClassMask.from_indices([0, 1])
    assert topk_accuracy(logits, labels, [1], mask=mask, mask_logits=False)[1] == 0.0


@settings(max_examples=200, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_fuzz_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n_classes = int(rng.integers(2, 10))
    n = int(rng.integers(1, 40))
    logits = rng.normal(size=(n, n_classes)).round(1)  # rounding forces ties
    allowed = sorted(rng.choice(n_classes, size=int(rng.integers(1, n_classes + 1)),
                                replace=False).tolist())
    labels = rng.choice(allowed, size=n)
    mask = ClassMask.from_indices(allowed)
    for k in (1, min(3, len(allowed))):
        fast = topk_accuracy(logits, labels, [k], mask=mask)[k]
        slow = brute_force_topk(logits, labels, k, allowed=allowed)
        assert fast == pytest.approx(slow)


def test_class_mask_validation(tmp_path):
    with pytest.raises(EvalError):
        ClassMask(frozenset())
    path = tmp_path / "mask.json"
    path.write_text("[0, 2, 5]")
    assert ClassMask.from_file(path).allowed == frozenset({0, 2, 5})
    lines = tmp_path / "mask.txt"
    lines.write_text("1\n3\n")
    assert ClassMask.from_file(lines).allowed == frozenset({1, 3})


class _FixedEncoder:
    """Checkpoint stand-in returning mean pixel statistics as features."""

    def __init__(self):
        import torch.nn as nn
        from datasetclone.training import TrainConfig

        class MeanNet(nn.Module):
            def forward(self, x):
                return x.mean(dim=(2, 3))

        self.encoder = MeanNet()
        self.classifier = nn.Identity()
        self.config = TrainConfig(epochs=1, batch_size=1)
        self.num_classes = 3
        self.feature_dim = 3

    def model(self):
        import torch.nn as nn

        return nn.Sequential(self.encoder, self.classifier)


def _image_dataset(tmp_path, n=6, size=(40, 30)):
    from datasetclone.store import DatasetView

    samples = []
    for i in range(n):
        path = tmp_path / f"img{i}.png"
        Image.new("RGB", size, ((i * 37) % 256, 80, 10)).save(path)
        samples.append((path, i % 3))
    return DatasetView(name="synthetic", samples=samples, num_classes=3)


def test_center_preprocess_geometry():
    ckpt = _FixedEncoder()
    square = Image.new("RGB", (32, 32), (255, 0, 0))
    out = center_preprocess(square, 32, ckpt)
    assert out.shape == (3, 32, 32)
    wide = Image.new("RGB", (448, 224), (0, 255, 0))
    out = center_preprocess(wide, 224, ckpt)
    assert out.shape == (3, 224, 224)


def test_extract_features_rows_follow_dataset_order(tmp_path):
    dataset = _image_dataset(tmp_path)
    fm = extract_features(_FixedEncoder(), dataset, resolution=16)
    assert fm.n == len(dataset)
    assert fm.d == 3
    assert fm.labels.tolist() == [s[1] for s in dataset]
    assert fm.meta["skipped_indices"] == []
    assert fm.meta["source_dataset"] == "synthetic"


def test_extract_features_skips_undecodable(tmp_path, caplog):
    dataset = _image_dataset(tmp_path)
    dataset.samples[2][0].write_bytes(b"not a png at all")
    with caplog.at_level("WARNING"):
        fm = extract_features(_FixedEncoder(), dataset, resolution=16)
    assert fm.n == len(dataset) - 1
    assert fm.meta["skipped_indices"] == [2]


def test_evaluate_topk_label_range_check(tmp_path):
    dataset = _image_dataset(tmp_path)
    ckpt = _FixedEncoder()
    ckpt.num_classes = 2
    with pytest.raises(EvalError, match="exceed"):
        evaluate_topk(ckpt, dataset, ks=[1])


def test_feature_file_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    fm = FeatureMatrix(
        X=rng.normal(size=(17, 5)).astype(np.float32),
        labels=rng.integers(0, 4, size=17).astype(np.int32),
        normalized=True,
        meta={"source_dataset": "unit", "encoder_id": "tiny_conv"},
    )
    first = tmp_path / "a.bin"
    second = tmp_path / "b.bin"
    write_features(fm, first)
    reread = read_features(first)
    assert np.array_equal(reread.X, fm.X)
    assert np.array_equal(reread.labels, fm.labels)
    assert reread.normalized is True
    assert reread.meta["source_dataset"] == "unit"
    write_features(reread, second)
    assert first.read_bytes() == second.read_bytes()


def test_feature_file_magic_checked(tmp_path):
    path = tmp_path / "bogus.bin"
    path.write_bytes(b"NOTAMAGICnumber")
    with pytest.raises(EvalError, match="not a feature matrix"):
        read_features(path)


def test_feature_matrix_validation():
    with pytest.raises(EvalError):
        FeatureMatrix(X=np.zeros((2, 2)), labels=np.zeros(3, dtype=np.int32))
    with pytest.raises(EvalError):
        FeatureMatrix(X=np.array([[np.nan, 0.0]]), labels=np.zeros(1, dtype=np.int32))
