#!/bin/env python3
#--------------------------------------------------------------------------------------------------#
#  bclab: a desk-scale laboratory for backdoor injection by adversarial weight perturbation        #
#  Licensed under the BSD 2-clause license.                                                        #
#--------------------------------------------------------------------------------------------------#
#
"""Tests for datasets, triggers and the poisoned set"""

import io
import struct
import numpy as np
import pytest
import torch
from bclab.common import DTYPE, DataRoleError, FormatError, ShapeError
from bclab.poison import PIXEL_PATTERN, POISONED, TOKEN, BowSpec, ImageSynthSpec, LabeledDataset,\
    SynthSpec, TriggerSpec, apply_trigger, default_pixel_trigger, load_idx, mix, poison,\
    read_dataset, split, synth_bow, synth_clusters, synth_images, take, trigger_eval_set,\
    write_dataset


_TRUNCATED_IDX_TESTS = [
    ("No dimensions", bytes([0, 0, 0x08, 3])),
    ("Partial dimension", bytes([0, 0, 0x08, 3, 0, 0, 0, 2, 0, 0])),
    ("Missing body", bytes([0, 0, 0x08, 1, 0, 0, 0, 2, 7])),
]
_TRUNCATED_IDX_TEST_NAMES, _TRUNCATED_IDX_TEST_CASES = zip(*_TRUNCATED_IDX_TESTS)


def _clusters(size=640, dims=4, classes=2, seed=0):
    return synth_clusters(SynthSpec(dims, classes, (1.0,) * dims, size=size, seed=seed))


def _token_trigger(dims=4, target=0):
    return TriggerSpec(TOKEN, target, token=dims - 1, count=3.0)


def test_empty_pattern_leaves_input_unchanged():
    image = torch.rand((4, 4, 3), dtype=DTYPE)
    triggered = apply_trigger(image, TriggerSpec(PIXEL_PATTERN, 0, pixels=()))
    assert torch.equal(triggered, image)


def test_default_pattern_on_zero_image():
    image = torch.zeros((8, 8, 3), dtype=DTYPE)
    triggered = apply_trigger(image, default_pixel_trigger((8, 8, 3)))
    assert int(torch.count_nonzero(triggered)) == 5
    assert float(triggered[7, 7, 0]) == 1.0
    assert float(triggered[6, 6, 0]) == 1.0
    assert int(torch.count_nonzero(image)) == 0


def test_pixel_trigger_on_batch():
    spec = TriggerSpec(PIXEL_PATTERN, 1, pixels=((0, 1, 2, 0.5),))
    batch = torch.ones((3, 2, 2, 3), dtype=DTYPE)
    triggered = apply_trigger(batch, spec)
    assert triggered[:, 0, 1, 2].tolist() == [0.5, 0.5, 0.5]
    assert float(triggered.sum()) == pytest.approx(3 * 12 - 3 * 0.5)


def test_token_trigger():
    x = torch.zeros((2, 4), dtype=DTYPE)
    triggered = apply_trigger(x, _token_trigger())
    assert triggered.tolist() == [[0.0, 0.0, 0.0, 3.0], [0.0, 0.0, 0.0, 3.0]]


def test_trigger_validation():
    with pytest.raises(ValueError):
        TriggerSpec("sticker")
    with pytest.raises(ValueError):
        TriggerSpec(TOKEN, 0)
    spec = TriggerSpec(PIXEL_PATTERN, 0, pixels=((9, 0, 0, 1.0),))
    with pytest.raises(ShapeError):
        spec.validate((8, 8, 3), 10)
    with pytest.raises(ShapeError):
        apply_trigger(torch.zeros((8, 8, 3), dtype=DTYPE), spec)
    with pytest.raises(ShapeError):
        default_pixel_trigger((8, 8, 3), target_class=10).validate((8, 8, 3), 10)
    with pytest.raises(ShapeError):
        _token_trigger(dims=5).validate((4,), 2)


def test_poison_count_and_labels():
    data = _clusters()
    inputs_before = data.inputs.clone()
    poisoned = poison(data, 0.5, _token_trigger(target=1), seed=3)
    assert len(poisoned) == 320
    assert poisoned.role == POISONED
    assert poisoned.target == 1
    assert bool((poisoned.labels == 1).all())
    assert torch.equal(data.inputs, inputs_before)


def test_poison_full_ratio():
    data = _clusters(size=50)
    poisoned = poison(data, 1.0, _token_trigger(), seed=0)
    assert len(poisoned) == 50
    assert torch.equal(poisoned.inputs, apply_trigger(data.inputs, _token_trigger()))


def test_poison_is_deterministic():
    data = _clusters()
    first = poison(data, 0.25, _token_trigger(), seed=8)
    second = poison(data, 0.25, _token_trigger(), seed=8)
    other = poison(data, 0.25, _token_trigger(), seed=9)
    assert torch.equal(first.inputs, second.inputs)
    assert not torch.equal(first.inputs, other.inputs)


def test_poison_errors():
    data = _clusters(size=10)
    with pytest.raises(ValueError):
        poison(data, 0.0, _token_trigger(), seed=0)
    with pytest.raises(ValueError):
        poison(data, 1.5, _token_trigger(), seed=0)
    with pytest.raises(ValueError):
        poison(data.subset([]), 0.5, _token_trigger(), seed=0)


def test_mix_and_roles():
    data = _clusters(size=20)
    poisoned = poison(data, 0.5, _token_trigger(), seed=0)
    mixed = mix(data, poisoned)
    assert len(mixed) == 30
    assert mixed.clean_index[:20].tolist() == list(range(20))
    assert mixed.clean_index[20:].tolist() == [-1] * 10
    assert len(mix(data)) == 20
    with pytest.raises(DataRoleError):
        mix(poisoned, data)
    with pytest.raises(DataRoleError):
        mix(data, data)


def test_poisoned_labels_must_match_target():
    with pytest.raises(ShapeError):
        LabeledDataset(torch.zeros((2, 3)), torch.tensor([0, 1]), 2, role=POISONED, target=0)


def test_trigger_eval_set_skips_target_class():
    data = _clusters(size=100)
    evalset = trigger_eval_set(data, _token_trigger(target=0))
    assert len(evalset) == int((data.labels != 0).sum())
    assert bool((evalset.labels == 0).all())
    only_target = data.subset(torch.nonzero(data.labels == 0).reshape(-1))
    with pytest.raises(ValueError):
        trigger_eval_set(only_target, _token_trigger(target=0))


def test_clusters_without_deviation():
    spec = SynthSpec(3, 3, (0.0, 0.0, 0.0), size=30, seed=1)
    data = synth_clusters(spec)
    means = spec.class_means()
    assert torch.equal(data.inputs, means[data.labels])


def test_clusters_are_balanced():
    data = _clusters(size=1000, dims=20)
    assert torch.bincount(data.labels).tolist() == [500, 500]
    assert torch.equal(data.inputs, _clusters(size=1000, dims=20).inputs)
    assert not torch.equal(data.inputs, _clusters(size=1000, dims=20, seed=1).inputs)


def test_synthetic_images_and_documents():
    images = synth_images(ImageSynthSpec(classes=3, size=30, height=8, width=8, channels=1))
    assert images.input_shape == (8, 8, 1)
    assert float(images.inputs.min()) >= 0.0
    assert float(images.inputs.max()) <= 1.0
    spec = BowSpec(vocab=50, classes=2, doc_length=12, size=40, class_words=5)
    docs = synth_bow(spec)
    assert docs.input_shape == (50,)
    assert docs.inputs.sum(dim=1).tolist() == [12.0] * 40
    assert spec.rare_token == 49
    with pytest.raises(ValueError):
        BowSpec(vocab=10, classes=2, class_words=5)


def test_split_and_take():
    data = _clusters(size=100)
    train, test = split(data, 0.2, seed=4)
    assert (len(train), len(test)) == (80, 20)
    joined = torch.cat([train.inputs, test.inputs])
    assert torch.equal(torch.sort(joined[:, 0]).values, torch.sort(data.inputs[:, 0]).values)
    assert len(take(train, 30, seed=0)) == 30
    assert take(train, 500, seed=0) is train


def test_dataset_file_roundtrip():
    data = _clusters(size=12, dims=3, classes=3)
    buffer = io.BytesIO()
    write_dataset(data, buffer)
    assert buffer.getvalue().startswith(b"BCDS1")
    buffer.seek(0)
    loaded = read_dataset(buffer)
    assert torch.equal(loaded.inputs, data.inputs)
    assert torch.equal(loaded.labels, data.labels)
    assert loaded.classes == 3
    with pytest.raises(FormatError):
        read_dataset(io.BytesIO(b"BCLB1" + buffer.getvalue()[5:]))
    with pytest.raises(FormatError):
        read_dataset(io.BytesIO(buffer.getvalue()[:-1]))


def _write_idx(path, array, typecode):
    with open(path, "wb") as fp:
        fp.write(bytes([0, 0, typecode, array.ndim]))
        fp.write(struct.pack(f">{array.ndim}I", *array.shape))
        fp.write(array.tobytes())


def test_load_idx(tmp_path):
    images = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3) * 10
    labels = np.array([1, 4], dtype=np.uint8)
    _write_idx(str(tmp_path / "images.idx"), images, 0x08)
    _write_idx(str(tmp_path / "labels.idx"), labels, 0x08)
    data = load_idx(str(tmp_path / "images.idx"), str(tmp_path / "labels.idx"))
    assert data.input_shape == (3, 3, 1)
    assert data.classes == 5
    assert float(data.inputs[1, 2, 2, 0]) == pytest.approx(170.0 / 255.0)
    (tmp_path / "broken.idx").write_bytes(b"\x01\x02")
    with pytest.raises(FormatError):
        load_idx(str(tmp_path / "broken.idx"), str(tmp_path / "labels.idx"))


@pytest.mark.parametrize(
    "raw",
    _TRUNCATED_IDX_TEST_CASES,
    ids=_TRUNCATED_IDX_TEST_NAMES
)
def test_load_idx_truncated(tmp_path, raw):
    _write_idx(str(tmp_path / "labels.idx"), np.array([1, 4], dtype=np.uint8), 0x08)
    (tmp_path / "truncated.idx").write_bytes(raw)
    with pytest.raises(FormatError):
        load_idx(str(tmp_path / "truncated.idx"), str(tmp_path / "labels.idx"))
