import pytest
import torch

from dait.data import (
    AugmentPolicy,
    augment,
    batch_augment,
    generate_synthetic,
    load_image_folder,
    subsample,
    write_image_folder,
)
from dait.errors import ConfigError, IngestionError


def nearest_mean_accuracy(train, test):
    x = torch.stack(train.images).flatten(1).double()
    xt = torch.stack(test.images).flatten(1).double()
    y, yt = train.label_tensor(), test.label_tensor()
    means = torch.stack([x[y == c].mean(0) for c in range(train.num_classes)])
    return (torch.cdist(xt, means).argmin(1) == yt).double().mean().item()


def test_same_seed_gives_identical_datasets():
    a_train, a_test = generate_synthetic(3, 10, 16, seed=5)
    b_train, b_test = generate_synthetic(3, 10, 16, seed=5)
    for a, b in ((a_train, b_train), (a_test, b_test)):
        assert torch.equal(torch.stack(a.images), torch.stack(b.images))
        assert a.labels == b.labels and a.item_ids == b.item_ids


def test_different_seed_differs():
    a, _ = generate_synthetic(3, 10, 16, seed=5)
    b, _ = generate_synthetic(3, 10, 16, seed=6)
    assert not torch.equal(torch.stack(a.images), torch.stack(b.images))


def test_split_shapes_and_balance():
    train, test = generate_synthetic(4, 100, 32, seed=7)
    assert len(train) == 320 and len(test) == 80
    assert train.images[0].shape == (3, 32, 32)
    assert [len(m) for m in test.indices_by_class()] == [20] * 4
    assert train.class_names == test.class_names
    assert float(torch.stack(train.images).min()) >= 0.0 and float(torch.stack(train.images).max()) <= 1.0


def test_nearest_class_mean_solves_reference_fixture():
    train, test = generate_synthetic(4, 100, 32, 1.0, 7)
    assert nearest_mean_accuracy(train, test) >= 0.95


def test_zero_separation_leaves_only_chance():
    accs = [nearest_mean_accuracy(*generate_synthetic(4, 100, 16, 0.0, s)) for s in range(3)]
    assert sum(accs) / len(accs) < 0.4


def test_generator_rejects_degenerate_sizes():
    with pytest.raises(ConfigError):
        generate_synthetic(1, 10)
    with pytest.raises(ConfigError):
        generate_synthetic(3, 1)


# --------------------------------------------------------------------------
# image folders


def _write_folder(root, train_classes, test_classes, n=3):
    from PIL import Image

    for split, classes in (("train", train_classes), ("test", test_classes)):
        for c in classes:
            d = root / split / c
            d.mkdir(parents=True)
            for i in range(n):
                Image.new("RGB", (8, 8), (i * 40, 0, 0)).save(d / f"{i}.png")


def test_image_folder_two_classes(tmp_path):
    _write_folder(tmp_path, ["b", "a"], ["a", "b"])
    train, test = load_image_folder(tmp_path)
    assert train.num_classes == 2 and len(train) == 6 and len(test) == 6
    assert train.class_names == ("a", "b")
    assert train.labels[train.item_ids.index("train/a/0.png")] == 0
    assert train.labels[train.item_ids.index("train/b/0.png")] == 1


def test_image_folder_class_mismatch(tmp_path):
    _write_folder(tmp_path, ["a", "b"], ["a"])
    with pytest.raises(IngestionError, match="'b'"):
        load_image_folder(tmp_path)


def test_image_folder_unreadable_file_names_path(tmp_path):
    _write_folder(tmp_path, ["a"], ["a"])
    bad = tmp_path / "train" / "a" / "broken.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(IngestionError, match="broken.png"):
        load_image_folder(tmp_path)


def test_image_folder_round_trip(tmp_path):
    train, test = generate_synthetic(2, 5, 8, seed=1)
    write_image_folder(tmp_path, train, test)
    r_train, r_test = load_image_folder(tmp_path)
    assert r_train.class_names == train.class_names
    assert len(r_train) == len(train) and len(r_test) == len(test)
    # 8-bit quantisation is the only loss
    assert torch.allclose(torch.stack(r_train.images), torch.stack(train.images), atol=1 / 255)


# --------------------------------------------------------------------------
# augmentation


def test_identity_policy_is_normalized_resize():
    img = torch.rand(3, 16, 16)
    policy = AugmentPolicy(8, (("resize", {}), ("normalize", {"mean": (0.5,) * 3, "std": (0.25,) * 3})))
    from torchvision.transforms.v2 import functional as TF

    expected = (TF.resize(img, [8, 8], antialias=True) - 0.5) / 0.25
    assert torch.allclose(augment(img, policy, 0), expected, atol=1e-6)


def test_flip_is_an_involution():
    img = torch.rand(3, 8, 8)
    flip = AugmentPolicy(8, (("horizontal_flip", {"p": 1.0}), ("resize", {})))
    once = augment(img, flip, 3)
    assert torch.equal(once, img.flip(-1))
    assert torch.equal(augment(once, flip, 4), img)


def test_random_policy_is_seed_deterministic():
    train, _ = generate_synthetic(2, 5, 16, seed=0)
    policy = AugmentPolicy.train_default(16, seed=9)
    a = batch_augment(train, range(len(train)), policy, epoch=2)
    b = batch_augment(train, range(len(train)), policy, epoch=2)
    c = batch_augment(train, range(len(train)), policy, epoch=3)
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_policy_validation():
    with pytest.raises(ConfigError):
        AugmentPolicy(8, (("rotate", {}), ("resize", {})))
    with pytest.raises(ConfigError):
        AugmentPolicy(8, (("normalize", {}),))


# --------------------------------------------------------------------------
# subsampling


def _ten_per_class():
    train, _ = generate_synthetic(3, 13, 8, seed=0)  # 10 train items per class
    assert [len(m) for m in train.indices_by_class()] == [10] * 3
    return train


def test_subsample_full_ratio_is_identity():
    train = _ten_per_class()
    assert subsample(train, 1.0, seed=3) is train


@pytest.mark.parametrize("ratio,per_class", [(0.5, 5), (0.3, 3), (0.05, 1)])
def test_subsample_counts(ratio, per_class):
    train = _ten_per_class()
    sub = subsample(train, ratio, seed=1)
    assert [len(m) for m in sub.indices_by_class()] == [per_class] * 3


def test_subsample_same_seed_same_items():
    train = _ten_per_class()
    assert subsample(train, 0.3, 4).item_ids == subsample(train, 0.3, 4).item_ids
    assert set(subsample(train, 0.3, 4).item_ids) <= set(train.item_ids)


@pytest.mark.parametrize("ratio", [0.0, -0.1, 1.5])
def test_subsample_rejects_bad_ratio(ratio):
    with pytest.raises(ConfigError):
        subsample(_ten_per_class(), ratio)
