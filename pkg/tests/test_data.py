import numpy as np
import pytest

from mergecap.data import (BOS, EOS, PAD, RESERVED, UNK, CaptionDataset, DataError, ImageFeatures,
                           SyntheticWorld, Vocabulary, build_vocab, generate_synthetic, load_split,
                           read_captions, read_features, save_split, write_captions, write_features)


def test_reserved_ids():
    assert (PAD, BOS, EOS, UNK) == (0, 1, 2, 3)
    assert len(RESERVED) == 4


def test_vocab_count_boundary():
    captions = ["five"] * 5 + ["six"] * 6
    vocab = build_vocab(captions)
    assert "six" in vocab.index and "five" not in vocab.index
    assert vocab.encode(["five"]) == [UNK]


def test_vocab_ordering():
    captions = ["b"] * 7 + ["a"] * 7 + ["c"] * 9
    assert build_vocab(captions).tokens[4:] == ["c", "a", "b"]


def test_truncation_happens_before_counting():
    # "tail" only occurs beyond position 16 so it is never counted
    caption = " ".join(["w"] * 16 + ["tail"] * 4)
    vocab = build_vocab([caption] * 10)
    assert "tail" not in vocab.index
    ids = vocab.encode_caption(" ".join(["w"] * 20))
    assert len(ids) == 17 and ids[-1] == EOS


def test_vocab_save_load(tmp_path):
    vocab = build_vocab(["red ball"] * 6)
    vocab.save(tmp_path / "v.txt")
    assert Vocabulary.load(tmp_path / "v.txt").tokens == vocab.tokens


def test_vocab_decode():
    vocab = Vocabulary(list(RESERVED) + ["red", "ball"])
    assert vocab.decode([BOS, 4, PAD, 5, EOS, 4]) == ["red", "ball"]


def test_vocab_rejects_bad_tokens():
    with pytest.raises(DataError):
        Vocabulary(["x", "y"])
    with pytest.raises(DataError):
        build_vocab([])


def test_features_round_trip_and_size(tmp_path):
    rng = np.random.default_rng(0)
    items = [(7, rng.standard_normal((6, 32)).astype(np.float32)),
             (9, rng.standard_normal((6, 32)).astype(np.float32))]
    path = tmp_path / "f.amtf"
    write_features(path, items)
    assert path.stat().st_size == 1572  # 20-byte header + 2 * (8-byte id + 6*32*4)
    back = read_features(path)
    assert [i for i, _ in back] == [7, 9]
    for (_, a), (_, b) in zip(items, back):
        np.testing.assert_array_equal(a, b.regions)
        np.testing.assert_allclose(b.mean, a.mean(axis=0), rtol=1e-6)


def test_features_bad_magic(tmp_path):
    path = tmp_path / "f.amtf"
    write_features(path, [(0, np.zeros((2, 3)))])
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(DataError, match="AMTF"):
        read_features(path)


def test_features_truncation_reports_offset(tmp_path):
    path = tmp_path / "f.amtf"
    write_features(path, [(0, np.zeros((2, 3))), (1, np.zeros((2, 3)))])
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(DataError, match="byte offset 52"):  # 20 + 8 + 24
        read_features(path)
    path.write_bytes(raw[:10])
    with pytest.raises(DataError, match="byte offset 10"):
        read_features(path)


def test_captions_round_trip_and_errors(tmp_path):
    path = tmp_path / "c.jsonl"
    write_captions(path, [(1, ["a b"]), (2, ["c", "d e"])])
    assert read_captions(path) == {1: ["a b"], 2: ["c", "d e"]}
    path.write_text('{"image_id": 1}\n')
    with pytest.raises(DataError, match=":1:"):
        read_captions(path)


def test_split_round_trip(tmp_path):
    train, _, _ = generate_synthetic(SyntheticWorld(), 5, 1, 1)
    save_split(tmp_path, train)
    back = load_split(tmp_path, "train")
    assert [r.image_id for r in back.images] == [r.image_id for r in train.images]
    for a, b in zip(train.images, back.images):
        np.testing.assert_array_equal(a.features.regions, b.features.regions)
        assert a.captions == b.captions


def test_synthetic_deterministic_and_disjoint():
    a = generate_synthetic(SyntheticWorld(), 10, 3, 3, seed=4)
    b = generate_synthetic(SyntheticWorld(), 10, 3, 3, seed=4)
    c = generate_synthetic(SyntheticWorld(), 10, 3, 3, seed=5)
    for x, y in zip(a, b):
        for r, s in zip(x.images, y.images):
            np.testing.assert_array_equal(r.features.regions, s.features.regions)
            assert r.captions == s.captions
    assert any(r.captions != s.captions for r, s in zip(a[0].images, c[0].images))
    ids = [r.image_id for split in a for r in split.images]
    assert len(set(ids)) == len(ids) == 16


def test_synthetic_captions_follow_regions():
    world = SyntheticWorld()
    train, _, _ = generate_synthetic(world, 40, 0, 0)
    obj, col = world.prototypes(32)
    combos = (obj[:, None, :] + col[None, :, :]).reshape(-1, 32)
    for rec in train.images:
        assert 2 <= len(rec.captions) <= 3
        dist = np.linalg.norm(rec.features.regions[:, None, :] - combos[None], axis=-1)
        best = dist.min(axis=1)
        picked = np.argsort(best)[:2]
        found = {world.objects[int(dist[k].argmin()) // len(world.colors)] for k in picked}
        for cap in rec.captions:
            assert world.objects_in(cap) == found


def test_synthetic_impossible_configs():
    with pytest.raises(ValueError):
        SyntheticWorld(objects=("ball",))
    with pytest.raises(ValueError):
        SyntheticWorld(objects_per_image=9)
    with pytest.raises(ValueError):
        SyntheticWorld().prototypes(4)
    with pytest.raises(ValueError):
        SyntheticWorld(templates=("a {c1} {o1}",))


def test_dataset_check_bounds():
    vocab = build_vocab(["a b"] * 6)
    ds = CaptionDataset("x", [])
    ds.check(vocab)
    train, _, _ = generate_synthetic(SyntheticWorld(), 20, 0, 0)
    vocab = build_vocab([c for r in train.images for c in r.captions])
    train.check(vocab)


def test_image_features_mean():
    f = ImageFeatures(np.array([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(f.mean, [2.0, 3.0])
    assert (f.n_regions, f.feat_dim) == (2, 2)
