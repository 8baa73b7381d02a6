import numpy as np
import pytest

from tdrl.synthdata import (
    GenSpec,
    centroid_oracle,
    generate_batch,
    generate_clip,
    generate_split,
    load_clips,
    reversed_class,
    save_clips,
    split_seeds,
)

K4, K8 = GenSpec(), GenSpec(K=8)


def test_clip_shape_range_and_determinism():
    a = generate_clip(7, 2)
    assert a.shape == (8, 1, 32, 32) and a.dtype == np.float32
    assert a.min() >= 0.0 and a.max() <= 1.0
    assert a.tobytes() == generate_clip(7, 2).tobytes()
    assert a.tobytes() != generate_clip(8, 2).tobytes()


def test_unknown_class_rejected():
    with pytest.raises(ValueError):
        generate_clip(0, 4)
    with pytest.raises(ValueError):
        GenSpec(K=6)


@pytest.mark.parametrize("spec", [K4, K8], ids=["K4", "K8"])
def test_time_reversal_gives_constructed_counterpart(spec):
    for seed in range(40):
        for cls in range(spec.K):
            rev = generate_clip(seed, cls, spec)[::-1]
            np.testing.assert_array_equal(rev, generate_clip(seed, reversed_class(cls, spec), spec))


def test_left_and_right_share_the_same_unordered_frames():
    for seed in range(20):
        left, right = generate_clip(seed, 0), generate_clip(seed, 1)
        key = lambda clip: sorted(f.tobytes() for f in clip)  # noqa: E731
        assert key(left) == key(right)


def test_background_is_static_within_a_clip():
    clip = generate_clip(3, 1)[:, 0]
    floor = clip.min(axis=0)
    # every pixel shows the bare background in at least T - 3 frames
    assert np.all((clip == floor).sum(axis=0) >= 5)


def test_mean_pixel_is_class_independent():
    seeds = np.arange(1000)
    means = [generate_batch(seeds, np.full(1000, c)).clips.mean() for c in range(4)]
    assert max(means) - min(means) < 1e-3


def test_oracle_recovers_every_label():
    for spec in (K4, K8):
        for seed in range(60):
            for cls in range(spec.K):
                assert centroid_oracle(generate_clip(seed, cls, spec), spec) == cls


def test_split_is_disjoint_balanced_and_reproducible():
    tr, va = generate_split(40, 20, seed=5, spec=GenSpec(H=16, W=16))
    assert not set(tr.seeds) & set(va.seeds)
    assert np.bincount(tr.labels).tolist() == [10] * 4
    tr2, _ = generate_split(40, 20, seed=5, spec=GenSpec(H=16, W=16))
    np.testing.assert_array_equal(tr.clips, tr2.clips)
    a, b = split_seeds(500, 500, 1)
    assert len(set(a) | set(b)) == 1000


def test_clip_cache_round_trip(tmp_path):
    batch = generate_batch([2**31 - 2, 0, 123456789], [0, 3, 1], GenSpec(H=16, W=16))
    save_clips(tmp_path / "x.clips", batch)
    back = load_clips(tmp_path / "x.clips")
    np.testing.assert_array_equal(back.clips, batch.clips)
    np.testing.assert_array_equal(back.labels, batch.labels)
    np.testing.assert_array_equal(back.seeds, batch.seeds)
    assert (tmp_path / "x.clips").read_bytes()[:6] == b"CLIPS1"
