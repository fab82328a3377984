import numpy as np
import pytest

from moodkit import histood as ho
from moodkit import synthdata as sd
from moodkit.errors import BadMagic, BinningMismatch, InvalidVolume, TruncatedPayload
from moodkit.volcore import Volume3D, normalize


@pytest.fixture(scope="module")
def train_set():
    return [sd.generate_phantom(100 + i, 48) for i in range(8)]


@pytest.fixture(scope="module")
def ref(train_set):
    return ho.build_reference(train_set, "brain")


def test_constant_024_single_bin():
    h = ho.compute_histogram(Volume3D(np.full((64, 64, 64), 0.24)))
    assert h[983] == 262144 and h.sum() == 262144


def test_zero_volume_bin0():
    h = ho.compute_histogram(Volume3D(np.zeros((4, 4, 4))))
    assert h[0] == 64 and h.sum() == 64


def test_one_maps_to_last_bin():
    assert ho.compute_histogram(Volume3D(np.ones((2, 2, 2))))[4095] == 8


def test_unnormalized_rejected():
    with pytest.raises(InvalidVolume):
        ho.compute_histogram(Volume3D(np.full((2, 2, 2), 1.5)))


def test_counts_partition(rng):
    v = Volume3D(rng.random((7, 9, 5)))
    assert ho.compute_histogram(v).sum() == 7 * 9 * 5


def test_single_volume_std_zero(phantom32):
    r = ho.build_reference([phantom32])
    assert not r.bin_std.any()
    assert np.array_equal(r.bin_mean, ho.compute_histogram(normalize(phantom32)))


def test_two_volumes_one_voxel_differs():
    a = np.zeros((4, 4, 4))
    a[0, 0, 0] = 1.0
    a[1, 1, 1] = 0.5
    b = a.copy()
    b[1, 1, 1] = 0.25
    r = ho.build_reference([Volume3D(a), Volume3D(b)])
    nz = np.flatnonzero(r.bin_std)
    assert nz.tolist() == [1024, 2048]
    assert np.allclose(r.bin_std[nz], 0.5)


def test_empty_training_set():
    with pytest.raises(ValueError):
        ho.build_reference([])


def test_reference_round_trip(tmp_path, ref):
    ref.save(tmp_path / "r.href")
    raw = (tmp_path / "r.href").read_bytes()
    assert raw[:8] == b"HREF0001" and len(raw) == 12 + 16 * 4096 + 1 and raw[-1] == 0
    back = ho.HistogramReference.load(tmp_path / "r.href")
    assert np.array_equal(back.bin_mean, ref.bin_mean) and np.array_equal(back.bin_std, ref.bin_std)
    assert back.region == "brain"


def test_reference_corrupt(tmp_path, ref):
    ref.save(tmp_path / "r.href")
    raw = (tmp_path / "r.href").read_bytes()
    (tmp_path / "t.href").write_bytes(raw[:100])
    with pytest.raises(TruncatedPayload):
        ho.HistogramReference.load(tmp_path / "t.href")
    (tmp_path / "m.href").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagic):
        ho.HistogramReference.load(tmp_path / "m.href")


def test_training_member_not_detected(train_set, ref):
    cfg = ho.HistDetectorConfig(k_sigma=4.0)
    for v in train_set:
        assert not ho.detect(normalize(v), ref, cfg).detected


def test_zero_volume_not_detected(ref):
    assert not ho.detect(Volume3D(np.zeros((48, 48, 48))), ref, ho.HistDetectorConfig()).peak_found


def test_toy_sphere_detected(ref):
    v = normalize(sd.generate_phantom(999, 48))
    s = sd.insert_toy_sphere(v, (24, 24, 24), 8, 0.24)
    d = ho.detect(s.image, ref, ho.HistDetectorConfig.for_region("brain"))
    assert d.detected and d.peak_bin == 983
    assert abs(d.peak_intensity - 0.24) <= 1.0 / 4096
    inter = (d.mask.data & s.truth_mask.data).sum()
    assert 2 * inter / (d.mask.count() + s.truth_mask.count()) >= 0.6


def test_permutation_invariance(ref, rng):
    v = normalize(sd.generate_phantom(5, 48))
    s = sd.insert_toy_sphere(v, (24, 24, 24), 7, 0.03).image
    cfg = ho.HistDetectorConfig()
    perm = Volume3D(rng.permutation(s.data.ravel()).reshape(s.shape))
    a, b = ho.detect(s, ref, cfg), ho.detect(perm, ref, cfg)
    assert (a.peak_found, a.peak_bin, a.peak_excess) == (b.peak_found, b.peak_bin, b.peak_excess)


def test_k_sigma_monotone(ref):
    v = normalize(sd.generate_phantom(77, 48))
    s = sd.insert_toy_sphere(v, (24, 24, 24), 5, 0.5).image
    found = [ho.detect(s, ref, ho.HistDetectorConfig(k_sigma=k)).peak_found for k in (1, 4, 16, 64, 256, 4096)]
    assert all(not later or earlier for earlier, later in zip(found, found[1:]))


def test_binning_mismatch(ref):
    small = ho.HistogramReference(ref.bin_mean[:100], ref.bin_std[:100])
    with pytest.raises(BinningMismatch):
        ho.detect(Volume3D(np.zeros((4, 4, 4))), small, ho.HistDetectorConfig())


def test_ties_pick_lowest_bin():
    ref = ho.HistogramReference(np.zeros(4096), np.zeros(4096))
    a = np.zeros((20, 20, 20))
    a[:8, :8, :8] = 0.5
    a[10:18, 10:18, 10:18] = 0.75
    d = ho.detect(Volume3D(a), ref, ho.HistDetectorConfig())
    assert d.peak_bin == 2048


def test_make_mask_removes_specks():
    a = np.zeros((30, 30, 30))
    a[::7, ::7, ::7] = 0.5
    m = ho.make_mask(Volume3D(a), 2048, ho.HistDetectorConfig())
    assert not m.any()


def test_make_mask_subset_of_dilated_selection(rng):
    a = (rng.random((24, 24, 24)) < 0.6) * 0.5
    a[4:16, 4:16, 4:16] = 0.5
    v = Volume3D(a)
    cfg = ho.HistDetectorConfig()
    m = ho.make_mask(v, 2048, cfg)
    sel = a == 0.5
    assert m.any()
    assert not (m.data & ~sel).any()


def test_make_mask_out_of_range():
    with pytest.raises(ValueError):
        ho.make_mask(Volume3D(np.zeros((4, 4, 4))), 5000, ho.HistDetectorConfig())


def test_radius12_dice():
    v = normalize(sd.generate_phantom(3, 64))
    s = sd.insert_toy_sphere(v, (32, 32, 32), 12, 0.24)
    m = ho.make_mask(s.image, 983, ho.HistDetectorConfig())
    dice = 2 * (m.data & s.truth_mask.data).sum() / (m.count() + s.truth_mask.count())
    assert dice >= 0.6


def test_region_defaults():
    assert ho.HistDetectorConfig.for_region("brain").k_sigma == 64
    assert ho.HistDetectorConfig.for_region("abdomen").k_sigma == 128
    with pytest.raises(ValueError):
        ho.HistDetectorConfig(k_sigma=0)
