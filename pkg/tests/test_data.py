import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iamnn.data import (
    SyntheticSpec,
    batches,
    export_binary,
    gen_synthetic,
    half_noisy,
    load_cifar_binary,
    parse_records,
)
from iamnn.errors import ContractError, DataFormatError


def fake_cifar(path, n, label_bytes=1, seed=0):
    r = np.random.default_rng(seed)
    labels = r.integers(0, 10, size=(n, label_bytes), dtype=np.uint8)
    pixels = r.integers(0, 256, size=(n, 3072), dtype=np.uint8)
    path.write_bytes(np.concatenate([labels, pixels], axis=1).tobytes())
    return labels, pixels


class TestCifar:
    def test_record_sizes(self, tmp_path):
        f = tmp_path / "b.bin"
        labels, pixels = fake_cifar(f, 20)
        assert f.stat().st_size == 20 * 3073
        ds = load_cifar_binary(f)
        assert len(ds) == 20 and ds.images.shape == (20, 3, 32, 32)
        np.testing.assert_array_equal(ds.labels, labels[:, 0])
        np.testing.assert_allclose(ds.raw_pixels()[3, 1, 0, :4], pixels[3, 1024:1028] / 255.0, atol=1e-6)

    def test_first_label_byte(self):
        buf = bytes([6]) + bytes(3072)
        labels, _ = parse_records(buf, 1)
        assert labels.tolist() == [6]

    def test_cifar100_uses_fine_label(self, tmp_path):
        f = tmp_path / "train.bin"
        labels, _ = fake_cifar(f, 5, label_bytes=2)
        ds = load_cifar_binary(f, "cifar100")
        np.testing.assert_array_equal(ds.labels, labels[:, 1])
        assert ds.num_classes == 100

    def test_partial_record_offset(self, tmp_path):
        f = tmp_path / "b.bin"
        fake_cifar(f, 3)
        f.write_bytes(f.read_bytes() + b"\x01\x02")
        with pytest.raises(DataFormatError) as info:
            load_cifar_binary(f)
        assert info.value.offset == 3 * 3073

    def test_normalized_channel_means(self, tmp_path):
        f = tmp_path / "b.bin"
        fake_cifar(f, 50)
        ds = load_cifar_binary(f)
        np.testing.assert_allclose(ds.images.mean(axis=(0, 2, 3)), 0.0, atol=1e-3)
        np.testing.assert_allclose(ds.images.std(axis=(0, 2, 3)), 1.0, atol=1e-3)

    def test_loading_twice_is_identical(self, tmp_path):
        f = tmp_path / "b.bin"
        fake_cifar(f, 4)
        assert load_cifar_binary(f).images.tobytes() == load_cifar_binary(f).images.tobytes()

    def test_directory_layout(self, tmp_path):
        for i in range(1, 6):
            fake_cifar(tmp_path / f"data_batch_{i}.bin", 2, seed=i)
        assert len(load_cifar_binary(tmp_path)) == 10
        with pytest.raises(FileNotFoundError, match="test_batch.bin"):
            load_cifar_binary(tmp_path, split="test")

    def test_export_round_trip(self, tmp_path):
        ds = gen_synthetic(SyntheticSpec(3, 32, 4, 0.2, seed=1))
        export_binary(ds, tmp_path / "s.bin")
        back = load_cifar_binary(tmp_path / "s.bin")
        np.testing.assert_array_equal(back.labels, ds.labels)
        np.testing.assert_allclose(back.raw_pixels(), ds.raw_pixels(), atol=0.5 / 255 + 1e-6)


class TestSynthetic:
    def test_noise_free_samples_identical(self):
        ds = gen_synthetic(SyntheticSpec(3, 8, 4, 0.0))
        assert np.array_equal(ds.images[0], ds.images[1])
        assert not np.array_equal(ds.images[0], ds.images[4])

    def test_same_seed_same_data(self):
        a, b = gen_synthetic(SyntheticSpec(seed=5, noise_level=0.3)), gen_synthetic(SyntheticSpec(seed=5, noise_level=0.3))
        assert a.images.tobytes() == b.images.tobytes()

    def test_noise_present(self):
        spec = SyntheticSpec(2, 8, 2, [0.0, 0.5, 0.0, 0.0])
        raw = gen_synthetic(spec).raw_pixels()
        assert np.abs(raw[1] - raw[0]).mean() > 0

    def test_noise_recorded_per_sample(self):
        ds = gen_synthetic(half_noisy(num_classes=2, samples_per_class=4))
        assert ds.noise.tolist() == [0, 0.6] * 4
        assert ds.subset([1, 2]).noise.tolist() == [0.6, 0.0]

    def test_classes_share_intensity_statistics(self):
        raw = gen_synthetic(SyntheticSpec(5, 16, 1, 0.0)).raw_pixels()
        means = raw.mean(axis=(1, 2, 3))
        assert np.ptp(means) < 0.05

    def test_bad_noise_shape(self):
        with pytest.raises(ContractError):
            gen_synthetic(SyntheticSpec(2, 8, 3, [0.1, 0.2, 0.3]))


class TestBatches:
    def test_sizes(self):
        ds = gen_synthetic(SyntheticSpec(2, 4, 5))
        assert [len(b[1]) for b in batches(ds, 4)] == [4, 4, 2]

    def test_too_large(self):
        with pytest.raises(ContractError):
            list(batches(gen_synthetic(SyntheticSpec(2, 4, 2)), 5))

    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(1, 40), bs=st.integers(1, 40), seed=st.integers(0, 2**16), epoch=st.integers(0, 5))
    def test_each_id_once_per_epoch(self, n, bs, seed, epoch):
        ds = gen_synthetic(SyntheticSpec(1, 2, n))
        bs = min(bs, n)
        ids = np.concatenate([b[2] for b in batches(ds, bs, seed, epoch)])
        assert sorted(ids.tolist()) == list(range(n))
        again = np.concatenate([b[2] for b in batches(ds, bs, seed, epoch)])
        assert ids.tolist() == again.tolist()

    def test_epochs_differ(self):
        ds = gen_synthetic(SyntheticSpec(2, 4, 10))
        a = np.concatenate([b[2] for b in batches(ds, 5, 1, 0)])
        b = np.concatenate([b[2] for b in batches(ds, 5, 1, 1)])
        assert a.tolist() != b.tolist()
