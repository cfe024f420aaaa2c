import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mimforge._io import FormatError
from mimforge.data import (
    SHIFT_KINDS,
    UNKNOWN,
    Dataset,
    ParameterError,
    Provenance,
    ShiftSpec,
    augment,
    corrupt,
    corrupt_dataset,
    dataset_from_bytes,
    dataset_to_bytes,
    generate_shapes_dataset,
    hflip,
    load_dataset,
    make_ood_mesh,
    mesh_dataset,
    noise_sigma,
    save_dataset,
)


@pytest.fixture(scope="module")
def shapes():
    return generate_shapes_dataset(10, 30, 32, rng_seed=11)


def nearest_centroid_accuracy(train: Dataset, test: Dataset) -> float:
    x = train.images.reshape(len(train), -1).astype(np.float64)
    cents = np.stack([x[train.labels == k].mean(axis=0) for k in range(train.num_classes)])
    y = test.images.reshape(len(test), -1).astype(np.float64)
    d = ((y[:, None, :] - cents[None]) ** 2).sum(axis=2)
    return float(np.mean(d.argmin(axis=1) == test.labels))


class TestShapes:
    def test_deterministic(self):
        a = generate_shapes_dataset(4, 5, 16, rng_seed=3)
        b = generate_shapes_dataset(4, 5, 16, rng_seed=3)
        assert a.images.tobytes() == b.images.tobytes()
        assert a.labels.tolist() == b.labels.tolist()

    def test_seed_changes_images(self):
        a = generate_shapes_dataset(2, 2, 16, rng_seed=0)
        b = generate_shapes_dataset(2, 2, 16, rng_seed=1)
        assert a.images.tobytes() != b.images.tobytes()

    def test_empty(self):
        ds = generate_shapes_dataset(3, 0, 16)
        assert len(ds) == 0 and ds.image_shape == (16, 16, 3)

    def test_layout(self, shapes):
        assert shapes.images.shape == (300, 32, 32, 3) and shapes.images.dtype == np.float32
        assert np.bincount(shapes.labels).tolist() == [30] * 10
        assert shapes.images.min() >= 0.0 and shapes.images.max() <= 1.0
        assert np.all(shapes.provenance == Provenance.SOURCE)

    def test_all_families_render(self):
        ds = generate_shapes_dataset(16, 1, 32, rng_seed=0)
        masks = [(img.std(axis=2) >= 0) & (np.abs(img - img[0, 0]).sum(axis=2) > 0.1) for img in ds.images]
        assert all(m.any() for m in masks)
        assert len({m.tobytes() for m in masks}) == 16

    @pytest.mark.parametrize("n", [1, 17])
    def test_class_count_bounds(self, n):
        with pytest.raises(ParameterError):
            generate_shapes_dataset(n, 1)

    def test_nearest_centroid_separability(self, shapes):
        held_out = generate_shapes_dataset(10, 20, 32, rng_seed=12)
        assert nearest_centroid_accuracy(shapes, held_out) >= 0.9


class TestAugment:
    def test_flip_is_involution(self, rng):
        img = rng.random((8, 6, 3))
        twice = augment(augment(img, rng, (1.0, 1.0), 0.0, 1.0), rng, (1.0, 1.0), 0.0, 1.0)
        np.testing.assert_array_equal(twice, img)
        np.testing.assert_array_equal(hflip(hflip(img)), img)

    def test_identity_settings(self, rng):
        img = rng.random((8, 8, 3))
        np.testing.assert_array_equal(augment(img, rng, (1.0, 1.0), 0.0, 0.0), img)

    def test_range_and_shape_over_many_draws(self, shapes):
        rng = np.random.default_rng(0)
        for i in range(1000):
            out = augment(shapes.images[i % len(shapes)], rng)
            assert out.shape == (32, 32, 3)
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_seeded(self, shapes):
        a = augment(shapes.images[0], np.random.default_rng(5))
        b = augment(shapes.images[0], np.random.default_rng(5))
        assert a.tobytes() == b.tobytes()


class TestCorrupt:
    def test_noise_statistics(self):
        img = np.full((100, 100, 1), 0.5)
        out = corrupt(img, ShiftSpec("gaussian_noise", 1, 3))
        assert abs(out.std() - noise_sigma(1)) <= 0.2 * noise_sigma(1)

    def test_blur_of_constant(self):
        img = np.full((12, 12, 3), 0.3)
        for s in range(1, 6):
            np.testing.assert_array_equal(corrupt(img, ShiftSpec("blur", s)), img)

    def test_style_invert_threshold(self):
        img = np.array([[[0.1], [0.75], [0.9]]])
        out = corrupt(img, ShiftSpec("style_invert", 1))
        np.testing.assert_allclose(out[0, :, 0], [0.1, 0.75, 0.1], atol=1e-15)

    @pytest.mark.parametrize("kind", SHIFT_KINDS)
    def test_distance_non_decreasing_in_severity(self, kind, shapes):
        corpus = shapes.subset(np.arange(0, 300, 3))
        dists = []
        for s in range(1, 6):
            shifted = corrupt_dataset(corpus, ShiftSpec(kind, s, 9))
            diff = (shifted.images.astype(np.float64) - corpus.images).reshape(len(corpus), -1)
            dists.append(np.linalg.norm(diff, axis=1).mean())
        assert all(b >= a for a, b in zip(dists, dists[1:])), dists

    @settings(max_examples=60, deadline=None)
    @given(st.sampled_from(SHIFT_KINDS), st.integers(1, 5), st.integers(0, 2**32 - 1))
    def test_range_dtype_and_shape_preserved(self, kind, severity, seed):
        img = np.random.default_rng(seed).random((8, 8, 3)).astype(np.float32)
        out = corrupt(img, ShiftSpec(kind, severity, seed))
        assert out.shape == img.shape and out.dtype == np.float32
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert out.tobytes() == corrupt(img, ShiftSpec(kind, severity, seed)).tobytes()

    @pytest.mark.parametrize("kind,severity", [("fog", 1), ("blur", 0), ("blur", 6)])
    def test_bad_spec(self, kind, severity):
        with pytest.raises(ParameterError):
            ShiftSpec(kind, severity)

    def test_name(self):
        assert ShiftSpec("gaussian_noise", 4).name == "gaussian_noise_s4"


class TestMesh:
    def test_zero_count(self, shapes):
        assert make_ood_mesh(shapes, 0) == []

    def test_properties(self, shapes):
        meshes = make_ood_mesh(shapes, 40, rng_seed=2)
        for m in meshes:
            assert m.label == UNKNOWN and m.provenance == Provenance.OOD_MESH
            assert len(m.source_labels) >= 2
            assert m.pixels.shape == (32, 32, 3) and m.pixels.min() >= 0 and m.pixels.max() <= 1

    def test_deterministic(self, shapes):
        a = mesh_dataset(shapes, 5, 4)
        b = mesh_dataset(shapes, 5, 4)
        assert a.images.tobytes() == b.images.tobytes()

    def test_too_small(self):
        one_class = generate_shapes_dataset(2, 3, 16).subset([0, 1, 2])
        with pytest.raises(ParameterError):
            make_ood_mesh(one_class, 1)

    def test_meshes_lie_away_from_every_class(self, shapes):
        x = shapes.images.reshape(len(shapes), -1).astype(np.float64)
        cents = np.stack([x[shapes.labels == k].mean(axis=0) for k in range(10)])
        within = np.mean([np.linalg.norm(x[i] - cents[shapes.labels[i]]) for i in range(len(x))])
        meshes = mesh_dataset(shapes, 60, 1).images.reshape(60, -1).astype(np.float64)
        for c in cents:
            assert np.linalg.norm(meshes - c, axis=1).mean() > within


class TestDatasetFile:
    def test_round_trip_bit_exact(self, tmp_path, shapes):
        ds = shapes.subset(np.arange(12)).concat(mesh_dataset(shapes, 3, 0))
        save_dataset(ds, tmp_path / "d.mimd")
        raw = (tmp_path / "d.mimd").read_bytes()
        assert raw[:4] == b"MIMD"
        header = [int.from_bytes(raw[4 + 4 * i : 8 + 4 * i], "little") for i in range(6)]
        assert header == [1, 15, 32, 32, 3, 10]
        assert len(raw) == 28 + 15 * (5 + 32 * 32 * 3 * 4)
        # Last record is a mesh: label -1, provenance 3.
        rec = 28 + 14 * (5 + 32 * 32 * 3 * 4)
        assert int.from_bytes(raw[rec : rec + 4], "little", signed=True) == -1 and raw[rec + 4] == 3
        back = load_dataset(tmp_path / "d.mimd")
        assert back.images.tobytes() == ds.images.tobytes()
        assert back.labels.tolist() == ds.labels.tolist()
        assert back.provenance.tolist() == ds.provenance.tolist()
        assert dataset_to_bytes(back) == raw

    def test_empty_round_trip(self):
        ds = Dataset.empty(8, 1, 2)
        assert len(dataset_from_bytes(dataset_to_bytes(ds))) == 0

    def test_truncated(self, shapes):
        raw = dataset_to_bytes(shapes.subset([0, 1]))
        with pytest.raises(FormatError):
            dataset_from_bytes(raw[:-1])
