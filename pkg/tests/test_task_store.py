import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from PIL import Image

from sparseseg.errors import ConfigError, DataError
from sparseseg.task_store import (Dataset, LabeledPair, Sample, SegTask, SynthSpec, binarize, build_meta_dataset,
                                  ingest_dataset, make_folds, make_tasks, resize_pair, synth_generate, task_id,
                                  write_dataset)


def write_pairs(root, n=10, side=16, labels=(0, 1, 2)):
    (root / "images").mkdir(parents=True)
    (root / "masks").mkdir()
    rng = np.random.default_rng(0)
    for i in range(n):
        Image.fromarray(rng.integers(0, 256, (side, side), dtype=np.uint8)).save(root / "images" / f"{i:03d}.png")
        mask = rng.choice(labels, size=(side, side)).astype(np.uint8)
        Image.fromarray(mask).save(root / "masks" / f"{i:03d}.png")
    (root / "classes.txt").write_text("1\tlungs\n2\theart\n")


class TestIngest:
    def test_well_formed(self, tmp_path):
        write_pairs(tmp_path / "cxr")
        ds = ingest_dataset(tmp_path / "cxr")
        assert len(ds) == 10
        assert ds.name == "cxr"
        assert ds.class_names == {1: "lungs", 2: "heart"}
        assert all(0.0 <= s.image.min() and s.image.max() <= 1.0 for s in ds.samples)

    def test_unpaired(self, tmp_path):
        write_pairs(tmp_path / "cxr")
        (tmp_path / "cxr" / "masks" / "003.png").unlink()
        with pytest.raises(DataError, match="unpaired sample"):
            ingest_dataset(tmp_path / "cxr")

    def test_unknown_label(self, tmp_path):
        write_pairs(tmp_path / "cxr", labels=(0, 1, 7))
        with pytest.raises(DataError, match="unknown label"):
            ingest_dataset(tmp_path / "cxr", class_map={0: "bg", 1: "a", 2: "b"})

    def test_shape_mismatch(self, tmp_path):
        write_pairs(tmp_path / "cxr")
        Image.fromarray(np.zeros((8, 12), np.uint8)).save(tmp_path / "cxr" / "masks" / "000.png")
        with pytest.raises(DataError, match="shape mismatch"):
            ingest_dataset(tmp_path / "cxr")

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DataError, match="dataset not found"):
            ingest_dataset(tmp_path / "nope")

    def test_write_then_ingest(self, tmp_path):
        ds = synth_generate(SynthSpec(modalities=["speckle"], images_per_dataset=3, side=16), 0)[0]
        back = ingest_dataset(write_dataset(ds, tmp_path / ds.name))
        assert back.class_names == ds.class_names
        for a, b in zip(ds.samples, back.samples):
            assert np.array_equal(a.mask, b.mask)
            assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-6


def three_class_dataset(masks):
    samples = [Sample(str(i), np.zeros(m.shape, np.float32), m) for i, m in enumerate(masks)]
    return Dataset("d", samples, {1: "lungs", 2: "heart"})


class TestBinarize:
    def test_all_foreground(self):
        ds = three_class_dataset([np.ones((8, 8), np.uint8)])
        (_, m), = binarize(ds, "lungs")
        assert (m == 1).all()

    def test_other_classes_become_background(self):
        ds = three_class_dataset([np.array([[0, 1], [2, 1]], np.uint8)])
        (_, m), = binarize(ds, 1)
        assert m.tolist() == [[0, 1], [0, 1]]

    def test_absent_class(self):
        with pytest.raises(DataError):
            binarize(three_class_dataset([np.zeros((8, 8), np.uint8)]), "clavicle")

    @given(hnp.arrays(np.uint8, (6, 6), elements=st.integers(0, 2)), st.sampled_from(["lungs", "heart"]))
    def test_idempotent(self, mask, cls):
        once = binarize(three_class_dataset([mask]), cls)
        ds2 = Dataset("d", [Sample("0", im, m) for im, m in once], {1: cls})
        twice = binarize(ds2, 1)
        assert np.array_equal(once[0][1], twice[0][1])


class TestResize:
    def test_identity(self):
        rng = np.random.default_rng(0)
        im = rng.random((128, 128), dtype=np.float32)
        m = rng.integers(0, 2, (128, 128)).astype(np.uint8)
        im2, m2 = resize_pair(im, m, 128)
        assert im2.tobytes() == im.tobytes() and m2.tobytes() == m.tobytes()

    def test_constant_mask(self):
        _, m = resize_pair(np.zeros((256, 256), np.float32), np.ones((256, 256), np.uint8), 128)
        assert m.shape == (128, 128) and (m == 1).all()

    def test_half_split_fraction(self):
        mask = np.zeros((256, 256), np.uint8)
        mask[:, :128] = 1
        _, m = resize_pair(np.zeros((256, 256), np.float32), mask, 128)
        # nearest-label oracle: output column j samples input column floor((j + 0.5) * 2)
        src_cols = [int((j + 0.5) * 256 / 128) for j in range(128)]
        expected = np.mean([mask[0, c] for c in src_cols])
        assert abs(m.mean() - expected) < 1e-12
        assert abs(m.mean() - 0.5) <= 0.02

    @given(st.integers(8, 40), st.integers(8, 40), st.integers(8, 48), st.integers(0, 1000))
    @settings(max_examples=30, deadline=None)
    def test_mask_stays_binary(self, h, w, side, seed):
        rng = np.random.default_rng(seed)
        im, m = resize_pair(rng.random((h, w), dtype=np.float32), rng.integers(0, 2, (h, w)).astype(np.uint8), side)
        assert m.shape == (side, side) and im.shape == (side, side)
        assert set(np.unique(m)) <= {0, 1}
        assert 0.0 <= im.min() and im.max() <= 1.0

    def test_too_small(self):
        with pytest.raises(ConfigError):
            resize_pair(np.zeros((16, 16), np.float32), np.zeros((16, 16), np.uint8), 4)


class TestFolds:
    def test_even(self):
        f = make_folds(10, 5, seed=0)
        assert sorted(np.bincount(f.assignments).tolist()) == [2] * 5

    def test_uneven(self):
        f = make_folds(11, 5, seed=0)
        assert sorted(np.bincount(f.assignments).tolist()) == [2, 2, 2, 2, 3]

    def test_deterministic(self):
        assert np.array_equal(make_folds(23, 5, 4).assignments, make_folds(23, 5, 4).assignments)

    def test_too_small(self):
        with pytest.raises(ConfigError):
            make_folds(4, 5, 0)

    @given(st.integers(2, 10), st.integers(0, 60), st.integers(0, 2**32))
    def test_partition(self, k, extra, seed):
        n = k + extra
        f = make_folds(n, k, seed)
        seen = np.concatenate([f.val_indices(i) for i in range(k)])
        assert sorted(seen.tolist()) == list(range(n))
        sizes = [len(f.val_indices(i)) for i in range(k)]
        assert max(sizes) - min(sizes) <= 1
        for i in range(k):
            assert set(f.train_indices(i)).isdisjoint(f.val_indices(i))


def fake_task(ds, cls):
    img = np.zeros((8, 8), np.float32)
    lab = np.zeros((8, 8), np.uint8)
    return SegTask(task_id(ds, cls), ds, cls, [LabeledPair(f"{ds}/a", img, lab)], [LabeledPair(f"{ds}/b", img, lab)])


class TestMetaDataset:
    def test_leave_one_out(self):
        tasks = [fake_task(f"d{i}", "c") for i in range(13)]
        meta = build_meta_dataset(tasks, "d4/c")
        assert len(meta.tasks) == 12
        assert np.allclose(meta.sampling_weights, 1 / 12)
        assert "d4/c" not in {t.id for t in meta.tasks}

    def test_unknown_held_out(self):
        with pytest.raises(DataError):
            build_meta_dataset([fake_task("d0", "c")], "d9/c")

    def test_same_images_other_class_kept(self):
        tasks = [fake_task("jsrt", "lungs"), fake_task("jsrt", "heart"), fake_task("mont", "lungs")]
        meta = build_meta_dataset(tasks, "jsrt/lungs")
        assert {t.id for t in meta.tasks} == {"jsrt/heart", "mont/lungs"}

    def test_duplicate_pair_excluded(self):
        dup = fake_task("jsrt", "lungs")
        dup.id = "jsrt/lungs-copy"
        meta = build_meta_dataset([fake_task("jsrt", "lungs"), dup, fake_task("a", "b")], "jsrt/lungs")
        assert [t.id for t in meta.tasks] == ["a/b"]

    def test_support_query_disjoint(self):
        img, lab = np.zeros((8, 8), np.float32), np.zeros((8, 8), np.uint8)
        with pytest.raises(DataError):
            SegTask("x/y", "x", "y", [LabeledPair("x/1", img, lab)], [LabeledPair("x/1", img, lab)])


class TestSynth:
    spec = SynthSpec(modalities=["gradient", "speckle", "banded"], classes=["stripe", "ellipse"],
                     images_per_dataset=40, side=32)

    def test_six_tasks(self):
        datasets = synth_generate(self.spec, seed=0)
        assert len(datasets) == 3 and all(len(d) == 40 for d in datasets)
        tasks = make_tasks(datasets, seed=0)
        assert len(tasks) == 6
        assert len({t.key for t in tasks}) == 6
        for t in tasks:
            assert not {p.id for p in t.support} & {p.id for p in t.query}

    def test_deterministic(self):
        a = synth_generate(self.spec, seed=5)
        b = synth_generate(self.spec, seed=5)
        for da, db in zip(a, b):
            for sa, sb in zip(da.samples, db.samples):
                assert sa.image.tobytes() == sb.image.tobytes() and sa.mask.tobytes() == sb.mask.tobytes()
        c = synth_generate(self.spec, seed=6)
        assert a[0].samples[0].image.tobytes() != c[0].samples[0].image.tobytes()

    def test_ellipse_area_matches_rasterization(self):
        # ellipse is the last (topmost) class, so its label is never painted over
        import math
        for ds in synth_generate(self.spec, seed=1)[:1]:
            label = ds.label_of("ellipse")
            for s in ds.samples[:5]:
                p = s.meta["ellipse"]
                c, sn = math.cos(p["angle"]), math.sin(p["angle"])
                count = 0
                for y in range(self.spec.side):
                    for x in range(self.spec.side):
                        u = (x - p["cx"]) * c + (y - p["cy"]) * sn
                        v = -(x - p["cx"]) * sn + (y - p["cy"]) * c
                        count += (u / p["rx"]) ** 2 + (v / p["ry"]) ** 2 <= 1.0
                assert np.count_nonzero(s.mask == label) == count > 0

    def test_images_in_unit_range(self):
        for ds in synth_generate(self.spec, seed=2):
            for s in ds.samples:
                assert s.image.dtype == np.float32 and 0.0 <= s.image.min() and s.image.max() <= 1.0

    @pytest.mark.parametrize("bad", [dict(modalities=[]), dict(classes=[]), dict(classes=["cube"])])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            synth_generate(SynthSpec(**bad), 0)
