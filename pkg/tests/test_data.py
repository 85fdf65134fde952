"""Dataset pipeline tests: manifests, filtering, merging, balancing,
splitting, variants and sample preparation."""

import numpy as np
import numpy.testing as npt
import pytest

from foodrec import data as D
from foodrec.errors import ContractError, ValidationError
from foodrec.image import RasterImage, read_ppm, read_ppm_dims, write_ppm
from foodrec.sr import ScnParams


def rec(path, dish, cat=None, source="A", split="unassigned"):
    return D.SampleRecord(path, dish, cat, source, split)


def make_manifest(class_sizes: dict, source="A", cat_of=None):
    records = []
    for dish, n in class_sizes.items():
        for i in range(n):
            cat = cat_of[dish] if cat_of else None
            records.append(rec(f"/img/{source}/{dish}/{i}.ppm", dish, cat, source))
    return D.Manifest.from_records(records)


# ---------------------------------------------------------------------------
# manifest I/O

class TestLoadManifest:
    def test_empty_file(self, tmp_path):
        p = tmp_path / "m.tsv"
        p.write_text("", encoding="utf-8")
        m = D.load_manifest(p)
        assert len(m.records) == 0 and m.num_classes == 0

    def test_class_index_first_appearance(self, tmp_path):
        p = tmp_path / "m.tsv"
        p.write_text("a.ppm\tstew\tMeats\tA\n"
                     "b.ppm\tpaella\tRice\tA\n"
                     "c.ppm\tstew\tMeats\tA\n", encoding="utf-8")
        m = D.load_manifest(p)
        assert m.num_classes == 2
        assert m.class_index == {"stew": 0, "paella": 1}

    def test_missing_dish_names_line(self, tmp_path):
        p = tmp_path / "m.tsv"
        p.write_text("a.ppm\tstew\t\tA\nb.ppm\t\t\tA\n", encoding="utf-8")
        with pytest.raises(ValidationError, match="line 2"):
            D.load_manifest(p)

    def test_wrong_field_count_names_line(self, tmp_path):
        p = tmp_path / "m.tsv"
        p.write_text("a.ppm\tstew\tA\n", encoding="utf-8")
        with pytest.raises(ValidationError, match="line 1"):
            D.load_manifest(p)

    def test_duplicate_path_rejected(self, tmp_path):
        p = tmp_path / "m.tsv"
        p.write_text("a.ppm\tstew\t\tA\na.ppm\tsoup\t\tA\n", encoding="utf-8")
        with pytest.raises(ValidationError, match="duplicate"):
            D.load_manifest(p)

    def test_missing_file_is_os_error(self, tmp_path):
        with pytest.raises(OSError):
            D.load_manifest(tmp_path / "absent.tsv")

    def test_roundtrip_with_splits(self, tmp_path):
        m = make_manifest({"a": 4, "b": 5})
        m = D.split_dataset(m, (0.8, 0.1, 0.1), seed=1)
        p = tmp_path / "m.tsv"
        D.save_manifest(p, m)
        back = D.load_manifest(p)
        assert back.records == m.records


# ---------------------------------------------------------------------------
# filtering / merging

class TestFilterMinImages:
    def test_paper_shaped_filter(self):
        # 140 classes, 115 with >= 100 images: the filter keeps exactly 115
        sizes = {f"d{i:03d}": (100 + i % 7 if i < 115 else 99) for i in range(140)}
        m = make_manifest(sizes)
        assert m.num_classes == 140
        out = D.filter_min_images(m, 100)
        assert out.num_classes == 115
        assert set(out.class_index) == {f"d{i:03d}" for i in range(115)}
        assert sorted(out.class_index.values()) == list(range(115))

    def test_threshold_one_is_identity(self):
        m = make_manifest({"a": 3, "b": 1})
        out = D.filter_min_images(m, 1)
        assert out.records == m.records

    def test_all_below_threshold(self):
        m = make_manifest({"a": 3, "b": 1})
        out = D.filter_min_images(m, 10)
        assert len(out.records) == 0

    def test_idempotent(self):
        m = make_manifest({"a": 5, "b": 2, "c": 7})
        once = D.filter_min_images(m, 3)
        twice = D.filter_min_images(once, 3)
        assert once.records == twice.records


class TestMergeDatasets:
    def test_class_counts_add(self):
        a = make_manifest({f"a{i}": 2 for i in range(101)}, source="A")
        b = make_manifest({f"b{i}": 2 for i in range(115)}, source="B")
        merged = D.merge_datasets(a, b)
        assert merged.num_classes == 216

    def test_b_ids_offset_by_a(self):
        a = make_manifest({"x": 1, "y": 1}, source="A")
        b = make_manifest({"z": 1}, source="B")
        merged = D.merge_datasets(a, b)
        assert merged.class_index["B:z"] == 2

    def test_same_dish_name_stays_disjoint(self):
        a = make_manifest({"paella": 2}, source="A")
        b = make_manifest({"paella": 3}, source="B")
        merged = D.merge_datasets(a, b)
        assert merged.num_classes == 2

    def test_empty_b_is_identity_up_to_prefix(self):
        a = make_manifest({"x": 2}, source="A")
        b = D.Manifest.from_records([])
        merged = D.merge_datasets(a, b)
        assert len(merged.records) == 2 and merged.num_classes == 1

    def test_merge_then_filter_recovers_originals(self):
        a = make_manifest({"x": 2, "y": 1}, source="A")
        b = make_manifest({"z": 3}, source="B")
        merged = D.merge_datasets(a, b)
        assert D.filter_by_source(merged, "A").records == a.records
        assert D.filter_by_source(merged, "B").records == b.records

    def test_duplicate_paths_across_sets_rejected(self):
        a = D.Manifest.from_records([rec("same.ppm", "x", source="A")])
        b = D.Manifest.from_records([rec("same.ppm", "z", source="B")])
        with pytest.raises(ValidationError, match="both"):
            D.merge_datasets(a, b)


class TestBalanceClasses:
    def test_cap_500_on_600(self):
        m = make_manifest({"big": 600, "small": 40})
        out = D.balance_classes(m, 500, seed=0)
        counts = out.class_counts()
        assert counts["big"] == 500 and counts["small"] == 40

    def test_under_cap_untouched(self):
        m = make_manifest({"a": 5, "b": 7})
        out = D.balance_classes(m, 10, seed=3)
        assert out.records == m.records

    def test_seed_determinism(self):
        m = make_manifest({"a": 50, "b": 30})
        r1 = D.balance_classes(m, 20, seed=9)
        r2 = D.balance_classes(m, 20, seed=9)
        assert r1.records == r2.records
        r3 = D.balance_classes(m, 20, seed=10)
        assert r3.records != r1.records  # overwhelmingly likely

    def test_never_increases_never_drops(self):
        rng = np.random.default_rng(0)
        sizes = {f"c{i}": int(rng.integers(1, 40)) for i in range(20)}
        m = make_manifest(sizes)
        out = D.balance_classes(m, 8, seed=1)
        counts = out.class_counts()
        for dish, n in sizes.items():
            assert counts[dish] == min(n, 8)

    def test_idempotent(self):
        m = make_manifest({"a": 30, "b": 5})
        once = D.balance_classes(m, 10, seed=4)
        twice = D.balance_classes(once, 10, seed=4)
        assert once.records == twice.records

    def test_cap_below_one_rejected(self):
        with pytest.raises(ContractError):
            D.balance_classes(make_manifest({"a": 3}), 0, seed=0)


class TestSplitDataset:
    def test_table3_decomposition(self):
        # 101 classes x 1000 images at 80/10/10 -> 80,800 / 10,100 / 10,100
        m = make_manifest({f"c{i:03d}": 1000 for i in range(101)})
        out = D.split_dataset(m, (0.8, 0.1, 0.1), seed=42)
        counts = {"train": 0, "val": 0, "test": 0}
        for r in out.records:
            counts[r.split] += 1
        assert counts == {"train": 80800, "val": 10100, "test": 10100}

    def test_all_train(self):
        m = make_manifest({"a": 7, "b": 13})
        out = D.split_dataset(m, (1.0, 0.0, 0.0), seed=0)
        assert all(r.split == "train" for r in out.records)

    def test_largest_remainder_on_ten(self):
        m = make_manifest({"a": 10})
        out = D.split_dataset(m, (0.8, 0.1, 0.1), seed=5)
        counts = {"train": 0, "val": 0, "test": 0}
        for r in out.records:
            counts[r.split] += 1
        assert counts == {"train": 8, "val": 1, "test": 1}

    def test_small_class_warns_all_train(self, caplog):
        m = make_manifest({"tiny": 2, "ok": 10})
        with caplog.at_level("WARNING"):
            out = D.split_dataset(m, (0.8, 0.1, 0.1), seed=0)
        assert "tiny" in caplog.text
        assert all(r.split == "train" for r in out.records if r.dish_label == "tiny")

    def test_partition_identity(self):
        m = make_manifest({"a": 17, "b": 23, "c": 4})
        out = D.split_dataset(m, (0.6, 0.2, 0.2), seed=7)
        stripped = tuple(D.replace(r, split="unassigned") for r in out.records)
        assert stripped == m.records  # order and content preserved
        assert all(r.split in ("train", "val", "test") for r in out.records)

    def test_idempotent(self):
        m = make_manifest({"a": 17, "b": 23})
        once = D.split_dataset(m, (0.8, 0.1, 0.1), seed=11)
        twice = D.split_dataset(once, (0.8, 0.1, 0.1), seed=11)
        assert once.records == twice.records

    def test_bad_ratios(self):
        m = make_manifest({"a": 5})
        with pytest.raises(ContractError):
            D.split_dataset(m, (0.5, 0.2, 0.2), seed=0)


# ---------------------------------------------------------------------------
# variants (file-backed)

def write_image(path, w, h, seed=0):
    rng = np.random.default_rng(seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_ppm(path, RasterImage.from_array(
        rng.integers(0, 256, (h, w, 3), dtype=np.uint8)))


def sr_params(seed=0, factor=2, atoms=8):
    rng = np.random.default_rng(seed)
    return ScnParams(patch_size=8, dict_atoms=atoms,
                     w_encode=rng.standard_normal((atoms, 64)) * 0.2,
                     s_recurrent=rng.standard_normal((atoms, atoms)) * 0.05,
                     thresholds=rng.uniform(0.05, 0.2, atoms),
                     d_decode=rng.standard_normal((256, atoms)) * 0.05,
                     lista_iterations=1)


class TestApplyVariant:
    def make_file_manifest(self, tmp_path):
        a1 = tmp_path / "src" / "A" / "d0" / "0.ppm"
        a2 = tmp_path / "src" / "A" / "d0" / "1.ppm"
        b1 = tmp_path / "src" / "B" / "d1" / "0.ppm"
        b2 = tmp_path / "src" / "B" / "d1" / "1.ppm"
        write_image(a1, 512, 512, seed=1)
        write_image(a2, 64, 48, seed=2)
        write_image(b1, 14, 14, seed=3)   # below target 24 -> factor 2
        write_image(b2, 30, 30, seed=4)   # at/above target -> untouched
        return D.Manifest.from_records([
            rec(str(a1), "d0", source="A"), rec(str(a2), "d0", source="A"),
            rec(str(b1), "d1", source="B"), rec(str(b2), "d1", source="B"),
        ])

    def test_original_untouched(self, tmp_path):
        m = self.make_file_manifest(tmp_path)
        out, errors = D.apply_variant(m, "original")
        assert out is m and errors == []

    def test_a_halved(self, tmp_path):
        m = self.make_file_manifest(tmp_path)
        out, errors = D.apply_variant(m, D.DatasetVariant.a_halved,
                                      out_root=tmp_path / "halved")
        assert errors == []
        assert read_ppm_dims(out.records[0].image_path) == (256, 256)
        assert read_ppm_dims(out.records[1].image_path) == (32, 24)
        # source-B records untouched
        assert out.records[2] == m.records[2] and out.records[3] == m.records[3]

    def test_b_super_resolved(self, tmp_path):
        m = self.make_file_manifest(tmp_path)
        out, errors = D.apply_variant(m, "b_super_resolved", scn=sr_params(),
                                      out_root=tmp_path / "sr", target=24)
        assert errors == []
        assert out.records[0] == m.records[0]  # source A untouched
        assert read_ppm_dims(out.records[2].image_path) == (28, 28)
        assert out.records[3] == m.records[3]  # already >= target

    def test_unreadable_collected_run_continues(self, tmp_path):
        m = self.make_file_manifest(tmp_path)
        broken = D.Manifest.from_records(
            list(m.records) + [rec(str(tmp_path / "missing.ppm"), "d0x", source="A")])
        out, errors = D.apply_variant(broken, "a_halved", out_root=tmp_path / "h2")
        assert len(errors) == 1 and "missing.ppm" in errors[0][0]
        assert len(out.records) == len(broken.records) - 1

    def test_sr_needs_params(self, tmp_path):
        m = self.make_file_manifest(tmp_path)
        with pytest.raises(ContractError):
            D.apply_variant(m, "b_super_resolved", out_root=tmp_path / "x")


# ---------------------------------------------------------------------------
# sample preparation

def ramp_image(n=256):
    # R encodes the column index, G the row index
    r = np.tile(np.arange(n, dtype=np.uint8), (n, 1))
    g = r.T.copy()
    b = np.zeros((n, n), np.uint8)
    return RasterImage.from_array(np.stack([r, g, b], axis=2))


class TestPrepareSamples:
    def test_train_crop_shape_and_range(self):
        img = ramp_image()
        rng = np.random.default_rng(0)
        offs = set()
        for _ in range(60):
            t = D.prepare_train_sample(img, crop=224, rng=rng)
            assert t.shape == (3, 224, 224)
            ox = int(round(float(t.data[0, 0, 0]) * 255))
            oy = int(round(float(t.data[1, 0, 0]) * 255))
            assert 0 <= ox <= 32 and 0 <= oy <= 32
            offs.add((ox, oy))
        assert len(offs) > 10  # actually random

    def test_train_seed_determinism(self):
        img = ramp_image()
        t1 = D.prepare_train_sample(img, crop=224, rng=np.random.default_rng(7))
        t2 = D.prepare_train_sample(img, crop=224, rng=np.random.default_rng(7))
        assert np.array_equal(t1.data, t2.data)

    def test_eval_center_offset_16(self):
        img = ramp_image()
        t = D.prepare_eval_sample(img, crop=224)
        assert t.shape == (3, 224, 224)
        assert round(float(t.data[0, 0, 0]) * 255) == 16
        assert round(float(t.data[1, 0, 0]) * 255) == 16

    def test_eval_deterministic_bitwise(self):
        img = ramp_image()
        a = D.prepare_eval_sample(img, crop=224)
        b = D.prepare_eval_sample(img, crop=224)
        assert np.array_equal(a.data, b.data)

    def test_uniform_image_normalization(self):
        img = RasterImage.from_array(np.full((64, 64, 3), 200, np.uint8))
        mean = (0.25, 0.5, 0.75)
        t = D.prepare_eval_sample(img, crop=32, mean=mean, resize_to=40)
        for c in range(3):
            npt.assert_allclose(t.data[c], 200 / 255 - mean[c], atol=1e-5)

    def test_crop_larger_than_resize_rejected(self):
        with pytest.raises(ContractError):
            D.prepare_eval_sample(ramp_image(), crop=300, resize_to=256)

    def test_channel_means(self, tmp_path):
        p = tmp_path / "u.ppm"
        write_ppm(p, RasterImage.from_array(np.full((20, 20, 3), 100, np.uint8)))
        m = D.Manifest.from_records([rec(str(p), "d", split="train")])
        means = D.compute_channel_means(m, resize_to=16)
        npt.assert_allclose(means, 100 / 255, atol=1e-6)


# ---------------------------------------------------------------------------
# statistics

class TestDatasetStats:
    def test_counts_echoed(self):
        m = make_manifest({"a": 3, "b": 5}, cat_of={"a": "cat1", "b": "cat2"})
        stats = D.dataset_stats(m, read_dims=False)
        assert stats.per_class == {"a": 3, "b": 5}
        assert stats.total_images == 8 and stats.total_dishes == 2

    def test_percentages_sum_to_100(self):
        m = make_manifest({f"d{i}": 2 + i for i in range(7)},
                          cat_of={f"d{i}": f"c{i % 3}" for i in range(7)})
        stats = D.dataset_stats(m, read_dims=False)
        assert abs(sum(pct for _, _, pct, _ in stats.per_category) - 100.0) < 0.1

    def test_two_dishes_of_219_report_438(self):
        m = make_manifest({"snail_a": 219, "snail_b": 219, "other": 10},
                          cat_of={"snail_a": "Mushrooms", "snail_b": "Mushrooms",
                                  "other": "Meats"})
        stats = D.dataset_stats(m, read_dims=False)
        row = next(r for r in stats.per_category if r[0] == "Mushrooms")
        assert row[1] == 2 and row[3] == 438

    def test_dims_and_errors(self, tmp_path):
        good = tmp_path / "g.ppm"
        write_image(good, 17, 13)
        m = D.Manifest.from_records([
            rec(str(good), "a"), rec(str(tmp_path / "missing.ppm"), "b")])
        stats = D.dataset_stats(m)
        assert stats.dims == [(17, 13)]
        assert len(stats.errors) == 1
