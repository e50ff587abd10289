"""Batch generation, resume, statistics, and the classifier manifest."""

import csv
import json

import numpy as np
import pytest

from drrgen.errors import PipelineError
from drrgen.pipeline import (
    BatchConfig,
    LABEL_NAMES,
    dataset_stats,
    export_classifier_manifest,
    format_stats_table,
    read_manifest,
    run_batch,
)
from drrgen.render import read_sidecar
from drrgen.volume import CtVolume, write_raw


def make_volume(seed):
    rng = np.random.default_rng(seed)
    vox = rng.uniform(-500, 1500, size=(12, 12, 12))
    return CtVolume(dims=(12, 12, 12), spacing=(2.0,) * 3, corner=(-12.0,) * 3,
                    direction=np.eye(3), voxels=vox)


@pytest.fixture
def two_volume_manifest(tmp_path):
    rows = []
    for i, name in enumerate(("vol_a", "vol_b")):
        write_raw(make_volume(i), tmp_path / f"{name}.raw")
        rows.append({"volume_name": name, "volume_path": f"{name}.raw"})
    manifest = tmp_path / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["volume_name", "volume_path"])
        writer.writeheader()
        writer.writerows(rows)
    return manifest


def small_config(tmp_path, **kw):
    kw.setdefault("views", ("frontal", "lateral"))
    kw.setdefault("detector_px", (16, 16))
    kw.setdefault("workers", 1)
    return BatchConfig(output_dir=tmp_path / "out", **kw)


class TestRunBatch:
    def test_two_volumes_two_views_counting(self, tmp_path, two_volume_manifest):
        config = small_config(tmp_path)
        report = run_batch(two_volume_manifest, config)
        assert report.counts == {"rendered": 4, "skipped": 0, "failed": 0}
        pngs = sorted(p.name for p in (tmp_path / "out").glob("*.png"))
        assert pngs == ["vol_a_frontal.png", "vol_a_lateral.png",
                        "vol_b_frontal.png", "vol_b_lateral.png"]
        assert all((tmp_path / "out" / (n + ".json")).exists() for n in pngs)

    def test_lateral_sidecar_records_protocol(self, tmp_path, two_volume_manifest):
        run_batch(two_volume_manifest, small_config(tmp_path))
        payload = read_sidecar(tmp_path / "out" / "vol_a_lateral.png.json")
        assert payload["transform"]["rotation_deg"] == [0.0, 0.0, -90.0]
        assert payload["transform"]["translation_mm"] == [0.0, 300.0, 0.0]
        assert payload["attenuation"]["threshold_hu"] == -100.0
        frontal = read_sidecar(tmp_path / "out" / "vol_a_frontal.png.json")
        assert frontal["transform"]["rotation_deg"] == [0.0, 0.0, 0.0]

    def test_rerun_skips_everything(self, tmp_path, two_volume_manifest):
        config = small_config(tmp_path)
        run_batch(two_volume_manifest, config)
        outputs = {p: p.read_bytes() for p in (tmp_path / "out").glob("*")}
        report = run_batch(two_volume_manifest, config)
        assert report.counts == {"rendered": 0, "skipped": 4, "failed": 0}
        for p, blob in outputs.items():
            assert p.read_bytes() == blob

    def test_parameter_change_invalidates_resume(self, tmp_path, two_volume_manifest):
        run_batch(two_volume_manifest, small_config(tmp_path))
        report = run_batch(two_volume_manifest, small_config(tmp_path, threshold=0.0))
        assert report.counts["rendered"] == 4

    def test_no_resume_rerenders(self, tmp_path, two_volume_manifest):
        run_batch(two_volume_manifest, small_config(tmp_path))
        report = run_batch(two_volume_manifest, small_config(tmp_path, resume=False))
        assert report.counts == {"rendered": 4, "skipped": 0, "failed": 0}

    def test_newly_requested_energy_dump_invalidates_resume(self, tmp_path, two_volume_manifest):
        run_batch(two_volume_manifest, small_config(tmp_path))
        report = run_batch(two_volume_manifest, small_config(tmp_path, keep_energy=True))
        assert report.counts["rendered"] == 4
        assert (tmp_path / "out" / "vol_a_frontal.png.energy.f32").exists()
        # and now the dumps exist, so a third run skips again
        report = run_batch(two_volume_manifest, small_config(tmp_path, keep_energy=True))
        assert report.counts["skipped"] == 4

    def test_bad_label_value_is_pipeline_error(self, tmp_path, two_volume_manifest):
        header = "volume_name,volume_path," + ",".join(LABEL_NAMES)
        row = "vol_a,vol_a.raw," + ",".join(["x"] + ["0"] * 17)
        bad = tmp_path / "bad_labels.csv"
        bad.write_text(header + "\n" + row + "\n")
        with pytest.raises(PipelineError, match="unparseable label"):
            read_manifest(bad)

    def test_missing_volume_recorded_not_fatal(self, tmp_path, two_volume_manifest):
        with open(two_volume_manifest, "a", newline="") as fh:
            fh.write("vol_missing,vol_missing.raw\n")
        report = run_batch(two_volume_manifest, small_config(tmp_path))
        assert report.counts["failed"] == 2  # both views of the missing volume
        failed = [j for j in report.jobs if j.status == "failed"]
        assert all("not found" in j.reason for j in failed)

    def test_worker_count_does_not_change_outputs(self, tmp_path, two_volume_manifest):
        c1 = small_config(tmp_path)
        r1 = run_batch(two_volume_manifest, c1)
        bytes1 = {p.name: p.read_bytes() for p in (tmp_path / "out").glob("*.png")}
        for p in (tmp_path / "out").glob("*"):
            p.unlink()
        c8 = small_config(tmp_path, workers=8)
        r8 = run_batch(two_volume_manifest, c8)
        bytes8 = {p.name: p.read_bytes() for p in (tmp_path / "out").glob("*.png")}
        assert bytes1 == bytes8

        def strip(report):
            d = report.to_dict()
            d.pop("runtime")
            for j in d["jobs"]:
                j.pop("seconds")
            return d

        assert strip(r1) == strip(r8)

    def test_unreadable_manifest_is_fatal(self, tmp_path):
        with pytest.raises(PipelineError):
            read_manifest(tmp_path / "nope.csv")

    def test_manifest_requires_volume_name(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("name,path\nx,y\n")
        with pytest.raises(PipelineError, match="volume_name"):
            read_manifest(bad)

    def test_findings_joined_from_separate_csv(self, tmp_path, two_volume_manifest):
        findings = tmp_path / "reports.csv"
        with open(findings, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["volume_name", "findings"])
            writer.writerow(["vol_a", "Heart size increased."])
        records = read_manifest(two_volume_manifest, findings_csv=findings)
        by_name = {r.volume_name: r for r in records}
        assert by_name["vol_a"].findings_text == "Heart size increased."
        assert by_name["vol_b"].findings_text is None


class TestStudyRecord:
    def test_exactly_18_labels_required(self):
        from drrgen.pipeline import StudyRecord

        with pytest.raises(ValueError, match="18"):
            StudyRecord(volume_name="x", labels=(0, 1))

    def test_labels_must_be_binary(self):
        from drrgen.pipeline import StudyRecord

        with pytest.raises(ValueError, match="binary"):
            StudyRecord(volume_name="x", labels=tuple([2] + [0] * 17))

    def test_label_order_is_fixed(self):
        assert LABEL_NAMES[0] == "Medical material"
        assert LABEL_NAMES[2] == "Cardiomegaly"
        assert LABEL_NAMES[-1] == "Interlobular septal thickening"
        assert len(LABEL_NAMES) == 18

    def test_unknown_sex_normalized(self):
        from drrgen.pipeline import StudyRecord

        assert StudyRecord(volume_name="x", sex="other").sex == "unknown"


def write_labels_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["volume_name", "split", *LABEL_NAMES])
        writer.writeheader()
        writer.writerows(rows)


def label_row(name, split, positives=()):
    row = {"volume_name": name, "split": split}
    for label in LABEL_NAMES:
        row[label] = 1 if label in positives else 0
    return row


class TestDatasetStats:
    def test_ratio_is_valid_over_train_rounded(self, tmp_path):
        rows = []
        for i in range(8):
            rows.append(label_row(f"t{i}", "train", ("Cardiomegaly",) if i < 5 else ()))
        for i in range(4):
            rows.append(label_row(f"v{i}", "valid", ("Cardiomegaly",) if i < 3 else ()))
        path = tmp_path / "labels.csv"
        write_labels_csv(path, rows)
        report = dataset_stats(path)
        row = report["labels"]["Cardiomegaly"]
        assert (row["train"], row["valid"]) == (5, 3)
        assert row["ratio"] == round(3 / 5, 3) == 0.6

    def test_reference_ratios(self, tmp_path):
        # 5308/325 -> 0.061 and 21382/1361 -> 0.064 (plain division + round)
        assert round(325 / 5308, 3) == 0.061
        assert round(1361 / 21382, 3) == 0.064

    def test_missing_label_column_fatal(self, tmp_path):
        path = tmp_path / "labels.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["volume_name", "split", *LABEL_NAMES[:-1]])
            writer.writeheader()
        with pytest.raises(PipelineError, match="Interlobular septal thickening"):
            dataset_stats(path)

    def test_three_point_quartiles(self, tmp_path):
        labels = tmp_path / "labels.csv"
        write_labels_csv(labels, [label_row("a", "train")])
        meta = tmp_path / "meta.csv"
        with open(meta, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["split", "age", "sex"])
            for age in (34, 45, 61):
                writer.writerow(["train", age, "M"])
        report = dataset_stats(labels, meta)
        p = report["patients"]["train"]
        assert p["age_median"] == 45.0
        assert p["age_q1"] == 34.0
        assert p["age_q3"] == 61.0
        assert p["n_patients"] == 3
        assert p["sex"]["M"] == 3

    def test_unparseable_age_excluded_and_counted(self, tmp_path):
        labels = tmp_path / "labels.csv"
        write_labels_csv(labels, [label_row("a", "train")])
        meta = tmp_path / "meta.csv"
        meta.write_text("split,age,sex\ntrain,41,F\ntrain,??,M\n")
        report = dataset_stats(labels, meta)
        p = report["patients"]["train"]
        assert p["age_excluded"] == 1
        assert p["age_mean"] == 41.0

    def test_table_formatting_contains_all_classes(self, tmp_path):
        path = tmp_path / "labels.csv"
        write_labels_csv(path, [label_row("a", "train", ("Emphysema",))])
        text = format_stats_table(dataset_stats(path))
        for name in LABEL_NAMES:
            assert name in text


class TestExportManifest:
    def _generate(self, tmp_path, names):
        out = tmp_path / "imgs"
        out.mkdir()
        for name in names:
            (out / f"{name}_frontal.png").write_bytes(b"\x89PNG fake")
        return out

    def test_rows_and_columns(self, tmp_path):
        images = self._generate(tmp_path, ("a", "b", "c"))
        labels = tmp_path / "labels.csv"
        write_labels_csv(labels, [label_row(n, "train", ("Cardiomegaly",)) for n in "abc"])
        out = tmp_path / "manifest.csv"
        written, omitted = export_classifier_manifest(labels, images, out)
        assert (written, omitted) == (3, 0)
        with open(out, newline="") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 4
        assert len(rows[0]) == 20
        assert rows[0][:2] == ["path", "split"]

    def test_missing_image_omitted_with_warning(self, tmp_path):
        images = self._generate(tmp_path, ("a",))
        labels = tmp_path / "labels.csv"
        write_labels_csv(labels, [label_row("a", "train"), label_row("zzz", "valid")])
        out = tmp_path / "manifest.csv"
        written, omitted = export_classifier_manifest(labels, images, out)
        assert (written, omitted) == (1, 1)

    def test_shuffled_input_gives_identical_bytes(self, tmp_path):
        images = self._generate(tmp_path, ("a", "b", "c", "d"))
        rows = [label_row(n, "train", ("Atelectasis",)) for n in "abcd"]
        l1 = tmp_path / "l1.csv"
        l2 = tmp_path / "l2.csv"
        write_labels_csv(l1, rows)
        write_labels_csv(l2, rows[::-1])
        o1 = tmp_path / "m1.csv"
        o2 = tmp_path / "m2.csv"
        export_classifier_manifest(l1, images, o1)
        export_classifier_manifest(l2, images, o2)
        assert o1.read_bytes() == o2.read_bytes()
