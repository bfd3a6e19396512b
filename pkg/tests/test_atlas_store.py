"""Tests for atlas directory persistence."""

import dataclasses
import functools
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from cnatlas import Space, Streamline, Tractogram
from cnatlas.core import DEFAULT_TRACKING_PRESETS, Nerve
from cnatlas.errors import AtlasVersionError, CorruptAtlasError, InvalidConfigError
from cnatlas.io.atlas_store import (
    FORMAT_VERSION,
    config_record,
    load_atlas,
    save_atlas,
    save_labels,
)
from cnatlas.pipeline import (
    Atlas,
    AtlasStage,
    AtlasStageConfig,
    ClusterLabel,
    FiberCluster,
    apply_label,
    build_stage1,
)
from cnatlas.spectral import AffinityParams, SpectralEmbedding
from phantoms import make_subject


SMALL_CFG = AtlasStageConfig(
    k=10,
    outlier_std=2.0,
    outlier_iterations=1,
    sample_per_subject=150,
    min_length_mm=20.0,
    affinity_sigma_mm=30.0,
    landmark_count=120,
    seed=11,
)


@functools.cache
def small_subjects():
    return tuple(
        make_subject(seed=40 + i, subject_id=f"s{i}", fibers_per_bundle=30, junk_fraction=0.0)[0]
        for i in range(2)
    )


@functools.cache
def small_atlas():
    atlas = build_stage1(small_subjects(), SMALL_CFG)
    atlas = apply_label(atlas, 0, ClusterLabel.CN_II_D, rater="ra", timestamp="2024-03-02T08:00:00Z")
    atlas = apply_label(atlas, 1, ClusterLabel.REJECTED, rater="rb", timestamp="2024-03-02T08:05:00Z")
    return atlas


def toy_atlas():
    """Handmade atlas with a pruned cluster, labels, and screening state."""
    fibers = tuple(
        Streamline(np.outer(np.linspace(0.0, 30.0, 12), [1.0, 0.0, 0.0]) + [0, 4.0 * i, 0], id=i)
        for i in range(6)
    )
    t = Tractogram(fibers, space=Space.ATLAS)
    landmarks = np.stack([fibers[i].points for i in range(3)])
    emb = SpectralEmbedding(
        landmarks=landmarks,
        landmark_ids=np.array([0, 1, 2]),
        eigenvalues=np.array([1.0, 0.625]),
        basis=np.array([[0.5, 0.25], [0.125, -0.5], [0.75, 0.0625]]),
        degree_vector=np.array([1.0, 2.0, 1.5]),
        coords=np.ones((6, 1)),
        params=AffinityParams(sigma_mm=20.0, points_per_fiber=12),
        truncated=True,
    )
    clusters = (
        FiberCluster(0, (0, 1, 2), ("s0", "s0", "s0"), (0, 1, 2), np.array([1.0]),
                     screened_nerve=Nerve.CN_V),
        FiberCluster(1, (3, 4), ("s1", "s1"), (7, 9), np.array([1.0]), flags=("ambiguous",)),
        FiberCluster(2, (), (), (), np.array([0.0]), flags=("pruned",)),
    )
    atlas = Atlas(
        stage=AtlasStage.ENHANCED,
        fibers=t,
        embedding=emb,
        clusters=clusters,
        stage1_config=SMALL_CFG,
        stage2_config=AtlasStageConfig.enhanced(),
        fiber_subjects=("s0", "s0", "s0", "s1", "s1", "s1"),
        fiber_source_ids=(0, 1, 2, 7, 9, 11),
    )
    atlas = apply_label(atlas, 0, ClusterLabel.CN_V_L, rater="ra", timestamp="2024-04-01T09:00:00Z")
    atlas = apply_label(atlas, 0, ClusterLabel.CN_V_R, rater="rb", timestamp="2024-04-01T09:30:00Z")
    return atlas


def f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def assert_atlas_equal(got: Atlas, want: Atlas):
    """Structural equality at the float32 precision of the on-disk blobs."""
    assert got.stage is want.stage
    assert got.stage1_config == want.stage1_config
    assert got.stage2_config == want.stage2_config
    assert got.tracking_presets == want.tracking_presets
    assert got.audit_log == want.audit_log
    assert got.registration_record == want.registration_record
    assert got.fiber_subjects == want.fiber_subjects
    assert got.fiber_source_ids == want.fiber_source_ids
    assert len(got.fibers) == len(want.fibers)
    assert got.fibers.space is want.fibers.space
    for a, b in zip(got.fibers, want.fibers):
        assert a.id == b.id
        assert np.array_equal(a.points, f32(b.points))
    ge, we = got.embedding, want.embedding
    assert np.array_equal(ge.landmarks, f32(we.landmarks))
    assert np.array_equal(ge.landmark_ids, we.landmark_ids)
    assert np.array_equal(ge.eigenvalues, we.eigenvalues)  # exact, kept in JSON
    assert np.array_equal(ge.basis, f32(we.basis))
    assert np.array_equal(ge.degree_vector, f32(we.degree_vector))
    assert np.array_equal(ge.coords, f32(we.coords))
    assert ge.params == we.params
    assert ge.truncated == we.truncated
    assert len(got.clusters) == len(want.clusters)
    for ca, cb in zip(got.clusters, want.clusters):
        assert ca.cluster_id == cb.cluster_id
        assert ca.member_rows == cb.member_rows
        assert ca.member_subjects == cb.member_subjects
        assert ca.member_source_ids == cb.member_source_ids
        assert ca.label is cb.label
        assert ca.screened_nerve is cb.screened_nerve
        assert ca.flags == cb.flags
        assert np.array_equal(ca.centroid, f32(cb.centroid))


def dir_files(d: Path):
    return sorted(p.relative_to(d).as_posix() for p in d.rglob("*") if p.is_file())


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# layout and manifest


def test_save_creates_expected_layout(tmp_path):
    atlas = small_atlas()
    save_atlas(atlas, tmp_path)
    names = dir_files(tmp_path)
    for required in (
        "manifest.json",
        "embedding_basis.mat",
        "embedding_coords.mat",
        "embedding_degrees.mat",
        "embedding_landmarks.mat",
        "centroids.mat",
        "pooled.tck",
        "labels.json",
        "label_audit.jsonl",
        "provenance.json",
    ):
        assert required in names
    for c in atlas.clusters:
        assert f"clusters/cluster_{c.cluster_id:05d}.tck" in names
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["format_version"] == FORMAT_VERSION
    assert manifest["stage"] == "initial"


def test_manifest_echoes_stage_parameters_verbatim(tmp_path):
    save_atlas(small_atlas(), tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["stages"]["stage1"] == config_record(SMALL_CFG)
    assert manifest["stages"]["stage2"] is None
    rec = manifest["stages"]["stage1"]
    assert rec["k"] == 10
    assert rec["outlier_std"] == 2.0
    assert rec["affinity_sigma_mm"] == 30.0
    assert rec["embedding_dim"] == 10
    assert rec["seed"] == 11


def test_config_record_full_cohort_defaults():
    rec = config_record(AtlasStageConfig.initial())
    assert rec["k"] == 6000
    assert rec["sample_per_subject"] == 20000
    assert rec["min_length_mm"] == 20.0
    assert rec["outlier_std"] == 2.0
    assert rec["outlier_iterations"] == 2
    rec2 = config_record(AtlasStageConfig.enhanced())
    assert rec2["k"] == 200
    assert rec2["outlier_std"] == 1.0
    assert rec2["affinity_sigma_mm"] == 20.0


def test_manifest_inventory_covers_all_files(tmp_path):
    save_atlas(small_atlas(), tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    inventory = manifest["files"]
    on_disk = set(dir_files(tmp_path)) - {"manifest.json"}
    assert set(inventory) == on_disk
    for rel, digest in inventory.items():
        assert sha256(tmp_path / rel) == digest


def test_manifest_presets_and_registration_record(tmp_path):
    save_atlas(small_atlas(), tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["registration"] == {
        "bspline_grid": [8, 8, 8],
        "sigma_schedule": [20.0, 10.0, 5.0, 2.0],
    }
    presets = manifest["tracking_presets"]
    assert len(presets) == len(DEFAULT_TRACKING_PRESETS)
    by_nerve = {p["nerve"]: p for p in presets}
    assert by_nerve["CN_V"]["seeding_fa"] == 0.06
    assert by_nerve["CN_III"]["ql"] == 150.0


# ---------------------------------------------------------------------------
# round trips


def test_round_trip_structural_equality(tmp_path):
    atlas = small_atlas()
    save_atlas(atlas, tmp_path)
    assert_atlas_equal(load_atlas(tmp_path), atlas)


def test_toy_round_trip_with_pruned_cluster(tmp_path):
    atlas = toy_atlas()
    save_atlas(atlas, tmp_path)
    loaded = load_atlas(tmp_path)
    assert_atlas_equal(loaded, atlas)
    assert loaded.clusters[2].flags == ("pruned",)
    assert loaded.clusters[2].member_rows == ()
    assert loaded.cluster(1).flags == ("ambiguous",)
    assert loaded.cluster(0).screened_nerve is Nerve.CN_V


def test_save_load_save_byte_identical(tmp_path):
    d1 = tmp_path / "first"
    d2 = tmp_path / "second"
    save_atlas(small_atlas(), d1)
    save_atlas(load_atlas(d1), d2)
    assert dir_files(d1) == dir_files(d2)
    for rel in dir_files(d1):
        assert (d1 / rel).read_bytes() == (d2 / rel).read_bytes(), rel


def test_identical_builds_give_identical_directories(tmp_path):
    d1 = tmp_path / "a"
    d2 = tmp_path / "b"
    save_atlas(build_stage1(small_subjects(), SMALL_CFG), d1)
    save_atlas(build_stage1(small_subjects(), SMALL_CFG), d2)
    assert dir_files(d1) == dir_files(d2)
    for rel in dir_files(d1):
        assert (d1 / rel).read_bytes() == (d2 / rel).read_bytes(), rel


def test_audit_log_is_json_lines(tmp_path):
    save_atlas(small_atlas(), tmp_path)
    lines = (tmp_path / "label_audit.jsonl").read_text().splitlines()
    assert len(lines) == 2
    first = json.loads(lines[0])
    assert first == {
        "cluster_id": 0,
        "label": "CN_II_D",
        "rater": "ra",
        "timestamp": "2024-03-02T08:00:00Z",
    }
    assert json.loads(lines[1])["label"] == "rejected"


# ---------------------------------------------------------------------------
# integrity checks


def test_tampered_blob_detected(tmp_path):
    save_atlas(small_atlas(), tmp_path)
    target = tmp_path / "centroids.mat"
    raw = bytearray(target.read_bytes())
    raw[-1] ^= 0xFF
    target.write_bytes(bytes(raw))
    with pytest.raises(CorruptAtlasError):
        load_atlas(tmp_path)


def test_tampered_labels_detected(tmp_path):
    save_atlas(small_atlas(), tmp_path)
    target = tmp_path / "labels.json"
    target.write_text(target.read_text() + "\n")
    with pytest.raises(CorruptAtlasError):
        load_atlas(tmp_path)


def test_missing_inventoried_file_detected(tmp_path):
    save_atlas(small_atlas(), tmp_path)
    (tmp_path / "embedding_coords.mat").unlink()
    with pytest.raises(CorruptAtlasError):
        load_atlas(tmp_path)


def test_version_mismatch_detected(tmp_path):
    save_atlas(small_atlas(), tmp_path)
    manifest_path = tmp_path / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    manifest["format_version"] = FORMAT_VERSION + 1
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(AtlasVersionError):
        load_atlas(tmp_path)


def test_missing_manifest(tmp_path):
    with pytest.raises(CorruptAtlasError):
        load_atlas(tmp_path)


# ---------------------------------------------------------------------------
# labels-only updates


def test_save_labels_partial_update(tmp_path):
    atlas = small_atlas()
    save_atlas(atlas, tmp_path)
    blob_before = (tmp_path / "centroids.mat").read_bytes()
    relabeled = apply_label(
        atlas, 2, ClusterLabel.CN_VII_VIII_L, rater="rc", timestamp="2024-03-03T10:00:00Z"
    )
    save_labels(relabeled, tmp_path)
    assert (tmp_path / "centroids.mat").read_bytes() == blob_before
    loaded = load_atlas(tmp_path)
    assert_atlas_equal(loaded, relabeled)
    lines = (tmp_path / "label_audit.jsonl").read_text().splitlines()
    assert len(lines) == 3
    assert json.loads(lines[-1])["rater"] == "rc"


def test_save_labels_rejects_membership_changes(tmp_path):
    atlas = small_atlas()
    save_atlas(atlas, tmp_path)
    first = atlas.clusters[0]
    mutated = dataclasses.replace(
        atlas,
        clusters=(dataclasses.replace(first, member_rows=first.member_rows[:-1],
                                      member_subjects=first.member_subjects[:-1],
                                      member_source_ids=first.member_source_ids[:-1]),)
        + atlas.clusters[1:],
    )
    with pytest.raises(InvalidConfigError):
        save_labels(mutated, tmp_path)


def test_save_labels_requires_saved_atlas(tmp_path):
    with pytest.raises(CorruptAtlasError):
        save_labels(small_atlas(), tmp_path)
