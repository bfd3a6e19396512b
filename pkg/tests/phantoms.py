"""Synthetic tractography phantoms shared across test modules.

Five spatially distinct curved tube bundles stand in for the five nerve
pairs; junk fibers are scattered uniformly around the scene.  Everything
is seeded and pure so fixtures are reproducible by construction.
"""

import functools

import numpy as np

from cnatlas.core import AffineTransform, MaskVolume, Nerve, Space, Streamline, Tractogram
from cnatlas.pipeline import (
    AtlasStageConfig,
    ClusterLabel,
    apply_label,
    build_stage1,
    build_stage2,
    screen_clusters_by_roi,
)

# name, anchor point (mm), main direction, bend direction, length (mm)
BUNDLE_SPECS = [
    ("CN_II_D", np.array([0.0, 0.0, 0.0]), np.array([1.0, 0.2, 0.0]), np.array([0.0, 0.0, 1.0]), 55.0),
    ("CN_III_L", np.array([70.0, 0.0, 10.0]), np.array([0.0, 1.0, 0.1]), np.array([1.0, 0.0, 0.0]), 45.0),
    ("CN_V_L", np.array([0.0, 70.0, 20.0]), np.array([0.3, 0.0, 1.0]), np.array([0.0, 1.0, 0.0]), 60.0),
    ("CN_VII_VIII_L", np.array([70.0, 70.0, 0.0]), np.array([-0.5, 1.0, 0.5]), np.array([1.0, 1.0, 0.0]), 50.0),
    ("CN_V_R", np.array([35.0, 35.0, 60.0]), np.array([1.0, -1.0, 0.2]), np.array([0.0, 0.5, 1.0]), 40.0),
]


def _unit(v):
    return v / np.linalg.norm(v)


def bundle_centerline(spec, n_points=40):
    """The noiseless center curve of a bundle (for truth construction)."""
    _, anchor, direction, bend, length = spec
    d = _unit(direction.astype(float))
    b = _unit(np.cross(np.cross(d, _unit(bend.astype(float))), d) * -1.0)
    t = np.linspace(0.0, 1.0, n_points)
    pts = anchor[None, :] + np.outer(t * length, d) + np.outer(np.sin(np.pi * t) * length / 6.0, b)
    return pts


def make_bundle(rng, spec, n_fibers, id_offset=0, spread=2.0, jitter=0.25, n_points=24):
    """Fibers scattered around a bundle's center curve.

    Each fiber keeps a rigid lateral offset (bundle thickness) plus small
    per-point jitter; roughly half are stored reversed since streamline
    orientation carries no meaning.
    """
    _, anchor, direction, bend, length = spec
    d = _unit(direction.astype(float))
    center = bundle_centerline(spec, n_points)
    perp1 = _unit(np.cross(d, [0.13, 0.71, 0.31]))
    perp2 = _unit(np.cross(d, perp1))
    fibers = []
    for i in range(n_fibers):
        off = rng.normal(scale=spread) * perp1 + rng.normal(scale=spread) * perp2
        scale = rng.uniform(0.85, 1.05)
        pts = (center - center[0]) * scale + center[0] + off
        pts = pts + rng.normal(scale=jitter, size=pts.shape)
        if rng.random() < 0.5:
            pts = pts[::-1]
        fibers.append(Streamline(pts, id=id_offset + i))
    return fibers


def make_junk(rng, n_fibers, id_offset=0, low=-30.0, high=110.0):
    """Short incoherent fibers scattered across the whole scene."""
    fibers = []
    for i in range(n_fibers):
        start = rng.uniform(low, high, size=3)
        direction = _unit(rng.normal(size=3))
        length = rng.uniform(22.0, 45.0)
        t = np.linspace(0.0, 1.0, 12)
        pts = start[None, :] + np.outer(t * length, direction)
        pts = pts + rng.normal(scale=1.0, size=pts.shape)
        fibers.append(Streamline(pts, id=id_offset + i))
    return fibers


def make_subject(
    seed,
    subject_id="phantom",
    fibers_per_bundle=60,
    junk_fraction=0.10,
    spread=2.0,
    specs=BUNDLE_SPECS,
):
    """One synthetic subject: bundles plus scattered junk.

    Returns the tractogram and a parallel array naming each fiber's source
    bundle ("junk" for scatter).
    """
    rng = np.random.default_rng(seed)
    fibers = []
    sources = []
    next_id = 0
    for spec in specs:
        bundle = make_bundle(rng, spec, fibers_per_bundle, id_offset=next_id, spread=spread)
        fibers.extend(bundle)
        sources.extend([spec[0]] * len(bundle))
        next_id += len(bundle)
    n_junk = int(round(junk_fraction * len(fibers)))
    junk = make_junk(rng, n_junk, id_offset=next_id)
    fibers.extend(junk)
    sources.extend(["junk"] * len(junk))
    return (
        Tractogram(tuple(fibers), subject_id=subject_id, space=Space.SUBJECT),
        np.array(sources),
    )


# ---------------------------------------------------------------------------
# shared cohort fixtures: a desk-sized two-stage atlas over the phantom scene

# Nerve owning each phantom bundle (bundle names carry a side suffix).
BUNDLE_NERVE = {
    "CN_II_D": Nerve.CN_II,
    "CN_III_L": Nerve.CN_III,
    "CN_V_L": Nerve.CN_V,
    "CN_V_R": Nerve.CN_V,
    "CN_VII_VIII_L": Nerve.CN_VII_VIII,
}

DESK_STAGE1 = AtlasStageConfig(
    k=50,
    outlier_std=2.0,
    outlier_iterations=2,
    sample_per_subject=500,
    min_length_mm=20.0,
    affinity_sigma_mm=30.0,
    landmark_count=300,
    seed=7,
)

DESK_STAGE2 = AtlasStageConfig(
    k=10,
    outlier_std=1.0,
    outlier_iterations=1,
    sample_per_subject=1200,
    min_length_mm=20.0,
    affinity_sigma_mm=20.0,
    landmark_count=300,
    seed=7,
)


@functools.cache
def phantom_cohort(n_subjects=4, junk_fraction=0.0):
    """Registered-alike subjects plus a per-subject fiber-source lookup."""
    subjects = []
    sources = {}
    for i in range(n_subjects):
        sid = f"sub{i:02d}"
        t, src = make_subject(
            seed=100 + i, subject_id=sid, fibers_per_bundle=120, junk_fraction=junk_fraction
        )
        subjects.append(t)
        sources[sid] = src
    return tuple(subjects), sources


@functools.cache
def stage1_atlas(junk_fraction=0.0):
    subjects, _ = phantom_cohort(junk_fraction=junk_fraction)
    return build_stage1(subjects, DESK_STAGE1)


def member_sources(cluster, sources):
    """Ground-truth bundle name for every member, via construction provenance."""
    return [
        sources[subj][src]
        for subj, src in zip(cluster.member_subjects, cluster.member_source_ids)
    ]


def majority_bundle(cluster, sources):
    names = member_sources(cluster, sources)
    uniq, counts = np.unique(names, return_counts=True)
    return uniq[int(np.argmax(counts))]


def box_mask(lo, hi, voxel_mm=4.0):
    """All-ones mask exactly covering the world-space box [lo, hi]."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    dims = np.maximum(np.ceil((hi - lo) / voxel_mm).astype(int), 1)
    affine = AffineTransform.from_parts(np.eye(3) * voxel_mm, lo)
    return MaskVolume(np.ones(dims, dtype=bool), affine)


def multi_box_mask(boxes, voxel_mm=4.0):
    """One mask whose occupied region is the union of several boxes."""
    boxes = [(np.asarray(lo, float), np.asarray(hi, float)) for lo, hi in boxes]
    lo_all = np.min([lo for lo, _ in boxes], axis=0) - voxel_mm
    hi_all = np.max([hi for _, hi in boxes], axis=0) + voxel_mm
    dims = np.ceil((hi_all - lo_all) / voxel_mm).astype(int)
    data = np.zeros(dims, dtype=bool)
    for lo, hi in boxes:
        a = np.floor((lo - lo_all) / voxel_mm).astype(int)
        b = np.ceil((hi - lo_all) / voxel_mm).astype(int)
        data[a[0] : b[0], a[1] : b[1], a[2] : b[2]] = True
    affine = AffineTransform.from_parts(np.eye(3) * voxel_mm, lo_all)
    return MaskVolume(data, affine)


def bundle_box(name, pad=6.0):
    spec = next(s for s in BUNDLE_SPECS if s[0] == name)
    pts = bundle_centerline(spec)
    return pts.min(axis=0) - pad, pts.max(axis=0) + pad


def endpoint_boxes(name, pad=8.0):
    """Two small boxes around a bundle's start and end regions."""
    spec = next(s for s in BUNDLE_SPECS if s[0] == name)
    pts = bundle_centerline(spec)
    return (
        (pts[0] - pad, pts[0] + pad),
        (pts[-1] - pad, pts[-1] + pad),
    )


@functools.cache
def phantom_rois():
    """Per-nerve ROI masks derived from the bundle geometry.

    Single-bundle nerves get two endpoint masks (members must thread both);
    CN V owns two bundles, so each of its masks is a union over both sides.
    """
    rois = {}
    for name, nerve in BUNDLE_NERVE.items():
        if nerve is Nerve.CN_V:
            continue
        first, second = endpoint_boxes(name)
        rois[nerve] = [multi_box_mask([first]), multi_box_mask([second])]
    l_first, l_second = endpoint_boxes("CN_V_L")
    r_first, r_second = endpoint_boxes("CN_V_R")
    rois[Nerve.CN_V] = [
        multi_box_mask([l_first, r_first]),
        multi_box_mask([l_second, r_second]),
    ]
    return rois


@functools.cache
def screened_atlas():
    return screen_clusters_by_roi(stage1_atlas(), phantom_rois())


@functools.cache
def enhanced_atlas():
    return build_stage2(screened_atlas(), DESK_STAGE2)


@functools.cache
def labeled_atlas():
    """Enhanced atlas with every cluster labeled by its majority bundle."""
    _, sources = phantom_cohort()
    a = enhanced_atlas()
    for c in a.clusters:
        name = majority_bundle(c, sources)
        a = apply_label(a, c.cluster_id, ClusterLabel[name], "builder", "2024-04-01T00:00:00Z")
    return a


def random_small_affine(rng, max_rotation_deg=10.0, max_translation=10.0, scale_range=(0.9, 1.1)):
    """Random perturbation in the registration recovery regime."""
    angles = np.deg2rad(rng.uniform(-max_rotation_deg, max_rotation_deg, size=3))
    cx, sx = np.cos(angles[0]), np.sin(angles[0])
    cy, sy = np.cos(angles[1]), np.sin(angles[1])
    cz, sz = np.cos(angles[2]), np.sin(angles[2])
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    scale = rng.uniform(*scale_range)
    linear = rz @ ry @ rx * scale
    translation = rng.uniform(-max_translation, max_translation, size=3)
    return linear, translation
