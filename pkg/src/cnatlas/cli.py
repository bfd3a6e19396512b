"""Command line front end wiring the pipeline stages together.

Every pipeline command takes one declarative JSON run file describing the
whole experiment: where the subject tractograms live, the per-stage
parameter sections, the random seed, and the output directory.  The file
is validated completely (unknown keys rejected, every value type-checked)
before any work starts, and the top-level ``seed`` is mandatory so a run
never depends on wall-clock state.  Relative paths are resolved against
the directory containing the run file.

Run file layout (all sections optional unless a command needs them)::

    {
      "seed": 7,
      "output_dir": "out",
      "subjects": "data/" | {"sub01": "data/sub01.tck", ...},
      "workers": 1,
      "registration": {"sigma_schedule": [20, 10, 5], "dof": "rigid", ...},
      "stage1":       {"k": 50, "landmark_count": 300, ...},
      "stage2":       {"k": 10, ...},
      "screening":    {"theta": 0.6, "rois": {"CN_II": ["m.nii"]}, "roas": {...}},
      "apply":        {"atlas": null, "subjects": {...}, "registration": {...}, ...},
      "eval":         {"truth_dir": "truth", "voxel_mm": 1.25, ...},
      "tracking_presets": [{"nerve": "CN_II", "seeding_fa": 0.02, ...}, ...]
    }

Commands populate a fixed layout under ``output_dir``: ``registered/``,
``atlas_stage1/``, ``atlas_screened/``, ``atlas_stage2/``,
``identified/<subject>/``, and ``reports/``.  Each command also writes a
``<command>_manifest.json`` beside them recording inputs, seeds, package
versions, wall time, and artifact checksums; the manifest is the one file
that varies between reruns (wall time), every artifact is byte-stable for
a fixed run file.

Exit codes: 0 success; 2 configuration problem; 3 numerical failure;
4 unreadable or unwritable files; 64 command line usage error.  The
``convert`` command reports malformed tractography files as 2 (its job is
format checking), while the pipeline commands report them as 4.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import __version__
from .apply import CN_LABELS, IdentificationResult, IdentifyConfig, identify
from .core import (
    AffineTransform,
    DEFAULT_TRACKING_PRESETS,
    MaskVolume,
    Nerve,
    Space,
    TrackingPreset,
    Tractogram,
    streamline_length,
    transform_tractogram,
)
from .errors import (
    CnAtlasError,
    InvalidConfigError,
    NumericalFailureError,
    TractIOError,
)
from .io.atlas_store import load_atlas, save_atlas
from .io.nifti import read_nifti_mask
from .io.tck import read_tck, write_tck
from .io.vtk import read_vtk_polydata, write_vtk_polydata
from .metrics import (
    DEFAULT_VOXEL_MM,
    GridSpec,
    identification_table,
    voxelize_bundle,
    wdice,
)
from .pipeline import (
    Atlas,
    AtlasStageConfig,
    build_stage1,
    build_stage2,
    screen_clusters_by_roi,
    screening_report,
)
from .registration import (
    RegistrationConfig,
    apply_group_transforms,
    groupwise_affine_register,
)

WORKERS_ENV = "CNATLAS_WORKERS"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4
EXIT_USAGE = 64


class _UsageError(Exception):
    """Bad command line invocation, reported with exit code 64."""


class _Parser(argparse.ArgumentParser):
    # argparse would sys.exit(2); route through our usage exit code instead
    def error(self, message):
        raise _UsageError(message)


# ---------------------------------------------------------------------------
# run file parsing


@dataclass(frozen=True)
class EvalSettings:
    auto_dir: Path | None = None
    truth_dir: Path | None = None
    voxel_mm: float = DEFAULT_VOXEL_MM
    grid_mask: Path | None = None
    wdice_stratum: str = "successful"
    min_streamlines: int = 1

    def __post_init__(self) -> None:
        if self.voxel_mm <= 0:
            raise InvalidConfigError("eval voxel_mm must be positive")
        if self.wdice_stratum not in ("successful", "all"):
            raise InvalidConfigError(
                f"wdice_stratum must be 'successful' or 'all', got {self.wdice_stratum!r}"
            )
        if self.min_streamlines < 1:
            raise InvalidConfigError("eval min_streamlines must be at least 1")


@dataclass(frozen=True)
class PipelineConfig:
    """One fully validated run file."""

    seed: int
    output_dir: Path
    subjects: tuple[tuple[str, Path], ...] = ()
    workers: int = 1
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    stage1: AtlasStageConfig = field(default_factory=AtlasStageConfig)
    stage2: AtlasStageConfig = field(default_factory=AtlasStageConfig.enhanced)
    screening_theta: float = 0.6
    screening_rois: Mapping[Nerve, tuple[Path, ...]] = field(default_factory=dict)
    screening_roas: Mapping[Nerve, tuple[Path, ...]] = field(default_factory=dict)
    apply_atlas: Path | None = None
    apply_subjects: tuple[tuple[str, Path], ...] = ()
    identify: IdentifyConfig = field(default_factory=IdentifyConfig)
    evaluation: EvalSettings = field(default_factory=EvalSettings)
    tracking_presets: tuple[TrackingPreset, ...] | None = None


_TOP_KEYS = {
    "seed",
    "output_dir",
    "subjects",
    "workers",
    "registration",
    "stage1",
    "stage2",
    "screening",
    "apply",
    "eval",
    "tracking_presets",
}


def _reject_unknown(raw: Mapping, allowed: set[str], where: str) -> None:
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise InvalidConfigError(f"unknown {where} key(s): {', '.join(unknown)}")


def _object(raw, where: str) -> dict:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise InvalidConfigError(f"{where} must be a JSON object")
    return dict(raw)


def _dataclass_section(raw, cls, where: str, seed: int | None = None):
    """Build a config dataclass from a JSON object, rejecting stray keys."""
    data = _object(raw, where)
    allowed = {f.name for f in dataclasses.fields(cls)}
    _reject_unknown(data, allowed, where)
    if seed is not None and "seed" in allowed:
        data.setdefault("seed", seed)
    try:
        return cls(**data)
    except TypeError as exc:
        raise InvalidConfigError(f"{where}: {exc}") from exc


def _subject_table(raw, base: Path, where: str) -> tuple[tuple[str, Path], ...]:
    """A directory of .tck files, or an explicit id-to-path mapping."""
    if raw is None:
        return ()
    if isinstance(raw, str):
        root = (base / raw).resolve()
        if not root.is_dir():
            raise InvalidConfigError(f"{where}: {root} is not a directory")
        return tuple((p.stem, p) for p in sorted(root.glob("*.tck")))
    if isinstance(raw, dict):
        out = []
        for sid in sorted(raw):
            path = raw[sid]
            if not isinstance(sid, str) or not sid or not isinstance(path, str):
                raise InvalidConfigError(f"{where}: entries must map names to paths")
            out.append((sid, (base / path).resolve()))
        return tuple(out)
    raise InvalidConfigError(f"{where} must be a directory path or an object")


def _nerve(key: str, where: str) -> Nerve:
    try:
        return Nerve[key]
    except KeyError:
        pass
    try:
        return Nerve(key)
    except ValueError:
        names = ", ".join(n.name for n in Nerve)
        raise InvalidConfigError(f"{where}: unknown nerve {key!r} (expected one of {names})") from None


def _mask_table(raw, base: Path, where: str) -> dict[Nerve, tuple[Path, ...]]:
    data = _object(raw, where)
    out: dict[Nerve, tuple[Path, ...]] = {}
    for key in sorted(data):
        paths = data[key]
        if not isinstance(paths, list) or not all(isinstance(p, str) for p in paths):
            raise InvalidConfigError(f"{where}.{key} must be a list of mask paths")
        out[_nerve(key, where)] = tuple((base / p).resolve() for p in paths)
    return out


def _path_or_none(data: dict, key: str, base: Path, where: str) -> Path | None:
    value = data.get(key)
    if value is None:
        return None
    if not isinstance(value, str):
        raise InvalidConfigError(f"{where}.{key} must be a path string")
    return (base / value).resolve()


def _presets(raw, where: str) -> tuple[TrackingPreset, ...] | None:
    if raw is None:
        return None
    if not isinstance(raw, list):
        raise InvalidConfigError(f"{where} must be a list of preset objects")
    allowed = {f.name for f in dataclasses.fields(TrackingPreset)}
    out = []
    for i, entry in enumerate(raw):
        data = _object(entry, f"{where}[{i}]")
        _reject_unknown(data, allowed, f"{where}[{i}]")
        if "nerve" not in data:
            raise InvalidConfigError(f"{where}[{i}] is missing the nerve name")
        data["nerve"] = _nerve(str(data["nerve"]), f"{where}[{i}]")
        try:
            out.append(TrackingPreset(**data))
        except TypeError as exc:
            raise InvalidConfigError(f"{where}[{i}]: {exc}") from exc
    return tuple(out)


def load_pipeline_config(path: str | Path) -> PipelineConfig:
    """Parse and fully validate a run file before any command does work."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except ValueError as exc:
        raise InvalidConfigError(f"run file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise InvalidConfigError("run file must hold a JSON object")
    _reject_unknown(raw, _TOP_KEYS, "run file")
    base = path.resolve().parent

    if "seed" not in raw:
        raise InvalidConfigError("run file must set an explicit top-level seed")
    seed = raw["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise InvalidConfigError("seed must be an integer")
    if "output_dir" not in raw or not isinstance(raw["output_dir"], str):
        raise InvalidConfigError("run file must set output_dir")
    output_dir = (base / raw["output_dir"]).resolve()

    workers = raw.get("workers", 1)
    if not isinstance(workers, int) or isinstance(workers, bool) or workers < 1:
        raise InvalidConfigError("workers must be a positive integer")

    screening = _object(raw.get("screening"), "screening")
    _reject_unknown(screening, {"theta", "rois", "roas"}, "screening")
    theta = screening.get("theta", 0.6)
    if not isinstance(theta, (int, float)) or isinstance(theta, bool):
        raise InvalidConfigError("screening.theta must be a number")

    apply_raw = _object(raw.get("apply"), "apply")
    _reject_unknown(
        apply_raw,
        {
            "atlas",
            "subjects",
            "registration",
            "min_streamlines",
            "min_length_mm",
            "outlier_removal",
            "max_landmark_distance",
        },
        "apply",
    )
    apply_reg = _dataclass_section(
        apply_raw.get("registration", raw.get("registration")),
        RegistrationConfig,
        "apply.registration",
        seed=seed,
    )
    identify_kwargs = {
        k: apply_raw[k]
        for k in ("min_streamlines", "min_length_mm", "outlier_removal", "max_landmark_distance")
        if k in apply_raw
    }
    try:
        identify_cfg = IdentifyConfig(registration=apply_reg, **identify_kwargs)
    except TypeError as exc:
        raise InvalidConfigError(f"apply: {exc}") from exc

    eval_raw = _object(raw.get("eval"), "eval")
    _reject_unknown(
        eval_raw,
        {"auto_dir", "truth_dir", "voxel_mm", "grid_mask", "wdice_stratum", "min_streamlines"},
        "eval",
    )
    eval_kwargs = {
        k: eval_raw[k] for k in ("voxel_mm", "wdice_stratum", "min_streamlines") if k in eval_raw
    }
    try:
        evaluation = EvalSettings(
            auto_dir=_path_or_none(eval_raw, "auto_dir", base, "eval"),
            truth_dir=_path_or_none(eval_raw, "truth_dir", base, "eval"),
            grid_mask=_path_or_none(eval_raw, "grid_mask", base, "eval"),
            **eval_kwargs,
        )
    except TypeError as exc:
        raise InvalidConfigError(f"eval: {exc}") from exc

    return PipelineConfig(
        seed=seed,
        output_dir=output_dir,
        subjects=_subject_table(raw.get("subjects"), base, "subjects"),
        workers=workers,
        registration=_dataclass_section(
            raw.get("registration"), RegistrationConfig, "registration", seed=seed
        ),
        stage1=_dataclass_section(raw.get("stage1"), AtlasStageConfig, "stage1", seed=seed),
        stage2=_dataclass_section(
            {
                **dataclasses.asdict(AtlasStageConfig.enhanced()),
                "seed": seed,
                **_object(raw.get("stage2"), "stage2"),
            },
            AtlasStageConfig,
            "stage2",
        ),
        screening_theta=float(theta),
        screening_rois=_mask_table(screening.get("rois"), base, "screening.rois"),
        screening_roas=_mask_table(screening.get("roas"), base, "screening.roas"),
        apply_atlas=_path_or_none(apply_raw, "atlas", base, "apply"),
        apply_subjects=_subject_table(apply_raw.get("subjects"), base, "apply.subjects"),
        identify=identify_cfg,
        evaluation=evaluation,
        tracking_presets=_presets(raw.get("tracking_presets"), "tracking_presets"),
    )


# ---------------------------------------------------------------------------
# shared command plumbing


def _resolve_workers(flag: int | None, cfg: PipelineConfig) -> int:
    if flag is not None:
        if flag < 1:
            raise _UsageError("--workers must be at least 1")
        return flag
    env = os.environ.get(WORKERS_ENV)
    if env is not None:
        try:
            value = int(env)
        except ValueError:
            raise InvalidConfigError(f"{WORKERS_ENV}={env!r} is not an integer") from None
        if value < 1:
            raise InvalidConfigError(f"{WORKERS_ENV} must be at least 1")
        return value
    return cfg.workers


def _map_workers(fn: Callable, items: Sequence, workers: int) -> list:
    """Order-preserving parallel map; results are worker-count independent."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _file_records(paths: Sequence[Path]) -> list[dict]:
    return [{"path": str(p), "sha256": _sha256(p)} for p in sorted(paths)]


def _tree_files(root: Path) -> list[Path]:
    return [p for p in sorted(root.rglob("*")) if p.is_file()]


def _write_manifest(
    cfg: PipelineConfig,
    command: str,
    *,
    config_path: Path,
    inputs: Sequence[Path],
    artifact_dirs: Sequence[Path],
    started: float,
) -> Path:
    artifacts: list[Path] = []
    for d in artifact_dirs:
        artifacts.extend(_tree_files(d))
    record = {
        "command": command,
        "run_file": {"path": str(config_path), "sha256": _sha256(config_path)},
        "seed": cfg.seed,
        "inputs": _file_records(inputs),
        "artifacts": _file_records(artifacts),
        "versions": {
            "cnatlas": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "wall_time_s": round(time.monotonic() - started, 3),
    }
    out = cfg.output_dir / f"{command.replace('-', '_')}_manifest.json"
    out.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return out


def _registration_record(rc: RegistrationConfig) -> dict:
    return {
        "method": "groupwise_affine",
        "sigma_schedule": list(rc.sigma_schedule),
        "points_per_fiber": rc.points_per_fiber,
        "fibers_per_subject": rc.fibers_per_subject,
        "dof": rc.dof.name.lower(),
        "max_iters_per_level": rc.max_iters_per_level,
        "convergence_tol": rc.convergence_tol,
        "seed": rc.seed,
    }


def _read_subjects(
    table: Sequence[tuple[str, Path]], workers: int, space: Space
) -> list[Tractogram]:
    return _map_workers(lambda sp: read_tck(sp[1], subject_id=sp[0], space=space), table, workers)


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise InvalidConfigError(message)


# ---------------------------------------------------------------------------
# convert


_READERS = {".tck": read_tck, ".vtk": read_vtk_polydata}
_WRITERS = {"tck": write_tck, "vtk": write_vtk_polydata}


def _convert_target(args) -> str:
    if args.to:
        return args.to
    if args.out:
        ext = Path(args.out).suffix.lstrip(".").lower()
        if ext in _WRITERS:
            return ext
    raise _UsageError("specify --to tck|vtk (or an --out path ending in .tck/.vtk)")


def cmd_convert(args) -> None:
    if not args.inputs:
        raise _UsageError("convert needs at least one input file")
    if args.out and len(args.inputs) != 1:
        raise _UsageError("--out works with exactly one input; use --out-dir for batches")
    target = _convert_target(args)
    out_dir = Path(args.out_dir) if args.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    for name in args.inputs:
        src = Path(name)
        reader = _READERS.get(src.suffix.lower())
        if reader is None:
            raise _UsageError(f"{src}: unsupported input extension (expected .tck or .vtk)")
        t = reader(src, subject_id=src.stem)
        dest = Path(args.out) if args.out else (out_dir or src.parent) / f"{src.stem}.{target}"
        _WRITERS[target](t, dest)
        lengths = [streamline_length(s) for s in t]
        mean = sum(lengths) / len(lengths) if lengths else 0.0
        print(
            f"{src} -> {dest}: {len(t)} fibers, "
            f"mean length {mean:.1f} mm, total {sum(lengths):.1f} mm"
        )


# ---------------------------------------------------------------------------
# pipeline commands


def cmd_register(cfg: PipelineConfig, config_path: Path, workers: int) -> None:
    started = time.monotonic()
    _require(len(cfg.subjects) >= 2, "register needs at least 2 entries under subjects")
    tracts = _read_subjects(cfg.subjects, workers, Space.SUBJECT)
    result = groupwise_affine_register(tracts, cfg.registration)
    mapped = apply_group_transforms(tracts, result)

    reg_dir = cfg.output_dir / "registered"
    reg_dir.mkdir(parents=True, exist_ok=True)

    def write_one(pair):
        (sid, _), moved = pair
        out = reg_dir / f"{sid}.tck"
        write_tck(replace(moved, space=Space.ATLAS), out)
        return out

    _map_workers(write_one, list(zip(cfg.subjects, mapped)), workers)
    record = {
        "config": _registration_record(cfg.registration),
        "final_objective": result.final_objective,
        "trace": [list(level) for level in result.trace],
        "transforms": {
            sid: x.matrix.tolist() for (sid, _), x in zip(cfg.subjects, result.transforms)
        },
    }
    (reg_dir / "transforms.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    _write_manifest(
        cfg,
        "register",
        config_path=config_path,
        inputs=[p for _, p in cfg.subjects],
        artifact_dirs=[reg_dir],
        started=started,
    )
    print(
        f"registered {len(tracts)} subjects -> {reg_dir} "
        f"(final objective {result.final_objective:.4f})"
    )


def _atlas_registration_record(cfg: PipelineConfig, reg_dir: Path) -> str | None:
    transforms = reg_dir / "transforms.json"
    if not transforms.exists():
        return None
    stored = json.loads(transforms.read_text())
    return json.dumps(
        {"config": _registration_record(cfg.registration), "final_objective": stored["final_objective"]}
    )


def cmd_build_atlas(cfg: PipelineConfig, config_path: Path, workers: int, stage: int) -> None:
    started = time.monotonic()
    if stage == 1:
        reg_dir = cfg.output_dir / "registered"
        files = sorted(reg_dir.glob("*.tck")) if reg_dir.is_dir() else []
        _require(bool(files), f"no registered tractograms under {reg_dir}; run register first")
        table = tuple((p.stem, p) for p in files)
        tracts = _read_subjects(table, workers, Space.ATLAS)
        atlas = build_stage1(tracts, cfg.stage1)
        record = _atlas_registration_record(cfg, reg_dir)
        if record is not None:
            atlas = replace(atlas, registration_record=record)
        if cfg.tracking_presets is not None:
            atlas = replace(atlas, tracking_presets=cfg.tracking_presets)
        out = cfg.output_dir / "atlas_stage1"
        inputs = [p for _, p in table]
    else:
        screened = cfg.output_dir / "atlas_screened"
        source = screened if (screened / "manifest.json").exists() else cfg.output_dir / "atlas_stage1"
        _require(
            (source / "manifest.json").exists(),
            f"no initial atlas under {source}; run build-atlas --stage 1 first",
        )
        base = load_atlas(source)
        atlas = build_stage2(base, cfg.stage2)
        out = cfg.output_dir / "atlas_stage2"
        inputs = _tree_files(source)
    save_atlas(atlas, out)
    _write_manifest(
        cfg,
        f"build-atlas-stage{stage}",
        config_path=config_path,
        inputs=inputs,
        artifact_dirs=[out],
        started=started,
    )
    print(
        f"stage {stage} atlas: {len(atlas.clusters)} clusters over "
        f"{len(atlas.fibers)} fibers -> {out}"
    )


def cmd_screen_roi(cfg: PipelineConfig, config_path: Path, workers: int) -> None:
    started = time.monotonic()
    _require(bool(cfg.screening_rois), "screen-roi needs screening.rois in the run file")
    source = cfg.output_dir / "atlas_stage1"
    _require(
        (source / "manifest.json").exists(),
        f"no initial atlas under {source}; run build-atlas --stage 1 first",
    )
    atlas = load_atlas(source)

    mask_paths = sorted(
        {p for paths in cfg.screening_rois.values() for p in paths}
        | {p for paths in cfg.screening_roas.values() for p in paths}
    )
    masks: dict[Path, MaskVolume] = dict(
        zip(mask_paths, _map_workers(read_nifti_mask, mask_paths, workers))
    )
    rois = {n: [masks[p] for p in paths] for n, paths in cfg.screening_rois.items()}
    roas = {n: [masks[p] for p in paths] for n, paths in cfg.screening_roas.items()}
    screened = screen_clusters_by_roi(atlas, rois, roas or None, theta=cfg.screening_theta)
    out = cfg.output_dir / "atlas_screened"
    save_atlas(screened, out)
    _write_manifest(
        cfg,
        "screen-roi",
        config_path=config_path,
        inputs=_tree_files(source) + mask_paths,
        artifact_dirs=[out],
        started=started,
    )
    print(screening_report(screened))
    print(f"screened atlas -> {out}")


def _bundle_file(directory: Path, label) -> Path:
    return directory / f"{label.name}.tck"


def cmd_apply(cfg: PipelineConfig, config_path: Path, workers: int) -> None:
    started = time.monotonic()
    _require(bool(cfg.apply_subjects), "apply needs apply.subjects in the run file")
    atlas_dir = cfg.apply_atlas or cfg.output_dir / "atlas_stage2"
    _require(
        (atlas_dir / "manifest.json").exists(),
        f"no atlas under {atlas_dir}; run build-atlas --stage 2 or set apply.atlas",
    )
    atlas = load_atlas(atlas_dir)
    tracts = _read_subjects(cfg.apply_subjects, workers, Space.SUBJECT)
    results = _map_workers(lambda t: identify(t, atlas, cfg.identify), tracts, workers)

    ident_dir = cfg.output_dir / "identified"
    for (sid, _), res in zip(cfg.apply_subjects, results):
        sub_dir = ident_dir / sid
        sub_dir.mkdir(parents=True, exist_ok=True)
        for label, bundle in res.bundles.items():
            write_tck(bundle, _bundle_file(sub_dir, label))
        summary = {
            "subject": sid,
            "counts": {label.name: res.counts[label] for label in CN_LABELS},
            "identified": {label.name: res.identified[label] for label in CN_LABELS},
            "low_confidence": res.low_confidence_count,
            "transform": res.transform.matrix.tolist(),
        }
        (sub_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        found = sum(res.identified.values())
        print(f"{sid}: {found} of {len(CN_LABELS)} subdivisions identified")
    _write_manifest(
        cfg,
        "apply",
        config_path=config_path,
        inputs=[p for _, p in cfg.apply_subjects] + _tree_files(atlas_dir),
        artifact_dirs=[ident_dir],
        started=started,
    )


def _load_identified(sub_dir: Path):
    summary = json.loads((sub_dir / "summary.json").read_text())
    label_by_name = {label.name: label for label in CN_LABELS}
    bundles = {}
    counts = {}
    identified = {}
    for name, label in label_by_name.items():
        bundles[label] = read_tck(
            _bundle_file(sub_dir, label), subject_id=summary["subject"]
        )
        counts[label] = int(summary["counts"][name])
        identified[label] = bool(summary["identified"][name])
    return IdentificationResult(
        bundles=bundles,
        counts=counts,
        identified=identified,
        transform=AffineTransform(np.asarray(summary["transform"])),
        low_confidence_count=int(summary["low_confidence"]),
    )


def _eval_one_subject(sub_dir: Path, truth_dir: Path, ev: EvalSettings, fixed_grid):
    res = _load_identified(sub_dir)
    truth_flags = {}
    scores = {}
    for label in CN_LABELS:
        truth_file = _bundle_file(truth_dir / sub_dir.name, label)
        if not truth_file.exists():
            truth_flags[label] = False
            continue
        truth_bundle = read_tck(truth_file, subject_id=sub_dir.name)
        truth_flags[label] = len(truth_bundle) > 0
        auto_bundle = res.bundles[label]
        if len(truth_bundle) == 0 and len(auto_bundle) == 0:
            continue
        grid = fixed_grid or GridSpec.covering([auto_bundle, truth_bundle], voxel_mm=ev.voxel_mm)
        scores[label] = wdice(voxelize_bundle(auto_bundle, grid), voxelize_bundle(truth_bundle, grid))
    return res, truth_flags, scores


def cmd_eval(cfg: PipelineConfig, config_path: Path, workers: int) -> None:
    started = time.monotonic()
    ev = cfg.evaluation
    _require(ev.truth_dir is not None, "eval needs eval.truth_dir in the run file")
    auto_dir = ev.auto_dir or cfg.output_dir / "identified"
    sub_dirs = sorted(
        (d for d in auto_dir.iterdir() if (d / "summary.json").exists()), key=lambda d: d.name
    ) if auto_dir.is_dir() else []
    _require(bool(sub_dirs), f"no identified bundles under {auto_dir}; run apply first")
    fixed_grid = GridSpec.from_mask(read_nifti_mask(ev.grid_mask)) if ev.grid_mask else None

    rows = _map_workers(
        lambda d: _eval_one_subject(d, ev.truth_dir, ev, fixed_grid), sub_dirs, workers
    )
    results = [r for r, _, _ in rows]
    truth = [t for _, t, _ in rows]
    scores = [s for _, _, s in rows]
    report = identification_table(
        results, truth, wdice_scores=scores, wdice_stratum=ev.wdice_stratum
    )

    reports_dir = cfg.output_dir / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    (reports_dir / "report.txt").write_text(report.to_text())
    (reports_dir / "report.csv").write_text(report.to_csv())
    def stats(entry):
        return None if entry is None else {"mean": entry[0], "std": entry[1], "n": entry[2]}

    payload = {
        "strata": {
            label.name: {stratum: list(cell) for stratum, cell in table.items()}
            for label, table in report.strata.items()
        },
        "wdice": None
        if report.wdice_by_nerve is None
        else {
            "by_nerve": {
                nerve.name: stats(entry) for nerve, entry in report.wdice_by_nerve.items()
            },
            "overall": stats(report.wdice_overall),
        },
    }
    (reports_dir / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    inputs = [f for d in sub_dirs for f in _tree_files(d)] + _tree_files(ev.truth_dir)
    _write_manifest(
        cfg,
        "eval",
        config_path=config_path,
        inputs=inputs,
        artifact_dirs=[reports_dir],
        started=started,
    )
    print(report.to_text(), end="")
    print(f"reports -> {reports_dir}")


# ---------------------------------------------------------------------------
# presets and serving


def cmd_emit_presets(out_path: str) -> None:
    payload = {
        "seeds_per_voxel": DEFAULT_TRACKING_PRESETS[0].seeds_per_voxel,
        "presets": [
            {
                "nerve": p.nerve.name,
                "seeding_fa": p.seeding_fa,
                "stopping_fa": p.stopping_fa,
                "qm": p.qm,
                "ql": p.ql,
                "seeds_per_voxel": p.seeds_per_voxel,
            }
            for p in DEFAULT_TRACKING_PRESETS
        ],
    }
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(payload['presets'])} tracking presets -> {out}")


def cmd_serve(args) -> None:
    import uvicorn

    from .service import create_app

    app = create_app(args.atlas)
    uvicorn.run(app, host=args.host, port=args.port)


# ---------------------------------------------------------------------------
# argument parsing and dispatch


def build_parser() -> _Parser:
    parser = _Parser(prog="cnatlas", description="Fiber clustering atlas pipeline for cranial nerves.")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("convert", help="convert tractography files between tck and vtk")
    p.add_argument("inputs", nargs="*", help="input .tck or .vtk files")
    p.add_argument("--to", choices=sorted(_WRITERS), help="target format")
    p.add_argument("--out", help="output path (single input only)")
    p.add_argument("--out-dir", help="output directory for converted files")

    for name, help_text in (
        ("register", "groupwise registration of the cohort into atlas space"),
        ("screen-roi", "assign initial clusters to nerves by mask evidence"),
        ("apply", "identify nerve bundles in new subjects with a labeled atlas"),
        ("eval", "score identified bundles against reference bundles"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="JSON run file")
        p.add_argument("--workers", type=int, default=None, help="parallel worker count")

    p = sub.add_parser("build-atlas", help="cluster the registered cohort into an atlas")
    p.add_argument("config", help="JSON run file")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--workers", type=int, default=None, help="parallel worker count")

    p = sub.add_parser("emit-presets", help="write the per-nerve tracking parameter table")
    p.add_argument("out", help="output JSON path")

    p = sub.add_parser("serve", help="serve a saved atlas for expert review")
    p.add_argument("--atlas", required=True, help="atlas directory")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8860)
    return parser


def _dispatch(args) -> None:
    if args.command == "convert":
        cmd_convert(args)
        return
    if args.command == "emit-presets":
        cmd_emit_presets(args.out)
        return
    if args.command == "serve":
        cmd_serve(args)
        return
    config_path = Path(args.config).resolve()
    cfg = load_pipeline_config(config_path)
    workers = _resolve_workers(args.workers, cfg)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    if args.command == "register":
        cmd_register(cfg, config_path, workers)
    elif args.command == "build-atlas":
        cmd_build_atlas(cfg, config_path, workers, args.stage)
    elif args.command == "screen-roi":
        cmd_screen_roi(cfg, config_path, workers)
    elif args.command == "apply":
        cmd_apply(cfg, config_path, workers)
    elif args.command == "eval":
        cmd_eval(cfg, config_path, workers)
    else:
        raise _UsageError("choose a command (see cnatlas --help)")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise _UsageError("choose a command (see cnatlas --help)")
        _dispatch(args)
    except _UsageError as exc:
        print(f"cnatlas: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalFailureError as exc:
        print(f"cnatlas: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except TractIOError as exc:
        # convert's whole job is format checking, so there a bad file is
        # a format diagnosis (2); elsewhere it is an input failure (4)
        code = EXIT_CONFIG if getattr(args, "command", None) == "convert" else EXIT_IO
        print(f"cnatlas: {exc}", file=sys.stderr)
        return code
    except OSError as exc:
        print(f"cnatlas: i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CnAtlasError as exc:
        print(f"cnatlas: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
