"""CAMUS-style ingestion, the patient split, prompt attachment, Real+k% mixes and manifests.

Expected raw layout::

    <root>/<patient_id>/<patient_id>_<view>_<phase>.png      image
    <root>/<patient_id>/<patient_id>_<view>_<phase>_gt.png   label map

``.mhd`` and ``.nii.gz`` files are read through SimpleITK when it is installed.
"""
import hashlib
import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from data_cleaning import CLASS_TABLE, load_image, load_label, save_image, save_label
from errors import ConfigurationError, IntegrityError, MixError, ParameterError, SplitError
from prompt_engineering import PHASES, VIEWS, ConceptLexicon, Prompt, ViewPhase, render_prompt
from validator import check_split_disjoint, validate_records

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MANIFEST_FILE = 'manifest.json'
IMAGE_SUFFIXES = ('.png', '.mhd', '.nii.gz', '.nii')
COLUMNS = ['key', 'patient_id', 'view', 'phase', 'provenance', 'sample_index', 'split',
           'image_path', 'label_path', 'prompt', 'prompt_style', 'bit_depth',
           'image_sha256', 'label_sha256']
HASHED_COLUMNS = [c for c in COLUMNS if not c.endswith('_path')]

PathLike = Union[str, Path]


@dataclass
class PatientRecord:
    patient_id: str
    view: str
    phase: str
    image: np.ndarray
    label_map: Optional[np.ndarray] = None
    provenance: str = 'real'
    source_prompt: Optional[Prompt] = None
    sample_index: int = -1
    bit_depth: int = 16

    @property
    def view_phase(self) -> ViewPhase:
        return ViewPhase(self.view, self.phase)

    @property
    def key(self) -> str:
        base = f"{self.patient_id}_{self.view}_{self.phase}"
        return base if self.provenance == 'real' else f"syn_{base}_{self.sample_index:05d}"


@dataclass(frozen=True)
class SplitSpec:
    validation_patient_count: int = 50


def natural_key(text: str) -> List[Tuple[int, Any]]:
    return [(0, int(part)) if part.isdigit() else (1, part) for part in re.split(r'(\d+)', str(text))]


def _clean(value):
    if value is None:
        return None
    if isinstance(value, float) and math.isnan(value):
        return None
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return None if np.isnan(value) else float(value)
    return value


def sha256_file(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class DatasetManifest:
    """Record descriptors (one DataFrame row per image) plus a header.

    Paths are absolute in memory and stored relative to the manifest file.
    Counts and the content hash are always recomputed from the rows.
    """
    frame: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=COLUMNS))
    name: str = 'camus'
    resolution: Optional[Tuple[int, int]] = None
    seed: Optional[int] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        frame = self.frame.copy()
        for column in COLUMNS:
            if column not in frame.columns:
                frame[column] = None
        frame = frame[COLUMNS].astype(object).where(pd.notna(frame[COLUMNS]), None)
        self.frame = frame.reset_index(drop=True)

    def __len__(self):
        return len(self.frame)

    @classmethod
    def from_rows(cls, rows: Sequence[Dict[str, Any]], **kwargs) -> 'DatasetManifest':
        return cls(pd.DataFrame(list(rows), columns=COLUMNS), **kwargs)

    @property
    def counts(self) -> Dict[str, int]:
        counts = {'total': len(self.frame)}
        for column in ('provenance', 'split'):
            for value, n in self.frame[column].dropna().value_counts().items():
                counts[str(value)] = int(n)
        return counts

    def patient_ids(self) -> List[str]:
        return sorted(set(self.frame['patient_id']), key=natural_key)

    def rows(self) -> List[Dict[str, Any]]:
        return [{k: _clean(v) for k, v in row.items()} for row in self.frame.to_dict(orient='records')]

    def content_hash(self) -> str:
        """sha256 over every descriptor, including the per-file content hashes"""
        rows = [{k: row[k] for k in HASHED_COLUMNS} for row in self.rows()]
        rows.sort(key=lambda r: (r['provenance'] or '', natural_key(r['patient_id']), r['view'], r['phase'],
                                 r['sample_index'] if r['sample_index'] is not None else -1))
        payload = json.dumps(rows, sort_keys=True, default=str).encode('utf-8')
        return hashlib.sha256(payload).hexdigest()

    def header(self) -> Dict[str, Any]:
        return {
            'version': MANIFEST_VERSION,
            'dataset': self.name,
            'resolution': list(self.resolution) if self.resolution else None,
            'class_table': {str(k): v for k, v in CLASS_TABLE.items()},
            'seed': self.seed,
            'content_hash': self.content_hash(),
            'counts': self.counts,
            **self.extra,
        }

    def subset(self, mask: Union[pd.Series, np.ndarray], **overrides) -> 'DatasetManifest':
        return replace(self, frame=self.frame[np.asarray(mask, dtype=bool)], **overrides)

    def with_frame(self, frame: pd.DataFrame, **overrides) -> 'DatasetManifest':
        return replace(self, frame=frame, **overrides)

    def filter(self, views: Optional[Sequence[str]] = None, phases: Optional[Sequence[str]] = None
               ) -> 'DatasetManifest':
        mask = pd.Series(True, index=self.frame.index)
        if views:
            mask &= self.frame['view'].isin(list(views))
        if phases:
            mask &= self.frame['phase'].isin(list(phases))
        return self.subset(mask)

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        base = path.parent.resolve()
        rows = self.rows()
        for row in rows:
            for column in ('image_path', 'label_path'):
                if row[column]:
                    p = Path(row[column]).resolve()
                    row[column] = str(p.relative_to(base)) if p.is_relative_to(base) else str(p)
        with open(path, 'w') as fh:
            json.dump({'header': self.header(), 'records': rows}, fh, indent=2, sort_keys=True)
        return path

    def load_records(self, size: Optional[Tuple[int, int]] = None) -> List[PatientRecord]:
        """Read every image/label pair described by this manifest"""
        size = size or self.resolution
        records = []
        for row in self.rows():
            image, bit_depth = load_image(row['image_path'], size)
            label = load_label(row['label_path'], size) if row['label_path'] else None
            prompt = None
            if row['prompt']:
                prompt = Prompt(row['prompt'], row['prompt_style'], ViewPhase(row['view'], row['phase']))
            records.append(PatientRecord(
                patient_id=row['patient_id'], view=row['view'], phase=row['phase'], image=image,
                label_map=label, provenance=row['provenance'], source_prompt=prompt,
                sample_index=row['sample_index'] if row['sample_index'] is not None else -1,
                bit_depth=bit_depth))
        return records


def read_manifest(path: PathLike, verify: bool = True) -> DatasetManifest:
    """Load a manifest file; with ``verify`` every referenced file is re-hashed"""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_FILE
    if not path.is_file():
        raise ConfigurationError(f"No manifest at {path}")
    with open(path) as fh:
        data = json.load(fh)
    header, rows = data['header'], data['records']
    if int(header.get('version', 0)) > MANIFEST_VERSION:
        raise ConfigurationError(f"Manifest version {header['version']} is newer than supported")
    base = path.parent.resolve()
    for row in rows:
        for column in ('image_path', 'label_path'):
            if row.get(column):
                row[column] = str((base / row[column]).resolve())
    known = {'version', 'dataset', 'resolution', 'class_table', 'seed', 'content_hash', 'counts'}
    manifest = DatasetManifest.from_rows(
        rows, name=header.get('dataset', 'camus'),
        resolution=tuple(header['resolution']) if header.get('resolution') else None,
        seed=header.get('seed'), extra={k: v for k, v in header.items() if k not in known})
    if verify:
        for row in manifest.rows():
            for column, digest in (('image_path', 'image_sha256'), ('label_path', 'label_sha256')):
                if not row[column]:
                    continue
                if not Path(row[column]).is_file():
                    raise IntegrityError(f"{row['key']}: missing file {row[column]}")
                if sha256_file(row[column]) != row[digest]:
                    raise IntegrityError(f"{row['key']}: content of {row[column]} does not match the manifest")
        if manifest.content_hash() != header.get('content_hash'):
            raise IntegrityError(f"Manifest {path} content hash mismatch")
    return manifest


def _find_file(folder, stem):
    for suffix in IMAGE_SUFFIXES:
        candidate = folder / f"{stem}{suffix}"
        if candidate.is_file():
            return candidate
    return None


def _ingest_patient(folder: Path, image_size: Optional[Tuple[int, int]]) -> Dict[str, Any]:
    patient_id = folder.name
    result = {'records': [], 'errors': [], 'gaps': []}
    for view in VIEWS:
        for phase in PHASES:
            stem = f"{patient_id}_{view}_{phase}"
            image_path = _find_file(folder, stem)
            label_path = _find_file(folder, f"{stem}_gt")
            if image_path is None and label_path is None:
                result['gaps'].append(f"{stem}: no image/label pair")
                continue
            if image_path is None:
                result['errors'].append(f"{stem}: missing image file")
                continue
            if label_path is None:
                result['errors'].append(f"{stem}: missing label file")
                continue
            try:
                image, bit_depth = load_image(image_path, image_size)
                label = load_label(label_path, image_size)
            except Exception as e:
                result['errors'].append(f"{stem}: unreadable ({e})")
                continue
            if image.shape != label.shape:
                result['errors'].append(f"{stem}: image shape {image.shape} != label shape {label.shape}")
                continue
            result['records'].append(PatientRecord(patient_id, view, phase, image, label, bit_depth=bit_depth))
    return result


def ingest(root: PathLike, image_size: Optional[Tuple[int, int]] = None,
           workers: int = 4) -> Tuple[List[PatientRecord], Dict[str, Any]]:
    """One record per (patient, view, phase); record-level problems land in the report"""
    root = Path(root)
    if not root.is_dir():
        raise ConfigurationError(f"Dataset root {root} is not a directory")
    report = {'errors': [], 'warnings': [], 'gaps': [], 'patients': 0, 'records': 0}
    patients = sorted((p for p in root.iterdir() if p.is_dir()), key=lambda p: natural_key(p.name))
    if not patients:
        msg = f"No patient folders under {root}"
        report['warnings'].append(msg)
        logger.warning(msg)
        return [], report

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(lambda folder: _ingest_patient(folder, image_size), patients))

    records: List[PatientRecord] = []
    for result in results:
        records.extend(result['records'])
        report['errors'].extend(result['errors'])
        report['gaps'].extend(result['gaps'])
    for msg in report['errors'] + report['gaps']:
        logger.info(msg)
    validate_records(records, raise_on_error=True)
    report['patients'] = len(patients)
    report['records'] = len(records)
    logger.info(f"Ingested {len(records)} records from {len(patients)} patients "
                f"({len(report['errors'])} errors, {len(report['gaps'])} gaps)")
    return records, report


def split_patients(records: Union[Sequence[PatientRecord], DatasetManifest], spec: SplitSpec = SplitSpec()):
    """First ``validation_patient_count`` patient ids (natural ascending order) form validation"""
    if isinstance(records, DatasetManifest):
        ids = records.patient_ids()
    else:
        ids = sorted({r.patient_id for r in records}, key=natural_key)
    if len(ids) <= spec.validation_patient_count:
        raise SplitError(f"Need more than {spec.validation_patient_count} patients to split, got {len(ids)}")
    validation_ids = set(ids[:spec.validation_patient_count])
    train_ids = set(ids[spec.validation_patient_count:])
    check_split_disjoint(train_ids, validation_ids)

    if isinstance(records, DatasetManifest):
        in_val = records.frame['patient_id'].isin(validation_ids)
        frame = records.frame.copy()
        frame['split'] = np.where(in_val, 'validation', 'train')
        tagged = records.with_frame(frame)
        return tagged.subset(~in_val), tagged.subset(in_val)
    train = [r for r in records if r.patient_id in train_ids]
    validation = [r for r in records if r.patient_id in validation_ids]
    return train, validation


def attach_prompts(manifest: DatasetManifest, style: str,
                   lexicon: Optional[ConceptLexicon] = None) -> DatasetManifest:
    """Fill the prompt columns of every real row from its view and phase"""
    frame = manifest.frame.copy()
    real = frame['provenance'] == 'real'
    frame.loc[real, 'prompt'] = [
        render_prompt(ViewPhase(v, p), style, lexicon).text
        for v, p in zip(frame.loc[real, 'view'], frame.loc[real, 'phase'])]
    frame.loc[real, 'prompt_style'] = style
    extra = dict(manifest.extra, prompt_style=style)
    if lexicon is not None:
        extra['lexicon_hash'] = lexicon.content_hash()
    return manifest.with_frame(frame, extra=extra)


def mix_real_synthetic(real: DatasetManifest, synth: DatasetManifest, percent: int,
                       seed: int = 0) -> DatasetManifest:
    """All real rows plus floor(percent/100 * |real|) synthetic rows under a seeded shuffle"""
    if int(percent) != percent or percent < 0:
        raise ParameterError(f"percent must be a non-negative integer, got {percent}")
    required = int(percent) * len(real) // 100
    if required > len(synth):
        raise MixError(f"Real+{percent}% needs {required} synthetic records, only {len(synth)} available")
    order = np.random.default_rng(seed).permutation(len(synth))[:required]
    chosen = synth.frame.iloc[np.sort(order)] if required else synth.frame.iloc[[]]
    frame = pd.concat([real.frame, chosen], ignore_index=True) if required else real.frame
    extra = dict(real.extra, mix_percent=int(percent), mix_seed=int(seed))
    if required:
        extra['synthetic_hash'] = synth.content_hash()
    return real.with_frame(frame, extra=extra, seed=real.seed if real.seed is not None else seed)


def write_records(records: Sequence[PatientRecord], out: PathLike, name: str = 'camus',
                  split: Optional[str] = None, seed: Optional[int] = None,
                  extra: Optional[Dict[str, Any]] = None) -> DatasetManifest:
    """Write images as 16-bit PNG and labels as 8-bit PNG, then the manifest"""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    resolution = None
    for record in records:
        key = record.key
        image_path = save_image(out / 'images' / f"{key}.png", record.image, bit_depth=16)
        label_path = save_label(out / 'labels' / f"{key}_gt.png", record.label_map) \
            if record.label_map is not None else None
        resolution = resolution or tuple(record.image.shape)
        rows.append({
            'key': key, 'patient_id': record.patient_id, 'view': record.view, 'phase': record.phase,
            'provenance': record.provenance, 'sample_index': record.sample_index, 'split': split,
            'image_path': str(image_path.resolve()),
            'label_path': str(label_path.resolve()) if label_path else None,
            'prompt': record.source_prompt.text if record.source_prompt else None,
            'prompt_style': record.source_prompt.style if record.source_prompt else None,
            'bit_depth': 16,
            'image_sha256': sha256_file(image_path),
            'label_sha256': sha256_file(label_path) if label_path else None,
        })
    manifest = DatasetManifest.from_rows(rows, name=name, resolution=resolution, seed=seed, extra=extra or {})
    manifest.save(out / MANIFEST_FILE)
    logger.info(f"Wrote {len(rows)} records to {out}")
    return manifest


def write_synthetic(records: Sequence[PatientRecord], out: PathLike, seed: Optional[int] = None,
                    extra: Optional[Dict[str, Any]] = None) -> DatasetManifest:
    report = validate_records(records, require_labels=False)
    not_synthetic = [r.key for r in records if r.provenance != 'synthetic']
    if not_synthetic:
        raise IntegrityError(f"write_synthetic got real records: {not_synthetic[:3]}")
    if report['errors']:
        raise IntegrityError(f"Invalid synthetic records: {report['errors'][:3]}")
    return write_records(records, out, name='synthetic', split='train', seed=seed, extra=extra)
