import logging
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from errors import DataIntegrityError

logger = logging.getLogger(__name__)

VALID_CLASSES = frozenset({0, 1, 2, 3})


class RecordValidator:
    """Integrity checks over patient records, collected into a report"""

    def __init__(self, records: Sequence[Any], require_labels: bool = True):
        self.records = list(records)
        self.require_labels = require_labels
        self.validation_report = {
            'errors': [],
            'warnings': [],
            'invalid_records': 0,
            'initial_count': len(self.records),
            'checked_count': 0,
        }
        self._bad = set()

    def validate(self) -> Dict[str, Any]:
        """Run all record-level checks"""
        try:
            for index, record in enumerate(self.records):
                self._check_label_integrity(index, record)
                self._check_shapes(index, record)
                self._check_provenance(index, record)
            self._check_duplicates()
            self.validation_report['checked_count'] = len(self.records)
            self.validation_report['invalid_records'] = len(self._bad)
            return self.validation_report
        except Exception as e:
            logger.error(f"Validation error: {str(e)}")
            raise

    def _fail(self, index: int, record: Any, msg: str) -> None:
        self._bad.add(index)
        msg = f"{getattr(record, 'key', index)}: {msg}"
        self.validation_report['errors'].append(msg)
        logger.info(msg)

    def _check_label_integrity(self, index, record):
        """Label classes must be the canonical 0..3"""
        if record.label_map is None:
            if self.require_labels:
                self._fail(index, record, "missing label map")
            return
        present = set(np.unique(record.label_map).tolist())
        if not present <= VALID_CLASSES:
            self._fail(index, record, f"label values {sorted(present - VALID_CLASSES)} outside 0..3")

    def _check_shapes(self, index, record):
        if record.label_map is not None and record.image.shape != record.label_map.shape:
            self._fail(index, record,
                       f"image shape {record.image.shape} != label shape {record.label_map.shape}")

    def _check_provenance(self, index, record):
        """Synthetic records carry their prompt and conditioning label map"""
        if record.provenance not in ('real', 'synthetic'):
            self._fail(index, record, f"unknown provenance '{record.provenance}'")
        elif record.provenance == 'synthetic' and record.source_prompt is None:
            self._fail(index, record, "synthetic record without a source prompt")
        elif record.provenance == 'synthetic' and record.label_map is None:
            msg = f"{record.key}: synthetic record without a label map (classification only)"
            self.validation_report['warnings'].append(msg)
            logger.warning(msg)

    def _check_duplicates(self):
        seen = {}
        for index, record in enumerate(self.records):
            key = (record.patient_id, record.view, record.phase, record.provenance)
            if record.provenance == 'real' and key in seen:
                self._fail(index, record, f"duplicate of record {seen[key]}")
            seen.setdefault(key, index)


def validate_records(records: Sequence[Any], require_labels: bool = True,
                     raise_on_error: bool = False) -> Dict[str, Any]:
    """Convenience function to use the RecordValidator class"""
    report = RecordValidator(records, require_labels=require_labels).validate()
    if raise_on_error and report['errors']:
        raise DataIntegrityError(f"{len(report['errors'])} invalid records; first: {report['errors'][0]}")
    return report


def check_split_disjoint(train_ids: Iterable[str], validation_ids: Iterable[str]) -> None:
    leaked = sorted(set(train_ids) & set(validation_ids))
    if leaked:
        raise DataIntegrityError(f"patients in both splits: {leaked[:5]}")


def check_validation_purity(provenances: Iterable[str], name: Optional[str] = None) -> None:
    """Any synthetic record in a validation set is a hard error"""
    synthetic = sum(1 for p in provenances if p != 'real')
    if synthetic:
        where = f" '{name}'" if name else ''
        raise DataIntegrityError(f"validation set{where} contains {synthetic} synthetic records")


def missing_label_keys(records: Sequence[Any]) -> List[str]:
    return [r.key for r in records if r.provenance == 'synthetic' and r.label_map is None]
