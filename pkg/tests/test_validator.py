from dataclasses import replace

import numpy as np
import pytest

from errors import DataIntegrityError
from prompt_engineering import ViewPhase, render_textual
from validator import check_split_disjoint, check_validation_purity, missing_label_keys, validate_records

from tests.conftest import make_record


def test_clean_records_pass():
    records = [make_record('patient0001', view, phase, seed=i)
               for i, (view, phase) in enumerate([('2CH', 'ED'), ('2CH', 'ES'), ('4CH', 'ED')])]
    report = validate_records(records)
    assert report['errors'] == []
    assert report['checked_count'] == 3 and report['invalid_records'] == 0


def test_bad_labels_and_shapes_reported():
    good = make_record('patient0001')
    bad_class = replace(good, view='4CH', label_map=good.label_map + 5)
    bad_shape = replace(good, phase='ES', image=np.zeros((8, 8), dtype=np.float32))
    unlabeled = replace(good, view='4CH', phase='ES', label_map=None)
    report = validate_records([good, bad_class, bad_shape, unlabeled])
    assert report['invalid_records'] == 3
    assert any('outside 0..3' in e for e in report['errors'])
    assert any('shape' in e for e in report['errors'])
    assert any('missing label' in e for e in report['errors'])
    with pytest.raises(DataIntegrityError):
        validate_records([bad_class], raise_on_error=True)


def test_duplicates_are_errors():
    record = make_record('patient0001')
    report = validate_records([record, replace(record)])
    assert report['invalid_records'] == 1


def test_synthetic_records():
    prompt = render_textual(ViewPhase('2CH', 'ED'))
    synth = replace(make_record('patient0001', provenance='synthetic'), source_prompt=prompt, sample_index=0)
    unprompted = replace(synth, source_prompt=None, sample_index=1)
    unlabeled = replace(synth, label_map=None, sample_index=2)
    report = validate_records([synth, unprompted, unlabeled], require_labels=False)
    assert report['invalid_records'] == 1
    assert len(report['warnings']) == 1
    assert missing_label_keys([synth, unlabeled]) == [unlabeled.key]


def test_split_and_purity_checks():
    check_split_disjoint(['a', 'b'], ['c'])
    with pytest.raises(DataIntegrityError):
        check_split_disjoint(['a', 'b'], ['b'])
    check_validation_purity(['real', 'real'])
    with pytest.raises(DataIntegrityError, match="'val'"):
        check_validation_purity(['real', 'synthetic'], name='val')
