import numpy as np
import pytest
import torch
from PIL import Image

from dataset_pipeline import PatientRecord
from diffusion_schedule import make_schedule
from generative_models import CodecSpec, DenoiserSpec, TextEncoderSpec, build_bundle
from prompt_engineering import PHASES, VIEWS


def label_map(size=(32, 32), phase='ED', seed=0):
    """LV-epi ellipse with the LV-endo cavity inside and the LA below it"""
    rng = np.random.default_rng(seed)
    h, w = size
    yy, xx = np.mgrid[:h, :w]
    r = min(h, w)
    cy, cx = 0.4 * h + rng.uniform(-1, 1), 0.5 * w + rng.uniform(-1, 1)
    shrink = 1.0 if phase == 'ED' else 0.75
    epi = ((yy - cy) / (0.3 * r)) ** 2 + ((xx - cx) / (0.2 * r)) ** 2 <= 1
    endo = ((yy - cy) / (0.22 * r * shrink)) ** 2 + ((xx - cx) / (0.13 * r * shrink)) ** 2 <= 1
    la = ((yy - (cy + 0.42 * r)) / (0.1 * r)) ** 2 + ((xx - cx) / (0.14 * r)) ** 2 <= 1
    mask = np.zeros(size, dtype=np.uint8)
    mask[epi] = 2
    mask[endo] = 1
    mask[la & ~epi] = 3
    return mask


def image_for(mask, seed=0):
    rng = np.random.default_rng(seed)
    levels = np.array([0.1, 0.3, 0.8, 0.5], dtype=np.float32)
    image = levels[mask] + rng.normal(0.0, 0.03, mask.shape).astype(np.float32)
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def make_record(patient_id, view='2CH', phase='ED', size=(32, 32), seed=0, provenance='real'):
    mask = label_map(size, phase, seed)
    return PatientRecord(patient_id, view, phase, image_for(mask, seed), mask, provenance=provenance)


def make_records(n_patients, size=(32, 32), prefix='patient'):
    records = []
    for i in range(1, n_patients + 1):
        for j, (view, phase) in enumerate((v, p) for v in VIEWS for p in PHASES):
            records.append(make_record(f"{prefix}{i:04d}", view, phase, size, seed=i * 10 + j))
    return records


def write_camus_tree(root, n_patients, size=(32, 32), scaled_labels=False):
    """<root>/patientNNNN/patientNNNN_<view>_<phase>[_gt].png with 8-bit images"""
    for record in make_records(n_patients, size):
        folder = root / record.patient_id
        folder.mkdir(parents=True, exist_ok=True)
        stem = f"{record.patient_id}_{record.view}_{record.phase}"
        Image.fromarray(np.rint(record.image * 255).astype(np.uint8)).save(folder / f"{stem}.png")
        labels = record.label_map * 85 if scaled_labels else record.label_map
        Image.fromarray(labels.astype(np.uint8)).save(folder / f"{stem}_gt.png")
    return root


@pytest.fixture
def camus_tree(tmp_path):
    def build(n_patients=4, size=(32, 32), scaled_labels=False):
        return write_camus_tree(tmp_path / 'camus', n_patients, size, scaled_labels)
    return build


@pytest.fixture
def records():
    return make_records


@pytest.fixture
def tiny_schedule():
    return make_schedule(50, 1e-4, 0.05)


TINY_DENOISER = DenoiserSpec(base_width=8, depth=2, timestep_embedding_dim=16)
TINY_CODEC = CodecSpec(kind='toy', downsample_factor=2, latent_channels=2, hidden_channels=8)
TINY_TEXT = TextEncoderSpec(max_sequence_length=16, embedding_dim=16, vocab_size=64)


@pytest.fixture
def tiny_bundle():
    def build(mode='text', image_size=(16, 16), codec=TINY_CODEC):
        torch.manual_seed(0)
        return build_bundle(mode, image_size, TINY_DENOISER, codec, TINY_TEXT)
    return build
