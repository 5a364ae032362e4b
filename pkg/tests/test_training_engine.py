import json
import math

import numpy as np
import pytest
import torch

from errors import ConfigurationError, LexiconError, ParameterError
from generative_models import (CodecSpec, DenoiserSpec, TextEncoderSpec, build_bundle, parameter_checksum,
                               rasterize_label_map, read_checkpoint_manifest)
from prompt_engineering import ConceptLexicon, build_lexicon
from training_engine import TrainConfig, ddpm_loss, ldm_loss, train

from tests.conftest import make_records

MICRO_DENOISER = DenoiserSpec(base_width=2, depth=1, timestep_embedding_dim=4)
MICRO_TEXT = TextEncoderSpec(max_sequence_length=4, embedding_dim=4, vocab_size=16)
IDENTITY = CodecSpec(kind='identity')


def _assert_gradients_match(params, loss_fn, h=1e-6):
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params)
    for p, g in zip(params, grads):
        flat = p.data.view(-1)
        for idx in sorted({0, flat.numel() // 2, flat.numel() - 1}):
            orig = float(flat[idx])
            with torch.no_grad():
                flat[idx] = orig + h
                up = float(loss_fn())
                flat[idx] = orig - h
                down = float(loss_fn())
                flat[idx] = orig
            numeric = (up - down) / (2 * h)
            analytic = float(g.reshape(-1)[idx])
            assert abs(numeric - analytic) <= 1e-6 + 1e-4 * abs(numeric)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(mode='sketch')
    with pytest.raises(ParameterError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ParameterError):
        TrainConfig(max_iterations=0)
    with pytest.raises(ParameterError):
        TrainConfig(ema_decay=1.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(mode='text', prompt_style='poetic')
    assert TrainConfig().schedule().T == 1000


def test_ddpm_loss_gradient_matches_finite_differences():
    torch.manual_seed(0)
    bundle = build_bundle('unconditional', (8, 8), MICRO_DENOISER).double()
    params = bundle.trainable_parameters()
    assert sum(p.numel() for p in params) <= 1000
    schedule = TrainConfig(T=50).schedule()
    g = torch.Generator().manual_seed(1)
    x0 = torch.rand(2, 1, 8, 8, generator=g, dtype=torch.float64) * 2 - 1
    eps = torch.randn(2, 1, 8, 8, generator=g, dtype=torch.float64)
    t = torch.tensor([3, 40])
    _assert_gradients_match(params, lambda: ddpm_loss(bundle, x0, t, eps, schedule))


def test_ldm_loss_gradient_matches_finite_differences():
    torch.manual_seed(0)
    bundle = build_bundle('text', (8, 8), MICRO_DENOISER, IDENTITY, MICRO_TEXT).double()
    params = bundle.trainable_parameters()
    assert sum(p.numel() for p in params) <= 1000
    schedule = TrainConfig(T=50).schedule()
    g = torch.Generator().manual_seed(2)
    x = torch.rand(2, 1, 8, 8, generator=g, dtype=torch.float64) * 2 - 1
    eps = torch.randn(2, 1, 8, 8, generator=g, dtype=torch.float64)
    prompts = ['ultrasound image of the heart', 'four chamber view']
    t = torch.tensor([7, 25])
    _assert_gradients_match(params, lambda: ldm_loss(bundle, x, prompts, t, eps, schedule))


def test_losses_check_the_mode(tiny_bundle, tiny_schedule):
    text = tiny_bundle('text')
    uncond = tiny_bundle('unconditional')
    x = torch.zeros(2, 1, 16, 16)
    eps = torch.zeros(2, *text.latent_shape)
    with pytest.raises(ConfigurationError):
        ddpm_loss(text, x, 3, eps, tiny_schedule)
    with pytest.raises(ConfigurationError):
        ldm_loss(uncond, x, ['a', 'b'], 3, torch.zeros_like(x), tiny_schedule)
    with pytest.raises(ConfigurationError):
        ldm_loss(text, x, ['only one'], 3, eps, tiny_schedule)
    with pytest.raises(ConfigurationError):
        ldm_loss(tiny_bundle('text_seg'), x, ['a', 'b'], 3, eps, tiny_schedule)


def test_text_seg_loss_takes_label_maps(tiny_bundle, tiny_schedule):
    seg = tiny_bundle('text_seg')
    labels = rasterize_label_map(np.zeros((2, 16, 16), dtype=np.uint8), seg.latent_shape[1:])
    loss = ldm_loss(seg, torch.zeros(2, 1, 16, 16), ['a', 'b'], 5, torch.randn(2, *seg.latent_shape),
                    tiny_schedule, label_map=labels)
    assert loss.ndim == 0 and bool(torch.isfinite(loss))


def _quick_config(**kwargs):
    values = dict(mode='unconditional', T=20, max_iterations=6, batch_size_per_device=2, checkpoint_every=3,
                  learning_rate=1e-3, log_every=2, codec_iterations=5)
    values.update(kwargs)
    return TrainConfig(**values)


def test_unconditional_training_writes_checkpoints(tiny_bundle, tmp_path):
    data = make_records(2, size=(16, 16))
    result = train(_quick_config(), data, tiny_bundle('unconditional'), out_dir=tmp_path)
    assert result.final_step == 6
    assert [p.name for p in result.checkpoints] == ['step_0000003', 'step_0000006']
    lines = (tmp_path / 'losses.jsonl').read_text().splitlines()
    assert len(lines) == 6
    first = json.loads(lines[0])
    assert first['iteration'] == 1 and first['mode'] == 'unconditional'
    assert all(1 <= t <= 20 for line in lines for t in json.loads(line)['timesteps'])
    manifest = read_checkpoint_manifest(result.checkpoints[-1])
    assert manifest['step'] == 6 and manifest['schedule']['T'] == 20
    assert manifest['cells'] == ['2CH-ED', '2CH-ES', '4CH-ED', '4CH-ES']


def test_training_is_seed_deterministic(tiny_bundle, tmp_path):
    data = make_records(2, size=(16, 16))
    a = train(_quick_config(), data, tiny_bundle('unconditional'), out_dir=tmp_path / 'a')
    b = train(_quick_config(), data, tiny_bundle('unconditional'), out_dir=tmp_path / 'b')
    assert [r.loss for r in a.losses] == [r.loss for r in b.losses]
    assert parameter_checksum(a.bundle.denoiser) == parameter_checksum(b.bundle.denoiser)


def test_resume_continues_the_same_trajectory(tiny_bundle, tmp_path):
    data = make_records(2, size=(16, 16))
    straight = train(_quick_config(max_iterations=8), data, tiny_bundle('unconditional'), out_dir=tmp_path / 'a')
    first = train(_quick_config(), data, tiny_bundle('unconditional'), out_dir=tmp_path / 'b')
    resumed = train(_quick_config(max_iterations=8), data, out_dir=tmp_path / 'b',
                    resume_from=first.checkpoints[-1])
    assert [r.iteration for r in resumed.losses] == [7, 8]
    assert [r.loss for r in resumed.losses] == pytest.approx([r.loss for r in straight.losses[-2:]], rel=1e-5)
    assert len((tmp_path / 'b' / 'losses.jsonl').read_text().splitlines()) == 8


def test_mode_mismatch_rejected(tiny_bundle, tmp_path):
    with pytest.raises(ConfigurationError):
        train(_quick_config(mode='text'), make_records(1, size=(16, 16)), tiny_bundle('unconditional'),
              out_dir=tmp_path)


def test_text_seg_training_keeps_base_frozen(tiny_bundle, tmp_path):
    seg = tiny_bundle('text_seg')
    denoiser_before = parameter_checksum(seg.denoiser)
    text_before = parameter_checksum(seg.text_encoder)
    result = train(_quick_config(mode='text_seg', max_iterations=100, checkpoint_every=50, log_every=50),
                   make_records(2, size=(16, 16)), seg, out_dir=tmp_path)
    assert parameter_checksum(result.bundle.denoiser) == denoiser_before
    assert parameter_checksum(result.bundle.text_encoder) == text_before
    manifest = read_checkpoint_manifest(result.checkpoints[-1])
    assert manifest['frozen_checksum'] == result.bundle.frozen_checksum()
    assert bool(result.bundle.codec.fitted)


def test_abstract_training_saves_lexicon(tiny_bundle, tmp_path):
    result = train(_quick_config(mode='text', prompt_style='abstract', max_iterations=2),
                   make_records(1, size=(16, 16)), tiny_bundle('text'), out_dir=tmp_path)
    lexicon = ConceptLexicon.load(tmp_path / 'lexicon.json')
    assert lexicon == result.lexicon
    checkpoint = result.checkpoints[-1]
    assert ConceptLexicon.load(checkpoint / 'lexicon.json') == lexicon
    manifest = read_checkpoint_manifest(checkpoint)
    assert manifest['lexicon_hash'] == lexicon.content_hash()
    assert manifest['prompt_style'] == 'abstract'


def test_ema_weights_written(tiny_bundle, tmp_path):
    result = train(_quick_config(ema_decay=0.9, max_iterations=3), make_records(1, size=(16, 16)),
                   tiny_bundle('unconditional'), out_dir=tmp_path)
    assert (result.checkpoints[-1] / 'ema.pt').is_file()


@pytest.mark.slow
def test_toy_model_overfits_small_set(tmp_path):
    torch.manual_seed(0)
    bundle = build_bundle('unconditional', (32, 32), DenoiserSpec(base_width=16, depth=2,
                                                                  timestep_embedding_dim=32))
    config = TrainConfig(mode='unconditional', T=200, max_iterations=2000, batch_size_per_device=8,
                         learning_rate=1e-3, checkpoint_every=2000, log_every=500)
    result = train(config, make_records(2, size=(32, 32)), bundle, out_dir=tmp_path)
    losses = [r.loss for r in result.losses]
    assert np.mean(losses[-100:]) < 0.25 * np.mean(losses[:100])


class ZeroDenoiser:
    mode = 'unconditional'

    def denoise(self, x_t, t, context=None):
        return torch.zeros_like(x_t)


def test_zero_prediction_loss_is_the_noise_energy(tiny_schedule):
    g = torch.Generator().manual_seed(3)
    x0 = torch.rand(64, 1, 16, 16, generator=g, dtype=torch.float64) * 2 - 1
    eps = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    t = torch.randint(1, tiny_schedule.T + 1, (64,), generator=g)
    loss = float(ddpm_loss(ZeroDenoiser(), x0, t, eps, tiny_schedule))
    assert loss == pytest.approx(float((eps ** 2).mean()))
    assert abs(loss - 1.0) <= 3 * math.sqrt(2.0 / eps.numel())


def test_fresh_run_replaces_the_loss_log(tiny_bundle, tmp_path):
    data = make_records(1, size=(16, 16))
    for _ in range(2):
        train(_quick_config(max_iterations=3), data, tiny_bundle('unconditional'), out_dir=tmp_path)
    lines = (tmp_path / 'losses.jsonl').read_text().splitlines()
    assert [json.loads(line)['iteration'] for line in lines] == [1, 2, 3]


def test_resume_from_earlier_checkpoint_drops_later_log_records(tiny_bundle, tmp_path):
    data = make_records(1, size=(16, 16))
    first = train(_quick_config(), data, tiny_bundle('unconditional'), out_dir=tmp_path)
    train(_quick_config(), data, out_dir=tmp_path, resume_from=first.checkpoints[0])
    lines = (tmp_path / 'losses.jsonl').read_text().splitlines()
    assert [json.loads(line)['iteration'] for line in lines] == [1, 2, 3, 4, 5, 6]


def test_resume_keeps_the_checkpoint_lexicon(tiny_bundle, tmp_path):
    data = make_records(1, size=(16, 16))
    config = _quick_config(mode='text', prompt_style='abstract', max_iterations=2, seed=0)
    first = train(config, data, tiny_bundle('text'), out_dir=tmp_path / 'a')
    checkpoint = first.checkpoints[-1]
    recorded = read_checkpoint_manifest(checkpoint)['lexicon_hash']

    resumed = train(_quick_config(mode='text', prompt_style='abstract', max_iterations=4, seed=1), data,
                    out_dir=tmp_path / 'b', resume_from=checkpoint)
    assert resumed.lexicon == first.lexicon
    assert read_checkpoint_manifest(resumed.checkpoints[-1])['lexicon_hash'] == recorded
    assert ConceptLexicon.load(tmp_path / 'b' / 'lexicon.json') == first.lexicon

    with pytest.raises(LexiconError):
        train(_quick_config(mode='text', prompt_style='abstract', max_iterations=4), data,
              out_dir=tmp_path / 'c', resume_from=checkpoint, lexicon=build_lexicon(seed=5))
    with pytest.raises(ConfigurationError, match='prompt_style'):
        train(_quick_config(mode='text', prompt_style='textual', max_iterations=4), data,
              out_dir=tmp_path / 'd', resume_from=checkpoint)
