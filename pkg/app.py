"""EchoSynth command line: ingest, train, synthesize, evaluate, downstream-seg, downstream-cls, report.

Every verb works inside one run directory holding config.yaml, inputs.json,
run.log and the verb's artifacts. A run.lock file keeps concurrent writers out.
"""
import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch
from fuzzywuzzy import process

import config as cfg_lib
from dataset_pipeline import (DatasetManifest, PatientRecord, SplitSpec, ingest, mix_real_synthetic,
                              read_manifest, split_patients, write_records, write_synthetic)
from diffusion_schedule import NoiseSchedule, ddpm_sample, fast_sample
from downstream_harness import (compare_regimes, linear_probe, load_regime, save_regime,
                                train_segmentation)
from errors import ComparisonError, ConfigurationError, EchoSynthError, MixError, ParameterError, RunLockError
from evaluation import FeatureCache, extract_features, evaluate_generation, get_extractor
from generative_models import build_bundle, init_control_from_base, load_checkpoint
from prompt_engineering import (PHASES, VIEWS, ConceptLexicon, Prompt, ViewPhase, check_lexicon_matches,
                                render_prompt)
from reporting import CELLS, plot_curves, plot_losses, render_comparison, render_generation, write_text
from training_engine import load_ema_weights, train

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
VERBS = ('ingest', 'train', 'synthesize', 'evaluate', 'downstream-seg', 'downstream-cls', 'report')
SOURCE_DIR = Path(__file__).resolve().parent


def setup_logging(level: str = 'INFO') -> None:
    """Console handler on the root logger; run directories add their own file handler"""
    root = logging.getLogger()
    root.setLevel(level)
    if not any(getattr(h, '_echosynth_console', False) for h in root.handlers):
        console = logging.StreamHandler()
        console.setFormatter(logging.Formatter(LOG_FORMAT))
        console._echosynth_console = True
        root.addHandler(console)


def code_version() -> str:
    """sha256 over the package's Python sources"""
    digest = hashlib.sha256()
    for path in sorted(SOURCE_DIR.glob('*.py')):
        digest.update(path.name.encode('utf-8'))
        digest.update(path.read_bytes())
    return digest.hexdigest()


class RunDirectory:
    """Context manager owning one run directory for the duration of a verb"""

    def __init__(self, path: Path, cfg: Dict[str, Any], verb: str):
        self.path = Path(path)
        self.cfg = cfg
        self.verb = verb
        self.inputs: Dict[str, Any] = {}
        self._handler: Optional[logging.Handler] = None

    @property
    def lock_path(self) -> Path:
        return self.path / 'run.lock'

    def __enter__(self) -> 'RunDirectory':
        self.path.mkdir(parents=True, exist_ok=True)
        try:
            with open(self.lock_path, 'x') as fh:
                fh.write(str(os.getpid()))
        except FileExistsError:
            raise RunLockError(f"Run directory {self.path} is locked ({self.lock_path} exists)") from None
        self._handler = logging.FileHandler(self.path / 'run.log')
        self._handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logging.getLogger().addHandler(self._handler)
        cfg_lib.save_snapshot(self.cfg, self.path / 'config.yaml')
        logger.info(f"{self.verb}: run directory {self.path}")
        return self

    def record_input(self, name: str, value: Any) -> None:
        self.inputs[name] = value
        self._write_inputs()

    def _write_inputs(self) -> None:
        payload = {'verb': self.verb, 'config_hash': cfg_lib.config_hash(self.cfg),
                   'code_version': code_version(), 'inputs': self.inputs}
        with open(self.path / 'inputs.json', 'w') as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)

    def __exit__(self, exc_type, exc, tb):
        self._write_inputs()
        if self._handler is not None:
            logging.getLogger().removeHandler(self._handler)
            self._handler.close()
        self.lock_path.unlink(missing_ok=True)
        return False


def _manifest(path: str, name: str, run: RunDirectory, verify: bool = True) -> DatasetManifest:
    manifest = read_manifest(path, verify=verify)
    run.record_input(name, {'path': str(path), 'content_hash': manifest.content_hash()})
    return manifest


def _cells(views: Sequence[str], phases: Sequence[str]) -> List[ViewPhase]:
    return [ViewPhase(v, p) for v in (views or VIEWS) for p in (phases or PHASES)]


def _regime_name(percent: int) -> str:
    return 'Real' if percent == 0 else f"Real+{percent}%"


def cmd_ingest(args, cfg, run: RunDirectory) -> None:
    size = (cfg['model']['image_size'],) * 2
    records, report = ingest(args.root, image_size=size, workers=cfg['data']['workers'])
    run.record_input('root', str(Path(args.root).resolve()))
    cells = {str(vp) for vp in _cells(cfg['data']['views'], cfg['data']['phases'])}
    records = [r for r in records if str(r.view_phase) in cells]
    train_records, val_records = split_patients(records, SplitSpec(cfg['data']['validation_patients']))
    train_manifest = write_records(train_records, run.path / 'train', split='train', seed=cfg['seed'])
    val_manifest = write_records(val_records, run.path / 'validation', split='validation', seed=cfg['seed'])
    with open(run.path / 'ingest_report.json', 'w') as fh:
        json.dump(report, fh, indent=2)
    logger.info(f"train {train_manifest.counts} / validation {val_manifest.counts}")


def cmd_train(args, cfg, run: RunDirectory) -> None:
    train_cfg = cfg_lib.train_config(cfg)
    data = _manifest(args.data, 'train_manifest', run)
    if args.views or args.phases:
        data = data.filter(args.views, args.phases)
        run.record_input('train_cells', sorted(set(data.frame['view'] + '-' + data.frame['phase'])))
    bundle, lexicon = None, None
    if args.resume:
        run.record_input('resume_from', str(args.resume))
    elif args.base:
        base, base_manifest = load_checkpoint(args.base)
        bundle = init_control_from_base(base)
        lexicon_path = Path(args.base) / 'lexicon.json'
        if lexicon_path.is_file():
            lexicon = ConceptLexicon.load(lexicon_path)
            check_lexicon_matches(lexicon, base_manifest.get('lexicon_hash'))
        run.record_input('base_checkpoint', {'path': str(args.base), 'step': base_manifest['step']})
    else:
        size, denoiser, codec, text = cfg_lib.model_specs(cfg)
        bundle = build_bundle(train_cfg.mode, size, denoiser, codec, text)
    result = train(train_cfg, data, bundle=bundle, out_dir=run.path, resume_from=args.resume,
                   lexicon=lexicon, show_progress=args.progress)
    if result.losses:
        plot_losses([r.loss for r in result.losses], run.path / 'losses.png')
    logger.info(f"training finished at step {result.final_step}; {len(result.checkpoints)} checkpoints")


def _label_pool(path: Optional[str], run: RunDirectory, size) -> Dict[str, List[PatientRecord]]:
    if path is None:
        raise ConfigurationError("text_seg synthesis needs --label-source (a real training manifest)")
    records = _manifest(path, 'label_source', run).load_records(size=size)
    pool: Dict[str, List[PatientRecord]] = {}
    for record in sorted(records, key=lambda r: r.key):
        if record.provenance == 'real' and record.label_map is not None:
            pool.setdefault(str(record.view_phase), []).append(record)
    return pool


def cmd_synthesize(args, cfg, run: RunDirectory) -> None:
    sample = cfg['sample']
    if args.count < 0:
        raise ParameterError(f"--count must be >= 0, got {args.count}")
    bundle, manifest = load_checkpoint(args.checkpoint)
    load_ema_weights(bundle, args.checkpoint)
    bundle.eval()
    schedule = NoiseSchedule.from_metadata(manifest['schedule'])
    run.record_input('checkpoint', {'path': str(args.checkpoint), 'step': manifest['step'],
                                    'manifest_hash': manifest.get('manifest_hash')})

    if bundle.mode == 'unconditional':
        cells = [ViewPhase(*c.split('-')) for c in manifest.get('cells') or []]
        if len(cells) != 1:
            raise ConfigurationError(f"unconditional checkpoint covers {len(cells)} view/phase cells, so its samples "
                                     f"carry no view/phase; train one model per cell (train --views --phases)")
        requested = _cells(args.views or sample['views'], args.phases or sample['phases'])
        if cells[0] not in requested:
            raise ConfigurationError(f"unconditional checkpoint only generates {cells[0]}")
    else:
        cells = _cells(args.views or sample['views'], args.phases or sample['phases'])

    lexicon = None
    style = manifest.get('prompt_style')
    if style == 'abstract':
        lexicon = ConceptLexicon.load(args.lexicon or Path(args.checkpoint) / 'lexicon.json')
        check_lexicon_matches(lexicon, manifest.get('lexicon_hash'))

    pool = _label_pool(args.label_source, run, bundle.image_size) if bundle.mode == 'text_seg' else {}
    rng = np.random.default_rng(cfg['seed'])
    cursor = {cell: 0 for cell in pool}

    def draw_label(cell: str) -> PatientRecord:
        candidates = pool.get(cell) or []
        if not candidates:
            raise MixError(f"label-map pool has no records for {cell}")
        if args.no_repeat or sample['no_repeat']:
            if cursor[cell] >= len(candidates):
                raise MixError(f"label-map pool for {cell} exhausted after {len(candidates)} draws")
            cursor[cell] += 1
            return candidates[cursor[cell] - 1]
        return candidates[int(rng.integers(len(candidates)))]

    plan = []
    for index in range(args.count):
        vp = cells[index % len(cells)]
        source = draw_label(str(vp)) if bundle.mode == 'text_seg' else None
        if bundle.mode == 'unconditional':
            prompt = Prompt(text='', style='unconditional', view_phase=vp)
        else:
            prompt = render_prompt(vp, style, lexicon)
        plan.append((index, vp, prompt, source))

    records = []
    batch_size = sample['batch_size']
    for start in range(0, len(plan), batch_size):
        chunk = plan[start:start + batch_size]
        labels = np.stack([s.label_map for _, _, _, s in chunk]) if bundle.mode == 'text_seg' else None
        cond = bundle.conditioning([p.text for _, _, p, _ in chunk], labels)
        shape = (len(chunk), *bundle.latent_shape)
        seed = cfg['seed'] + start
        if sample['sampler'] == 'ddpm':
            z = ddpm_sample(bundle, shape, schedule, seed, cond=cond, guidance_scale=sample['guidance_scale'],
                            device=bundle.device)
        elif sample['sampler'] == 'multistep':
            z = fast_sample(bundle, shape, sample['steps'], schedule, seed, cond=cond, order=sample['order'],
                            guidance_scale=sample['guidance_scale'], device=bundle.device)
        else:
            raise ConfigurationError(f"sample.sampler must be 'ddpm' or 'multistep', got '{sample['sampler']}'")
        with torch.no_grad():
            images = bundle.to_image_space(bundle.decode_latent(z)).cpu().numpy()[:, 0]
        for (index, vp, prompt, source), image in zip(chunk, images):
            records.append(PatientRecord(
                patient_id=source.patient_id if source is not None else 'gen', view=vp.view, phase=vp.phase,
                image=image.astype(np.float32),
                label_map=source.label_map.copy() if source is not None else None,
                provenance='synthetic', source_prompt=prompt, sample_index=index))
        logger.info(f"synthesized {len(records)}/{len(plan)}")

    extra = {'mode': bundle.mode, 'checkpoint_step': manifest['step'], 'sampler': sample['sampler'],
             'steps': sample['steps'] if sample['sampler'] == 'multistep' else schedule.T}
    synth = write_synthetic(records, run.path / 'synthetic', seed=cfg['seed'], extra=extra)
    logger.info(f"synthetic manifest: {synth.counts}")


def _cell_images(manifest: DatasetManifest) -> Dict[str, List[np.ndarray]]:
    grouped: Dict[str, List[np.ndarray]] = {cell: [] for cell in CELLS}
    for record in manifest.load_records():
        grouped.setdefault(str(record.view_phase), []).append(record.image)
    return grouped


def cmd_evaluate(args, cfg, run: RunDirectory) -> None:
    ev = cfg['evaluate']
    real = _manifest(args.real, 'real_manifest', run)
    synth = _manifest(args.synth, 'synthetic_manifest', run)
    if ev['extractor'] == 'random-projection':
        extractor = get_extractor('random-projection', dim=ev['feature_dim'], seed=cfg['seed'])
    elif ev['extractor'] == 'inception':
        extractor = get_extractor('inception', asset=cfg['assets']['inception'])
    else:
        extractor = get_extractor(ev['extractor'])
    cache = FeatureCache(Path(cfg['output_dir']) / 'feature_cache')

    def features(manifest: DatasetManifest, images: Dict[str, List[np.ndarray]]):
        out = {}
        for cell, imgs in images.items():
            if len(imgs) < 2:
                continue
            key = f"{manifest.content_hash()}-{cell}"
            out[cell] = cache.get_or_compute(key, extractor, lambda imgs=imgs, key=key: extract_features(
                imgs, extractor, batch_size=ev['batch_size'], source_hash=key, workers=ev['workers']))
        return out

    real_images, synth_images = _cell_images(real), _cell_images(synth)
    report = evaluate_generation(real_images, synth_images, features(real, real_images),
                                 features(synth, synth_images), kid_subset_size=ev['kid_subset_size'],
                                 kid_subsets=ev['kid_subsets'], seed=cfg['seed'])
    setting = args.setting or synth.extra.get('mode', 'this run')
    write_text(render_generation(report, setting), run.path / 'generation_report.txt')
    report.generation_frame().to_csv(run.path / 'generation.csv')
    with open(run.path / 'metrics.json', 'w') as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True, default=float)
    logger.info(f"mean FID {report.mean_fid:.4f}")


def _mixes(args, cfg, run: RunDirectory):
    real = _manifest(args.train, 'train_manifest', run)
    validation = _manifest(args.validation, 'validation_manifest', run)
    synth = _manifest(args.synth, 'synthetic_manifest', run) if args.synth else None
    for percent in args.percents:
        if percent and synth is None:
            raise ConfigurationError(f"Real+{percent}% needs --synth")
        mixed = mix_real_synthetic(real, synth, percent, seed=cfg['seed']) if percent else real
        yield percent, mixed, validation


def _write_comparison(results, run: RunDirectory, title: str, reference: str, curve_label: str) -> None:
    if len(results) < 2:
        logger.info("single regime; comparison table skipped")
        return
    comparison = compare_regimes(results)
    write_text(render_comparison(comparison, title, reference=reference), run.path / 'comparison.txt')
    comparison.table.to_csv(run.path / 'comparison.csv')
    plot_curves(comparison.curves, run.path / 'curves.png', ylabel=curve_label)


def cmd_downstream_seg(args, cfg, run: RunDirectory) -> None:
    results = []
    for percent, mixed, validation in _mixes(args, cfg, run):
        outcome = train_segmentation(cfg_lib.seg_config(cfg, percent), mixed, validation,
                                     show_progress=args.progress)
        regime = outcome.to_regime(_regime_name(percent), seed=cfg['seed'])
        save_regime(regime, run.path / 'results' / f"seg_{percent}.json")
        results.append(regime)
    _write_comparison(results, run, 'Segmentation on the held-out validation patients', 'segmentation',
                      'validation mean Dice')


def cmd_downstream_cls(args, cfg, run: RunDirectory) -> None:
    backbones = args.backbones or [cfg['probe']['backbone']]
    results = []
    mixes = list(_mixes(args, cfg, run))
    for backbone in backbones:
        for percent, mixed, validation in mixes:
            outcome = linear_probe(cfg_lib.probe_config(cfg, backbone, percent), mixed, validation)
            regime = outcome.to_regime(_regime_name(percent), seed=cfg['seed'])
            save_regime(regime, run.path / 'results' / f"cls_{backbone}_{percent}.json")
            results.append(regime)
    _write_comparison(results, run, 'ED/ES classification by linear probing', 'classification', 'accuracy')


def cmd_report(args, cfg, run: RunDirectory) -> None:
    paths = sorted(p for d in args.runs for p in (Path(d) / 'results').glob('*.json'))
    if not paths:
        raise ComparisonError(f"No regime results found under {list(args.runs)}")
    results = [load_regime(p) for p in paths]
    run.record_input('results', [str(p) for p in paths])
    comparison = compare_regimes(results)
    reference = args.reference if args.reference != 'none' else None
    write_text(render_comparison(comparison, args.title, reference=reference), run.path / 'report.txt')
    plot_curves(comparison.curves, run.path / 'curves.png')


COMMANDS = {
    'ingest': cmd_ingest,
    'train': cmd_train,
    'synthesize': cmd_synthesize,
    'evaluate': cmd_evaluate,
    'downstream-seg': cmd_downstream_seg,
    'downstream-cls': cmd_downstream_cls,
    'report': cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='YAML config file')
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help='override a config key, e.g. train.learning_rate=1e-4 (repeatable)')
    common.add_argument('--preset', choices=sorted(cfg_lib.PRESETS), help='model/train preset')
    common.add_argument('--run-dir', help='run directory (default: <output_dir>/<verb>)')
    common.add_argument('--log-level', default='INFO')
    common.add_argument('--progress', action='store_true', help='show progress bars')

    parser = argparse.ArgumentParser(prog='echosynth', description='Echocardiography diffusion synthesis experiments')
    sub = parser.add_subparsers(dest='verb', metavar='VERB')

    p = sub.add_parser('ingest', parents=[common], help='read a CAMUS-style tree and split by patient')
    p.add_argument('--root', required=True)

    p = sub.add_parser('train', parents=[common], help='train a generation model')
    p.add_argument('--data', required=True, help='training manifest')
    group = p.add_mutually_exclusive_group()
    group.add_argument('--resume', help='checkpoint directory to continue from')
    group.add_argument('--base', help='text checkpoint to initialise a text_seg control branch from')
    p.add_argument('--views', nargs='+', choices=VIEWS, help='train on these views only')
    p.add_argument('--phases', nargs='+', choices=PHASES, help='train on these phases only')

    p = sub.add_parser('synthesize', parents=[common], help='sample a synthetic dataset from a checkpoint')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--count', type=int, required=True)
    p.add_argument('--views', nargs='+', choices=VIEWS)
    p.add_argument('--phases', nargs='+', choices=PHASES)
    p.add_argument('--label-source', help='real training manifest supplying label maps (text_seg)')
    p.add_argument('--no-repeat', action='store_true', help='never reuse a label map')
    p.add_argument('--lexicon', help='lexicon file for abstract prompts (default: next to the checkpoint)')

    p = sub.add_parser('evaluate', parents=[common], help='FID/KID per view-phase cell')
    p.add_argument('--real', required=True)
    p.add_argument('--synth', required=True)
    p.add_argument('--setting', help='row label in the report')

    for verb, helptext in (('downstream-seg', 'segmentation on Real+k%% mixes'),
                           ('downstream-cls', 'ED/ES linear probes on Real+k%% mixes')):
        p = sub.add_parser(verb, parents=[common], help=helptext)
        p.add_argument('--train', required=True, help='real training manifest')
        p.add_argument('--validation', required=True)
        p.add_argument('--synth', help='synthetic manifest')
        p.add_argument('--percents', type=int, nargs='+', default=[0, 50, 100, 200])
        if verb == 'downstream-cls':
            p.add_argument('--backbones', nargs='+')

    p = sub.add_parser('report', parents=[common], help='compare regime results from run directories')
    p.add_argument('runs', nargs='*')
    p.add_argument('--title', default='Regime comparison')
    p.add_argument('--reference', choices=('segmentation', 'classification', 'none'), default='none')
    return parser


def _check_verb(argv: Sequence[str]) -> None:
    first = next((a for a in argv if not a.startswith('-')), None)
    if first is not None and first not in VERBS:
        match = process.extractOne(first, VERBS)
        hint = f"; did you mean '{match[0]}'?" if match and match[1] >= 60 else ''
        raise ConfigurationError(f"Unknown verb '{first}'{hint}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    setup_logging()
    try:
        _check_verb(argv)
        args = build_parser().parse_args(argv)
        if args.verb is None:
            build_parser().print_help()
            return 2
        logging.getLogger().setLevel(args.log_level.upper())
        cfg = cfg_lib.load_config(args.config, args.overrides, preset=args.preset)
        run_dir = Path(args.run_dir) if args.run_dir else Path(cfg['output_dir']) / args.verb
        with RunDirectory(run_dir, cfg, args.verb) as run:
            COMMANDS[args.verb](args, cfg, run)
        return 0
    except EchoSynthError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected failure: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
