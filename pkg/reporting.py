"""Plain-text result tables, published reference lines and convergence plots."""
import logging
import math
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

logger = logging.getLogger(__name__)

CELLS = ('2CH-ED', '2CH-ES', '4CH-ED', '4CH-ES')
FLAG_MARKS = {'best': '*', 'second': '+'}

# Published full-scale numbers, shown as reference lines only.
REFERENCE_GENERATION = {
    'FID': {
        'Unconditional': (4.7712, 4.5490, 5.0679, 4.1077),
        'Text-Conditioned': (1.4499, 2.3445, 1.7494, 2.8399),
        'Text+Segmentation': (1.3957, 1.6251, 1.6080, 1.3322),
        'Published baseline': (1.8188, 1.7528, 4.4704, 4.4508),
    },
    'Mean KID': {
        'Unconditional': (1.4619, 2.5799, 2.5452, 2.0171),
        'Text-Conditioned': (1.2570, 2.4584, 1.5466, 2.6263),
        'Text+Segmentation': (1.4022, 1.6186, 1.6246, 1.3322),
        'Published baseline': (2.8221, 2.9019, 5.3975, 5.4414),
    },
}
REFERENCE_MEAN_FID = {'Text+Segmentation': 1.4902}

# columns: Dice mean, LV-endo, LV-epi, LA | HD mean, ... | ASD mean, ...
REFERENCE_SEGMENTATION = {
    'Real+200%': (0.8685, 0.8931, 0.9200, 0.7924, 11.57, 8.91, 10.18, 15.61, 5.38, 3.61, 3.80, 6.96),
    'Real+100%': (0.8759, 0.8995, 0.9244, 0.8038, 12.65, 9.55, 10.54, 17.85, 5.66, 3.87, 3.73, 7.58),
    'Real+50%': (0.8721, 0.8950, 0.9248, 0.7966, 11.93, 9.08, 9.63, 17.09, 5.46, 3.64, 3.63, 7.30),
    'Real': (0.8700, 0.8902, 0.9206, 0.7991, 15.02, 9.48, 10.96, 24.62, 6.15, 3.79, 3.97, 8.33),
    'Published baseline': (0.8576, 0.8661, 0.9006, 0.8061, 13.83, 12.87, 11.76, 16.84, 5.52, 4.65, 4.61, 6.43),
}

# ACC, PR, RC, F1 with Real+100% mixes
REFERENCE_CLASSIFICATION = {
    'ResNet18 (Real data only)': (0.8400, 0.8400, 0.8400, 0.8399),
    'ResNet18 (Unconditional)': (0.8350, 0.8366, 0.8350, 0.8347),
    'ResNet18 (Text-Conditioned)': (0.8700, 0.8773, 0.8700, 0.8693),
    'ResNet18 (Published baseline)': (0.8300, 0.8311, 0.8300, 0.8298),
    'ResNet18 (Text+Segmentation)': (0.8650, 0.8659, 0.8650, 0.8640),
    'VGG16 (Real data only)': (0.7450, 0.7471, 0.7450, 0.7445),
    'VGG16 (Unconditional)': (0.7500, 0.7549, 0.7500, 0.7487),
    'VGG16 (Text-Conditioned)': (0.7850, 0.7850, 0.7850, 0.7849),
    'VGG16 (Published baseline)': (0.7600, 0.7687, 0.7600, 0.7580),
    'VGG16 (Text+Segmentation)': (0.7750, 0.7763, 0.7750, 0.7747),
}


def _cell(value, digits: int) -> str:
    if value is None:
        return 'n/a'
    if isinstance(value, bool):
        return 'yes' if value else 'no'
    if isinstance(value, float):
        return 'n/a' if math.isnan(value) else f"{value:.{digits}f}"
    return str(value)


def format_table(frame: pd.DataFrame, digits: int = 4, flags: Optional[pd.DataFrame] = None,
                 index_label: Optional[str] = None) -> str:
    """Fixed-width text rendering; identical frames always give identical bytes"""
    header = [index_label if index_label is not None else (frame.index.name or '')] + [str(c) for c in frame.columns]
    rows = []
    for label, row in frame.iterrows():
        cells = [str(label)]
        for column in frame.columns:
            text = _cell(row[column], digits)
            if flags is not None:
                text += FLAG_MARKS.get(flags.at[label, column], '')
            cells.append(text)
        rows.append(cells)
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = ['  '.join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(header, widths))).rstrip()]
    lines.append('  '.join('-' * w for w in widths))
    for cells in rows:
        lines.append('  '.join(c.ljust(w) if i == 0 else c.rjust(w)
                               for i, (c, w) in enumerate(zip(cells, widths))).rstrip())
    return '\n'.join(lines) + '\n'


def _reference_frame(table: Mapping[str, Sequence[float]], columns: Sequence[str]) -> pd.DataFrame:
    return pd.DataFrame.from_dict({k: list(v) for k, v in table.items()}, orient='index', columns=list(columns))


def reference_footer(kind: str) -> str:
    """Published full-scale numbers for 'generation', 'segmentation' or 'classification'"""
    lines = ['', 'Reference values (published, full-scale training; not desk-scale targets):']
    if kind == 'generation':
        for metric, table in REFERENCE_GENERATION.items():
            lines.append(f"{metric}:")
            lines.append(format_table(_reference_frame(table, CELLS), index_label='setting').rstrip())
        lines.extend(f"mean FID {name}: {value:.4f}" for name, value in REFERENCE_MEAN_FID.items())
    elif kind == 'segmentation':
        columns = [f"{m} {s}" for m in ('Dice', 'HD', 'ASD') for s in ('mean', 'LV-endo', 'LV-epi', 'LA')]
        lines.append(format_table(_reference_frame(REFERENCE_SEGMENTATION, columns), digits=4,
                                  index_label='data').rstrip())
    elif kind == 'classification':
        lines.append(format_table(_reference_frame(REFERENCE_CLASSIFICATION, ('ACC', 'PR', 'RC', 'F1')),
                                  index_label='method').rstrip())
    else:
        raise ValueError(f"unknown reference kind '{kind}'")
    return '\n'.join(lines) + '\n'


def render_generation(report, setting: str = 'this run') -> str:
    """FID / mean KID per view-phase cell for one setting"""
    fid_row = {cell: report.generation.get(cell, {}).get('fid', float('nan')) for cell in CELLS}
    kid_row = {cell: report.generation.get(cell, {}).get('kid_mean', float('nan')) for cell in CELLS}
    frame = pd.DataFrame([fid_row, kid_row], index=[f"FID ({setting})", f"Mean KID ({setting})"])
    text = format_table(frame, index_label='metric')
    text += f"mean FID: {_cell(report.mean_fid, 4)}\n"
    for note in report.notes:
        text += f"note: {note}\n"
    return text + reference_footer('generation')


def render_comparison(comparison, title: str, reference: Optional[str] = None, digits: int = 4) -> str:
    text = f"{title}\n\n"
    text += format_table(comparison.table, digits=digits, flags=comparison.flags, index_label='regime')
    text += "\n(* best, + second best)\n\nDeltas against the first regime:\n"
    text += format_table(comparison.deltas, digits=digits, index_label='regime')
    if reference:
        text += reference_footer(reference)
    return text


def plot_curves(curves: Dict[str, List[float]], path: Union[str, Path], ylabel: str = 'validation mean Dice',
                xlabel: str = 'epoch') -> Optional[Path]:
    """One line per regime; returns None when there is nothing to draw"""
    if not curves:
        return None
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, values in sorted(curves.items()):
        ax.plot(range(1, len(values) + 1), values, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize='small')
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    logger.info(f"Wrote plot {path}")
    return path


def plot_losses(losses: Sequence[float], path: Union[str, Path], window: int = 50) -> Path:
    series = pd.Series(list(losses), dtype=float)
    smoothed = series.rolling(window=max(1, min(window, len(series))), min_periods=1).mean()
    return plot_curves({'loss': smoothed.tolist()}, path, ylabel='loss', xlabel='iteration')


def write_text(text: str, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path
