"""Per-image standardisation: reading, intensity normalisation, label remapping and resizing."""
import logging
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from PIL import Image

from errors import DataIntegrityError

logger = logging.getLogger(__name__)

CLASS_TABLE = {0: 'background', 1: 'LV-endo', 2: 'LV-epi', 3: 'LA'}
# raw label encodings seen in CAMUS exports -> canonical class ids
LABEL_ENCODINGS = (
    {0: 0, 1: 1, 2: 2, 3: 3},
    {0: 0, 85: 1, 170: 2, 255: 3},
)
VOLUME_SUFFIXES = ('.mhd', '.nii', '.nii.gz')

PathLike = Union[str, Path]


def _is_volume(path: Path) -> bool:
    return any(path.name.endswith(suffix) for suffix in VOLUME_SUFFIXES)


def read_array(path: PathLike) -> Tuple[np.ndarray, int]:
    """Read a 2D image file; returns (array, bit depth)."""
    path = Path(path)
    if _is_volume(path):
        import SimpleITK as sitk
        array = np.squeeze(sitk.GetArrayFromImage(sitk.ReadImage(str(path))))
        bit_depth = 16 if array.dtype.itemsize > 1 else 8
        return array, bit_depth
    with Image.open(path) as img:
        if img.mode in ('I;16', 'I;16B', 'I'):
            return np.asarray(img).astype(np.uint16), 16
        return np.asarray(img.convert('L')), 8


def normalize_image(array: np.ndarray, bit_depth: int = 8) -> np.ndarray:
    """Scale raw intensities into float32 [0, 1]."""
    array = np.asarray(array)
    if array.ndim == 3:
        array = array.mean(axis=-1)
    if np.issubdtype(array.dtype, np.integer):
        scaled = array.astype(np.float64) / float(2 ** bit_depth - 1)
    else:
        scaled = array.astype(np.float64)
        peak = float(np.nanmax(scaled)) if scaled.size else 0.0
        if peak > 1.0:
            scaled = scaled / peak
    if not np.isfinite(scaled).all():
        raise DataIntegrityError("image contains non-finite values")
    return np.clip(scaled, 0.0, 1.0).astype(np.float32)


def remap_labels(mask: np.ndarray) -> np.ndarray:
    """Map a raw label encoding onto the canonical 0..3 class ids."""
    mask = np.asarray(mask)
    if mask.ndim == 3:
        mask = mask[..., 0]
    present = set(np.unique(mask).tolist())
    for encoding in LABEL_ENCODINGS:
        if present <= set(encoding):
            lookup = np.zeros(max(encoding) + 1, dtype=np.uint8)
            for raw, canonical in encoding.items():
                lookup[raw] = canonical
            return lookup[mask.astype(np.int64)]
    raise DataIntegrityError(f"label values {sorted(present)} match no known encoding")


def resize_image(image: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Area-average resize of a [0, 1] float image to (H, W)."""
    if image.shape == tuple(size):
        return image.astype(np.float32)
    resized = Image.fromarray(image.astype(np.float32)).resize((size[1], size[0]), Image.BOX)
    return np.asarray(resized, dtype=np.float32)


def resize_mask(mask: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of an integer mask to (H, W)."""
    if mask.shape == tuple(size):
        return mask.astype(np.uint8)
    resized = Image.fromarray(mask.astype(np.uint8)).resize((size[1], size[0]), Image.NEAREST)
    return np.asarray(resized, dtype=np.uint8)


def load_image(path: PathLike, size: Tuple[int, int] = None) -> Tuple[np.ndarray, int]:
    """Read, normalise and optionally resize an image."""
    raw, bit_depth = read_array(path)
    image = normalize_image(raw, bit_depth)
    if size is not None:
        image = resize_image(image, size)
    return image, bit_depth


def load_label(path: PathLike, size: Tuple[int, int] = None) -> np.ndarray:
    """Read, remap and optionally resize a label map."""
    raw, _ = read_array(path)
    mask = remap_labels(raw)
    if size is not None:
        mask = resize_mask(mask, size)
    return mask


def save_image(path: PathLike, image: np.ndarray, bit_depth: int = 16) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    peak = 2 ** bit_depth - 1
    data = np.rint(np.clip(image, 0.0, 1.0) * peak).astype(np.uint16 if bit_depth == 16 else np.uint8)
    Image.fromarray(data).save(path)
    return path


def save_label(path: PathLike, mask: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(mask, dtype=np.uint8)).save(path)
    return path
