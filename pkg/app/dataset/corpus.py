"""Binary image corpus reader/writer and the synthetic corpus generator

Record layout (bit-exact): 1 label byte followed by the pixel planes
(all red bytes, then green, then blue; each plane row-major). A corpus
directory holds five train files and one test file.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from app.errors import CorruptRecordError, MalformedCorpusError

logger = logging.getLogger(__name__)

TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILES = ["test_batch.bin"]
DEFAULT_IMAGE_SIZE = 32
DEFAULT_NUM_CLASSES = 10


def record_length(image_size: int = DEFAULT_IMAGE_SIZE) -> int:
    return 1 + 3 * image_size * image_size


def read_batch_file(
    path: Union[str, Path],
    num_classes: int = DEFAULT_NUM_CLASSES,
    image_size: int = DEFAULT_IMAGE_SIZE,
) -> Tuple[np.ndarray, np.ndarray]:
    """Read one batch file

    Returns:
        images N×H×W×3 uint8, labels N int64
    """
    path = Path(path)
    if not path.is_file():
        raise MalformedCorpusError(f"missing corpus file: {path}")

    raw = np.fromfile(path, dtype=np.uint8)
    length = record_length(image_size)
    if raw.size % length != 0:
        raise MalformedCorpusError(
            f"{path.name}: {raw.size} bytes is not a multiple of the {length}-byte record"
        )

    rows = raw.reshape(-1, length)
    labels = rows[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise CorruptRecordError(
            f"{path.name}: record {int(bad[0])} has label {int(labels[bad[0]])} >= {num_classes}"
        )

    images = rows[:, 1:].reshape(-1, 3, image_size, image_size).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def write_batch_file(path: Union[str, Path], images: np.ndarray, labels: np.ndarray) -> None:
    """Write records in the binary layout (images N×H×W×3 uint8)"""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels)
    if images.ndim != 4 or images.shape[-1] != 3 or len(images) != len(labels):
        raise ValueError(f"expected N×H×W×3 images matching labels, got {images.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise ValueError("labels must fit in one byte")

    planes = images.transpose(0, 3, 1, 2).reshape(len(images), -1)
    rows = np.concatenate([labels.astype(np.uint8)[:, None], planes], axis=1)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    rows.tofile(path)


@dataclass
class CorpusFiles:
    """Paths written by write_corpus"""
    root: Path
    train: List[Path]
    test: List[Path]


def write_corpus(
    root: Union[str, Path],
    train_images: np.ndarray,
    train_labels: np.ndarray,
    test_images: np.ndarray,
    test_labels: np.ndarray,
) -> CorpusFiles:
    """Split the train split over five files and write the test file"""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)

    train_paths = []
    chunks = np.array_split(np.arange(len(train_labels)), len(TRAIN_FILES))
    for name, chunk in zip(TRAIN_FILES, chunks):
        path = root / name
        write_batch_file(path, train_images[chunk], train_labels[chunk])
        train_paths.append(path)

    test_path = root / TEST_FILES[0]
    write_batch_file(test_path, test_images, test_labels)

    logger.info(f"Corpus written to {root}: {len(train_labels)} train / {len(test_labels)} test")
    return CorpusFiles(root=root, train=train_paths, test=[test_path])


def _class_templates(num_classes: int, image_size: int) -> np.ndarray:
    """One colour + oriented-stripe template per class, values roughly in [-1, 1]"""
    yy, xx = np.mgrid[0:image_size, 0:image_size] / image_size
    templates = np.empty((num_classes, image_size, image_size, 3))
    for c in range(num_classes):
        angle = np.pi * c / num_classes
        stripes = np.sin(2 * np.pi * 3 * (xx * np.cos(angle) + yy * np.sin(angle)))
        hue = c / num_classes
        colour = np.cos(2 * np.pi * (hue + np.array([0.0, 1 / 3, 2 / 3])))
        templates[c] = 0.6 * colour[None, None, :] + 0.4 * stripes[..., None]
    return templates


def _render(
    rng: np.random.Generator,
    templates: np.ndarray,
    labels: np.ndarray,
    signal: float,
    noise: float,
    max_shift: int,
) -> np.ndarray:
    images = np.empty((len(labels),) + templates.shape[1:], dtype=np.uint8)
    for i, label in enumerate(labels):
        pattern = templates[label]
        if max_shift:
            dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
            pattern = np.roll(pattern, (int(dy), int(dx)), axis=(0, 1))
        img = 0.5 + 0.4 * signal * pattern + rng.normal(0.0, noise, size=pattern.shape)
        images[i] = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return images


def synthesize_corpus(
    root: Union[str, Path],
    num_classes: int = DEFAULT_NUM_CLASSES,
    train_per_class: int = 200,
    test_per_class: int = 50,
    image_size: int = DEFAULT_IMAGE_SIZE,
    signal: float = 1.0,
    noise: float = 0.12,
    seed: int = 0,
) -> CorpusFiles:
    """Generate a class-balanced toy corpus in the binary layout

    signal=0 gives label-independent noise images (chance-level oracle).
    """
    if num_classes < 1 or num_classes > 256:
        raise ValueError("num_classes must be in [1, 256]")

    rng = np.random.default_rng(seed)
    templates = _class_templates(num_classes, image_size)

    train_labels = rng.permutation(np.repeat(np.arange(num_classes), train_per_class))
    test_labels = rng.permutation(np.repeat(np.arange(num_classes), test_per_class))
    max_shift = max(image_size // 8, 0)

    train_images = _render(rng, templates, train_labels, signal, noise, max_shift)
    test_images = _render(rng, templates, test_labels, signal, noise, max_shift)

    return write_corpus(root, train_images, train_labels, test_images, test_labels)
