"""EVC-Net brain extraction: network, dense CRF and post-processing.

Volumes are numpy arrays indexed [x, y, z]; probability maps are
[label, x, y, z]. Pipeline settings use the same dotted keys as the CLI
config files ("crf.w_app", "grid.pad", ...), with Python values.
"""

from . import _core
from ._core import (
    ConfigError,
    DataError,
    EvcsegError,
    balanced_ahd,
    cleanup,
    dice,
    edt,
    jaccard,
    make_phantom,
    normalize_intensity,
    read_mask,
    read_nifti,
    synth,
    write_mask,
    write_nifti,
)

__all__ = [
    "ConfigError",
    "DataError",
    "EvcsegError",
    "balanced_ahd",
    "cleanup",
    "dice",
    "edt",
    "evaluate",
    "extract",
    "jaccard",
    "make_phantom",
    "normalize_intensity",
    "read_mask",
    "read_nifti",
    "refine",
    "synth",
    "train",
    "write_mask",
    "write_nifti",
]


def _setting(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_setting(v) for v in value)
    return str(value)


def _settings(settings):
    return {k: _setting(v) for k, v in (settings or {}).items()}


def refine(probs, image, affine=None, **crf):
    """Dense CRF refinement. Keyword arguments are crf.* keys without the
    prefix, e.g. refine(p, img, w_app=5, iterations=3, backend="brute").
    Returns (labels, free_energy_trace)."""
    return _core.refine(probs, image, affine, _settings({"crf." + k: v for k, v in crf.items()}))


def train(data_dir, checkpoint, log, settings=None):
    return _core.train(str(data_dir), str(checkpoint), str(log), _settings(settings))


def extract(input, output, checkpoint, settings=None):
    _core.extract(str(input), str(output), str(checkpoint), _settings(settings))


def evaluate(pred_dir, truth_dir, mm=False):
    return _core.evaluate(str(pred_dir), str(truth_dir), mm)
