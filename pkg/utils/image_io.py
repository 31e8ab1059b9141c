#image_io.py
"""
Image reading and writing through Pillow

Arrays are float64 in [0, 1]: (H, W) for grayscale, (H, W, 3) for colour.
"""

import logging
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from utils.errors import ConfigurationError, InputError

logger = logging.getLogger(__name__)

SUPPORTED_SUFFIXES = {".png": "PNG", ".ppm": "PPM", ".pgm": "PPM", ".pnm": "PPM"}


def read_image(path: Union[str, Path]) -> np.ndarray:
    """
    Load an 8- or 16-bit PNG / PPM / PGM as normalised floats

    Args:
        path: Image file

    Returns:
        (H, W) or (H, W, 3) float64 array in [0, 1]

    Raises:
        InputError: Missing or undecodable file
    """
    path = Path(path)
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode.startswith("I;16") or mode == "I":
                values = np.asarray(img, dtype=np.float64) / 65535.0
            elif mode == "F":
                values = np.asarray(img, dtype=np.float64)
            elif mode in ("L", "1"):
                values = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
            else:
                values = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError) as e:
        raise InputError(f"Could not read image {path}: {e}") from e
    logger.debug(f"Read {path} ({mode}, {values.shape})")
    return np.clip(values, 0.0, 1.0)


def write_image(path: Union[str, Path], array: np.ndarray, bit_depth: int = 8) -> Path:
    """
    Save a [0, 1] array; 16-bit output is for single-channel planes only

    Raises:
        ConfigurationError: Unsupported suffix, bit depth or channel layout
        InputError: The file could not be written
    """
    path = Path(path)
    fmt = SUPPORTED_SUFFIXES.get(path.suffix.lower())
    if fmt is None:
        raise ConfigurationError(f"Unsupported image suffix '{path.suffix}'; use {sorted(SUPPORTED_SUFFIXES)}")
    if bit_depth not in (8, 16):
        raise ConfigurationError(f"Bit depth must be 8 or 16, got {bit_depth}")

    values = np.clip(np.asarray(array, dtype=np.float64), 0.0, 1.0)
    if values.ndim == 3 and values.shape[2] == 1:
        values = values[:, :, 0]
    if values.ndim == 3 and values.shape[2] != 3:
        raise ConfigurationError(f"Expected 1 or 3 channels, got shape {values.shape}")
    if values.ndim == 3 and (bit_depth == 16 or path.suffix.lower() == ".pgm"):
        raise ConfigurationError(f"Colour images are written as 8-bit PNG or PPM, not {path.name} at {bit_depth} bits")

    if bit_depth == 16:
        img = Image.fromarray(np.round(values * 65535.0).astype(np.uint16))
    else:
        img = Image.fromarray(np.round(values * 255.0).astype(np.uint8))

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        img.save(path, format=fmt)
    except OSError as e:
        raise InputError(f"Could not write image {path}: {e}") from e
    return path
