"""File formats: binary PGM images, CSV arrays and tables, INI run configs."""

import configparser
import csv
import os
from pathlib import Path

import numpy as np


def _require(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"input file not found: {path}")
    return path


def _format(x):
    # repr round-trips doubles exactly and is platform independent
    return repr(float(x))


def write_pgm(path, image, lo=None, hi=None):
    """Write a 2-D array as binary P5, linearly mapped from [lo, hi] to 0..255."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {image.shape}")
    lo = float(np.min(image)) if lo is None else float(lo)
    hi = float(np.max(image)) if hi is None else float(hi)
    if hi > lo:
        scaled = np.clip((image - lo) / (hi - lo), 0.0, 1.0) * 255.0
    else:
        scaled = np.zeros_like(image)
    pixels = np.rint(scaled).astype(np.uint8)
    rows, cols = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def write_label_pgm(path, labels, K):
    """Labels 0..K-1 spread evenly over 0..255."""
    write_pgm(path, np.asarray(labels, dtype=float), lo=0.0, hi=max(K - 1, 1))


def read_pgm(path):
    """Read a binary (P5) or ASCII (P2) graymap as a float array of raw levels."""
    data = _require(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    magic, cols, rows, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic == "P5":
        dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
        raw = np.frombuffer(data[pos + 1 :], dtype=dtype, count=rows * cols)
    elif magic == "P2":
        raw = np.array(data[pos:].split(), dtype=float)[: rows * cols]
    else:
        raise ValueError(f"{path}: not a PGM file (magic {magic!r})")
    return raw.reshape(rows, cols).astype(float)


def write_array_csv(path, array, seed=None):
    """Raw doubles, one grid row per line; 1-D arrays become one column.

    A leading ``# seed=...`` comment records the run seed when given.
    """
    array = np.asarray(array)
    if array.ndim == 1:
        array = array[:, None]
    elif array.ndim > 2:
        array = array.reshape(array.shape[0], -1)
    integer = np.issubdtype(array.dtype, np.integer)
    with open(path, "w", newline="") as fh:
        if seed is not None:
            fh.write(f"# seed={seed}\n")
        for row in array:
            fh.write(",".join(str(int(x)) if integer else _format(x) for x in row) + "\n")


def read_array_csv(path):
    """Inverse of write_array_csv; returns a 2-D float array."""
    return np.atleast_2d(np.loadtxt(_require(path), delimiter=",", comments="#", dtype=float))


def read_volume(path, shape=None):
    """Load an image from CSV or PGM, optionally reshaped to ``shape``."""
    path = _require(path)
    if path.suffix.lower() in (".pgm", ".pnm"):
        image = read_pgm(path)
    else:
        image = read_array_csv(path)
    if shape is not None:
        shape = tuple(shape)
        if image.size != int(np.prod(shape)):
            raise ValueError(f"{path}: {image.size} values do not fit grid {shape}")
        image = image.reshape(shape)
    return image


def write_table_csv(path, header, rows, seed=None):
    with open(path, "w", newline="") as fh:
        if seed is not None:
            fh.write(f"# seed={seed}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format(x) if isinstance(x, (float, np.floating)) else x for x in row])


def read_table_csv(path):
    with open(_require(path), newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


def parse_floats(text):
    return [float(x) for x in str(text).replace(";", ",").split(",") if x.strip()]


def parse_ints(text):
    return [int(x) for x in str(text).replace(";", ",").split(",") if x.strip()]


def load_config(path):
    """Read an INI run config; keys are case sensitive."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    with open(_require(path)) as fh:
        parser.read_file(fh)
    return parser


def save_config(path, parser):
    with open(path, "w") as fh:
        parser.write(fh)


def resolve_path(value, base):
    """Relative paths in a config are taken relative to the config file."""
    p = Path(os.path.expanduser(value))
    return p if p.is_absolute() else Path(base) / p
