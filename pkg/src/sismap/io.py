"""CSV and JSON readers/writers for the file formats used by the CLI.

Floats are written with ``repr`` so that a rerun with the same seed gives
byte-identical files.
"""

import csv
import gzip
import hashlib
import json
import os

import numpy as np

from .epimodel import OutbreakPanel
from .errors import DataIOError, InvalidInputError
from .spatial import SpatialUnits

__all__ = [
    "read_locations",
    "read_location_table",
    "write_locations",
    "read_panel",
    "write_panel",
    "read_beta",
    "write_beta",
    "write_rows",
    "read_rows",
    "write_json",
    "read_json",
    "file_digest",
    "SCHEMAS",
    "validate_csv",
]

SCHEMAS = {
    "locations": ("id", "x", "y"),
    "panel": ("id", "t", "y"),
    "beta_true": ("id", "beta_true"),
    "posterior_summary": ("id", "beta_mean", "beta_sd", "beta_q025", "beta_q975"),
    "hyper_summary": ("param", "mean", "sd", "q025", "q975", "ess", "rhat"),
    "correlogram": ("bin_center_km", "estimate", "env_lo", "env_hi", "n_pairs"),
    "losses": ("id", "loss"),
    "phi_residuals": ("phi", "residual", "amplitude"),
    "benchmark": ("scenario", "model", "replicate", "mspe", "spearman_model",
                  "spearman_incidence", "oos_ce", "seconds"),
    "table1": ("scenario", "model", "median_mspe", "median_spearman_model",
               "median_spearman_incidence", "median_oos_ce"),
}


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def _open_read(path):
    if not os.path.exists(path):
        raise DataIOError(f"input file not found: {path}", path)
    if str(path).endswith(".gz"):
        return gzip.open(path, "rt", encoding="utf-8", newline="")
    return open(path, encoding="utf-8", newline="")


def _open_write(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    if str(path).endswith(".gz"):
        # mtime=0 keeps the gzip header reproducible
        raw = open(path, "wb")
        return gzip.GzipFile(fileobj=raw, mode="wb", mtime=0), raw
    return open(path, "w", encoding="utf-8", newline=""), None


def write_rows(path, header, rows):
    fh, raw = _open_write(path)
    try:
        if raw is not None:
            import io as _io

            text = _io.TextIOWrapper(fh, encoding="utf-8", newline="")
            w = csv.writer(text, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(v) for v in r])
            text.flush()
            text.detach()
        else:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(v) for v in r])
    finally:
        fh.close()
        if raw is not None:
            raw.close()


def read_rows(path, expected=None):
    with _open_read(path) as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InvalidInputError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if expected is not None and tuple(header[: len(expected)]) != tuple(expected):
            raise InvalidInputError(f"{path}: expected header {','.join(expected)}, got {','.join(header)}")
        return header, [row for row in reader if row]


def validate_csv(path, schema):
    """Parse a CSV against one of ``SCHEMAS``; returns the row count."""
    cols = SCHEMAS[schema]
    header, rows = read_rows(path, cols)
    for k, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise InvalidInputError(f"{path}:{k}: wrong number of fields")
    return len(rows)


def read_location_table(path):
    """Ids and coordinates without the two-unit minimum of ``SpatialUnits``."""
    _, rows = read_rows(path, SCHEMAS["locations"])
    try:
        ids = tuple(r[0].strip() for r in rows)
        xy = np.array([[float(r[1]), float(r[2])] for r in rows]).reshape(-1, 2)
    except (ValueError, IndexError) as err:
        raise InvalidInputError(f"{path}: malformed row ({err})") from None
    if not ids:
        raise InvalidInputError(f"{path}: no locations")
    return ids, xy


def read_locations(path):
    return SpatialUnits(*read_location_table(path))


def write_locations(path, units):
    write_rows(path, SCHEMAS["locations"],
               ((i, x, y) for i, (x, y) in zip(units.ids, units.coords)))


def read_panel(path, units=None):
    """Long-format panel; rows follow ``units`` order when given."""
    _, rows = read_rows(path, SCHEMAS["panel"])
    cells = {}
    ids_seen = []
    ts = set()
    for k, r in enumerate(rows, start=2):
        try:
            uid, t, y = r[0].strip(), int(r[1]), int(r[2])
        except (ValueError, IndexError):
            raise InvalidInputError(f"{path}:{k}: malformed row") from None
        if y not in (0, 1):
            raise InvalidInputError(f"{path}:{k}: y must be 0 or 1")
        if (uid, t) in cells:
            raise InvalidInputError(f"{path}:{k}: duplicate cell ({uid}, {t})")
        cells[(uid, t)] = y
        if not ids_seen or ids_seen[-1] != uid:
            ids_seen.append(uid)
        ts.add(t)
    T = max(ts) if ts else 0
    if sorted(ts) != list(range(1, T + 1)):
        raise InvalidInputError(f"{path}: time steps must be 1..T without gaps")
    ids = list(dict.fromkeys(ids_seen))
    if units is not None:
        if set(ids) != set(units.ids):
            raise InvalidInputError(f"{path}: unit ids do not match the locations file")
        ids = list(units.ids)
    y = np.zeros((len(ids), T), dtype=np.int8)
    for i, uid in enumerate(ids):
        for t in range(1, T + 1):
            try:
                y[i, t - 1] = cells[(uid, t)]
            except KeyError:
                raise InvalidInputError(f"{path}: missing cell ({uid}, {t})") from None
    return OutbreakPanel(y, ids)


def write_panel(path, panel):
    def rows():
        for i, uid in enumerate(panel.ids):
            for t in range(panel.T):
                yield uid, t + 1, int(panel.y[i, t])

    write_rows(path, SCHEMAS["panel"], rows())


def read_beta(path, units=None):
    _, rows = read_rows(path, SCHEMAS["beta_true"])
    vals = {r[0].strip(): float(r[1]) for r in rows}
    if units is None:
        return list(vals), np.array(list(vals.values()))
    try:
        return list(units.ids), np.array([vals[u] for u in units.ids])
    except KeyError as err:
        raise InvalidInputError(f"{path}: no value for unit {err.args[0]}") from None


def write_beta(path, ids, beta):
    write_rows(path, SCHEMAS["beta_true"], zip(ids, np.asarray(beta, float)))


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return [_jsonable(v) for v in o.tolist()]
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    return o


def write_json(path, obj):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    if not os.path.exists(path):
        raise DataIOError(f"input file not found: {path}", path)
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as err:
            raise InvalidInputError(f"{path}: invalid JSON ({err})") from None


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
