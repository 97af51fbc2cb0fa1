"""Delimited-text tables with exact float round trips and atomic writes.

Floats are written with ``repr`` (shortest string that parses back to the
same double), so re-reading a table reproduces the in-memory values bit for
bit. Every file is written to a temporary sibling and renamed into place.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile

import numpy as np

from .ensemble import PhaseGrid
from .errors import ParseError

PHASE_GRID_COLUMNS = ("t", "mw", "sigma", "mdstar", "bistable")


def format_value(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def atomic_write_text(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_table(path, columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([format_value(v) for v in row])
    atomic_write_text(path, buf.getvalue())


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_table(path, required=()):
    """Return ``(header, rows)``; ``rows`` are lists of strings.

    Row numbers in errors count data rows from 1.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: file is empty") from None
        missing = [c for c in required if c not in header]
        if missing:
            raise ParseError(f"{path}: header lacks columns {missing}", row=0)
        rows = []
        for rowno, fields in enumerate(reader, start=1):
            if not fields:
                continue
            if len(fields) != len(header):
                raise ParseError(f"{path}: expected {len(header)} fields, got {len(fields)}", row=rowno)
            rows.append(fields)
    return header, rows


def parse_float(text, rowno, column):
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"cannot parse {text!r} as a number", row=rowno, column=column) from None


# ---------------------------------------------------------------------------
# phase grids


def phase_grid_rows(grid):
    for i, mw in enumerate(grid.mw):
        for j, sg in enumerate(grid.sigma):
            yield (float(grid.t), float(mw), float(sg), float(grid.mdstar[i, j]), bool(grid.bistable[i, j]))


def write_phase_grids(path, grids):
    rows = [r for g in grids for r in phase_grid_rows(g)]
    write_table(path, PHASE_GRID_COLUMNS, rows)


def read_phase_grids(path, source="empirical"):
    """Read a phase-grid table into one :class:`PhaseGrid` per temperature.

    The ``t`` column is optional (absent means 0). Each temperature block must
    cover the full mw x sigma product exactly once.
    """
    header, rows = read_table(path, ("mw", "sigma", "mdstar"))
    col = {h: k for k, h in enumerate(header)}
    blocks = {}
    for rowno, f in enumerate(rows, start=1):
        t = parse_float(f[col["t"]], rowno, "t") if "t" in col else 0.0
        mw = parse_float(f[col["mw"]], rowno, "mw")
        sg = parse_float(f[col["sigma"]], rowno, "sigma")
        md = parse_float(f[col["mdstar"]], rowno, "mdstar")
        if not (math.isnan(md) or 0.0 <= md <= 1.0):
            raise ParseError(f"mdstar must lie in [0, 1], got {md}", row=rowno, column="mdstar")
        bi = False
        if "bistable" in col:
            text = f[col["bistable"]].strip().lower()
            if text not in ("0", "1", "true", "false"):
                raise ParseError(f"cannot parse {text!r} as a flag", row=rowno, column="bistable")
            bi = text in ("1", "true")
        cells = blocks.setdefault(t, {})
        if (mw, sg) in cells:
            raise ParseError(f"duplicate cell (mw={mw}, sigma={sg}, t={t})", row=rowno)
        cells[(mw, sg)] = (md, bi, rowno)
    if not blocks:
        raise ParseError(f"{path}: no data rows")

    grids = {}
    for t, cells in sorted(blocks.items()):
        mws = sorted({k[0] for k in cells})
        sgs = sorted({k[1] for k in cells})
        if len(cells) != len(mws) * len(sgs):
            last = max(v[2] for v in cells.values())
            raise ParseError(f"t={t}: cells do not form a full mw x sigma grid", row=last)
        md = np.empty((len(mws), len(sgs)))
        bi = np.zeros_like(md, dtype=bool)
        for (mw, sg), (v, b, _) in cells.items():
            md[mws.index(mw), sgs.index(sg)] = v
            bi[mws.index(mw), sgs.index(sg)] = b
        grids[t] = PhaseGrid(np.array(mws), np.array(sgs), md, bi, source, t)
    return grids
