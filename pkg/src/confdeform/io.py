"""Plain-text exchange of meshes, geometry and run reports.

Container files are whitespace separated with ``#`` comments.  A line holding
a single upper-case word opens a section; every following line until the
next section is one record of that section.
"""
from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .mesh import TAGS, SimplicialMesh, _TAG_CODE
from .metric import GeometryData, MetricField

MESH_SECTIONS = ("VERTICES", "CELLS", "BOUNDARY", "PERIODIC")
GEOMETRY_SECTIONS = ("METRIC", "SCALAR_R", "BOUNDARY_H", "RICCI", "SECOND_FF")
_CODE_TAG = {v: k for k, v in _TAG_CODE.items()}


class FormatError(ValueError):
    pass


def _fmt(x: float) -> str:
    return repr(float(x))


def _sym_upper(T: np.ndarray) -> np.ndarray:
    n = T.shape[-1]
    iu = np.triu_indices(n)
    return T[..., iu[0], iu[1]]


def _from_upper(vals: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((vals.shape[0], n, n))
    iu = np.triu_indices(n)
    out[:, iu[0], iu[1]] = vals
    out[:, iu[1], iu[0]] = vals
    return out


def parse_sections(text: str) -> dict[str, list[tuple[int, list[str]]]]:
    """Split container text into sections of (line number, tokens) records."""
    sections: dict[str, list] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) == 1 and tokens[0].isupper() and not tokens[0][0].isdigit():
            current = tokens[0]
            if current in sections:
                raise FormatError(f"line {lineno}: duplicate section {current}")
            sections[current] = []
            continue
        if current is None:
            raise FormatError(f"line {lineno}: record before any section header")
        sections[current].append((lineno, tokens))
    return sections


def _floats(rec, count, section):
    lineno, tok = rec
    if len(tok) != count:
        raise FormatError(f"line {lineno}: {section} expects {count} fields, found {len(tok)}")
    try:
        return [float(t) for t in tok]
    except ValueError as exc:
        raise FormatError(f"line {lineno}: {section}: {exc}") from None


def _ints(rec, count, section):
    lineno, tok = rec
    if len(tok) != count:
        raise FormatError(f"line {lineno}: {section} expects {count} fields, found {len(tok)}")
    try:
        return [int(t) for t in tok]
    except ValueError as exc:
        raise FormatError(f"line {lineno}: {section}: {exc}") from None


# ---------------------------------------------------------------------------
# meshes

def mesh_to_text(mesh: SimplicialMesh) -> str:
    n = mesh.dim
    lines = [f"# simplicial mesh, dimension {n}", "VERTICES"]
    lines += [f"{i} " + " ".join(_fmt(x) for x in v) for i, v in enumerate(mesh.vertices)]
    lines.append("CELLS")
    lines += [" ".join(map(str, c)) for c in mesh.cells]
    lines.append("BOUNDARY")
    lines += [" ".join(map(str, f)) + f" {_CODE_TAG[int(t)]}" for f, t in zip(mesh.facets, mesh.facet_tags)]
    pairs = mesh.periodic_pairs
    if len(pairs):
        lines.append("PERIODIC")
        lines += [f"{a} {b}" for a, b in pairs]
    return "\n".join(lines) + "\n"


def mesh_from_text(text: str) -> SimplicialMesh:
    """Rebuild a mesh; the structured grid (if any) is not part of the format."""
    sec = parse_sections(text)
    for name in ("VERTICES", "CELLS", "BOUNDARY"):
        if name not in sec:
            raise FormatError(f"missing section {name}")
    unknown = set(sec) - set(MESH_SECTIONS) - set(GEOMETRY_SECTIONS)
    if unknown:
        raise FormatError(f"unknown sections {sorted(unknown)}")
    vrecs = sec["VERTICES"]
    if not vrecs:
        raise FormatError("no vertices")
    n = len(vrecs[0][1]) - 1
    verts = np.zeros((len(vrecs), n))
    for k, rec in enumerate(vrecs):
        vals = _floats(rec, n + 1, "VERTICES")
        if int(vals[0]) != k:
            raise FormatError(f"line {rec[0]}: vertex index {int(vals[0])} out of order")
        verts[k] = vals[1:]
    cells = np.array([_ints(r, n + 1, "CELLS") for r in sec["CELLS"]], dtype=np.int64)
    if cells.size and (cells.min() < 0 or cells.max() >= len(verts)):
        raise FormatError("cell references a missing vertex")
    facets, tags = [], []
    for lineno, tok in sec["BOUNDARY"]:
        if len(tok) != n + 1 or tok[-1] not in TAGS:
            raise FormatError(f"line {lineno}: BOUNDARY expects {n} indices and a tag in {TAGS}")
        facets.append([int(t) for t in tok[:-1]])
        tags.append(_TAG_CODE[tok[-1]])
    dof = np.arange(len(verts))
    for rec in sec.get("PERIODIC", []):
        a, b = _ints(rec, 2, "PERIODIC")
        dof[b] = dof[a]
    _, dof = np.unique(dof, return_inverse=True)
    facets = np.array(facets, dtype=np.int64).reshape(-1, n)
    owner = _facet_owners(cells, facets, dof)
    return SimplicialMesh(verts, cells, facets, owner, np.array(tags, dtype=np.int8), dof.astype(np.int64))


def _facet_owners(cells, facets, dof) -> np.ndarray:
    index = {}
    for c, cell in enumerate(cells):
        for skip in range(cell.size):
            key = tuple(sorted(dof[np.delete(cell, skip)]))
            index.setdefault(key, c)
    owner = np.empty(len(facets), dtype=np.int64)
    for i, f in enumerate(facets):
        key = tuple(sorted(dof[f]))
        if key not in index:
            raise FormatError(f"boundary facet {i} is not a face of any cell")
        owner[i] = index[key]
    return owner


def write_mesh(path, mesh: SimplicialMesh) -> None:
    Path(path).write_text(mesh_to_text(mesh))


def read_mesh(path) -> SimplicialMesh:
    return mesh_from_text(Path(path).read_text())


# ---------------------------------------------------------------------------
# geometry

def geometry_to_text(mesh: SimplicialMesh, g: MetricField, geom: GeometryData) -> str:
    lines = [mesh_to_text(mesh).rstrip("\n"), "METRIC"]
    lines += [f"{i} " + " ".join(_fmt(x) for x in row) for i, row in enumerate(_sym_upper(g.components))]
    lines.append("SCALAR_R")
    lines += [f"{i} {_fmt(r)}" for i, r in enumerate(geom.R)]
    lines.append("BOUNDARY_H")
    lines += [f"{i} {_fmt(h)}" for i, h in enumerate(geom.H) if not math.isnan(h)]
    lines.append("RICCI")
    lines += [f"{i} " + " ".join(_fmt(x) for x in row) for i, row in enumerate(_sym_upper(geom.Ric))]
    lines.append("SECOND_FF")
    lines += [f"{i} " + " ".join(_fmt(x) for x in row) for i, row in enumerate(_sym_upper(geom.A))
              if not math.isnan(geom.H[i])]
    return "\n".join(lines) + "\n"


def _indexed(sec, name, width, N, fill):
    out = np.full((N, width), fill, dtype=float)
    for rec in sec.get(name, []):
        vals = _floats(rec, width + 1, name)
        i = int(vals[0])
        if not 0 <= i < N:
            raise FormatError(f"line {rec[0]}: {name} vertex index {i} out of range")
        out[i] = vals[1:]
    return out


def geometry_from_text(text: str):
    """Returns ``(mesh, MetricField, GeometryData)``."""
    mesh = mesh_from_text(text)
    sec = parse_sections(text)
    for name in GEOMETRY_SECTIONS:
        if name not in sec:
            raise FormatError(f"missing section {name}")
    n, N = mesh.dim, mesh.n_vertices
    w = n * (n + 1) // 2
    if len(sec["METRIC"]) != N:
        raise FormatError("METRIC must list every vertex")
    g = MetricField(_from_upper(_indexed(sec, "METRIC", w, N, np.nan), n))
    R = _indexed(sec, "SCALAR_R", 1, N, np.nan)[:, 0]
    if np.isnan(R).any():
        raise FormatError("SCALAR_R must list every vertex")
    H = _indexed(sec, "BOUNDARY_H", 1, N, np.nan)[:, 0]
    Ric = _from_upper(_indexed(sec, "RICCI", w, N, 0.0), n)
    A = _from_upper(_indexed(sec, "SECOND_FF", w, N, 0.0), n)
    return mesh, g, GeometryData(R, H, Ric, A)


def write_geometry(path, mesh, g, geom) -> None:
    Path(path).write_text(geometry_to_text(mesh, g, geom))


def read_geometry(path):
    return geometry_from_text(Path(path).read_text())


# ---------------------------------------------------------------------------
# report records and tables

def _value_text(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return _fmt(v)
    s = str(v)
    # quote anything that would not read back as the same string
    if not s or any(c.isspace() or c in '="\\' for c in s) or _parse_value(s) != s:
        s = s.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{s}"'
    return s


def format_record(record: dict) -> str:
    """One line of ``key=value`` pairs; keys must be free of spaces and '='."""
    parts = []
    for k, v in record.items():
        if not k or any(c.isspace() for c in k) or "=" in k:
            raise FormatError(f"invalid record key {k!r}")
        parts.append(f"{k}={_value_text(v)}")
    return " ".join(parts)


def _parse_value(s: str):
    if s == "true":
        return True
    if s == "false":
        return False
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def parse_record(line: str) -> dict:
    out = {}
    i, L = 0, len(line)
    while i < L:
        while i < L and line[i].isspace():
            i += 1
        if i >= L:
            break
        eq = line.find("=", i)
        if eq < 0:
            raise FormatError(f"malformed record near {line[i:i + 20]!r}")
        key = line[i:eq]
        j = eq + 1
        if j < L and line[j] == '"':
            j += 1
            buf = []
            while j < L and line[j] != '"':
                if line[j] == "\\" and j + 1 < L:
                    j += 1
                buf.append(line[j])
                j += 1
            if j >= L:
                raise FormatError("unterminated quoted value")
            out[key] = "".join(buf)
            i = j + 1
        else:
            k = j
            while k < L and not line[k].isspace():
                k += 1
            out[key] = _parse_value(line[j:k])
            i = k
    return out


def write_records(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(format_record(r) + "\n")


def read_records(path) -> list[dict]:
    with open(path) as fh:
        return [parse_record(line) for line in fh if line.strip() and not line.startswith("#")]


def write_csv(path, rows: list[dict]) -> None:
    keys: list = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
