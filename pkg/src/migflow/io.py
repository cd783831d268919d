"""File formats: long-format CSV tables, binary checkpoints, run manifests.

Every numeric value is written with ``repr(float)``, the shortest string that
round-trips exactly, so reruns produce byte-identical files.
"""

from __future__ import annotations

import contextlib
import csv
import hashlib
import json
import os
import platform
import shutil
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .covariates import COVARIATES, COUNTRY, CovariateTable
from .domain import CountryRegistry, DemographicRates, StockSeries, StockTable, TargetDataset, TimeAxis
from .errors import IngestionError, StructuralError
from .network import Architecture, NetworkParameters

CHECKPOINT_MAGIC = b"MIGFLOW\x00"
CHECKPOINT_VERSION = 1
DATASET_VERSION = 1

SCHEMAS = {
    "countries": ("code", "name"),
    "demography": ("year", "country", "population", "births", "death_rate", "birth_rate"),
    "stocks": ("year", "birth", "residence", "value"),
    "stock_diffs": ("year_start", "year_end", "birth", "residence", "value", "weight"),
    "flows": ("year", "origin", "destination", "value", "weight", "se"),
    "net_migration": ("year", "country", "value", "weight"),
    "test_corridors": ("origin", "destination"),
    "true_flows": ("year", "birth", "origin", "destination", "value"),
    "true_stocks": ("year", "birth", "residence", "value"),
    "covariate_country": ("year", "country", "value"),
    "covariate_pair": ("year", "country_a", "country_b", "value"),
}

ESTIMATE_SCHEMAS = {
    "flows": ("year", "birth", "origin", "destination", "mean", "std"),
    "od_flows": ("year", "origin", "destination", "mean", "std"),
    "stocks": ("year", "birth", "residence", "mean", "std"),
    "net_migration": ("year", "country", "mean", "std"),
}


def fmt(value):
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, str):
        return value
    v = float(value)
    if np.isnan(v):
        return "nan"
    return repr(v)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path, header):
    """Rows of a CSV file as lists of strings, with header and width checks.

    Yields ``(line_number, row)``.
    """
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"missing input file {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            got = next(reader)
        except StopIteration:
            return []
        if tuple(h.strip() for h in got) != tuple(header):
            raise IngestionError(f"{path}: expected header {','.join(header)}, got {','.join(got)}")
        rows = []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestionError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            rows.append((line, row))
        return rows


def _number(path, line, text):
    try:
        return float(text)
    except ValueError:
        raise IngestionError(f"{path}:{line}: not a number: {text!r}") from None


def _year(path, line, text):
    v = _number(path, line, text)
    if v != int(v):
        raise IngestionError(f"{path}:{line}: year must be an integer: {text!r}")
    return int(v)


# --- datasets ---------------------------------------------------------------

@dataclass
class Dataset:
    """Everything a training run reads from disk."""

    registry: CountryRegistry
    axis: TimeAxis
    tables: dict
    rates: DemographicRates
    stocks: StockSeries
    targets: TargetDataset
    true_flows: np.ndarray | None = None
    true_stocks: np.ndarray | None = None
    absent: list = field(default_factory=list)

    @property
    def n(self):
        return len(self.registry)

    def initial_stocks(self):
        """Earliest observed value of every cell; cells never observed are 0."""
        obs = self.stocks.observed
        first = np.argmax(obs, axis=0)
        vals = np.take_along_axis(np.nan_to_num(self.stocks.values), first[None], axis=0)[0]
        return StockTable(np.where(obs.any(axis=0), vals, 0.0), self.axis.start_year)


def _grid(path, rows, index_cols, value_col, registry, years, dims, duplicates_ok=False):
    """Scatter long-format rows into a dense array filled with ``nan``."""
    n = len(registry)
    out = np.full((len(years),) + (n,) * dims, np.nan)
    seen = set()
    y0 = years[0]
    for line, row in rows:
        year = _year(path, line, row[0])
        if not y0 <= year <= years[-1]:
            raise IngestionError(f"{path}:{line}: year {year} outside {y0}-{years[-1]}")
        try:
            idx = tuple(registry.index(row[c]) for c in index_cols)
        except StructuralError as exc:
            raise IngestionError(f"{path}:{line}: {exc}") from None
        key = (year,) + idx
        if key in seen and not duplicates_ok:
            raise IngestionError(f"{path}:{line}: duplicate row for {row[0]}, {', '.join(row[c] for c in index_cols)}")
        seen.add(key)
        out[(year - y0,) + idx] = _number(path, line, row[value_col])
    return out


def save_dataset(path, registry, axis, tables, rates, stocks, targets, true_flows=None, true_stocks=None):
    path = Path(path)
    codes = registry.codes
    years = axis.years
    write_csv(path / "countries.csv", SCHEMAS["countries"], zip(codes, registry.names))
    rows = []
    for t, year in enumerate(years):
        for c, code in enumerate(codes):
            br = np.nan if rates.birth_rate is None else rates.birth_rate[t, c]
            pop = np.nan if rates.population is None else rates.population[t, c]
            rows.append((year, code, pop, rates.births[t, c], rates.death_rate[t, c], br))
    write_csv(path / "demography.csv", SCHEMAS["demography"], rows)
    for name, table in sorted(tables.items()):
        if table.arity == COUNTRY:
            rows = [(years[t], codes[a], table.values[t, a])
                    for t in range(len(years)) for a in range(len(codes))]
            write_csv(path / "covariates" / f"{name}.csv", SCHEMAS["covariate_country"], rows)
        else:
            rows = [(years[t], codes[a], codes[b], table.values[t, a, b])
                    for t in range(len(years)) for a in range(len(codes)) for b in range(len(codes))]
            write_csv(path / "covariates" / f"{name}.csv", SCHEMAS["covariate_pair"], rows)
    rows = []
    for t, year in enumerate(stocks.years):
        for i, j in zip(*np.nonzero(stocks.observed[t])):
            rows.append((year, codes[i], codes[j], stocks.values[t, i, j]))
    write_csv(path / "stocks.csv", SCHEMAS["stocks"], rows)
    write_csv(path / "stock_diffs.csv", SCHEMAS["stock_diffs"],
              [(int(r[0]), int(r[1]), codes[int(r[2])], codes[int(r[3])], r[4], r[5]) for r in targets.stock_diffs])
    write_csv(path / "flows.csv", SCHEMAS["flows"],
              [(int(r[0]), codes[int(r[1])], codes[int(r[2])], r[3], r[4], r[5]) for r in targets.flows])
    write_csv(path / "net_migration.csv", SCHEMAS["net_migration"],
              [(int(r[0]), codes[int(r[1])], r[2], r[3]) for r in targets.net_migration])
    if targets.test_corridors is not None:
        write_csv(path / "test_corridors.csv", SCHEMAS["test_corridors"],
                  [(codes[j], codes[k]) for j, k in zip(*np.nonzero(targets.test_corridors))])
    if true_flows is not None:
        rows = [(years[t], codes[i], codes[j], codes[k], true_flows[t, i, j, k])
                for t in range(len(years)) for i, j, k in zip(*np.nonzero(true_flows[t] > 0))]
        write_csv(path / "true_flows.csv", SCHEMAS["true_flows"], rows)
    if true_stocks is not None:
        rows = [(stocks.years[t], codes[i], codes[j], true_stocks[t, i, j])
                for t in range(true_stocks.shape[0]) for i in range(len(codes)) for j in range(len(codes))]
        write_csv(path / "true_stocks.csv", SCHEMAS["true_stocks"], rows)


def _registry(path):
    countries = path / "countries.csv"
    if countries.exists():
        rows = read_csv(countries, SCHEMAS["countries"])
        seen = set()
        for line, row in rows:
            if row[0] in seen:
                raise IngestionError(f"{countries}:{line}: duplicate country code {row[0]!r}")
            seen.add(row[0])
        return CountryRegistry(tuple(r[0] for _, r in rows), tuple(r[1] for _, r in rows))
    codes = set()
    for _, row in read_csv(path / "demography.csv", SCHEMAS["demography"]):
        codes.add(row[1])
    return CountryRegistry(tuple(sorted(codes)))


def load_dataset(path, required=()):
    """Read a dataset directory written by :func:`save_dataset` (or by hand).

    Covariate files that are missing or hold only a header mark the covariate
    as absent; absent covariates listed in ``required`` are an error.
    """
    path = Path(path)
    if not path.is_dir():
        raise IngestionError(f"missing input directory {path}")
    registry = _registry(path)
    n = len(registry)
    demo_path = path / "demography.csv"
    demo = read_csv(demo_path, SCHEMAS["demography"])
    if not demo:
        raise IngestionError(f"{demo_path}: no rows")
    years_seen = sorted({_year(demo_path, line, r[0]) for line, r in demo})
    axis = TimeAxis(years_seen[0], years_seen[-1])
    years = axis.years
    cols = {name: _grid(demo_path, demo, (1,), c, registry, years, 1) for c, name in
            enumerate(SCHEMAS["demography"]) if c >= 2}
    if np.isnan(cols["births"]).any() or np.isnan(cols["death_rate"]).any():
        raise IngestionError(f"{demo_path}: births and death_rate must cover every country and year")
    pop = None if np.isnan(cols["population"]).all() else cols["population"]
    br = None if np.isnan(cols["birth_rate"]).all() else cols["birth_rate"]
    rates = DemographicRates(axis, cols["births"], cols["death_rate"], pop, br)

    tables, absent = {}, []
    for name, (arity, binary, _) in COVARIATES.items():
        cpath = path / "covariates" / f"{name}.csv"
        schema = SCHEMAS["covariate_country"] if arity == COUNTRY else SCHEMAS["covariate_pair"]
        rows = read_csv(cpath, schema) if cpath.exists() else []
        if not rows:
            absent.append(name)
            continue
        dims = 1 if arity == COUNTRY else 2
        values = _grid(cpath, rows, tuple(range(1, 1 + dims)), 1 + dims, registry, years, dims)
        if dims == 2:
            # hand-written files may leave out the diagonal
            idx = np.arange(n)
            diag = values[:, idx, idx]
            values[:, idx, idx] = np.where(np.isnan(diag), 0.0, diag)
        tables[name] = CovariateTable(name, values, arity, binary)
    missing = [r for r in required if r in absent]
    if missing:
        raise IngestionError(f"required covariates absent: {', '.join(missing)}")

    stock_years = years + [years[-1] + 1]
    spath = path / "stocks.csv"
    rows = read_csv(spath, SCHEMAS["stocks"])
    svals = _grid(spath, rows, (1, 2), 3, registry, stock_years, 2)
    stocks = StockSeries(tuple(stock_years), svals, np.isfinite(svals))

    def index_rows(name, code_cols):
        p = path / f"{name}.csv"
        if not p.exists():
            return np.empty((0, len(SCHEMAS[name])))
        out = []
        for line, row in read_csv(p, SCHEMAS[name]):
            vals = []
            for c, text in enumerate(row):
                if c in code_cols:
                    try:
                        vals.append(registry.index(text))
                    except StructuralError as exc:
                        raise IngestionError(f"{p}:{line}: {exc}") from None
                else:
                    vals.append(_number(p, line, text))
            out.append(vals)
        arr = np.array(out, dtype=float).reshape(-1, len(SCHEMAS[name]))
        key_cols = {"stock_diffs": 4, "flows": 3, "net_migration": 2}[name]
        keys = [tuple(r[:key_cols]) for r in arr]
        if len(set(keys)) != len(keys):
            raise IngestionError(f"{p}: duplicate target rows")
        return arr

    test = None
    tpath = path / "test_corridors.csv"
    if tpath.exists():
        test = np.zeros((n, n), dtype=bool)
        for line, row in read_csv(tpath, SCHEMAS["test_corridors"]):
            try:
                test[registry.index(row[0]), registry.index(row[1])] = True
            except StructuralError as exc:
                raise IngestionError(f"{tpath}:{line}: {exc}") from None
    targets = TargetDataset(index_rows("stock_diffs", (2, 3)), index_rows("flows", (1, 2)),
                            index_rows("net_migration", (1,)), test)
    targets.validate(n, stock_years)

    true_flows = true_stocks = None
    fpath = path / "true_flows.csv"
    if fpath.exists():
        true_flows = np.nan_to_num(_grid(fpath, read_csv(fpath, SCHEMAS["true_flows"]), (1, 2, 3), 4,
                                         registry, years, 3))
    tspath = path / "true_stocks.csv"
    if tspath.exists():
        true_stocks = _grid(tspath, read_csv(tspath, SCHEMAS["true_stocks"]), (1, 2), 3, registry, stock_years, 2)
    return Dataset(registry, axis, tables, rates, stocks, targets, true_flows, true_stocks, absent)


# --- checkpoints --------------------------------------------------------------

def save_checkpoint(path, params, seed, config_hash="", extra=None):
    header = {
        "format_version": CHECKPOINT_VERSION,
        "architecture": params.arch.to_dict(),
        "seed": int(seed),
        "config_hash": config_hash,
        "n_params": int(params.size),
        "dtype": "<f8",
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = params.flat().astype("<f8").tobytes()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


@dataclass
class Checkpoint:
    params: NetworkParameters
    seed: int
    config_hash: str
    extra: dict


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"missing checkpoint {path}")
    data = path.read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise IngestionError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    (length,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    header = json.loads(data[pos:pos + length].decode("utf-8"))
    pos += length
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise IngestionError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    flat = np.frombuffer(data[pos:], dtype="<f8").astype(float)
    if flat.size != header["n_params"]:
        raise IngestionError(f"{path}: expected {header['n_params']} parameters, found {flat.size}")
    arch = Architecture(**header["architecture"])
    return Checkpoint(NetworkParameters.from_flat(arch, flat), header["seed"], header["config_hash"],
                      header.get("extra", {}))


# --- estimates ----------------------------------------------------------------

def export_estimates(estimate, registry, path):
    """Write mean/std tables for flows, OD flows, stocks and net migration."""
    path = Path(path)
    codes = registry.codes
    n = len(codes)
    y0 = estimate.start_year
    off = [(j, k) for j in range(n) for k in range(n) if j != k]
    m, s = estimate.mean, estimate.std
    write_csv(path / "flows.csv", ESTIMATE_SCHEMAS["flows"],
              ((y0 + t, codes[i], codes[j], codes[k], m["flows"][t, i, j, k], s["flows"][t, i, j, k])
               for t in range(m["flows"].shape[0]) for i in range(n) for j, k in off))
    write_csv(path / "od_flows.csv", ESTIMATE_SCHEMAS["od_flows"],
              ((y0 + t, codes[j], codes[k], m["od_flows"][t, j, k], s["od_flows"][t, j, k])
               for t in range(m["od_flows"].shape[0]) for j, k in off))
    write_csv(path / "stocks.csv", ESTIMATE_SCHEMAS["stocks"],
              ((y0 + t, codes[i], codes[j], m["stocks"][t, i, j], s["stocks"][t, i, j])
               for t in range(m["stocks"].shape[0]) for i in range(n) for j in range(n)))
    write_csv(path / "net_migration.csv", ESTIMATE_SCHEMAS["net_migration"],
              ((y0 + t, codes[j], m["net_migration"][t, j], s["net_migration"][t, j])
               for t in range(m["net_migration"].shape[0]) for j in range(n)))


def load_estimates(path, registry, n_years, start_year):
    """Inverse of :func:`export_estimates`; returns ``(mean, std)`` dicts."""
    path = Path(path)
    n = len(registry)
    shapes = {"flows": (n_years, n, n, n), "od_flows": (n_years, n, n),
              "stocks": (n_years + 1, n, n), "net_migration": (n_years, n)}
    mean, std = {}, {}
    for name, header in ESTIMATE_SCHEMAS.items():
        mean[name] = np.zeros(shapes[name])
        std[name] = np.zeros(shapes[name])
        fpath = path / f"{name}.csv"
        for line, row in read_csv(fpath, header):
            idx = (_year(fpath, line, row[0]) - start_year,) + tuple(registry.index(c) for c in row[1:-2])
            mean[name][idx] = _number(fpath, line, row[-2])
            std[name][idx] = _number(fpath, line, row[-1])
    return mean, std


# --- manifests and staging ----------------------------------------------------

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_tree(path):
    """``{relative path: sha256}`` for a file or every file under a directory."""
    path = Path(path)
    if path.is_file():
        return {path.name: sha256_file(path)}
    return {str(p.relative_to(path)): sha256_file(p) for p in sorted(path.rglob("*")) if p.is_file()}


def config_hash(config_dict):
    return hashlib.sha256(json.dumps(config_dict, sort_keys=True).encode("utf-8")).hexdigest()


def versions():
    import scipy

    return {"migflow": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def write_manifest(out_dir, command, config_dict, seeds, inputs, argv=None):
    """Record what produced ``out_dir``; excludes the manifest itself from the output hashes."""
    out_dir = Path(out_dir)
    outputs = {k: v for k, v in hash_tree(out_dir).items() if k != "manifest.json"}
    manifest = {
        "command": command,
        "config": config_dict,
        "config_sha256": config_hash(config_dict),
        "seeds": seeds,
        "versions": versions(),
        "inputs": inputs,
        "outputs": outputs,
    }
    if argv is not None:
        manifest["argv"] = list(argv)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


@contextlib.contextmanager
def staged_output(out_dir):
    """Yield a scratch directory whose files are moved into ``out_dir`` on success.

    On any exception the scratch directory is removed and ``out_dir`` is left
    untouched.
    """
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=".staging-", dir=out_dir.parent))
    try:
        yield scratch
    except BaseException:
        shutil.rmtree(scratch, ignore_errors=True)
        raise
    out_dir.mkdir(parents=True, exist_ok=True)
    for src in sorted(scratch.rglob("*")):
        if src.is_file():
            dst = out_dir / src.relative_to(scratch)
            dst.parent.mkdir(parents=True, exist_ok=True)
            os.replace(src, dst)
    shutil.rmtree(scratch, ignore_errors=True)
