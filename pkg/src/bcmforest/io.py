"""File formats and data ingestion.

Two artifact kinds share one container format: a fit's posterior draws
(with serialized ensembles) and effect draws.  The container is a
versioned binary file: an 8-byte magic, a little-endian header length,
a canonical JSON header (sorted keys, no whitespace) describing payload
arrays, then the raw little-endian arrays in header order.  Writing is
fully deterministic, so identical inputs produce byte-identical files.
"""

import csv
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DataError, FormatError
from .model import (
    AuxModel,
    BCMFConfig,
    CleverConfig,
    CleverCovariates,
    CleverModels,
    FOREST_NAMES,
    ForestConfig,
    ForestDraws,
    MediationData,
    MediationFit,
)

MAGIC = b"BCMFDRAW"
FORMAT_VERSION = 1

MISSING_TOKENS = {"", "na", "nan", "null", "none"}


# ---------------------------------------------------------------------------
# Binary container
# ---------------------------------------------------------------------------

def _canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def write_container(path, kind, meta, arrays):
    """Write a versioned container file atomically.

    ``arrays`` is an ordered list of (name, ndarray); dtypes are forced
    little-endian.  A temporary file is swapped into place, so failures
    never leave a partial artifact behind.
    """
    entries = []
    payload = []
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        arr = arr.astype(dtype, copy=False)
        entries.append({"name": name, "dtype": dtype.str,
                        "shape": list(arr.shape)})
        payload.append(arr.tobytes())
    header = _canonical_json({
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta,
        "arrays": entries,
    })
    tmp = path + ".tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(np.array(len(header), dtype="<u8").tobytes())
            fh.write(header)
            for block in payload:
                fh.write(block)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def read_container(path, expected_kind=None):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise FormatError(f"{path}: not a draws container")
        (hlen,) = np.frombuffer(fh.read(8), dtype="<u8")
        header = json.loads(fh.read(int(hlen)).decode())
        version = header.get("format_version")
        if version != FORMAT_VERSION:
            raise FormatError(
                f"{path}: format version {version} is not supported "
                f"(this build reads version {FORMAT_VERSION})")
        if expected_kind is not None and header.get("kind") != expected_kind:
            raise FormatError(f"{path}: expected a {expected_kind!r} file, "
                              f"found {header.get('kind')!r}")
        arrays = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"])
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            buf = fh.read(count * dtype.itemsize)
            arrays[entry["name"]] = np.frombuffer(buf, dtype=dtype).reshape(
                entry["shape"]).copy()
    return header, arrays


# ---------------------------------------------------------------------------
# Fit draws files
# ---------------------------------------------------------------------------

def config_to_dict(cfg):
    return asdict(cfg)


def config_from_dict(d):
    d = dict(d)
    for name in FOREST_NAMES:
        d[name] = ForestConfig(**d[name])
    d["clever"] = CleverConfig(**d["clever"])
    return BCMFConfig(**d)


def _pack_forest_draws(prefix, fd, arrays, meta_entry):
    var_parts, val_parts, size_parts = [], [], []
    for var, val, sizes in fd.draws:
        var_parts.append(var)
        val_parts.append(val)
        size_parts.append(sizes)
    arrays.append((f"{prefix}_var", np.concatenate(var_parts)))
    arrays.append((f"{prefix}_val", np.concatenate(val_parts)))
    arrays.append((f"{prefix}_sizes", np.stack(size_parts)))
    meta_entry["n_features"] = fd.n_features


def _unpack_forest_draws(prefix, arrays, meta_entry):
    sizes = arrays[f"{prefix}_sizes"]
    var_all = arrays[f"{prefix}_var"]
    val_all = arrays[f"{prefix}_val"]
    draws = []
    start = 0
    for d in range(sizes.shape[0]):
        count = int(sizes[d].sum())
        draws.append((var_all[start:start + count],
                      val_all[start:start + count],
                      sizes[d]))
        start += count
    return ForestDraws(meta_entry["n_features"], draws)


def write_fit(path, fit, codec=None):
    """Serialize a MediationFit (draws file)."""
    meta = {
        "config": config_to_dict(fit.config),
        "columns": list(fit.columns),
        "standardization": {"y_mean": fit.y_mean, "y_sd": fit.y_sd,
                            "m_mean": fit.m_mean, "m_sd": fit.m_sd},
        "chains": {"n_chains": fit.config.n_chains,
                   "n_samples": fit.config.n_samples,
                   "burn_in": fit.config.burn_in},
        "codec": codec.to_dict() if codec is not None else None,
        "forests": {},
        "aux": {},
    }
    arrays = [(name, fit.functions[name]) for name in FOREST_NAMES]
    arrays += [("sigma2", fit.sigma2), ("sigma2_m", fit.sigma2_m),
               ("chain_id", fit.chain_id),
               ("pi_hat", fit.clever.pi_hat),
               ("m0_hat", fit.clever.m0_hat),
               ("m1_hat", fit.clever.m1_hat),
               ("train_x", fit.train_x)]
    if fit.forests is not None:
        for name in FOREST_NAMES:
            entry = {}
            _pack_forest_draws(f"forest_{name}", fit.forests[name], arrays, entry)
            meta["forests"][name] = entry
        for which, model in (("propensity", fit.clever_models.propensity),
                             ("arm0", fit.clever_models.arm0),
                             ("arm1", fit.clever_models.arm1)):
            entry = {"kind": model.kind, "y_mean": model.y_mean,
                     "y_sd": model.y_sd}
            _pack_forest_draws(f"aux_{which}", model.draws, arrays, entry)
            meta["aux"][which] = entry
    write_container(path, "fit", meta, arrays)


def read_fit(path):
    """Reconstruct a MediationFit (and covariate codec) from a draws file."""
    header, arrays = read_container(path, expected_kind="fit")
    meta = header["meta"]
    cfg = config_from_dict(meta["config"])
    std = meta["standardization"]
    forests = None
    clever_models = None
    if meta["forests"]:
        forests = {name: _unpack_forest_draws(f"forest_{name}", arrays,
                                              meta["forests"][name])
                   for name in FOREST_NAMES}
        aux = {}
        for which, entry in meta["aux"].items():
            aux[which] = AuxModel(entry["kind"],
                                  _unpack_forest_draws(f"aux_{which}", arrays,
                                                       entry),
                                  entry["y_mean"], entry["y_sd"])
        clever_models = CleverModels(aux["propensity"], aux["arm0"], aux["arm1"])
    fit = MediationFit(
        config=cfg,
        columns=list(meta["columns"]),
        y_mean=std["y_mean"], y_sd=std["y_sd"],
        m_mean=std["m_mean"], m_sd=std["m_sd"],
        functions={name: arrays[name] for name in FOREST_NAMES},
        sigma2=arrays["sigma2"], sigma2_m=arrays["sigma2_m"],
        chain_id=arrays["chain_id"],
        clever=CleverCovariates(arrays["pi_hat"], arrays["m0_hat"],
                                arrays["m1_hat"]),
        train_x=arrays["train_x"],
        forests=forests,
        clever_models=clever_models,
    )
    codec = CovariateCodec.from_dict(meta["codec"]) if meta.get("codec") else None
    return fit, codec


def write_effects(path, effects, X, columns):
    """Serialize effect draws together with the covariates they condition on."""
    meta = {
        "columns": list(columns),
        "outcome_kind": effects.outcome_kind,
        "mediator_kind": effects.mediator_kind,
    }
    arrays = [("direct", effects.direct), ("indirect", effects.indirect),
              ("total", effects.total), ("covariates", np.asarray(X))]
    write_container(path, "effects", meta, arrays)


def read_effects(path):
    from .effects import EffectDraws
    header, arrays = read_container(path, expected_kind="effects")
    meta = header["meta"]
    eff = EffectDraws(arrays["direct"], arrays["indirect"], arrays["total"],
                      meta["outcome_kind"], meta["mediator_kind"])
    return eff, arrays["covariates"], list(meta["columns"])


# ---------------------------------------------------------------------------
# Delimited-text ingestion
# ---------------------------------------------------------------------------

@dataclass
class DataSpec:
    """Where the data lives and what each column means."""

    path: str
    outcome: str
    treatment: str
    mediator: str
    covariates: list
    kinds: dict = None      # column -> continuous | binary | categorical
    delimiter: str = ","

    def __post_init__(self):
        roles = [self.outcome, self.treatment, self.mediator, *self.covariates]
        if len(set(roles)) != len(roles):
            raise DataError("column roles must be disjoint")
        self.kinds = dict(self.kinds or {})
        for col, kind in self.kinds.items():
            if kind not in ("continuous", "binary", "categorical"):
                raise DataError(f"unknown kind {kind!r} for column {col!r}")


@dataclass
class CovariateCodec:
    """Deterministic covariate encoding fitted at ingestion time.

    Categorical columns expand to one indicator per level, levels in
    lexicographic order; the expansion is recorded so new data can be
    transformed identically.
    """

    source_columns: list   # original covariate column names
    kinds: dict            # column -> kind
    levels: dict           # categorical column -> sorted level list

    @property
    def columns(self):
        out = []
        for col in self.source_columns:
            if self.kinds.get(col) == "categorical":
                out.extend(f"{col}={lv}" for lv in self.levels[col])
            else:
                out.append(col)
        return out

    def transform(self, table, where):
        """Encode raw string cells into the numeric covariate matrix."""
        blocks = []
        for col in self.source_columns:
            cells = table[col]
            if self.kinds.get(col) == "categorical":
                known = self.levels[col]
                block = np.zeros((len(cells), len(known)))
                index = {lv: j for j, lv in enumerate(known)}
                for i, cell in enumerate(cells):
                    j = index.get(cell)
                    if j is None:
                        raise DataError(
                            f"{where}: unknown level {cell!r} of {col!r} "
                            f"in data row {i + 1}")
                    block[i, j] = 1.0
                blocks.append(block)
            else:
                blocks.append(_parse_numeric(cells, col, where)[:, None])
        return np.hstack(blocks)

    def to_dict(self):
        return {"source_columns": self.source_columns, "kinds": self.kinds,
                "levels": self.levels}

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["source_columns"]), dict(d["kinds"]),
                   {k: list(v) for k, v in d["levels"].items()})


def _parse_numeric(cells, col, where):
    out = np.empty(len(cells))
    for i, cell in enumerate(cells):
        if cell.strip().lower() in MISSING_TOKENS:
            raise DataError(f"{where}: missing value in column {col!r}, "
                            f"data row {i + 1}")
        try:
            out[i] = float(cell)
        except ValueError:
            raise DataError(f"{where}: unparseable number {cell!r} in column "
                            f"{col!r}, data row {i + 1}") from None
    return out


def read_table(path, delimiter=","):
    """A delimited file as {column: list of string cells}."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            head = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        head = [h.strip() for h in head]
        if len(set(head)) != len(head):
            dupes = sorted({h for h in head if head.count(h) > 1})
            raise DataError(f"{path}: duplicate header columns {dupes}")
        rows = []
        for line_no, row in enumerate(reader, start=1):
            if len(row) != len(head):
                raise DataError(f"{path}: data row {line_no} has {len(row)} "
                                f"fields, expected {len(head)}")
            rows.append([cell.strip() for cell in row])
    return head, {col: [row[j] for row in rows] for j, col in enumerate(head)}


def ingest(spec):
    """Parse a delimited file into MediationData (plus its codec).

    Categoricals are one-hot binarized with lexicographic level order;
    missing values, unparseable numbers and non-binary treatments are
    rejected with row/column diagnostics.
    """
    head, table = read_table(spec.path, spec.delimiter)
    needed = [spec.outcome, spec.treatment, spec.mediator, *spec.covariates]
    absent = [c for c in needed if c not in head]
    if absent:
        raise DataError(f"{spec.path}: missing columns {absent}")

    y = _parse_numeric(table[spec.outcome], spec.outcome, spec.path)
    m = _parse_numeric(table[spec.mediator], spec.mediator, spec.path)
    a = _parse_numeric(table[spec.treatment], spec.treatment, spec.path)
    for i, val in enumerate(a):
        if val not in (0.0, 1.0):
            raise DataError(f"{spec.path}: treatment value {val:g} is not 0/1 "
                            f"in data row {i + 1}")
    kinds = dict(spec.kinds)
    levels = {}
    for col in spec.covariates:
        kind = kinds.setdefault(col, "continuous")
        if kind == "categorical":
            levels[col] = sorted(set(table[col]))
        elif kind == "binary":
            vals = _parse_numeric(table[col], col, spec.path)
            bad = np.flatnonzero(~np.isin(vals, (0.0, 1.0)))
            if bad.size:
                raise DataError(f"{spec.path}: binary column {col!r} has value "
                                f"{vals[bad[0]]:g} in data row {bad[0] + 1}")
    codec = CovariateCodec(list(spec.covariates), kinds, levels)
    X = codec.transform(table, spec.path)
    data = MediationData(y, a, m, X, columns=codec.columns)
    return data, codec


def export_mediation_data(data, path, outcome="y", treatment="a",
                          mediator="m", delimiter=","):
    """Write MediationData back to delimited text (full float precision)."""
    tmp = path + ".tmp"
    try:
        with open(tmp, "w", newline="") as fh:
            writer = csv.writer(fh, delimiter=delimiter)
            writer.writerow([outcome, treatment, mediator, *data.columns])
            for i in range(data.n):
                writer.writerow([repr(float(data.y[i])), repr(float(data.a[i])),
                                 repr(float(data.m[i])),
                                 *(repr(float(v)) for v in data.x[i])])
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


# ---------------------------------------------------------------------------
# Report writers (plain CSV, deterministic formatting)
# ---------------------------------------------------------------------------

def _write_csv(path, header, rows):
    tmp = path + ".tmp"
    try:
        with open(tmp, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _cell(v):
    if isinstance(v, float):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    return v


def write_sim_report(report, out_dir):
    """SimReport as delimited records plus the aggregate table."""
    os.makedirs(out_dir, exist_ok=True)
    rec_header = ["rep", "method", "target", "index", "estimate", "lo", "hi",
                  "truth", "covered", "length"]
    _write_csv(os.path.join(out_dir, "records.csv"), rec_header,
               [[_cell(r[k]) for k in rec_header] for r in report.records])
    agg_header = ["setting", "method", "target", "count", "coverage", "rmse",
                  "bias", "length"]
    _write_csv(os.path.join(out_dir, "aggregates.csv"), agg_header,
               [[_cell(r[k]) for k in agg_header] for r in report.aggregates])
    held_header = ["rep", "method", "rmse_y", "corr_y", "rmse_m", "corr_m"]
    _write_csv(os.path.join(out_dir, "heldout.csv"), held_header,
               [[_cell(r[k]) for k in held_header] for r in report.heldout])
    fail_header = ["rep", "error"]
    _write_csv(os.path.join(out_dir, "failures.csv"), fail_header,
               [[_cell(r[k]) for k in fail_header] for r in report.failures])
    meta = {"label": report.label, "spec": report.spec_echo}
    tmp = os.path.join(out_dir, "meta.json.tmp")
    final = os.path.join(out_dir, "meta.json")
    try:
        with open(tmp, "wb") as fh:
            fh.write(_canonical_json(meta))
        os.replace(tmp, final)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
