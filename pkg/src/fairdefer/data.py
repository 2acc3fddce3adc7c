"""Datasets: CSV ingestion, COMPAS and Heritage Health preprocessing,
train/test splitting, a synthetic generator and an exact on-disk format.

A ``Dataset`` carries the model's features, labels Y, sensitive attribute A,
the decision-maker-only side information Z and an auxiliary binary group used
for subgroup reporting (and as the DM-corruption predicate).  Z is never part
of ``features``; ``dm_features()`` appends it for training the DM.
"""
from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from fairdefer._splitting import random_split_indices, stratified_split_indices
from fairdefer.nn_core import Batch

log = logging.getLogger(__name__)

OTHER = "other"
MISSING = "missing"


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    sensitive: np.ndarray
    dm_side_info: np.ndarray | None = None  # (n, m), DM only
    aux_group: np.ndarray | None = None
    example_ids: np.ndarray | None = None
    feature_names: list[str] = field(default_factory=list)
    side_info_names: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        n = self.features.shape[0]
        self.labels = _binary("labels", self.labels)
        self.sensitive = _binary("sensitive", self.sensitive)
        if self.aux_group is not None:
            self.aux_group = _binary("aux_group", self.aux_group)
        if self.dm_side_info is not None:
            z = np.asarray(self.dm_side_info, dtype=float)
            self.dm_side_info = z.reshape(n, -1) if z.ndim == 1 else z
        if self.example_ids is None:
            self.example_ids = np.arange(n)
        self.example_ids = np.asarray(self.example_ids)
        for name in ("labels", "sensitive", "aux_group", "dm_side_info", "example_ids"):
            v = getattr(self, name)
            if v is not None and len(v) != n:
                raise DataError(f"{name} has {len(v)} rows, features have {n}")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features contain missing or non-finite values")
        if len(np.unique(self.example_ids)) != n:
            raise DataError("example_ids are not unique")
        if not self.feature_names:
            self.feature_names = [f"x{i}" for i in range(self.features.shape[1])]
        if self.dm_side_info is not None and not self.side_info_names:
            self.side_info_names = [f"z{i}" for i in range(self.dm_side_info.shape[1])]

    def __len__(self):
        return len(self.labels)

    @property
    def has_side_info(self) -> bool:
        return self.dm_side_info is not None

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        pick = lambda v: None if v is None else v[idx]  # noqa: E731
        return replace(
            self,
            features=self.features[idx],
            labels=self.labels[idx],
            sensitive=self.sensitive[idx],
            dm_side_info=pick(self.dm_side_info),
            aux_group=pick(self.aux_group),
            example_ids=self.example_ids[idx],
        )

    def model_view(self) -> "Dataset":
        """The dataset as the model sees it: Z stripped."""
        return replace(self, dm_side_info=None, side_info_names=[])

    def dm_features(self) -> np.ndarray:
        if self.dm_side_info is None:
            raise DataError("dataset has no DM side information (Z)")
        return np.hstack([self.features, self.dm_side_info])

    def to_batch(self, dm_prob=None) -> Batch:
        return Batch(self.features, self.labels, self.sensitive, dm_prob, self.example_ids)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.features, self.labels, self.sensitive, self.aux_group, self.dm_side_info):
            if arr is not None:
                h.update(np.ascontiguousarray(arr).tobytes())
        h.update("\x00".join(map(str, self.example_ids)).encode())
        return h.hexdigest()[:16]


def _binary(name, v) -> np.ndarray:
    arr = np.asarray(v)
    if arr.ndim != 1:
        raise DataError(f"{name} must be a 1-d vector")
    if not np.isin(arr, (0, 1)).all():
        raise DataError(f"{name} must contain only 0/1")
    return arr.astype(int)


# ---------------------------------------------------------------- CSV ingestion


@dataclass(frozen=True)
class CsvSchema:
    """Column name -> kind, kind in {"float", "int", "str"}.  Optional columns
    may be absent or blank; required ones must parse."""

    required: dict
    optional: dict = field(default_factory=dict)


def load_csv(path, schema: CsvSchema) -> tuple[pd.DataFrame, int]:
    """Read and type a CSV; returns ``(table, dropped_count)``."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: no header") from None
    if raw.columns.empty:
        raise DataError(f"{path}: no header")
    missing = [c for c in schema.required if c not in raw.columns]
    if missing:
        raise DataError(f"{path}: missing required column(s): {', '.join(missing)}")

    out = pd.DataFrame(index=raw.index)
    bad = np.zeros(len(raw), dtype=bool)
    for cols, required in ((schema.required, True), (schema.optional, False)):
        for col, kind in cols.items():
            if col not in raw.columns:
                continue
            text = raw[col].str.strip()
            if kind == "str":
                vals = text.where(text != "", None)
                failed = vals.isna()
            else:
                vals = pd.to_numeric(text, errors="coerce")
                failed = vals.isna()
                if kind == "int":
                    frac = vals.notna() & (vals != np.floor(vals))
                    failed = failed | frac
                    vals = vals.where(~frac)
            if required:
                bad |= failed.to_numpy()
            out[col] = vals
    dropped = int(bad.sum())
    table = out[~bad].reset_index(drop=True)
    for col, kind in schema.required.items():
        if kind == "int":
            table[col] = table[col].astype(np.int64)
    if dropped:
        log.warning("%s: dropped %d row(s) with unparseable required fields", path, dropped)
    return table, dropped


# ---------------------------------------------------------------- splitting


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.7
    test_fraction: float = 0.3
    seed: int = 0
    stratify_on: str | None = None  # "labels", "sensitive" or "labels_sensitive"

    def __post_init__(self):
        if self.train_fraction <= 0 or self.test_fraction <= 0:
            raise DataError("split fractions must be positive")
        if abs(self.train_fraction + self.test_fraction - 1.0) > 1e-9:
            raise DataError("split fractions must sum to 1")
        if self.stratify_on not in (None, "labels", "sensitive", "labels_sensitive"):
            raise DataError(f"unknown stratify_on {self.stratify_on!r}")


def split_indices(labels, sensitive, spec: SplitSpec):
    n = len(labels)
    if n < 10:
        raise DataError(f"need at least 10 examples to split, got {n}")
    rng = np.random.default_rng(spec.seed)
    if spec.stratify_on is None:
        tr, te = random_split_indices(n, spec.test_fraction, rng)
    else:
        keys = {
            "labels": np.asarray(labels),
            "sensitive": np.asarray(sensitive),
            "labels_sensitive": 2 * np.asarray(labels) + np.asarray(sensitive),
        }[spec.stratify_on]
        tr, te = stratified_split_indices(keys, spec.test_fraction, rng)
    if len(tr) == 0 or len(te) == 0:
        raise DataError(f"split {spec} leaves an empty side")
    return tr, te


def split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Disjoint, exhaustive (train, test) partition; test size is ceil(n * test_fraction)."""
    tr, te = split_indices(dataset.labels, dataset.sensitive, spec)
    return dataset.subset(tr), dataset.subset(te)


# ---------------------------------------------------------------- shared encoding


@dataclass
class Encoder:
    """Train-fitted encoding: standardized numerics plus one-hot categoricals."""

    numeric: list[str]
    categorical: dict[str, list[str]]  # column -> known levels (incl. OTHER)
    means: dict[str, float]
    stds: dict[str, float]
    medians: dict[str, float]

    @classmethod
    def fit(cls, frame: pd.DataFrame, numeric, categorical, min_count: int = 1) -> "Encoder":
        means, stds, medians, levels = {}, {}, {}, {}
        for c in numeric:
            col = frame[c].astype(float)
            medians[c] = float(col.median())
            col = col.fillna(medians[c])
            means[c] = float(col.mean())
            sd = float(col.std(ddof=0))
            stds[c] = sd if sd > 0 else 1.0
        for c in categorical:
            counts = frame[c].fillna(MISSING).astype(str).value_counts()
            keep = sorted(k for k, v in counts.items() if v >= min_count and k != OTHER)
            levels[c] = keep + [OTHER]
        return cls(list(numeric), levels, means, stds, medians)

    @property
    def names(self) -> list[str]:
        return list(self.numeric) + [f"{c}={v}" for c, lv in self.categorical.items() for v in lv]

    def transform(self, frame: pd.DataFrame) -> np.ndarray:
        cols = []
        for c in self.numeric:
            v = frame[c].astype(float).fillna(self.medians[c]).to_numpy()
            cols.append(((v - self.means[c]) / self.stds[c])[:, None])
        for c, levels in self.categorical.items():
            v = frame[c].fillna(MISSING).astype(str).to_numpy()
            known = set(levels)
            # Unseen categories land in the explicit "other" bucket.
            v = np.where(np.isin(v, list(known)), v, OTHER)
            cols.append((v[:, None] == np.array(levels)[None, :]).astype(float))
        return np.hstack(cols) if cols else np.zeros((len(frame), 0))

    def to_dict(self) -> dict:
        return {
            "numeric": self.numeric,
            "categorical": self.categorical,
            "means": self.means,
            "stds": self.stds,
            "medians": self.medians,
        }


# ---------------------------------------------------------------- COMPAS

COMPAS_NUMERIC = ["age", "priors_count", "juv_fel_count", "juv_misd_count", "juv_other_count"]
COMPAS_CATEGORICAL = ["c_charge_degree", "sex", "c_charge_desc"]

COMPAS_SCHEMA = CsvSchema(
    required={
        "id": "str",
        "age": "float",
        "priors_count": "float",
        "juv_fel_count": "float",
        "juv_misd_count": "float",
        "juv_other_count": "float",
        "c_charge_degree": "str",
        "sex": "str",
        "race": "str",
        "is_violent_recid": "int",
    },
    optional={
        "c_charge_desc": "str",
        "two_year_recid": "int",
        "is_recid": "int",
        "days_b_screening_arrest": "float",
        "score_text": "str",
    },
)


@dataclass(frozen=True)
class CompasOptions:
    label_column: str = "two_year_recid"
    apply_filter: bool = True
    charge_desc_min_count: int = 20


def compas_filter(raw: pd.DataFrame) -> pd.DataFrame:
    """The usual screening filter for this export: screening within 30 days of
    arrest, a known recidivism outcome, no ordinary traffic offences, a score present."""
    keep = np.ones(len(raw), dtype=bool)
    if "days_b_screening_arrest" in raw:
        d = raw["days_b_screening_arrest"]
        keep &= (d >= -30).to_numpy() & (d <= 30).to_numpy()
    if "is_recid" in raw:
        keep &= (raw["is_recid"] != -1).to_numpy()
    keep &= (raw["c_charge_degree"] != "O").to_numpy()
    if "score_text" in raw:
        keep &= (raw["score_text"].fillna("N/A") != "N/A").to_numpy()
    return raw[keep].reset_index(drop=True)


def preprocess_compas(raw: pd.DataFrame, split_spec: SplitSpec,
                      options: CompasOptions = CompasOptions()) -> tuple[Dataset, Dataset]:
    """COMPAS -> (train, test).

    Y is the recidivism label, A = 1 for Black defendants, Z = 1 for violent
    recidivists (which implies Y = 1), aux group = younger than the training
    mean age.  Numeric covariates are standardized with training statistics.
    """
    if options.label_column not in raw:
        raise DataError(f"COMPAS table lacks the label column {options.label_column!r}")
    for c in ("race", "is_violent_recid", *COMPAS_NUMERIC, "c_charge_degree", "sex"):
        if c not in raw:
            raise DataError(f"COMPAS table lacks column {c!r}")
    n_raw = len(raw)
    frame = compas_filter(raw) if options.apply_filter else raw.reset_index(drop=True)
    frame = frame[frame[options.label_column].isin([0, 1])].reset_index(drop=True)
    if "c_charge_desc" not in frame:
        frame = frame.assign(c_charge_desc=MISSING)

    y = frame[options.label_column].to_numpy(dtype=int)
    a = (frame["race"] == "African-American").to_numpy(dtype=int)
    z = ((frame["is_violent_recid"].to_numpy() == 1) & (y == 1)).astype(float)
    ids = frame["id"].astype(str).to_numpy() if "id" in frame else np.arange(len(frame)).astype(str)

    tr, te = split_indices(y, a, split_spec)
    enc = Encoder.fit(frame.iloc[tr], COMPAS_NUMERIC, COMPAS_CATEGORICAL, options.charge_desc_min_count)
    x = enc.transform(frame)
    mean_age = float(frame["age"].iloc[tr].mean())
    aux = (frame["age"].to_numpy() < mean_age).astype(int)
    meta = {
        "kind": "compas",
        "raw_rows": n_raw,
        "filtered_rows": len(frame),
        "label_column": options.label_column,
        "encoder": enc.to_dict(),
        "aux_rule": f"age < {mean_age!r} (training mean)",
        "split": split_spec.__dict__,
    }
    full = Dataset(x, y, a, z[:, None], aux, ids, enc.names, ["violent_recid"], meta)
    return full.subset(tr), full.subset(te)


def load_compas(path, split_spec: SplitSpec, options: CompasOptions = CompasOptions()):
    table, dropped = load_csv(path, COMPAS_SCHEMA)
    train, test = preprocess_compas(table, split_spec, options)
    for d in (train, test):
        d.meta["dropped_unparseable"] = dropped
    return train, test


# ---------------------------------------------------------------- Heritage Health

HEALTH_SCHEMAS = {
    "members": CsvSchema({"MemberID": "str"}, {"AgeAtFirstClaim": "str", "Sex": "str"}),
    "claims": CsvSchema(
        {"MemberID": "str", "Year": "str"},
        {"PrimaryConditionGroup": "str", "CharlsonIndex": "str", "Specialty": "str",
         "PlaceSvc": "str", "ProcedureGroup": "str"},
    ),
    "labs": CsvSchema({"MemberID": "str", "Year": "str"}, {"LabCount": "str"}),
    "drugs": CsvSchema({"MemberID": "str", "Year": "str"}, {"DrugCount": "str"}),
}


def leading_int(text) -> float:
    """Leading integer of codes like "1-2", "5+", "70-79"; NaN when absent."""
    if text is None or (isinstance(text, float) and np.isnan(text)):
        return np.nan
    m = re.match(r"\s*(\d+)", str(text))
    return float(m.group(1)) if m else np.nan


def preprocess_health(raw: dict, split_spec: SplitSpec, feature_year: str = "Y1",
                      label_year: str = "Y2") -> tuple[Dataset, Dataset]:
    """Heritage Health tables -> (train, test).

    Features are per-member counts from ``feature_year`` claims (per specialty,
    place of service and procedure group) plus lab and drug counts.  Y is a
    positive Charlson index in ``label_year``; A = 1 for age 70 and over;
    Z is a one-hot of the member's most frequent primary condition group in
    ``label_year``; aux group = male.
    """
    for name in ("members", "claims"):
        if name not in raw:
            raise DataError(f"health data needs a {name!r} table")
    members = raw["members"].copy()
    claims = raw["claims"]
    age = members.get("AgeAtFirstClaim", pd.Series(np.nan, index=members.index)).map(leading_int)
    members = members.assign(_age=age)
    n0 = len(members)
    members = members[members["_age"].notna()]
    if len(members) < n0:
        log.warning("dropped %d member(s) without an age bucket", n0 - len(members))

    lab = claims[claims["Year"] == label_year]
    charlson = lab.assign(_c=lab["CharlsonIndex"].map(leading_int)).groupby("MemberID")["_c"].max()
    members = members[members["MemberID"].isin(charlson.index)].reset_index(drop=True)
    y = (charlson.reindex(members["MemberID"]).fillna(0).to_numpy() > 0).astype(int)
    a = (members["_age"].to_numpy() >= 70).astype(int)
    sex = members.get("Sex", pd.Series(MISSING, index=members.index)).fillna(MISSING)
    aux = (sex == "M").to_numpy(dtype=int)

    feat = claims[claims["Year"] == feature_year]
    parts = [feat.groupby("MemberID").size().rename("claims_count")]
    for col in ("Specialty", "PlaceSvc", "ProcedureGroup"):
        if col in feat:
            parts.append(pd.crosstab(feat["MemberID"], feat[col].fillna(MISSING)).add_prefix(f"{col}="))
    for name, col in (("labs", "LabCount"), ("drugs", "DrugCount")):
        if name in raw and col in raw[name]:
            t = raw[name]
            t = t[t["Year"] == feature_year]
            parts.append(t.assign(_v=t[col].map(leading_int)).groupby("MemberID")["_v"].sum().rename(col))
    counts = pd.concat(parts, axis=1).reindex(members["MemberID"]).fillna(0.0)
    counts.index = members.index

    pcg = lab.groupby("MemberID")["PrimaryConditionGroup"].agg(
        lambda s: s.fillna(MISSING).value_counts().sort_index().idxmax()
    )
    z_codes = pcg.reindex(members["MemberID"]).fillna(MISSING).to_numpy()
    frame = pd.concat([counts, members[["_age"]]], axis=1)

    tr, te = split_indices(y, a, split_spec)
    enc = Encoder.fit(frame.iloc[tr], list(counts.columns), [])
    x = enc.transform(frame)
    z_levels = sorted(set(z_codes[tr])) + [OTHER]
    z_codes = np.where(np.isin(z_codes, z_levels), z_codes, OTHER)
    z = (z_codes[:, None] == np.array(z_levels)[None, :]).astype(float)
    meta = {"kind": "health", "encoder": enc.to_dict(), "split": split_spec.__dict__}
    full = Dataset(x, y, a, z, aux, members["MemberID"].astype(str).to_numpy(), enc.names,
                   [f"pcg={v}" for v in z_levels], meta)
    return full.subset(tr), full.subset(te)


def load_health(directory, split_spec: SplitSpec):
    directory = Path(directory)
    files = {"members": "Members.csv", "claims": "Claims.csv", "labs": "LabCount.csv",
             "drugs": "DrugCount.csv"}
    raw = {}
    for key, fname in files.items():
        p = directory / fname
        if p.exists():
            raw[key], _ = load_csv(p, HEALTH_SCHEMAS[key])
        elif key in ("members", "claims"):
            raise DataError(f"file not found: {p}")
    return preprocess_health(raw, split_spec)


# ---------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SynthSpec:
    """Generator knobs.

    Y | A ~ Bernoulli(base_rates[A]); each feature is Gaussian with mean
    ``class_means[Y] + group_shift * A``.  With probability ``z_informativeness``
    Z reveals Y, otherwise Z is a fair coin.  The auxiliary group is an
    independent Bernoulli(aux_rate) and is appended as a feature so a model
    can condition on it.
    """

    n: int = 4000
    group_rate: float = 0.5
    base_rates: tuple[float, float] = (0.35, 0.55)
    class_means: tuple[float, float] = (-0.25, 0.25)
    group_shift: float = 0.4
    feature_dim: int = 4
    z_informativeness: float = 0.6
    aux_rate: float = 0.5

    def __post_init__(self):
        probs = [self.group_rate, *self.base_rates, self.z_informativeness, self.aux_rate]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise DataError("synthetic probabilities must lie in [0, 1]")
        if self.n < 1 or self.feature_dim < 1:
            raise DataError("n and feature_dim must be positive")


def synth_generate(spec: SynthSpec, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    n = spec.n
    a = (rng.uniform(size=n) < spec.group_rate).astype(int)
    y = (rng.uniform(size=n) < np.asarray(spec.base_rates)[a]).astype(int)
    means = np.asarray(spec.class_means)[y] + spec.group_shift * a
    x = means[:, None] + rng.standard_normal((n, spec.feature_dim))
    aux = (rng.uniform(size=n) < spec.aux_rate).astype(int)
    revealed = rng.uniform(size=n) < spec.z_informativeness
    coin = (rng.uniform(size=n) < 0.5).astype(int)
    z = np.where(revealed, y, coin)
    features = np.column_stack([x, aux])
    names = [f"x{i}" for i in range(spec.feature_dim)] + ["aux"]
    # lists, not tuples, so the meta survives a JSON round trip unchanged
    spec_dict = {k: list(v) if isinstance(v, tuple) else v for k, v in spec.__dict__.items()}
    meta = {"kind": "synthetic", "spec": spec_dict, "seed": seed}
    return Dataset(features, y, a, z[:, None].astype(float), aux, np.arange(n).astype(str),
                   names, ["z"], meta)


# ---------------------------------------------------------------- on-disk format


def save_dataset(dataset: Dataset, directory) -> None:
    """``features.csv`` (ids, features, labels, groups, Z) plus ``meta.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cols = {"example_id": dataset.example_ids.astype(str)}
    for i, name in enumerate(dataset.feature_names):
        cols[f"f:{name}"] = dataset.features[:, i]
    cols["label"] = dataset.labels
    cols["sensitive"] = dataset.sensitive
    if dataset.aux_group is not None:
        cols["aux_group"] = dataset.aux_group
    if dataset.dm_side_info is not None:
        for i, name in enumerate(dataset.side_info_names):
            cols[f"z:{name}"] = dataset.dm_side_info[:, i]
    pd.DataFrame(cols).to_csv(directory / "features.csv", index=False, float_format="%.17g",
                              lineterminator="\n")
    meta = {
        "feature_names": dataset.feature_names,
        "side_info_names": dataset.side_info_names,
        "n": len(dataset),
        "content_hash": dataset.content_hash(),
        "meta": dataset.meta,
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    for fname in ("features.csv", "meta.json"):
        if not (directory / fname).exists():
            raise DataError(f"file not found: {directory / fname}")
    meta = json.loads((directory / "meta.json").read_text())
    df = pd.read_csv(directory / "features.csv", dtype={"example_id": str},
                     float_precision="round_trip", keep_default_na=False)
    fcols = [c for c in df.columns if c.startswith("f:")]
    zcols = [c for c in df.columns if c.startswith("z:")]
    ds = Dataset(
        features=df[fcols].to_numpy(dtype=float),
        labels=df["label"].to_numpy(),
        sensitive=df["sensitive"].to_numpy(),
        dm_side_info=df[zcols].to_numpy(dtype=float) if zcols else None,
        aux_group=df["aux_group"].to_numpy() if "aux_group" in df else None,
        example_ids=df["example_id"].to_numpy(dtype=str),
        feature_names=meta["feature_names"],
        side_info_names=meta["side_info_names"],
        meta=meta["meta"],
    )
    if ds.content_hash() != meta["content_hash"]:
        raise DataError(f"{directory}: content hash mismatch after reload")
    return ds
