"""Column schemas, CSV ingestion, encoding, discretization, and stratification.

A Schema binds every column of a delimited file to a statistical type and an
encoding: continuous columns are affinely mapped from modeller-supplied bounds
onto [0, 1]; binary and categorical columns become indices into a declared
label list.  Bounds and label lists are public modeller inputs — they are
never computed from the data, because data-derived metadata would leak.

Structural rules express deterministic domain knowledge ("alive subjects have
no cause of death"): under a stratum condition, a feature is dropped from the
model and reconstructed at synthesis time, either as a fixed value (force), a
schema-declared neutral value (exclude), or an affine function of another
feature (derive).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

logger = logging.getLogger(__name__)

CONTINUOUS = "continuous"
BINARY = "binary"
CATEGORICAL = "categorical"
_KINDS = (CONTINUOUS, BINARY, CATEGORICAL)


class SchemaError(ValueError):
    """Schema declaration or data/schema mismatch."""


class ArtifactFormatError(ValueError):
    """A serialized artifact is not a recognized format/version."""


class RowError(ValueError):
    """A specific data row failed to parse; carries the 0-based row index."""

    def __init__(self, row_index: int, message: str) -> None:
        super().__init__(f"row {row_index}: {message}")
        self.row_index = row_index


@dataclass(frozen=True)
class FeatureSpec:
    """One column: its statistical type and encoding metadata.

    bounds are required for continuous features and must be chosen without
    looking at the private data.  neutral, when set, is the raw value used to
    fill this feature in strata where a structural rule excludes it.
    """

    name: str
    kind: str
    categories: tuple[str, ...] | None = None
    bounds: tuple[float, float] | None = None
    bins: int | None = None
    neutral: object | None = None

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise SchemaError(f"{self.name}: unknown kind {self.kind!r}")
        if self.kind == CONTINUOUS:
            if self.bounds is None:
                raise SchemaError(f"{self.name}: continuous feature needs bounds")
            lo, hi = self.bounds
            if not lo < hi:
                raise SchemaError(f"{self.name}: bounds must satisfy min < max")
            if self.categories is not None:
                raise SchemaError(f"{self.name}: continuous feature cannot list categories")
        else:
            if self.categories is None:
                raise SchemaError(f"{self.name}: discrete feature needs categories")
            if len(set(self.categories)) != len(self.categories):
                raise SchemaError(f"{self.name}: duplicate category labels")
            if self.kind == BINARY and len(self.categories) != 2:
                raise SchemaError(f"{self.name}: binary feature needs exactly 2 categories")
            if self.kind == CATEGORICAL and len(self.categories) < 2:
                raise SchemaError(f"{self.name}: categorical feature needs >= 2 categories")
            if self.bounds is not None:
                raise SchemaError(f"{self.name}: discrete feature cannot carry bounds")
        if self.bins is not None:
            if self.kind != CONTINUOUS:
                raise SchemaError(f"{self.name}: bins only apply to continuous features")
            if self.bins < 2:
                raise SchemaError(f"{self.name}: bins must be >= 2")

    @property
    def cardinality(self) -> int:
        if self.kind == CONTINUOUS:
            raise SchemaError(f"{self.name}: continuous feature has no cardinality")
        return len(self.categories)

    def encode(self, raw: str) -> float:
        """Raw cell text -> encoded value ([0,1] continuous, index discrete).

        Out-of-bounds continuous values are clamped (deterministic,
        data-independent rule); unknown labels raise.
        """
        if self.kind == CONTINUOUS:
            value = float(raw)
            lo, hi = self.bounds
            clamped = min(max(value, lo), hi)
            return (clamped - lo) / (hi - lo)
        try:
            return float(self.categories.index(raw))
        except ValueError:
            raise SchemaError(
                f"{self.name}: label {raw!r} not among declared categories"
            ) from None

    def decode(self, encoded: float):
        """Inverse of encode: data units for continuous, label for discrete."""
        if self.kind == CONTINUOUS:
            lo, hi = self.bounds
            return lo + float(encoded) * (hi - lo)
        return self.categories[int(round(encoded))]

    def neutral_encoded(self) -> float:
        """Encoded fill value for strata where this feature is excluded."""
        if self.neutral is not None:
            return self.encode(str(self.neutral))
        return 0.0


@dataclass(frozen=True)
class StructuralRule:
    """Deterministic consequence of a stratum condition.

    when: {feature: raw value} — all conditions are on stratification features.
    exclude: features dropped from the stratum model, filled with their
        neutral value at synthesis.
    force: {feature: raw value} — dropped from the model, set to the value.
    derive: {feature: {source, scale, offset}} — dropped from the model,
        reconstructed as offset + scale * source (in data units).
    """

    when: tuple[tuple[str, str], ...]
    exclude: tuple[str, ...] = ()
    force: tuple[tuple[str, str], ...] = ()
    derive: tuple[tuple[str, tuple[str, float, float]], ...] = ()

    def matches(self, stratum: dict[str, str]) -> bool:
        return all(stratum.get(f) == v for f, v in self.when)

    def dropped_features(self) -> set[str]:
        return (
            set(self.exclude)
            | {f for f, _ in self.force}
            | {f for f, _ in self.derive}
        )


@dataclass(frozen=True)
class Schema:
    features: tuple[FeatureSpec, ...]
    stratify_by: tuple[str, ...] = ()
    structural_rules: tuple[StructuralRule, ...] = ()
    delimiter: str = ","

    def __post_init__(self) -> None:
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate feature names")
        by_name = {f.name: f for f in self.features}
        for name in self.stratify_by:
            spec = by_name.get(name)
            if spec is None:
                raise SchemaError(f"stratify_by names unknown feature {name!r}")
            if spec.kind == CONTINUOUS:
                raise SchemaError(f"stratify_by feature {name!r} must be discrete")
        for rule in self.structural_rules:
            for cond_feature, cond_value in rule.when:
                if cond_feature not in by_name:
                    raise SchemaError(f"rule condition names unknown feature {cond_feature!r}")
                if cond_feature not in self.stratify_by:
                    raise SchemaError(
                        f"rule condition on {cond_feature!r} requires it in stratify_by"
                    )
                if cond_value not in by_name[cond_feature].categories:
                    raise SchemaError(
                        f"rule condition value {cond_value!r} not a category of {cond_feature!r}"
                    )
            seen: set[str] = set()
            for name in rule.dropped_features():
                if name not in by_name:
                    raise SchemaError(f"rule references unknown feature {name!r}")
                if name in self.stratify_by:
                    raise SchemaError(f"rule cannot drop stratification feature {name!r}")
            for group in (rule.exclude, [f for f, _ in rule.force], [f for f, _ in rule.derive]):
                for name in group:
                    if name in seen:
                        raise SchemaError(
                            f"rule both excludes and forces/derives feature {name!r}"
                        )
                    seen.add(name)
            for name, (source, _, _) in rule.derive:
                if source not in by_name:
                    raise SchemaError(f"derive source {source!r} unknown")
                if by_name[name].kind != CONTINUOUS or by_name[source].kind != CONTINUOUS:
                    raise SchemaError("derive only supported between continuous features")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.features)

    def feature(self, name: str) -> FeatureSpec:
        for f in self.features:
            if f.name == name:
                return f
        raise SchemaError(f"unknown feature {name!r}")

    def index_of(self, name: str) -> int:
        for i, f in enumerate(self.features):
            if f.name == name:
                return i
        raise SchemaError(f"unknown feature {name!r}")

    def subset(self, keep: list[str]) -> "Schema":
        """Sub-schema over the named features, dropping stratification/rules."""
        kept = tuple(f for f in self.features if f.name in keep)
        return Schema(features=kept, delimiter=self.delimiter)

    def rules_for(self, stratum: dict[str, str]) -> list[StructuralRule]:
        return [r for r in self.structural_rules if r.matches(stratum)]


@dataclass(frozen=True)
class Dataset:
    """Encoded design matrix plus the schema describing its columns.

    rows[i, j] is the encoded value of feature schema.features[j] for record
    i: a float in [0, 1] for continuous features, a category index for
    discrete ones.  The array is frozen after construction and may be shared
    read-only across threads.
    """

    schema: Schema
    rows: np.ndarray

    def __post_init__(self) -> None:
        rows = np.asarray(self.rows, dtype=float)
        if rows.ndim != 2:
            raise SchemaError("rows must be a 2-D matrix")
        if rows.shape[1] != len(self.schema.features):
            raise SchemaError(
                f"row width {rows.shape[1]} != feature count {len(self.schema.features)}"
            )
        for j, spec in enumerate(self.schema.features):
            col = rows[:, j]
            if spec.kind == CONTINUOUS:
                if col.size and (col.min() < 0.0 or col.max() > 1.0):
                    raise SchemaError(f"{spec.name}: encoded values outside [0, 1]")
            else:
                if col.size and not np.array_equal(col, np.round(col)):
                    raise SchemaError(f"{spec.name}: non-integer category index")
                if col.size and (col.min() < 0 or col.max() >= spec.cardinality):
                    raise SchemaError(f"{spec.name}: category index out of range")
        rows = rows.copy()
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def width(self) -> int:
        return self.rows.shape[1]

    def column(self, name: str) -> np.ndarray:
        return self.rows[:, self.schema.index_of(name)]

    def decoded_rows(self) -> list[list]:
        out = []
        for i in range(self.n):
            out.append(
                [spec.decode(self.rows[i, j]) for j, spec in enumerate(self.schema.features)]
            )
        return out


def load_csv(path: str, schema: Schema) -> Dataset:
    """Read a delimited file and encode it under the schema.

    The header must name every schema feature; extra columns are ignored.
    Continuous values outside the declared bounds are clamped and counted in
    a log line.  Missing values are rejected — there is no imputation.
    """
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle, delimiter=schema.delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        positions = {}
        for spec in schema.features:
            if spec.name not in header:
                raise SchemaError(f"{path}: missing column {spec.name!r}")
            positions[spec.name] = header.index(spec.name)

        encoded: list[list[float]] = []
        clamped = 0
        for i, cells in enumerate(reader):
            if not cells:
                continue
            row = []
            for spec in schema.features:
                pos = positions[spec.name]
                if pos >= len(cells):
                    raise RowError(i, f"short row, no cell for {spec.name!r}")
                cell = cells[pos].strip()
                if cell == "":
                    raise RowError(i, f"missing value for {spec.name!r}")
                if spec.kind == CONTINUOUS:
                    try:
                        value = float(cell)
                    except ValueError:
                        raise RowError(i, f"unparseable cell {cell!r} for {spec.name!r}") from None
                    lo, hi = spec.bounds
                    if value < lo or value > hi:
                        clamped += 1
                    row.append(spec.encode(cell))
                else:
                    row.append(spec.encode(cell))
            encoded.append(row)
    if not encoded:
        raise SchemaError(f"{path}: no data rows")
    if clamped:
        logger.warning("%s: clamped %d out-of-bounds continuous values", path, clamped)
    return Dataset(schema=schema, rows=np.array(encoded, dtype=float))


def write_csv(path: str, ds: Dataset) -> None:
    """Write a dataset back to delimited text in original data units."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, delimiter=ds.schema.delimiter)
        writer.writerow(ds.schema.names)
        for row in ds.decoded_rows():
            writer.writerow(row)


def discretize(ds: Dataset, feature: str, bins: int | None = None) -> Dataset:
    """Replace a continuous feature by equal-width bins over [0, 1].

    Bin b covers [b/bins, (b+1)/bins); the last bin is closed at 1.  The
    replacement feature is categorical with labels "bin_00", "bin_01", ...
    """
    spec = ds.schema.feature(feature)
    if spec.kind != CONTINUOUS:
        raise SchemaError(f"{feature}: only continuous features can be discretized")
    if bins is None:
        bins = spec.bins
    if bins is None or bins < 2:
        raise SchemaError(f"{feature}: need bins >= 2")
    j = ds.schema.index_of(feature)
    idx = np.minimum(np.floor(ds.rows[:, j] * bins), bins - 1).astype(int)
    labels = tuple(f"bin_{b:02d}" for b in range(bins))
    new_spec = FeatureSpec(name=feature, kind=CATEGORICAL, categories=labels)
    features = list(ds.schema.features)
    features[j] = new_spec
    new_schema = replace(ds.schema, features=tuple(features))
    rows = ds.rows.copy()
    rows[:, j] = idx
    return Dataset(schema=new_schema, rows=rows)


@dataclass(frozen=True)
class Stratum:
    """One cell of the stratification: its key, sub-dataset, and layout."""

    key: tuple[str, ...]
    dataset: Dataset
    dropped: tuple[str, ...]

    @property
    def empty(self) -> bool:
        return self.dataset.n == 0

    def key_values(self, schema: Schema) -> dict[str, str]:
        return dict(zip(schema.stratify_by, self.key))


def stratum_keys(schema: Schema) -> list[tuple[str, ...]]:
    """Full product of stratification categories, in declaration order."""
    if not schema.stratify_by:
        return [()]
    keys: list[tuple[str, ...]] = [()]
    for name in schema.stratify_by:
        spec = schema.feature(name)
        keys = [key + (label,) for key in keys for label in spec.categories]
    return keys


def stratum_feature_names(schema: Schema, key: tuple[str, ...]) -> list[str]:
    """Features modelled inside the stratum: everything not keyed or rule-dropped."""
    stratum_values = dict(zip(schema.stratify_by, key))
    dropped = set(schema.stratify_by)
    for rule in schema.rules_for(stratum_values):
        dropped |= rule.dropped_features()
    return [f.name for f in schema.features if f.name not in dropped]


def split_strata(ds: Dataset, full_product: bool = False) -> list[Stratum]:
    """Partition by stratification value combinations.

    Within each stratum the stratification columns themselves and every
    feature dropped by a matching structural rule are removed — those values
    are deterministic given the stratum key.  By default only observed
    combinations are returned; with full_product=True every combination in
    the category product appears, and cells with no rows come back as
    flagged-empty strata rather than errors.

    With stratify_by empty, returns a single stratum identical to the input.
    """
    schema = ds.schema
    if not schema.stratify_by:
        return [Stratum(key=(), dataset=ds, dropped=())]

    strat_idx = [schema.index_of(name) for name in schema.stratify_by]
    strat_specs = [schema.feature(name) for name in schema.stratify_by]
    codes = ds.rows[:, strat_idx].astype(int)

    strata = []
    for labels in stratum_keys(schema):
        combo = np.array(
            [spec.categories.index(lab) for spec, lab in zip(strat_specs, labels)]
        )
        mask = np.all(codes == combo, axis=1)
        if not full_product and not mask.any():
            continue
        keep = stratum_feature_names(schema, labels)
        keep_idx = [schema.index_of(name) for name in keep]
        sub_rows = ds.rows[mask][:, keep_idx] if keep_idx else ds.rows[mask][:, :0]
        if not mask.any():
            logger.warning("stratum %s has zero rows; retained as empty", labels)
        strata.append(
            Stratum(
                key=labels,
                dataset=Dataset(schema=schema.subset(keep), rows=sub_rows),
                dropped=tuple(sorted(set(schema.names) - set(keep) - set(schema.stratify_by))),
            )
        )
    return strata


def load_schema(path: str) -> Schema:
    """Parse the declarative YAML schema file.

    Grammar (see README for the full reference):

        delimiter: ","            # optional
        features:
          - name: age
            kind: continuous
            bounds: [18, 90]
            bins: 16              # optional, continuous only
          - name: gender
            kind: binary
            categories: [female, male]
          - name: meds
            kind: categorical
            categories: [none, insulin, oad, both]
            neutral: none         # optional fill for excluded strata
        stratify_by: [gender, dead]
        structural_rules:
          - when: {dead: alive}
            force: {ard_death: "no"}
            exclude: [followup_years]
            derive:
              followup_years: {source: start_year, scale: -1.0, offset: 2013.0}
    """
    with open(path, encoding="utf-8") as handle:
        raw = yaml.safe_load(handle)
    if not isinstance(raw, dict) or "features" not in raw:
        raise SchemaError(f"{path}: schema file must define 'features'")
    return schema_from_dict(raw)


def schema_to_dict(schema: Schema) -> dict:
    """Inverse of schema_from_dict, for embedding schemas in artifacts."""
    features = []
    for f in schema.features:
        item: dict = {"name": f.name, "kind": f.kind}
        if f.categories is not None:
            item["categories"] = list(f.categories)
        if f.bounds is not None:
            item["bounds"] = [f.bounds[0], f.bounds[1]]
        if f.bins is not None:
            item["bins"] = f.bins
        if f.neutral is not None:
            item["neutral"] = f.neutral
        features.append(item)
    rules = []
    for r in schema.structural_rules:
        rules.append(
            {
                "when": dict(r.when),
                "exclude": list(r.exclude),
                "force": dict(r.force),
                "derive": {
                    name: {"source": src, "scale": scale, "offset": offset}
                    for name, (src, scale, offset) in r.derive
                },
            }
        )
    return {
        "features": features,
        "stratify_by": list(schema.stratify_by),
        "structural_rules": rules,
        "delimiter": schema.delimiter,
    }


def schema_from_dict(raw: dict) -> Schema:
    features = []
    for item in raw["features"]:
        try:
            features.append(
                FeatureSpec(
                    name=str(item["name"]),
                    kind=str(item["kind"]),
                    categories=(
                        tuple(str(c) for c in item["categories"])
                        if "categories" in item
                        else None
                    ),
                    bounds=(
                        (float(item["bounds"][0]), float(item["bounds"][1]))
                        if "bounds" in item
                        else None
                    ),
                    bins=int(item["bins"]) if "bins" in item else None,
                    neutral=item.get("neutral"),
                )
            )
        except KeyError as exc:
            raise SchemaError(f"feature entry missing key {exc}") from None
    rules = []
    for item in raw.get("structural_rules", []):
        when = tuple(sorted((str(k), str(v)) for k, v in item.get("when", {}).items()))
        if not when:
            raise SchemaError("structural rule needs a 'when' condition")
        derive = tuple(
            (
                str(name),
                (str(d["source"]), float(d.get("scale", 1.0)), float(d.get("offset", 0.0))),
            )
            for name, d in item.get("derive", {}).items()
        )
        rules.append(
            StructuralRule(
                when=when,
                exclude=tuple(str(x) for x in item.get("exclude", [])),
                force=tuple(sorted((str(k), str(v)) for k, v in item.get("force", {}).items())),
                derive=derive,
            )
        )
    return Schema(
        features=tuple(features),
        stratify_by=tuple(str(s) for s in raw.get("stratify_by", [])),
        structural_rules=tuple(rules),
        delimiter=str(raw.get("delimiter", ",")),
    )
