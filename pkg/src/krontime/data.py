"""Dataset loading: UEA ``.ts`` files, z-normalisation, synthetic generators.

Supported ``.ts`` subset: equal-length series, no timestamps, no missing
values, class labels declared with ``@classLabel true <labels...>``. Class
indices follow declaration order.
"""

import os
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

DATA_ROOT_ENV = "KRONTIME_DATA"

_BOOL_DIRECTIVES = ("timestamps", "missing", "univariate", "equallength")
_INT_DIRECTIVES = ("dimensions", "serieslength")
_IGNORED_DIRECTIVES = ("targetlabel",)


class TsParseError(ValueError):
    """Malformed ``.ts`` input; carries the 1-based file line when known."""

    def __init__(self, message, line=None, data_row=None, column=None, source="<string>"):
        self.line = line
        self.data_row = data_row
        self.column = column
        self.source = source
        where = source
        if line is not None:
            where += f", line {line}"
        if data_row is not None:
            where += f" (data line {data_row})"
        if column is not None:
            where += f", {column}"
        super().__init__(f"{where}: {message}")


class TsFormatWarning(UserWarning):
    pass


@dataclass
class TsHeader:
    problem_name: str = ""
    univariate: bool | None = None
    timestamps: bool = False
    missing: bool = False
    equal_length: bool | None = None
    series_length: int | None = None
    dimensions: int | None = None
    class_labels: list = field(default_factory=list)


@dataclass
class TimeSeriesDataset:
    """Equal-length labelled series: ``X`` is ``(n, channels, length)``."""

    X: np.ndarray
    y: np.ndarray
    class_names: list
    problem_name: str = ""

    def __post_init__(self):
        self.X = np.asarray(self.X)
        if self.X.dtype.kind != "f":
            self.X = self.X.astype(np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 3:
            raise ValueError(f"X must be (n, channels, length), got {self.X.shape}")
        if len(self.X) != len(self.y):
            raise ValueError("X and y disagree on the number of instances")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= len(self.class_names)):
            raise ValueError("labels out of range for the class vocabulary")

    def __len__(self):
        return len(self.y)

    @property
    def n_channels(self):
        return self.X.shape[1]

    @property
    def series_len(self):
        return self.X.shape[2]

    @property
    def n_classes(self):
        return len(self.class_names)

    @property
    def equal_length(self):
        return True

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, X=self.X[idx], y=self.y[idx])

    def __eq__(self, other):
        if not isinstance(other, TimeSeriesDataset):
            return NotImplemented
        return (
            self.problem_name == other.problem_name
            and list(self.class_names) == list(other.class_names)
            and self.X.shape == other.X.shape
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
        )


def _parse_bool(value, line, source):
    v = value.strip().lower()
    if v in ("true", "false"):
        return v == "true"
    raise TsParseError(f"expected true/false, got {value!r}", line=line, source=source)


def _parse_header_line(header, key, rest, lineno, source):
    if key == "problemname":
        header.problem_name = rest.strip()
    elif key in _BOOL_DIRECTIVES:
        val = _parse_bool(rest, lineno, source)
        attr = {"equallength": "equal_length"}.get(key, key)
        setattr(header, attr, val)
    elif key in _INT_DIRECTIVES:
        try:
            val = int(rest.strip())
        except ValueError:
            raise TsParseError(f"@{key} expects an integer", line=lineno, source=source) from None
        setattr(header, {"serieslength": "series_length"}.get(key, key), val)
    elif key == "classlabel":
        tokens = rest.split()
        if not tokens:
            raise TsParseError("@classLabel needs true/false", line=lineno, source=source)
        if not _parse_bool(tokens[0], lineno, source):
            raise TsParseError("unlabelled files are not supported", line=lineno, source=source)
        if len(tokens) < 2:
            raise TsParseError("@classLabel true declares no labels", line=lineno, source=source)
        if len(set(tokens[1:])) != len(tokens) - 1:
            raise TsParseError("duplicate class label declared", line=lineno, source=source)
        header.class_labels = tokens[1:]
    elif key in _IGNORED_DIRECTIVES:
        raise TsParseError(f"@{key} (regression targets) is not supported", line=lineno, source=source)
    else:
        warnings.warn(f"{source}, line {lineno}: ignoring unknown directive @{key}", TsFormatWarning)


def _parse_data_line(text, lineno, row, header, source):
    parts = text.split(":")
    if len(parts) < 2:
        raise TsParseError("expected channels followed by ':label'", line=lineno, data_row=row, source=source)
    label = parts[-1].strip()
    channels = []
    for c, chunk in enumerate(parts[:-1], start=1):
        values = []
        for j, tok in enumerate(chunk.split(","), start=1):
            tok = tok.strip()
            if tok == "?":
                raise TsParseError(
                    "missing values are not supported", line=lineno, data_row=row,
                    column=f"channel {c}, value {j}", source=source,
                )
            try:
                values.append(float(tok))
            except ValueError:
                raise TsParseError(
                    f"non-numeric value {tok!r}", line=lineno, data_row=row,
                    column=f"channel {c}, value {j}", source=source,
                ) from None
            if not np.isfinite(values[-1]):
                raise TsParseError(
                    f"non-finite value {tok!r}", line=lineno, data_row=row,
                    column=f"channel {c}, value {j}", source=source,
                )
        channels.append(values)
    if label not in header.class_labels:
        raise TsParseError(f"label {label!r} is not declared in @classLabel", line=lineno, data_row=row, source=source)
    return channels, header.class_labels.index(label)


def parse_ts(text, source="<string>"):
    """Parse ``.ts`` file contents into a :class:`TimeSeriesDataset`."""
    header = TsHeader()
    seen_data = False
    series, labels = [], []
    n_channels = length = None
    row = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if not seen_data:
            if not line.startswith("@"):
                raise TsParseError("data before @data marker", line=lineno, source=source)
            key, *rest = line[1:].split(None, 1)
            key = key.lower()
            rest = rest[0] if rest else ""
            if key == "data":
                seen_data = True
                if header.timestamps:
                    raise TsParseError("timestamped series are not supported", line=lineno, source=source)
                if not header.class_labels:
                    raise TsParseError("no @classLabel declaration before @data", line=lineno, source=source)
                continue
            _parse_header_line(header, key, rest, lineno, source)
            continue

        row += 1
        channels, label = _parse_data_line(line, lineno, row, header, source)
        if n_channels is None:
            n_channels = len(channels)
            length = len(channels[0])
        if len(channels) != n_channels:
            raise TsParseError(
                f"{len(channels)} channels, earlier lines have {n_channels}",
                line=lineno, data_row=row, source=source,
            )
        for c, values in enumerate(channels, start=1):
            if len(values) != length:
                raise TsParseError(
                    f"series length {len(values)} differs from {length}; unequal lengths are not supported",
                    line=lineno, data_row=row, column=f"channel {c}", source=source,
                )
        series.append(channels)
        labels.append(label)

    if not seen_data:
        raise TsParseError("missing @data marker", source=source)
    if not series:
        raise TsParseError("no instances after @data", source=source)
    if header.univariate and n_channels != 1:
        raise TsParseError(f"@univariate true but instances have {n_channels} channels", source=source)
    if header.dimensions is not None and header.dimensions != n_channels:
        raise TsParseError(f"@dimensions {header.dimensions} but instances have {n_channels}", source=source)
    if header.series_length is not None and header.series_length != length:
        raise TsParseError(f"@seriesLength {header.series_length} but instances have {length}", source=source)

    return TimeSeriesDataset(
        X=np.array(series, dtype=np.float64),
        y=np.array(labels, dtype=np.int64),
        class_names=list(header.class_labels),
        problem_name=header.problem_name,
    )


def load_ts(path):
    path = Path(path)
    return parse_ts(path.read_text(encoding="utf-8"), source=str(path))


def serialize_ts(ds):
    """Canonical ``.ts`` text for a dataset; ``parse_ts`` reads it back exactly."""
    lines = [
        f"@problemName {ds.problem_name or 'unnamed'}",
        "@timeStamps false",
        "@missing false",
        f"@univariate {'true' if ds.n_channels == 1 else 'false'}",
        f"@dimensions {ds.n_channels}",
        "@equalLength true",
        f"@seriesLength {ds.series_len}",
        "@classLabel true " + " ".join(ds.class_names),
        "@data",
    ]
    for x, label in zip(ds.X, ds.y):
        chans = [",".join(repr(float(v)) for v in channel) for channel in x]
        lines.append(":".join(chans) + ":" + ds.class_names[label])
    return "\n".join(lines) + "\n"


def merge(a, b):
    """Concatenate two splits of the same problem (e.g. TRAIN and TEST)."""
    if list(a.class_names) != list(b.class_names):
        raise ValueError("cannot merge datasets with different class vocabularies")
    if a.X.shape[1:] != b.X.shape[1:]:
        raise ValueError("cannot merge datasets with different series shapes")
    return TimeSeriesDataset(
        X=np.concatenate([a.X, b.X]),
        y=np.concatenate([a.y, b.y]),
        class_names=list(a.class_names),
        problem_name=a.problem_name,
    )


def data_root(root=None):
    root = root or os.environ.get(DATA_ROOT_ENV)
    return Path(root) if root else None


def uea_paths(problem, root=None):
    base = data_root(root)
    if base is None:
        return None
    return [base / problem / f"{problem}_{split}.ts" for split in ("TRAIN", "TEST")]


def load_uea(problem, root=None):
    """Load ``<root>/<problem>/<problem>_{TRAIN,TEST}.ts`` merged into one set."""
    paths = uea_paths(problem, root)
    if paths is None:
        raise FileNotFoundError(f"no dataset root given and ${DATA_ROOT_ENV} is unset")
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise FileNotFoundError(f"missing UEA files: {', '.join(missing)}")
    train, test = (load_ts(p) for p in paths)
    return merge(train, test)


def z_normalize(ds, eps=1e-8):
    """Per-instance, per-channel zero mean and unit population std.

    Channels whose std is below ``eps`` become all zeros.
    """
    X = ds.X
    mu = X.mean(axis=-1, keepdims=True)
    sd = X.std(axis=-1, keepdims=True)
    flat = sd < eps
    Z = np.where(flat, 0.0, (X - mu) / np.where(flat, 1.0, sd))
    return replace(ds, X=Z.astype(X.dtype))


SYNTHETIC_KINDS = ("two-freq", "burst-position")


def _balanced_labels(n_samples, n_classes, rng):
    y = np.arange(n_samples) % n_classes
    rng.shuffle(y)
    return y


def gen_synthetic(kind, n_samples, length, noise=0.0, seed=0, n_classes=2,
                  freqs=(1 / 16, 1 / 8)):
    """Seeded synthetic classification sets.

    ``two-freq``: unit sine with random phase at ``freqs[label]`` cycles per
    sample, plus Gaussian noise.
    ``burst-position``: noise plus one windowed transient whose centre lies in
    segment ``label`` of ``n_classes`` equal segments.
    """
    if kind not in SYNTHETIC_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {SYNTHETIC_KINDS}")
    rng = np.random.default_rng(seed)
    t = np.arange(length, dtype=np.float64)
    if kind == "two-freq":
        if n_classes != 2 or len(freqs) != 2:
            raise ValueError("two-freq has exactly two classes")
        y = _balanced_labels(n_samples, 2, rng)
        phase = rng.uniform(0, 2 * np.pi, size=n_samples)
        f = np.asarray(freqs)[y]
        X = np.sin(2 * np.pi * f[:, None] * t[None, :] + phase[:, None])
        names = ["low", "high"]
    else:
        y = _balanced_labels(n_samples, n_classes, rng)
        seg = length / n_classes
        width = max(length / 64, 1.0)
        lo = y * seg + 2 * width
        hi = (y + 1) * seg - 2 * width
        centre = lo + rng.uniform(0, 1, size=n_samples) * np.maximum(hi - lo, 0)
        env = np.exp(-0.5 * ((t[None, :] - centre[:, None]) / width) ** 2)
        X = 3.0 * env * np.sin(2 * np.pi * t[None, :] / max(width, 2.0))
        names = [f"seg{c}" for c in range(n_classes)]
    X = X + noise * rng.normal(size=X.shape)
    return TimeSeriesDataset(X=X[:, None, :], y=y, class_names=names, problem_name=kind)
