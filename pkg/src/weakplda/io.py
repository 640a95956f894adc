"""File formats and container types for i-vectors, metadata, labels, trials and scores.

All writers go through :func:`atomic_write`, so a crashed run never leaves a
half-written output behind. Reals are written with 17 significant digits,
which is enough for an exact float64 round trip.
"""

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np


class FormatError(ValueError):
    """A file or in-memory record violates its format contract."""


class DuplicateKeyError(FormatError):
    """The same identifier appears twice where it must be unique."""


def fmt_real(x: float) -> str:
    return format(float(x), ".17g")


def atomic_write(path, text: str) -> None:
    """Write ``text`` to ``path`` through a temp file in the same directory + rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------
# i-vectors
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class IVector:
    utt_id: str
    values: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


class IVectorSet:
    """An ordered collection of i-vectors sharing one dimension.

    Stored as an id list plus an ``(N, D)`` float64 matrix so that bulk
    operations stay vectorised; iterating yields :class:`IVector` objects.
    """

    def __init__(self, ids: Sequence[str], values):
        values = np.asarray(values, dtype=np.float64)
        ids = list(ids)
        if values.ndim != 2:
            values = values.reshape(len(ids), -1)
        if values.shape[0] != len(ids):
            raise FormatError(f"{len(ids)} ids but {values.shape[0]} vectors")
        if len(ids) and values.shape[1] < 1:
            raise FormatError("i-vector dimension must be at least 1")
        if not np.all(np.isfinite(values)):
            bad = int(np.argwhere(~np.isfinite(values))[0, 0])
            raise FormatError(f"non-finite value in i-vector {ids[bad]!r}")
        index: Dict[str, int] = {}
        for i, utt in enumerate(ids):
            if utt in index:
                raise DuplicateKeyError(f"duplicate utt_id {utt!r}")
            index[utt] = i
        self.ids = ids
        self.values = values
        self._index = index

    @classmethod
    def from_vectors(cls, vectors: Sequence[IVector]) -> "IVectorSet":
        vectors = list(vectors)
        if not vectors:
            return cls([], np.zeros((0, 0)))
        dims = {v.dim for v in vectors}
        if len(dims) != 1:
            raise FormatError(f"inconsistent i-vector dimensions: {sorted(dims)}")
        return cls([v.utt_id for v in vectors], np.stack([v.values for v in vectors]))

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[IVector]:
        for utt, row in zip(self.ids, self.values):
            yield IVector(utt, row)

    def __contains__(self, utt_id: str) -> bool:
        return utt_id in self._index

    def __getitem__(self, utt_id: str) -> IVector:
        return IVector(utt_id, self.values[self._index[utt_id]])

    def index_of(self, utt_id: str) -> int:
        return self._index[utt_id]

    def rows(self, utt_ids: Sequence[str]) -> np.ndarray:
        missing = [u for u in utt_ids if u not in self._index]
        if missing:
            raise KeyError(f"no i-vector for utt_id {missing[0]!r}")
        return self.values[[self._index[u] for u in utt_ids]]

    def subset(self, utt_ids: Sequence[str]) -> "IVectorSet":
        return IVectorSet(list(utt_ids), self.rows(utt_ids))

    def with_values(self, values: np.ndarray) -> "IVectorSet":
        return IVectorSet(self.ids, values)

    def concat(self, other: "IVectorSet") -> "IVectorSet":
        if len(self) == 0:
            return other
        if len(other) == 0:
            return self
        if self.dim != other.dim:
            raise FormatError(f"dimension mismatch: {self.dim} vs {other.dim}")
        return IVectorSet(self.ids + other.ids, np.vstack([self.values, other.values]))


def parse_ivectors(text: str, source: str = "<string>") -> IVectorSet:
    ids: List[str] = []
    rows: List[List[float]] = []
    seen: Dict[str, int] = {}
    dim = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        utt, raw = fields[0], fields[1:]
        where = f"{source}:{lineno} ({utt})"
        if not raw:
            raise FormatError(f"{where}: no values")
        try:
            vals = [float(x) for x in raw]
        except ValueError as exc:
            raise FormatError(f"{where}: {exc}") from None
        if not all(math.isfinite(v) for v in vals):
            raise FormatError(f"{where}: non-finite value")
        if dim is None:
            dim = len(vals)
        elif len(vals) != dim:
            raise FormatError(f"{where}: dimension mismatch, expected {dim} got {len(vals)}")
        if utt in seen:
            raise DuplicateKeyError(f"{where}: duplicate utt_id, first seen on line {seen[utt]}")
        seen[utt] = lineno
        ids.append(utt)
        rows.append(vals)
    if not rows:
        return IVectorSet([], np.zeros((0, 0)))
    return IVectorSet(ids, np.array(rows, dtype=np.float64))


def load_ivectors(path) -> IVectorSet:
    with open(path, encoding="utf-8") as fh:
        return parse_ivectors(fh.read(), source=os.fspath(path))


def format_ivectors(vectors: IVectorSet) -> str:
    return "".join(
        utt + " " + " ".join(fmt_real(x) for x in row) + "\n"
        for utt, row in zip(vectors.ids, vectors.values)
    )


def save_ivectors(vectors: IVectorSet, path) -> None:
    atomic_write(path, format_ivectors(vectors))


# --------------------------------------------------------------------------
# utterance metadata
# --------------------------------------------------------------------------

METADATA_COLUMNS = ("utt_id", "session_id", "local_speaker_id", "true_speaker_id")


@dataclass(frozen=True)
class UtteranceRecord:
    utt_id: str
    session_id: str
    local_speaker_id: str
    true_speaker_id: Optional[str] = None


def validate_records(records: Sequence[UtteranceRecord]) -> None:
    seen = set()
    for r in records:
        if r.utt_id in seen:
            raise DuplicateKeyError(f"duplicate utt_id {r.utt_id!r}")
        seen.add(r.utt_id)
        for name in ("session_id", "local_speaker_id"):
            value = getattr(r, name)
            if not value:
                raise FormatError(f"utterance {r.utt_id!r}: empty {name}")
            if "/" in value:
                raise FormatError(f"utterance {r.utt_id!r}: '/' not allowed in {name} ({value!r})")


def parse_metadata(text: str, source: str = "<string>") -> List[UtteranceRecord]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError(f"{source}: empty metadata file") from None
    header = [h.strip() for h in header]
    missing = [c for c in METADATA_COLUMNS if c not in header]
    if missing:
        raise FormatError(f"{source}: missing column(s) {', '.join(missing)}")
    col = {name: header.index(name) for name in METADATA_COLUMNS}
    records = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < len(header):
            row = row + [""] * (len(header) - len(row))
        truth = row[col["true_speaker_id"]]
        rec = UtteranceRecord(
            utt_id=row[col["utt_id"]],
            session_id=row[col["session_id"]],
            local_speaker_id=row[col["local_speaker_id"]],
            true_speaker_id=truth if truth else None,
        )
        if not rec.utt_id:
            raise FormatError(f"{source}:{lineno}: empty utt_id")
        records.append(rec)
    try:
        validate_records(records)
    except FormatError as exc:
        raise type(exc)(f"{source}: {exc}") from None
    return records


def load_metadata(path) -> List[UtteranceRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_metadata(fh.read(), source=os.fspath(path))


def format_metadata(records: Sequence[UtteranceRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METADATA_COLUMNS)
    for r in records:
        writer.writerow([r.utt_id, r.session_id, r.local_speaker_id, r.true_speaker_id or ""])
    return buf.getvalue()


def save_metadata(records: Sequence[UtteranceRecord], path) -> None:
    atomic_write(path, format_metadata(records))


# --------------------------------------------------------------------------
# labels (utt_id<TAB>label)
# --------------------------------------------------------------------------


def parse_labels(text: str, source: str = "<string>") -> Dict[str, str]:
    labels: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise FormatError(f"{source}:{lineno}: expected 'utt_id<TAB>label'")
        utt, label = parts
        if utt in labels:
            raise DuplicateKeyError(f"{source}:{lineno}: duplicate utt_id {utt!r}")
        labels[utt] = label
    return labels


def load_labels(path) -> Dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return parse_labels(fh.read(), source=os.fspath(path))


def format_labels(labels: Dict[str, str]) -> str:
    return "".join(f"{utt}\t{label}\n" for utt, label in labels.items())


def save_labels(labels: Dict[str, str], path) -> None:
    atomic_write(path, format_labels(labels))


# --------------------------------------------------------------------------
# labeled datasets
# --------------------------------------------------------------------------


@dataclass
class LabeledDataset:
    """Vectors plus a speaker label per utterance, in the vectors' order."""

    vectors: IVectorSet
    labels: Dict[str, str]

    def __post_init__(self):
        missing = [u for u in self.vectors.ids if u not in self.labels]
        if missing:
            raise FormatError(f"no label for utterance {missing[0]!r}")
        if len(self.labels) != len(self.vectors):
            extra = [u for u in self.labels if u not in self.vectors]
            raise FormatError(f"label without i-vector for utterance {extra[0]!r}")

    @classmethod
    def from_files(cls, vectors: IVectorSet, labels: Dict[str, str]) -> "LabeledDataset":
        """Keep only utterances present in both inputs; order follows ``vectors``."""
        keep = [u for u in vectors.ids if u in labels]
        return cls(vectors.subset(keep), {u: labels[u] for u in keep})

    @property
    def dim(self) -> int:
        return self.vectors.dim

    def __len__(self) -> int:
        return len(self.vectors)

    @property
    def speakers(self) -> List[str]:
        return sorted(set(self.labels.values()))

    def label_array(self) -> List[str]:
        return [self.labels[u] for u in self.vectors.ids]

    def with_vectors(self, vectors: IVectorSet) -> "LabeledDataset":
        return LabeledDataset(vectors, self.labels)


# --------------------------------------------------------------------------
# trials and scores
# --------------------------------------------------------------------------


@dataclass
class TrialList:
    trials: List[Tuple[str, str, bool]] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for enroll, test, _ in self.trials:
            if (enroll, test) in seen:
                raise DuplicateKeyError(f"duplicate trial ({enroll}, {test})")
            seen.add((enroll, test))

    def __len__(self) -> int:
        return len(self.trials)

    def __iter__(self):
        return iter(self.trials)

    @property
    def n_target(self) -> int:
        return sum(1 for t in self.trials if t[2])

    @property
    def n_nontarget(self) -> int:
        return len(self.trials) - self.n_target

    def utterances(self) -> List[str]:
        seen: Dict[str, None] = {}
        for enroll, test, _ in self.trials:
            seen.setdefault(enroll)
            seen.setdefault(test)
        return list(seen)


_TARGET_WORDS = {"target": True, "nontarget": False}


def _parse_flag(word: str, where: str) -> bool:
    try:
        return _TARGET_WORDS[word]
    except KeyError:
        raise FormatError(f"{where}: expected 'target' or 'nontarget', got {word!r}") from None


def parse_trials(text: str, source: str = "<string>") -> TrialList:
    trials = []
    seen = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        where = f"{source}:{lineno}"
        if len(fields) != 3:
            raise FormatError(f"{where}: expected 'enroll test target|nontarget'")
        enroll, test, word = fields
        if (enroll, test) in seen:
            raise DuplicateKeyError(f"{where}: duplicate trial ({enroll}, {test}), first on line {seen[(enroll, test)]}")
        seen[(enroll, test)] = lineno
        trials.append((enroll, test, _parse_flag(word, where)))
    return TrialList(trials)


def load_trials(path) -> TrialList:
    with open(path, encoding="utf-8") as fh:
        return parse_trials(fh.read(), source=os.fspath(path))


def format_trials(trials: TrialList) -> str:
    return "".join(f"{e} {t} {'target' if tgt else 'nontarget'}\n" for e, t, tgt in trials)


def save_trials(trials: TrialList, path) -> None:
    atomic_write(path, format_trials(trials))


@dataclass
class ScoreSet:
    """Scored trials; ``is_target`` is ``None`` for entries with unknown status."""

    entries: List[Tuple[str, str, float, Optional[bool]]] = field(default_factory=list)

    def __post_init__(self):
        for enroll, test, score, _ in self.entries:
            if not math.isfinite(score):
                raise FormatError(f"non-finite score for trial ({enroll}, {test})")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def scores(self) -> np.ndarray:
        return np.array([e[2] for e in self.entries], dtype=np.float64)

    @property
    def targets(self) -> np.ndarray:
        if any(e[3] is None for e in self.entries):
            raise FormatError("score set has entries without target flags")
        return np.array([bool(e[3]) for e in self.entries])

    def with_trials(self, trials: TrialList) -> "ScoreSet":
        """Attach target flags from ``trials`` (matched on the enroll/test pair)."""
        flags = {(e, t): tgt for e, t, tgt in trials}
        entries = []
        for enroll, test, score, _ in self.entries:
            if (enroll, test) not in flags:
                raise FormatError(f"scored pair ({enroll}, {test}) is not in the trial list")
            entries.append((enroll, test, score, flags[(enroll, test)]))
        return ScoreSet(entries)


def parse_scores(text: str, source: str = "<string>") -> ScoreSet:
    entries = []
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        where = f"{source}:{lineno}"
        if len(fields) not in (3, 4):
            raise FormatError(f"{where}: expected 'enroll test score [target|nontarget]'")
        enroll, test = fields[0], fields[1]
        try:
            score = float(fields[2])
        except ValueError:
            raise FormatError(f"{where}: bad score {fields[2]!r}") from None
        if not math.isfinite(score):
            raise FormatError(f"{where}: non-finite score")
        if (enroll, test) in seen:
            raise DuplicateKeyError(f"{where}: duplicate trial ({enroll}, {test})")
        seen.add((enroll, test))
        flag = _parse_flag(fields[3], where) if len(fields) == 4 else None
        entries.append((enroll, test, score, flag))
    return ScoreSet(entries)


def load_scores(path) -> ScoreSet:
    with open(path, encoding="utf-8") as fh:
        return parse_scores(fh.read(), source=os.fspath(path))


def format_scores(scores: ScoreSet, with_flags: bool = False) -> str:
    lines = []
    for enroll, test, score, flag in scores.entries:
        line = f"{enroll} {test} {fmt_real(score)}"
        if with_flags and flag is not None:
            line += " target" if flag else " nontarget"
        lines.append(line + "\n")
    return "".join(lines)


def save_scores(scores: ScoreSet, path, with_flags: bool = False) -> None:
    atomic_write(path, format_scores(scores, with_flags=with_flags))


# --------------------------------------------------------------------------
# JSON helpers shared by the model file and reports
# --------------------------------------------------------------------------


def dumps_json(obj, indent: int = 1) -> str:
    """JSON with every float written as 17 significant digits.

    ``json`` itself emits the shortest repr, which round-trips but does not
    follow the fixed-precision contract, so floats are rendered here.
    """

    def render(o, level):
        pad = " " * (indent * (level + 1))
        end = " " * (indent * level)
        if isinstance(o, dict):
            if not o:
                return "{}"
            items = [f"{pad}{json.dumps(str(k))}: {render(v, level + 1)}" for k, v in o.items()]
            return "{\n" + ",\n".join(items) + "\n" + end + "}"
        if isinstance(o, np.ndarray):
            o = o.tolist()
        if isinstance(o, (list, tuple)):
            if all(not isinstance(x, (list, tuple, dict, np.ndarray)) for x in o):
                return "[" + ", ".join(render(x, level + 1) for x in o) + "]"
            items = [pad + render(x, level + 1) for x in o]
            return "[\n" + ",\n".join(items) + "\n" + end + "]"
        if isinstance(o, (bool, np.bool_)):
            return "true" if o else "false"
        if isinstance(o, (int, np.integer)):
            return str(int(o))
        if isinstance(o, (float, np.floating)):
            if not math.isfinite(o):
                raise FormatError(f"cannot serialize non-finite real {o!r}")
            return fmt_real(o)
        if o is None:
            return "null"
        return json.dumps(o)

    return render(obj, 0) + "\n"
