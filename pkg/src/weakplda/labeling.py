"""Weak speaker labels from session metadata, pooling, and label-quality statistics."""

from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

from .io import FormatError, LabeledDataset, UtteranceRecord, validate_records

SEPARATOR = "/"


@dataclass(frozen=True)
class WeakLabeling:
    labels: Dict[str, str]

    @property
    def n_speakers(self) -> int:
        return len(set(self.labels.values()))


@dataclass(frozen=True)
class LabelQualityReport:
    n_weak_speakers: int
    n_true_speakers: int
    split_rate: float
    purity: float

    def to_dict(self) -> dict:
        return {
            "n_weak_speakers": self.n_weak_speakers,
            "n_true_speakers": self.n_true_speakers,
            "split_rate": self.split_rate,
            "purity": self.purity,
        }


def weak_label(session_id: str, local_speaker_id: str) -> str:
    return session_id + SEPARATOR + local_speaker_id


def derive_weak_labels(records: Iterable[UtteranceRecord]) -> WeakLabeling:
    """Label each utterance by its (session, local speaker) pair.

    Output is keyed in sorted utt_id order so that the result does not
    depend on record order.
    """
    records = list(records)
    validate_records(records)
    labels = {r.utt_id: weak_label(r.session_id, r.local_speaker_id) for r in records}
    return WeakLabeling({u: labels[u] for u in sorted(labels)})


def true_labels(records: Iterable[UtteranceRecord]) -> Dict[str, str]:
    """Ground-truth labels; every record must carry a true speaker."""
    records = list(records)
    missing = [r.utt_id for r in records if r.true_speaker_id is None]
    if missing:
        raise FormatError(f"no true speaker for {len(missing)} utterance(s): {', '.join(missing[:10])}")
    return {r.utt_id: r.true_speaker_id for r in sorted(records, key=lambda r: r.utt_id)}


def quality_report(weak: WeakLabeling, records: Sequence[UtteranceRecord]) -> LabelQualityReport:
    truth = {r.utt_id: r.true_speaker_id for r in records}
    missing = sorted(u for u in weak.labels if truth.get(u) is None)
    if missing:
        raise FormatError(f"no true speaker for {len(missing)} utterance(s): {', '.join(missing[:10])}")

    weak_to_true: Dict[str, set] = defaultdict(set)
    true_to_weak: Dict[str, set] = defaultdict(set)
    for utt, label in weak.labels.items():
        weak_to_true[label].add(truth[utt])
        true_to_weak[truth[utt]].add(label)

    n_weak = len(weak_to_true)
    n_true = len(true_to_weak)
    pure = sum(1 for spk in weak_to_true.values() if len(spk) == 1)
    split = sum(1 for labels in true_to_weak.values() if len(labels) >= 2)
    return LabelQualityReport(
        n_weak_speakers=n_weak,
        n_true_speakers=n_true,
        split_rate=split / n_true if n_true else 0.0,
        purity=pure / n_weak if n_weak else 1.0,
    )


def select_records(records: Sequence[UtteranceRecord], local_speaker: Optional[str] = None,
                   sessions: Optional[Iterable[str]] = None) -> List[UtteranceRecord]:
    """Filter metadata by local speaker (e.g. one channel) and/or session set."""
    wanted = None if sessions is None else set(sessions)
    return [r for r in records
            if (local_speaker is None or r.local_speaker_id == local_speaker)
            and (wanted is None or r.session_id in wanted)]


def pool_datasets(strong: LabeledDataset, weak: LabeledDataset) -> LabeledDataset:
    """Concatenate two corpora, keeping their label namespaces disjoint."""
    if len(strong) and len(weak) and strong.dim != weak.dim:
        raise FormatError(f"dimension mismatch: strong {strong.dim} vs weak {weak.dim}")
    clash = [u for u in weak.vectors.ids if u in strong.vectors]
    if clash:
        raise FormatError(f"utt_id {clash[0]!r} appears in both the strong and weak sets")
    labels = {u: "strong/" + lab for u, lab in strong.labels.items()}
    labels.update({u: "weak/" + lab for u, lab in weak.labels.items()})
    return LabeledDataset(strong.vectors.concat(weak.vectors), labels)
