"""Corpus I/O: metadata tables, WAV audio and the relabeled output table."""

from __future__ import annotations

import csv
import dataclasses
import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


class DataError(Exception):
    """Raised for malformed or inconsistent input data."""


class UserStatus(str, enum.Enum):
    COVID = "covid"
    HEALTHY = "healthy"
    SYMPTOMATIC = "symptomatic"
    NONE = "none"

    @property
    def trainable(self) -> UserStatus:
        # symptomatic is ambiguous and never used as a training label
        return self if self in (UserStatus.COVID, UserStatus.HEALTHY) else UserStatus.NONE


class ExpertLabel(str, enum.Enum):
    COVID = "covid"
    HEALTHY = "healthy"
    OTHER = "other"
    NONE = "none"


class Gender(str, enum.Enum):
    MALE = "male"
    FEMALE = "female"
    UNKNOWN = "unknown"


class SslStatus(str, enum.Enum):
    COVID = "covid"
    HEALTHY = "healthy"
    DISCARDED = "discarded"


class LabelSource(str, enum.Enum):
    ORIGINAL_EXPERT = "original_expert"
    PSEUDO_MODEL = "pseudo_model"


STATUS_TEXT = {
    UserStatus.COVID: "COVID-19",
    UserStatus.HEALTHY: "healthy",
    UserStatus.SYMPTOMATIC: "symptomatic",
    UserStatus.NONE: "",
}
SSL_TEXT = {
    SslStatus.COVID: "COVID-19",
    SslStatus.HEALTHY: "healthy",
    SslStatus.DISCARDED: "discarded",
}
EXPERT_TEXT = {
    ExpertLabel.COVID: "COVID-19",
    ExpertLabel.HEALTHY: "healthy_cough",
    ExpertLabel.OTHER: "other",
    ExpertLabel.NONE: "",
}


def parse_user_status(text: str) -> UserStatus:
    t = text.strip().lower()
    if t in ("", "none", "nan", "na"):
        return UserStatus.NONE
    if t in ("covid-19", "covid", "covid19", "positive"):
        return UserStatus.COVID
    if t in ("healthy", "negative"):
        return UserStatus.HEALTHY
    if t == "symptomatic":
        return UserStatus.SYMPTOMATIC
    raise ValueError(f"unknown status {text!r}")


def parse_expert_label(text: str) -> ExpertLabel:
    t = text.strip().lower()
    if t in ("", "none", "nan", "na"):
        return ExpertLabel.NONE
    if t in ("covid-19", "covid", "covid19"):
        return ExpertLabel.COVID
    if t in ("healthy", "healthy_cough"):
        return ExpertLabel.HEALTHY
    # any other diagnosis (upper/lower infection, obstructive disease, ...)
    return ExpertLabel.OTHER


def parse_gender(text: str) -> Gender:
    t = text.strip().lower()
    if t in ("male", "m", "1"):
        return Gender.MALE
    if t in ("female", "f", "0"):
        return Gender.FEMALE
    return Gender.UNKNOWN


@dataclass(frozen=True)
class RecordingMeta:
    uuid: str
    user_status: UserStatus = UserStatus.NONE
    expert_labels: Mapping[str, ExpertLabel] = field(default_factory=dict)
    gender: Gender = Gender.UNKNOWN
    cough_score: float = 1.0
    snr_db: float | None = None
    split: str = "train"

    def __post_init__(self):
        if not 0.0 <= self.cough_score <= 1.0:
            raise ValueError(f"cough_score {self.cough_score} outside [0, 1]")


@dataclass(frozen=True)
class AudioSignal:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1 or x.size == 0:
            raise ValueError("audio signal must be a non-empty 1-D buffer")
        if not np.all(np.isfinite(x)):
            raise ValueError("audio signal contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ValueError("sample rate must be positive")
        x = x.copy() if x is self.samples else x
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class LabelRecord:
    uuid: str
    user_status: UserStatus
    expert_or_pseudo: Mapping[str, ExpertLabel]
    label_source: Mapping[str, LabelSource]
    ssl_status: SslStatus

    def __post_init__(self):
        for a, lab in self.expert_or_pseudo.items():
            if lab not in (ExpertLabel.COVID, ExpertLabel.HEALTHY):
                raise ValueError(f"slot {a!r} must hold covid/healthy, got {lab}")
            if a not in self.label_source:
                raise ValueError(f"slot {a!r} has no label source")


# ---------------------------------------------------------------- metadata


def _annotators_from_header(header: Sequence[str]) -> list[str]:
    return [h[len("expert_"):] for h in header if h.startswith("expert_")]


def load_metadata(path: str | Path, annotators: Sequence[str] | None = None) -> list[RecordingMeta]:
    """Read a metadata CSV into a list of :class:`RecordingMeta`.

    Columns ``uuid,status,cough_detected,SNR,gender,expert_<id>`` are
    recognised; anything else is ignored. ``annotators`` restricts the
    expert columns read (default: every ``expert_*`` column present).
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: missing header row") from None
        if "uuid" not in header:
            raise DataError(f"{path}: header has no 'uuid' column")
        col = {h: i for i, h in enumerate(header)}
        if annotators is None:
            annotators = _annotators_from_header(header)
        else:
            missing = [a for a in annotators if f"expert_{a}" not in col]
            if missing:
                raise DataError(f"{path}: no column for annotators {missing}")

        corpus: list[RecordingMeta] = []
        seen: dict[str, int] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue

            def cell(name: str) -> str:
                i = col.get(name)
                if i is None or i >= len(row):
                    return ""
                return row[i]

            uuid = cell("uuid").strip()
            if not uuid:
                raise DataError(f"{path}: row {lineno}, column 'uuid': empty id")
            if uuid in seen:
                raise DataError(
                    f"{path}: duplicate uuid {uuid!r} in rows {seen[uuid]} and {lineno}"
                )
            seen[uuid] = lineno
            try:
                status = parse_user_status(cell("status"))
            except ValueError as e:
                raise DataError(f"{path}: row {lineno}, column 'status': {e}") from None
            score_text = cell("cough_detected").strip()
            try:
                score = float(score_text) if score_text else 1.0
            except ValueError:
                raise DataError(
                    f"{path}: row {lineno}, column 'cough_detected': not a number {score_text!r}"
                ) from None
            if not 0.0 <= score <= 1.0:
                raise DataError(
                    f"{path}: row {lineno}, column 'cough_detected': {score} outside [0, 1]"
                )
            snr_text = cell("SNR").strip()
            try:
                snr = float(snr_text) if snr_text else None
            except ValueError:
                raise DataError(
                    f"{path}: row {lineno}, column 'SNR': not a number {snr_text!r}"
                ) from None
            split = cell("split").strip() or "train"
            corpus.append(
                RecordingMeta(
                    uuid=uuid,
                    user_status=status,
                    expert_labels={a: parse_expert_label(cell(f"expert_{a}")) for a in annotators},
                    gender=parse_gender(cell("gender")),
                    cough_score=score,
                    snr_db=snr,
                    split=split,
                )
            )
    return corpus


def write_metadata(corpus: Iterable[RecordingMeta], path: str | Path, annotators: Sequence[str]) -> None:
    path = Path(path)
    header = ["uuid", "status", "cough_detected", "SNR", "gender", "split"]
    header += [f"expert_{a}" for a in annotators]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for m in corpus:
            w.writerow(
                [
                    m.uuid,
                    STATUS_TEXT[m.user_status],
                    repr(float(m.cough_score)),
                    "" if m.snr_db is None else repr(float(m.snr_db)),
                    "" if m.gender is Gender.UNKNOWN else m.gender.value,
                    m.split,
                ]
                + [EXPERT_TEXT[m.expert_labels.get(a, ExpertLabel.NONE)] for a in annotators]
            )


def attach_snr(corpus: Iterable[RecordingMeta], snr_by_uuid: Mapping[str, float]) -> list[RecordingMeta]:
    return [dataclasses.replace(m, snr_db=snr_by_uuid.get(m.uuid)) for m in corpus]


def filter_corpus(
    corpus: Iterable[RecordingMeta], min_cough_score: float = 0.8, min_snr_db: float = 5.0
) -> list[RecordingMeta]:
    """Keep recordings with cough_score > min_cough_score and snr_db > min_snr_db.

    Both comparisons are strict.
    """
    kept = []
    for m in corpus:
        if m.snr_db is None:
            raise DataError(
                f"recording {m.uuid!r} has no SNR estimate; run SNR estimation "
                "(the 'segment' stage) before filtering"
            )
        if m.cough_score > min_cough_score and m.snr_db > min_snr_db:
            kept.append(m)
    return kept


# ---------------------------------------------------------------- labels


def write_labels(records: Iterable[LabelRecord], path: str | Path, annotators: Sequence[str]) -> None:
    path = Path(path)
    header = ["uuid", "status", "status_SSL"]
    for a in annotators:
        header += [f"expert_{a}", f"label_source_{a}"]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in records:
            row = [r.uuid, STATUS_TEXT[r.user_status], SSL_TEXT[r.ssl_status]]
            for a in annotators:
                lab = r.expert_or_pseudo.get(a)
                if lab is None:
                    row += ["", ""]
                else:
                    row += [EXPERT_TEXT[lab], r.label_source[a].value]
            w.writerow(row)


def read_labels(path: str | Path) -> list[LabelRecord]:
    path = Path(path)
    ssl_lookup = {v: k for k, v in SSL_TEXT.items()}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "status_SSL" not in reader.fieldnames:
            raise DataError(f"{path}: not a label table (no status_SSL column)")
        annotators = _annotators_from_header(reader.fieldnames)
        out = []
        for lineno, row in enumerate(reader, start=2):
            if row["status_SSL"] not in ssl_lookup:
                raise DataError(
                    f"{path}: row {lineno}, column 'status_SSL': bad value {row['status_SSL']!r}"
                )
            labels, sources = {}, {}
            for a in annotators:
                text = row.get(f"expert_{a}") or ""
                if not text:
                    continue
                try:
                    sources[a] = LabelSource(row.get(f"label_source_{a}") or "")
                except ValueError:
                    raise DataError(
                        f"{path}: row {lineno}, column 'label_source_{a}': bad source tag"
                    ) from None
                labels[a] = parse_expert_label(text)
            try:
                status = parse_user_status(row.get("status") or "")
                out.append(
                    LabelRecord(row["uuid"], status, labels, sources, ssl_lookup[row["status_SSL"]])
                )
            except ValueError as e:
                raise DataError(f"{path}: row {lineno}: {e}") from None
    return out


# ---------------------------------------------------------------- audio

_WAVE_FORMAT_PCM = 1
_WAVE_FORMAT_FLOAT = 3
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


def load_audio(path: str | Path) -> AudioSignal:
    """Decode a RIFF/WAV file to a mono float signal scaled to [-1, 1].

    Supports 8/16/24/32-bit integer PCM and 32/64-bit float. Channels
    are averaged.
    """
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise DataError(f"{path}: bad RIFF header (not a WAVE file)")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise DataError(f"{path}: truncated 'fmt ' chunk")
            tag, channels, rate, _, _, bits = struct.unpack("<HHIIHH", body[:16])
            if tag == _WAVE_FORMAT_EXTENSIBLE:
                if len(body) < 26:
                    raise DataError(f"{path}: truncated extensible 'fmt ' chunk")
                (tag,) = struct.unpack("<H", body[24:26])
            fmt = (tag, channels, rate, bits)
        elif cid == b"data":
            payload = body
            break
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise DataError(f"{path}: missing 'fmt ' chunk")
    if payload is None:
        raise DataError(f"{path}: missing 'data' chunk")
    tag, channels, rate, bits = fmt
    if channels < 1 or rate < 1:
        raise DataError(f"{path}: 'fmt ' chunk declares {channels} channels at {rate} Hz")
    width = bits // 8
    frame = width * channels
    if frame == 0 or bits % 8:
        raise DataError(f"{path}: 'fmt ' chunk has unsupported bit depth {bits}")
    n = len(payload) // frame
    if n == 0:
        raise DataError(f"{path}: 'data' chunk holds no complete sample frame")
    raw = payload[: n * frame]

    if tag == _WAVE_FORMAT_PCM:
        if bits == 8:
            x = (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
        elif bits == 16:
            x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
        elif bits == 24:
            b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
            v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
            v = np.where(v >= 1 << 23, v - (1 << 24), v)
            x = v.astype(np.float64) / float(1 << 23)
        elif bits == 32:
            x = np.frombuffer(raw, dtype="<i4").astype(np.float64) / float(1 << 31)
        else:
            raise DataError(f"{path}: 'fmt ' chunk has unsupported PCM depth {bits}")
    elif tag == _WAVE_FORMAT_FLOAT:
        if bits == 32:
            x = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        elif bits == 64:
            x = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        else:
            raise DataError(f"{path}: 'fmt ' chunk has unsupported float depth {bits}")
        if not np.all(np.isfinite(x)):
            raise DataError(f"{path}: 'data' chunk contains non-finite samples")
    else:
        raise DataError(f"{path}: 'fmt ' chunk has unsupported codec tag {tag:#06x}")

    x = x.reshape(n, channels).mean(axis=1)
    return AudioSignal(x, rate)


def write_audio(path: str | Path, signal: AudioSignal, bits: int = 16) -> None:
    """Write a mono WAV; ``bits`` 16 (PCM, clipped to [-1, 1]) or 32 (IEEE float, unclipped)."""
    x = np.asarray(signal.samples, dtype=np.float64)
    if bits == 16:
        payload = np.round(np.clip(x, -1.0, 1.0) * 32767.0).astype("<i2").tobytes()
        tag = _WAVE_FORMAT_PCM
    elif bits == 32:
        payload = x.astype("<f4").tobytes()
        tag = _WAVE_FORMAT_FLOAT
    else:
        raise ValueError("bits must be 16 or 32")
    width = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, signal.sample_rate, signal.sample_rate * width, width, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
