"""Parsing and filtering of OSHA Severe Injury Report CSV exports."""

from __future__ import annotations

import csv
import datetime as dt
import io
import logging
from dataclasses import dataclass, field, replace
from typing import BinaryIO, Iterable, Optional, Union

from .errors import EncodingError, InvalidRange, MalformedRow, MissingColumn

logger = logging.getLogger(__name__)

# canonical header -> record attribute
COLUMNS = {
    "EventDate": "event_date",
    "Employer": "employer",
    "Hospitalized": "hospitalized",
    "Amputation": "amputation",
    "Final Narrative": "final_narrative",
    "NatureTitle": "nature_title",
    "Part of Body Title": "part_of_body_title",
    "EventTitle": "event_title",
    "SourceTitle": "source_title",
    "Secondary Source Title": "secondary_source_title",
}
ID_COLUMNS = ("ID", "Record ID", "RecordID")

STUDY_WINDOW = (dt.date(2015, 1, 1), dt.date(2024, 1, 31))


@dataclass(frozen=True)
class OshaRecord:
    record_id: int
    event_date: dt.date
    employer: str
    hospitalized: bool
    amputation: bool
    final_narrative: str
    nature_title: str
    part_of_body_title: str
    event_title: str
    source_title: str
    secondary_source_title: Optional[str] = None


@dataclass(frozen=True)
class SkippedRow:
    line: int
    reason: str

    def to_log_line(self) -> str:
        return f"{self.line}\t{self.reason}"


@dataclass(frozen=True)
class Corpus:
    records: tuple[OshaRecord, ...]
    source_path: str = ""
    parsed_at: dt.datetime = field(
        default_factory=lambda: dt.datetime.now(dt.timezone.utc), compare=False
    )
    skipped: tuple[SkippedRow, ...] = field(default=(), compare=False)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def skipped_report(self) -> str:
        """Line-delimited ``line<TAB>reason`` log of dropped rows."""
        return "".join(s.to_log_line() + "\n" for s in self.skipped)


def _norm_header(name: str) -> str:
    return "".join(name.split()).lower()


def parse_date(text: str) -> dt.date:
    """Parse ``YYYY-MM-DD`` or ``M/D/YYYY``; ISO is tried first."""
    text = text.strip()
    try:
        return dt.date.fromisoformat(text[:10])
    except ValueError:
        pass
    try:
        return dt.datetime.strptime(text.split()[0], "%m/%d/%Y").date()
    except (ValueError, IndexError):
        raise ValueError(f"unrecognised date {text!r}") from None


def parse_flag(text: str) -> bool:
    text = text.strip()
    if text == "":
        return False
    try:
        return float(text) != 0.0
    except ValueError:
        raise ValueError(f"non-numeric indicator {text!r}") from None


def _format_flag(value: bool) -> str:
    return "1" if value else "0"


def parse_sir_csv(
    stream: Union[BinaryIO, bytes],
    strict: bool = False,
    source_path: str = "",
) -> Corpus:
    """Parse a Severe Injury Reports CSV into a :class:`Corpus`.

    Args:
        stream: binary file object or raw bytes holding UTF-8 CSV.
        strict: abort on the first invalid row instead of skipping it.
        source_path: recorded on the corpus for provenance.

    Raises:
        EncodingError: the input is not valid UTF-8.
        MissingColumn: a required column is absent from the header.
        MalformedRow: strict mode only, for the first invalid row.
    """
    raw = stream if isinstance(stream, (bytes, bytearray)) else stream.read()
    try:
        text = bytes(raw).decode("utf-8-sig")
    except UnicodeDecodeError as exc:
        raise EncodingError(f"input is not valid UTF-8: {exc}") from exc

    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        header = next(reader)
    except StopIteration:
        raise MissingColumn(next(iter(COLUMNS))) from None

    index = {_norm_header(h): i for i, h in enumerate(header)}
    positions = {}
    for column, attr in COLUMNS.items():
        key = _norm_header(column)
        if key not in index:
            raise MissingColumn(column)
        positions[attr] = index[key]
    id_pos = next(
        (index[_norm_header(c)] for c in ID_COLUMNS if _norm_header(c) in index), None
    )

    records: list[OshaRecord] = []
    skipped: list[SkippedRow] = []
    seen_ids: set[int] = set()
    ordinal = 0
    start_line = reader.line_num + 1
    for row in reader:
        line = start_line
        start_line = reader.line_num + 1
        if not any(cell.strip() for cell in row):
            continue
        row_ordinal = ordinal
        ordinal += 1
        try:
            if len(row) < len(header):
                raise ValueError(f"expected {len(header)} cells, got {len(row)}")
            cells = {attr: row[pos] for attr, pos in positions.items()}
            narrative = cells["final_narrative"].strip()
            if not narrative:
                # unclassifiable; dropped in strict mode too
                skipped.append(SkippedRow(line, "empty final narrative"))
                continue
            if id_pos is not None and row[id_pos].strip():
                record_id = int(float(row[id_pos].strip()))
            else:
                record_id = row_ordinal
            if record_id in seen_ids:
                raise ValueError(f"duplicate record id {record_id}")
            secondary = cells["secondary_source_title"].strip()
            record = OshaRecord(
                record_id=record_id,
                event_date=parse_date(cells["event_date"]),
                employer=cells["employer"].strip(),
                hospitalized=parse_flag(cells["hospitalized"]),
                amputation=parse_flag(cells["amputation"]),
                final_narrative=narrative,
                nature_title=cells["nature_title"].strip(),
                part_of_body_title=cells["part_of_body_title"].strip(),
                event_title=cells["event_title"].strip(),
                source_title=cells["source_title"].strip(),
                secondary_source_title=secondary or None,
            )
        except ValueError as exc:
            if strict:
                raise MalformedRow(line, str(exc)) from exc
            skipped.append(SkippedRow(line, str(exc)))
            continue
        seen_ids.add(record_id)
        records.append(record)

    for s in skipped:
        logger.info("skipped row %d: %s", s.line, s.reason)
    return Corpus(tuple(records), source_path=source_path, skipped=tuple(skipped))


def read_sir_csv(path, strict: bool = False) -> Corpus:
    with open(path, "rb") as fh:
        return parse_sir_csv(fh, strict=strict, source_path=str(path))


def write_sir_csv(records: Iterable[OshaRecord], stream: io.TextIOBase) -> None:
    """Write records as CSV with an ``ID`` column plus the canonical headers."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["ID", *COLUMNS])
    for r in records:
        writer.writerow(
            [
                r.record_id,
                r.event_date.isoformat(),
                r.employer,
                _format_flag(r.hospitalized),
                _format_flag(r.amputation),
                r.final_narrative,
                r.nature_title,
                r.part_of_body_title,
                r.event_title,
                r.source_title,
                r.secondary_source_title or "",
            ]
        )


def filter_date_range(corpus: Corpus, start: dt.date, end: dt.date) -> Corpus:
    """Keep records with ``start <= event_date <= end``, preserving order."""
    if start > end:
        raise InvalidRange(f"start {start} is after end {end}")
    kept = tuple(r for r in corpus.records if start <= r.event_date <= end)
    return replace(corpus, records=kept)
