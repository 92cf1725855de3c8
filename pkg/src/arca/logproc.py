"""Log parsing, template mining and digest extraction.

Raw log files are parsed line by line, repetitive lines are collapsed
into templates by masking variable fields, and the content that
distinguishes the incident (errors, rare templates, inline numeric
readings) is rendered into a budget-bounded text digest ready for
embedding.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum

from .errors import EmptyLog, ExtractorFailure
from .providers import CallRecord, ChatProvider, estimate_tokens


class Level(str, Enum):
    TRACE = "TRACE"
    DEBUG = "DEBUG"
    INFO = "INFO"
    WARN = "WARN"
    ERROR = "ERROR"
    FATAL = "FATAL"
    UNKNOWN = "UNKNOWN"


_LEVEL_ALIASES = {
    "TRACE": Level.TRACE,
    "DEBUG": Level.DEBUG,
    "INFO": Level.INFO,
    "WARN": Level.WARN,
    "WARNING": Level.WARN,
    "ERROR": Level.ERROR,
    "ERR": Level.ERROR,
    "FATAL": Level.FATAL,
    "CRITICAL": Level.FATAL,
    "CRIT": Level.FATAL,
}

ERROR_LEVELS = (Level.ERROR, Level.FATAL)


@dataclass(frozen=True)
class LogRecord:
    line_no: int
    message: str
    level: Level = Level.UNKNOWN
    timestamp: float | None = None
    source: str | None = None


@dataclass(frozen=True)
class LogTemplate:
    """A masked message pattern and how often it occurred."""

    template_id: str
    pattern: str
    count: int
    example_line_nos: tuple[int, ...]


@dataclass
class LogDigest:
    """Distilled log content; rendered size stays within char_budget."""

    distinguishing_lines: list[str] = field(default_factory=list)
    error_summary: str = ""
    inline_metrics_text: str = ""
    template_histogram: list[tuple[str, int]] = field(default_factory=list)
    char_budget: int = 8000


# --- parsing ------------------------------------------------------------

_ISO_RE = re.compile(
    r"^(\d{4}-\d{2}-\d{2}[T ]\d{2}:\d{2}:\d{2}(?:\.\d+)?)(Z|[+-]\d{2}:?\d{2})?\s+"
)
_EPOCH_RE = re.compile(r"^(\d{13}|\d{10}(?:\.\d+)?)\s+")
_SYSLOG_RE = re.compile(r"^([A-Z][a-z]{2}) {1,2}(\d{1,2}) (\d{2}:\d{2}:\d{2})\s+")
_LEVEL_RE = re.compile(
    r"^[\[(]?(TRACE|DEBUG|INFO|WARNING|WARN|ERROR|ERR|FATAL|CRITICAL|CRIT)[\])]?:?\s+",
    re.IGNORECASE,
)
_SOURCE_RE = re.compile(r"^([A-Za-z0-9_.\-/\[\]]+):\s+")

_MONTHS = {
    m: i + 1
    for i, m in enumerate(
        ["Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec"]
    )
}


def _take_timestamp(line: str) -> tuple[float | None, str]:
    """Try ISO-8601, epoch, then syslog prefixes; return (ts, remainder)."""
    m = _ISO_RE.match(line)
    if m:
        stamp, tz = m.group(1), m.group(2)
        try:
            text = stamp.replace(" ", "T")
            if tz and tz != "Z":
                text += tz
            dt = datetime.fromisoformat(text)
            if dt.tzinfo is None:
                dt = dt.replace(tzinfo=timezone.utc)
            return dt.timestamp(), line[m.end():]
        except ValueError:
            pass
    m = _EPOCH_RE.match(line)
    if m:
        raw = m.group(1)
        ts = float(raw) / 1000.0 if len(raw) == 13 else float(raw)
        return ts, line[m.end():]
    m = _SYSLOG_RE.match(line)
    if m:
        try:
            hh, mm, ss = (int(p) for p in m.group(3).split(":"))
            # Syslog stamps carry no year; resolve against 1970 so parsing
            # stays deterministic across runs.
            dt = datetime(
                1970, _MONTHS[m.group(1)], int(m.group(2)), hh, mm, ss, tzinfo=timezone.utc
            )
            return dt.timestamp(), line[m.end():]
        except (KeyError, ValueError):
            pass
    return None, line


def parse_log(raw: str | bytes) -> list[LogRecord]:
    """Parse one record per non-blank physical line.

    Lines opening with a recognizable timestamp get level/source
    extraction; anything else becomes an UNKNOWN-level record whose
    message is the whole line. Raises EmptyLog when nothing parses.
    """
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8", errors="replace")
    records: list[LogRecord] = []
    for line_no, line in enumerate(raw.splitlines(), start=1):
        stripped = line.strip()
        if not stripped:
            continue
        ts, rest = _take_timestamp(stripped)
        if ts is None:
            records.append(LogRecord(line_no=line_no, message=stripped))
            continue
        level = Level.UNKNOWN
        m = _LEVEL_RE.match(rest)
        if m:
            level = _LEVEL_ALIASES[m.group(1).upper()]
            rest = rest[m.end():]
        source = None
        m = _SOURCE_RE.match(rest)
        if m:
            source = m.group(1)
            rest = rest[m.end():]
        message = rest.strip() or stripped
        records.append(
            LogRecord(
                line_no=line_no, message=message, level=level, timestamp=ts, source=source
            )
        )
    if not records:
        raise EmptyLog("log contains no non-blank lines")
    return records


# --- template mining ----------------------------------------------------

_MASK_RULES: tuple[tuple[str, re.Pattern], ...] = (
    (
        "<UUID>",
        re.compile(
            r"\b[0-9a-fA-F]{8}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{12}\b"
        ),
    ),
    ("<IP>", re.compile(r"\b(?:\d{1,3}\.){3}\d{1,3}\b")),
    ("<PATH>", re.compile(r"(?:(?<=[\s=:'\"(])|^)/(?:[\w.\-]+/)*[\w.\-]+")),
    (
        # 0x-prefixed, or a bare hex run of 8+ chars holding both a digit
        # and a letter (so decimal numbers and English words stay intact).
        "<HEX>",
        re.compile(
            r"\b0[xX][0-9a-fA-F]+\b"
            r"|\b(?=[0-9a-fA-F]*[a-fA-F])(?=[0-9a-fA-F]*\d)[0-9a-fA-F]{8,}\b"
        ),
    ),
    ("<NUM>", re.compile(r"\b\d+(?:\.\d+)?\b")),
)


def mask_message(message: str) -> str:
    """Mask variable fields; idempotent (masking a masked pattern is a no-op)."""
    for token, pattern in _MASK_RULES:
        message = pattern.sub(token, message)
    return message


def _template_id(pattern: str) -> str:
    return hashlib.sha1(pattern.encode("utf-8")).hexdigest()[:12]


def templateize(records: list[LogRecord]) -> list[LogTemplate]:
    """Merge records with identical masked patterns; sort by falling count."""
    if not records:
        raise ValueError("templateize needs at least one record")
    groups: dict[str, list[int]] = {}
    for rec in records:
        groups.setdefault(mask_message(rec.message), []).append(rec.line_no)
    templates = [
        LogTemplate(
            template_id=_template_id(pattern),
            pattern=pattern,
            count=len(line_nos),
            example_line_nos=tuple(line_nos[:3]),
        )
        for pattern, line_nos in groups.items()
    ]
    templates.sort(key=lambda t: (-t.count, t.pattern))
    return templates


# --- digest extraction ---------------------------------------------------

_KV_NUMERIC_RE = re.compile(r"\b\w+=[-+]?\d")
_NUMERIC_TOKEN_RE = re.compile(r"[-+]?\d+(?:\.\d+)?")


def looks_like_inline_metrics(message: str) -> bool:
    """Heuristic for numeric/tabular content worth keeping verbatim."""
    kv = len(_KV_NUMERIC_RE.findall(message))
    if kv >= 3:
        return True
    return len(_NUMERIC_TOKEN_RE.findall(message)) >= 5


def _error_lines(records: list[LogRecord]) -> list[str]:
    groups: dict[tuple[str, str], int] = {}
    for rec in records:
        if rec.level in ERROR_LEVELS:
            key = (rec.level.value, mask_message(rec.message))
            groups[key] = groups.get(key, 0) + 1
    entries = sorted(groups.items(), key=lambda kv: (-kv[1], kv[0]))
    return [f"{level} x{count}: {pattern}" for (level, pattern), count in entries]


def _metrics_lines(records: list[LogRecord], cap: int) -> list[str]:
    seen: set[str] = set()
    lines: list[str] = []
    for rec in records:
        if len(lines) >= cap:
            break
        if looks_like_inline_metrics(rec.message) and rec.message not in seen:
            seen.add(rec.message)
            lines.append(rec.message)
    return lines


class _DigestBuilder:
    """Greedy budget-aware assembly against the canonical rendering.

    Items are offered in value order (errors, then rarest templates, then
    inline metrics, then histogram); assembly stops at the first item that
    would push the rendering past the budget, so the rarest content
    survives and the common tail is what gets dropped.
    """

    def __init__(self, char_budget: int):
        self.digest = LogDigest(char_budget=char_budget)
        self.full = False

    def _fits(self) -> bool:
        return len(digest_to_text(self.digest)) <= self.digest.char_budget

    def offer_error(self, line: str) -> None:
        self._offer("error", line)

    def offer_line(self, line: str) -> None:
        self._offer("line", line)

    def offer_metric(self, line: str) -> None:
        self._offer("metric", line)

    def offer_histogram(self, entry: tuple[str, int]) -> None:
        self._offer("histogram", entry)

    def _offer(self, kind: str, item) -> None:
        if self.full:
            return
        d = self.digest
        if kind == "error":
            before = d.error_summary
            d.error_summary = f"{before}\n{item}" if before else item
            if not self._fits():
                d.error_summary = before
                self.full = True
        elif kind == "line":
            d.distinguishing_lines.append(item)
            if not self._fits():
                d.distinguishing_lines.pop()
                self.full = True
        elif kind == "metric":
            before = d.inline_metrics_text
            d.inline_metrics_text = f"{before}\n{item}" if before else item
            if not self._fits():
                d.inline_metrics_text = before
                self.full = True
        else:
            d.template_histogram.append(item)
            if not self._fits():
                d.template_histogram.pop()
                self.full = True


class RuleBasedExtractor:
    """Deterministic offline extractor: no network, equal inputs give
    byte-identical digests."""

    tag = "rule-extractor"

    def __init__(
        self,
        char_budget: int = 8000,
        rare_templates: int = 20,
        metrics_max_lines: int = 40,
        histogram_max: int = 30,
    ):
        self.char_budget = char_budget
        self.rare_templates = rare_templates
        self.metrics_max_lines = metrics_max_lines
        self.histogram_max = histogram_max

    def extract(
        self,
        records: list[LogRecord],
        templates: list[LogTemplate],
        calls: list[CallRecord] | None = None,
    ) -> LogDigest:
        builder = _DigestBuilder(self.char_budget)
        error_patterns = set()
        for line in _error_lines(records):
            builder.offer_error(line)
            error_patterns.add(line.split(": ", 1)[-1])
        rare = sorted(templates, key=lambda t: (t.count, t.pattern))
        offered = 0
        for t in rare:
            if offered >= self.rare_templates:
                break
            if t.pattern in error_patterns:
                continue
            builder.offer_line(t.pattern)
            offered += 1
        for line in _metrics_lines(records, self.metrics_max_lines):
            builder.offer_metric(line)
        for t in templates[: self.histogram_max]:
            builder.offer_histogram((t.pattern, t.count))
        if calls is not None:
            calls.append(
                CallRecord(stage="extract", provider_tag=self.tag, remote=False)
            )
        return builder.digest


class LlmFeatureExtractor:
    """Remote extractor: sends a compacted log view to a chat provider
    with the configured feature-extraction prompt and maps the free-text
    reply into the digest's distinguishing lines.

    Structural sections (errors, inline metrics, histogram) are still
    computed locally so the digest shape stays stable. Provider errors
    surface as ExtractorFailure so callers can fall back to the
    rule-based extractor.
    """

    def __init__(
        self,
        provider: ChatProvider,
        prompt: str,
        char_budget: int = 8000,
        metrics_max_lines: int = 40,
        histogram_max: int = 30,
        input_cap_chars: int = 12000,
    ):
        self.provider = provider
        self.prompt = prompt
        self.char_budget = char_budget
        self.metrics_max_lines = metrics_max_lines
        self.histogram_max = histogram_max
        self.input_cap_chars = input_cap_chars

    @property
    def tag(self) -> str:
        return f"llm-extractor({self.provider.tag})"

    def _compact_view(self, records, templates) -> str:
        parts = ["TEMPLATES:"]
        parts += [f"{t.count}x {t.pattern}" for t in templates[: self.histogram_max]]
        errors = _error_lines(records)
        if errors:
            parts.append("ERRORS:")
            parts += errors
        metrics = _metrics_lines(records, self.metrics_max_lines)
        if metrics:
            parts.append("NUMERIC READINGS:")
            parts += metrics
        return "\n".join(parts)[: self.input_cap_chars]

    def extract(
        self,
        records: list[LogRecord],
        templates: list[LogTemplate],
        calls: list[CallRecord] | None = None,
    ) -> LogDigest:
        request = f"{self.prompt}\n\n{self._compact_view(records, templates)}"
        try:
            result = self.provider.complete(request)
        except Exception as exc:
            raise ExtractorFailure(f"remote feature extraction failed: {exc}") from exc
        if calls is not None:
            calls.append(
                CallRecord(
                    stage="extract",
                    provider_tag=self.tag,
                    tokens_in=result.tokens_in or estimate_tokens(request),
                    tokens_out=result.tokens_out or estimate_tokens(result.text),
                    remote=True,
                )
            )
        builder = _DigestBuilder(self.char_budget)
        for line in _error_lines(records):
            builder.offer_error(line)
        for line in result.text.splitlines():
            line = line.strip()
            if line:
                builder.offer_line(line)
        for line in _metrics_lines(records, self.metrics_max_lines):
            builder.offer_metric(line)
        for t in templates[: self.histogram_max]:
            builder.offer_histogram((t.pattern, t.count))
        return builder.digest


def extract_features(
    records: list[LogRecord],
    templates: list[LogTemplate],
    extractor,
    calls: list[CallRecord] | None = None,
) -> LogDigest:
    """Run the configured extractor; ExtractorFailure propagates so the
    caller can fall back and record the fallback in provenance."""
    return extractor.extract(records, templates, calls)


def digest_to_text(d: LogDigest) -> str:
    """Canonical rendering: errors, distinguishing lines, inline metrics,
    template histogram. Deterministic for equal digests."""
    parts = []
    if d.error_summary:
        parts.append("ERRORS:\n" + d.error_summary)
    if d.distinguishing_lines:
        parts.append("DISTINGUISHING:\n" + "\n".join(d.distinguishing_lines))
    if d.inline_metrics_text:
        parts.append("INLINE METRICS:\n" + d.inline_metrics_text)
    if d.template_histogram:
        rows = "\n".join(f"{count}x {pattern}" for pattern, count in d.template_histogram)
        parts.append("TEMPLATES:\n" + rows)
    return "\n\n".join(parts)


def process_raw_log(raw: str | bytes, extractor, calls: list[CallRecord] | None = None) -> str:
    """parse -> templateize -> extract -> render, the standard digest path."""
    records = parse_log(raw)
    templates = templateize(records)
    digest = extract_features(records, templates, extractor, calls)
    return digest_to_text(digest)
