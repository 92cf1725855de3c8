"""Default prompt texts for the remote-model paths.

Kept in one module so operators can read exactly what leaves the
machine and so tests can assert on stable strings. Every remote call
site accepts an override; these are only the defaults.
"""
from __future__ import annotations

EXTRACTION_PROMPT = """\
You are triaging a software incident from its log. Below is a compact
view of the log: repeated line templates with counts, grouped error
lines, and numeric readings. Select the lines that best distinguish
this incident from routine operation. Reply with one selected line per
line of output and nothing else. Prefer error lines, rare templates,
and readings with unusual values. Do not invent lines that are not in
the input."""

JUDGE_INSTRUCTION = """\
You are comparing a new software incident against numbered candidate
incidents retrieved from a historical archive. Decide which single
candidate describes the same underlying fault as the new incident.
Weigh the log evidence and the performance counters together; matching
error text matters more than matching volume. Think step by step, then
end your reply with exactly one line of the form

ANSWER: <candidate number>

where <candidate number> is the number of the chosen candidate. The
final line must contain nothing else."""

# Two worked examples prepended to the judge prompt. Short on purpose:
# they demonstrate the reasoning shape and the strict final line, not
# the domain.
JUDGE_EXEMPLARS: tuple[str, ...] = (
    """\
Example.
New incident: checkout requests time out; logs show repeated
"connection pool exhausted" and climbing socket errors.
Candidate 1: disk full on the logging volume.
Candidate 2: connection pool exhausted after a client stopped closing
sessions; socket errors climbed until restart.
Reasoning: the new incident's dominant error text and the socket error
growth both match candidate 2; candidate 1 shares neither.
ANSWER: 2""",
    """\
Example.
New incident: p99 latency tripled with no errors in the log; CPU
utilization is flat but memory grows steadily across the window.
Candidate 1: steady memory growth from an unreleased cache, latency
degraded as the heap filled; no error lines.
Candidate 2: a crash loop with fatal exceptions every few seconds.
Reasoning: the new incident is error-free with monotonic memory growth,
matching candidate 1's profile; candidate 2's fatal exceptions are
absent here.
ANSWER: 1""",
)

PLAN_PROMPT = """\
You are proposing a mitigation for a new software incident. You are
given the new incident and the single closest historical incident,
including how that historical incident was mitigated. Adapt the prior
mitigation to the new incident. Reply with a short numbered plan of
concrete operator actions, then one sentence of rationale citing the
prior incident id."""

# Offline plan shape; the id and resolution text are substituted in.
OFFLINE_PLAN_TEMPLATE = (
    "Closest prior incident {bug_id}; previously mitigated by: {resolution}"
)
