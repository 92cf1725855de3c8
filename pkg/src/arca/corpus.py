"""Synthetic fault-injection corpus.

Each configuration draws a fault category, a target service, and
integer intensity parameters, then is executed twice. The two runs of a
configuration are each other's closest bug: they share the fault
parameters (which the service logs at startup as a key=value config
line) and the counter magnitudes, while differing in request ids,
noise, and timing. Labels record the pairing so evaluation has ground
truth.

Fault categories:
  CPU_OVERLOAD   synchronous work added on the request path; CPU ramps
                 to a plateau, latency climbs with it, and the run
                 queue can overflow until the worker sheds load and
                 restarts
  MEM_LEAK       a completion callback never frees its buffer; memory
                 grows monotonically until the process hits its
                 out-of-memory limit
  NET_DELAY      a sleep injected in the connection pool; latency turns
                 spiky and socket timeouts appear
  MIXED_CPU_MEM  one bad build combining a busy loop and a leaking
                 callback, both at reduced intensity

Every run is fully determined by (config, run_index): the config
carries its own integer seed, and the simulation derives all of its
generators from that pair.
"""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .providers import CallRecord, ChatProvider
from .telemetry import (
    CANONICAL_COUNTERS,
    TelemetrySeries,
    read_telemetry_csv,
    render_telemetry_csv,
)


class FaultCategory(str, Enum):
    CPU_OVERLOAD = "cpu_overload"
    MEM_LEAK = "mem_leak"
    NET_DELAY = "net_delay"
    MIXED_CPU_MEM = "mixed_cpu_mem"


CATEGORIES: tuple[FaultCategory, ...] = (
    FaultCategory.CPU_OVERLOAD,
    FaultCategory.MEM_LEAK,
    FaultCategory.NET_DELAY,
    FaultCategory.MIXED_CPU_MEM,
)

SERVICES: tuple[str, ...] = (
    "frontend",
    "search",
    "geo",
    "profile",
    "rate",
    "reserve",
    "gateway",
    "auth",
)

_ENDPOINTS: tuple[str, ...] = (
    "/api/v1/search",
    "/api/v1/items",
    "/api/v1/price",
    "/api/v1/nearby",
    "/api/v1/profile",
    "/api/v1/book",
)

RUNS_PER_CONFIG = 2

#: Counters whose steady-state level would otherwise carry no
#: configuration information in its trend: each config drifts them
#: slowly in a direction of its own, shared by both runs.
_DRIFTED = ("cpu_util", "mem_util", "net_rx_bytes", "net_tx_bytes", "blk_io_ops")


@dataclass(frozen=True)
class FaultConfig:
    category: FaultCategory
    config_id: int
    service: str
    params: dict
    duration_s: int = 120
    seed: int = 0


@dataclass(frozen=True)
class BugTicket:
    bug_id: str
    description: str
    resolution: str
    raw_log: str
    telemetry_series: tuple[TelemetrySeries, ...]
    labels: dict


@dataclass(frozen=True)
class SimulatedRun:
    ticket: BugTicket
    fault: FaultConfig
    run_index: int
    crashed: bool


def make_bug_id(category: FaultCategory, config_id: int, run_index: int) -> str:
    return f"{category.value}-c{config_id:03d}-r{run_index}"


def paired_bug_id(bug_id: str) -> str:
    """The other run of the same configuration."""
    stem, run = bug_id.rsplit("-r", 1)
    return f"{stem}-r{1 - int(run)}"


def draw_config(
    category: FaultCategory,
    config_id: int,
    rng: np.random.Generator,
    duration_s: int = 120,
) -> FaultConfig:
    """Integer parameters on purpose: the service logs them verbatim in
    its startup config line, where they survive digesting as inline
    metrics and identify the configuration across both runs."""
    params = {
        "build": int(rng.integers(1000, 10000)),
        "workers": int(rng.integers(4, 17)),
        "buffer_kb": int(rng.choice([1024, 2048, 4096, 8192])),
        "req_rate": int(rng.integers(50, 201)),
    }
    if category is FaultCategory.CPU_OVERLOAD:
        params["spin_ms"] = int(rng.integers(20, 121))
        params["ramp_s"] = int(rng.integers(20, 61))
    elif category is FaultCategory.MEM_LEAK:
        params["leak_kb"] = int(rng.integers(64, 513))
        params["cb_rate"] = int(rng.integers(5, 41))
    elif category is FaultCategory.NET_DELAY:
        params["delay_ms"] = int(rng.integers(40, 401))
    else:
        params["spin_ms"] = int(rng.integers(10, 61))
        params["ramp_s"] = int(rng.integers(20, 61))
        params["leak_kb"] = int(rng.integers(32, 257))
        params["cb_rate"] = int(rng.integers(5, 21))
    # Crash thresholds are config defaults, recorded with the ticket.
    params["mem_limit_pct"] = 95
    params["queue_limit"] = params["workers"] * 150
    # Slow per-counter load drift, shared by both runs of the
    # configuration. Without it the trend feature of a flat counter is
    # pure run noise, and z-scoring would blow that noise up to full
    # variance; with it the trend encodes the configuration.
    drift = {}
    for name in _DRIFTED:
        magnitude = float(rng.uniform(0.08, 0.2))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        drift[name] = round(sign * magnitude, 4)
    params["drift"] = drift
    service = str(rng.choice(SERVICES))
    seed = int(rng.integers(0, 2**63))
    return FaultConfig(
        category=category,
        config_id=config_id,
        service=service,
        params=params,
        duration_s=duration_s,
        seed=seed,
    )


def _check_config(config: FaultConfig) -> None:
    if config.duration_s < 1:
        raise ConfigError("fault config duration must be at least one second")
    required = {
        FaultCategory.CPU_OVERLOAD: ("spin_ms", "ramp_s"),
        FaultCategory.MEM_LEAK: ("leak_kb", "cb_rate"),
        FaultCategory.NET_DELAY: ("delay_ms",),
        FaultCategory.MIXED_CPU_MEM: ("spin_ms", "ramp_s", "leak_kb", "cb_rate"),
    }[config.category]
    for key in required:
        if config.params.get(key, 0) <= 0:
            raise ConfigError(
                f"fault config for {config.category.value} needs positive {key}"
            )


def _iso(epoch: float) -> str:
    return datetime.fromtimestamp(epoch, timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _q(value: float, step: int) -> int:
    """Quantize for the periodic stats line: coarse buckets match across
    the two runs of a configuration but separate configurations with
    different intensities."""
    return int(round(value / step) * step)


def simulate_run(config: FaultConfig, run_index: int) -> SimulatedRun:
    """One-second tick loop over the fault's effect on seven counters.

    Two generators per run, both derived from (config.seed, run_index):
    base noise and fault effects. Every tick draws the same number of
    values from each regardless of parameters, so changing one
    parameter never shifts the streams; this keeps runs comparable and
    makes effect sizes testable (a zero-intensity config replays the
    identical noise).
    """
    _check_config(config)
    if run_index not in (0, 1):
        raise ConfigError("run_index must be 0 or 1")
    base_ss, fault_ss = np.random.SeedSequence([config.seed, run_index]).spawn(2)
    rng = np.random.default_rng(base_ss)
    frng = np.random.default_rng(fault_ss)
    p = config.params
    cat = config.category
    svc = config.service
    spins = cat in (FaultCategory.CPU_OVERLOAD, FaultCategory.MIXED_CPU_MEM)
    leaks = cat in (FaultCategory.MEM_LEAK, FaultCategory.MIXED_CPU_MEM)
    delays = cat is FaultCategory.NET_DELAY
    mix = 0.5 if cat is FaultCategory.MIXED_CPU_MEM else 1.0

    base_epoch = 1704067200.0 + config.config_id * 86400.0 + run_index * 3600.0
    ip_a, ip_b = int(rng.integers(1, 255)), int(rng.integers(1, 255))

    fault_detail = {
        FaultCategory.CPU_OVERLOAD: (
            f"spin_ms={p.get('spin_ms', 0)} ramp_s={p.get('ramp_s', 0)}"
        ),
        FaultCategory.MEM_LEAK: (
            f"leak_kb={p.get('leak_kb', 0)} cb_rate={p.get('cb_rate', 0)}"
        ),
        FaultCategory.NET_DELAY: f"delay_ms={p.get('delay_ms', 0)}",
        FaultCategory.MIXED_CPU_MEM: (
            f"spin_ms={p.get('spin_ms', 0)} ramp_s={p.get('ramp_s', 0)} "
            f"leak_kb={p.get('leak_kb', 0)} cb_rate={p.get('cb_rate', 0)}"
        ),
    }[cat]
    lines = [
        f"{_iso(base_epoch)} INFO {svc}: service starting release {p['build']}",
        f"{_iso(base_epoch)} INFO {svc}: listening on 10.0.{ip_a}.{ip_b}:8080",
        f"{_iso(base_epoch)} INFO {svc}: config loaded build={p['build']} "
        f"workers={p['workers']} buffer_kb={p['buffer_kb']} "
        f"req_rate={p['req_rate']} mem_limit_pct={p['mem_limit_pct']} "
        f"queue_limit={p['queue_limit']} {fault_detail}",
        f"{_iso(base_epoch)} INFO {svc}: loaded routes from /etc/{svc}/routes.yaml",
    ]

    mem = 38.0 + p["workers"] * 0.3
    leak_ps = p.get("leak_kb", 0) * p.get("cb_rate", 0) / 25000.0 * mix
    queue = 0.0
    queue_limit = float(p["queue_limit"])
    mem_limit = float(p["mem_limit_pct"])

    cols = {name: [] for name in CANONICAL_COUNTERS}
    times: list[float] = []
    crashed = False
    crash_lines: list[str] = []

    for t in range(config.duration_s):
        noise = rng.normal(0.0, 1.0, size=6)
        endpoint = _ENDPOINTS[int(rng.integers(len(_ENDPOINTS)))]
        arrivals = int(rng.integers(80, 300))
        e = float(frng.exponential(1.0))
        leak_jitter = float(frng.random())

        def drifted(value: float, name: str) -> float:
            return value * (1.0 + p["drift"][name] * (t / config.duration_s))

        cpu = 22.0 + p["req_rate"] * 0.04 + noise[0] * 1.2
        lat = 18.0 + noise[1] * 0.8
        net_rx = drifted(
            p["req_rate"] * 900.0 + noise[2] * p["req_rate"] * 12.0, "net_rx_bytes"
        )
        net_tx = drifted(
            p["req_rate"] * 540.0 + noise[3] * p["req_rate"] * 8.0, "net_tx_bytes"
        )
        blk = drifted(35.0 + p["req_rate"] * 0.25 + noise[4] * 2.0, "blk_io_ops")
        sock = 0.0

        if spins:
            ramp = min(1.0, t / p["ramp_s"])
            cpu += ramp * (45.0 + p["spin_ms"] * 0.45) * mix
            lat += ramp * p["spin_ms"] * 1.8 * mix
        if leaks:
            mem += leak_ps * (0.8 + 0.4 * leak_jitter)
            if mem > 75.0:
                lat += (mem - 75.0) * 1.2
            if mem > 85.0:
                blk += (mem - 85.0) * 3.0
            cpu += max(0.0, mem - 75.0) * 0.3
        if cat in (FaultCategory.NET_DELAY, FaultCategory.MEM_LEAK):
            cpu = drifted(cpu, "cpu_util")
        mem_reading = mem if leaks else drifted(mem + noise[5] * 0.4, "mem_util")
        if delays:
            lat += p["delay_ms"] * e
            if e > 2.5:
                sock += 1.0

        if spins:
            # The worker pool saturates once the busy loop eats the CPU
            # headroom; beyond that, arrivals outpace completions and
            # the run queue builds until the limit trips.
            overload = cpu - 97.0
            if overload > 0.0:
                queue += p["req_rate"] * overload * 0.02 + (arrivals - 190) * 0.05
            else:
                queue = max(0.0, queue - p["workers"] * 4.0)

        cpu = float(min(100.0, max(0.0, cpu)))
        mem_reading = float(min(100.0, max(0.0, mem_reading)))
        epoch = base_epoch + t + 1.0

        lines.append(
            f"{_iso(epoch)} INFO {svc}: handled GET {endpoint} in {int(max(1, lat))} ms "
            f"status={503 if lat > 1500 or cpu > 99 else 200}"
        )
        if t % 15 == 14:
            lines.append(
                f"{_iso(epoch)} INFO monitor: stats rps={p['req_rate']} "
                f"cpu={_q(cpu, 10)} mem={_q(mem_reading, 10)} lat_ms={_q(lat, 50)}"
            )
        if spins:
            if queue > queue_limit * 0.5 and t % 5 == 0:
                lines.append(
                    f"{_iso(epoch)} WARN sched: overload, run queue depth "
                    f"{int(queue)} approaching limit {int(queue_limit)}"
                )
            if cpu >= 96.0:
                lines.append(
                    f"{_iso(epoch)} ERROR {svc}: request throttled serving GET "
                    f"{endpoint}, no worker free after {int(lat)} ms"
                )
        if leaks:
            if mem_reading >= 80.0 and t % 10 == 0:
                lines.append(
                    f"{_iso(epoch)} WARN alloc: allocation pool at "
                    f"{int(mem_reading)} pct capacity"
                )
        if delays:
            if e > 2.5:
                lines.append(
                    f"{_iso(epoch)} ERROR net: socket timeout after "
                    f"{int(p['delay_ms'] * e)} ms connecting to "
                    f"10.0.{ip_a}.{ip_b}:8443"
                )
            elif e > 1.5:
                lines.append(
                    f"{_iso(epoch)} WARN net: upstream call slow, "
                    f"{int(p['delay_ms'] * e)} ms over budget"
                )

        times.append(float(t))
        for name, value in zip(
            CANONICAL_COUNTERS,
            (cpu, mem_reading, net_rx, net_tx, blk, max(1.0, lat), sock),
        ):
            cols[name].append(round(float(value), 4))

        if leaks and mem >= mem_limit:
            crash_lines = [
                f"{_iso(epoch)} FATAL {svc}: out of memory after allocating "
                f"{p['leak_kb']} KB buffer, worker killed",
                f"{_iso(epoch)} ERROR {svc}: process exiting uncleanly",
            ]
            crashed = True
        elif spins and queue > queue_limit:
            crash_lines = [
                f"{_iso(epoch)} FATAL {svc}: overload, run queue depth "
                f"{int(queue)} exceeded limit {int(queue_limit)}, "
                "shedding load and restarting",
                f"{_iso(epoch)} ERROR {svc}: process exiting uncleanly",
            ]
            crashed = True
        if crashed:
            lines.extend(crash_lines)
            break

    series = tuple(
        TelemetrySeries(counter_id=name, samples=tuple(zip(times, cols[name])))
        for name in CANONICAL_COUNTERS
    )
    bug_id = make_bug_id(cat, config.config_id, run_index)
    ticket = BugTicket(
        bug_id=bug_id,
        description="",
        resolution=resolution_text(config),
        raw_log="\n".join(lines) + "\n",
        telemetry_series=series,
        labels={
            "bug_id": bug_id,
            "fault_category": cat.value,
            "closest_bug_id": make_bug_id(cat, config.config_id, 1 - run_index),
            "config_id": config.config_id,
            "run_index": run_index,
            "service": svc,
            "params": p,
            "crashed": crashed,
            "config_seed": config.seed,
        },
    )
    return SimulatedRun(ticket=ticket, fault=config, run_index=run_index, crashed=crashed)


_OPENERS = {
    FaultCategory.CPU_OVERLOAD: (
        "Users report {svc} slowing to a crawl a few minutes after rollout.",
        "The {svc} service burns CPU while overall traffic is flat.",
        "Dashboards show {svc} pegging its cores shortly after startup.",
        "On-call was paged for sustained high CPU and throttled requests on {svc}.",
    ),
    FaultCategory.MEM_LEAK: (
        "Memory use on {svc} climbs steadily until the pod is killed.",
        "The {svc} service leaks memory under normal traffic.",
        "Heap growth alerts fired for {svc} with no matching traffic change.",
        "{svc} workers keep dying with out-of-memory errors.",
    ),
    FaultCategory.NET_DELAY: (
        "Calls through {svc} intermittently take seconds instead of milliseconds.",
        "Latency on {svc} turned spiky with upstream timeouts.",
        "Clients of {svc} see sporadic socket timeouts.",
        "The {svc} service shows long, erratic response times.",
    ),
    FaultCategory.MIXED_CPU_MEM: (
        "After a canary push, {svc} burns CPU and leaks memory at the same time.",
        "The {svc} service shows elevated CPU and steadily growing memory at once.",
        "A bad build left {svc} compute-bound and leaking on every dashboard.",
        "Both CPU and memory on {svc} look wrong since the last deploy.",
    ),
}

_CONTEXT = (
    "Rolling restarts only help briefly.",
    "The regression appeared without a config change we can point to.",
    "Load is within normal bounds for this time of day.",
    "Other services in the mesh look healthy.",
)

DESCRIBE_PROMPT = (
    "You are writing a bug-tracker incident report. Summarize the "
    "symptoms visible in the following service log excerpt and counter "
    "summary in three or four sentences of plain prose, stating the "
    "suspected root cause and one sentence on how it was mitigated. "
    "Do not quote raw log lines.\n\n"
)


def describe_ticket(
    run: SimulatedRun,
    describer: ChatProvider | None = None,
    calls: list[CallRecord] | None = None,
) -> str:
    """Natural-language incident description for a simulated run.

    The offline path draws phrasing from seeded template banks, so the
    two runs of a configuration read similarly but not identically.
    Passing a chat provider delegates the writing to it instead.
    """
    config = run.fault
    p = config.params
    if describer is not None:
        excerpt = run.ticket.raw_log[-4000:]
        prompt = (
            DESCRIBE_PROMPT
            + f"Service: {config.service}\nLog excerpt:\n{excerpt}\n"
        )
        start = time.perf_counter()
        result = describer.complete(prompt)
        if calls is not None:
            calls.append(
                CallRecord(
                    stage="describe",
                    provider_tag=describer.tag,
                    tokens_in=result.tokens_in,
                    tokens_out=result.tokens_out,
                    elapsed=time.perf_counter() - start,
                    remote=getattr(describer, "remote", True),
                )
            )
        return result.text.strip()
    rng = np.random.default_rng(
        np.random.SeedSequence([config.seed, run.run_index, 213])
    )
    opener = _OPENERS[config.category][int(rng.integers(4))].format(svc=config.service)
    if config.category is FaultCategory.CPU_OVERLOAD:
        symptom = (
            f"CPU plateaus near {min(100, int(67 + p['spin_ms'] * 0.45))} percent and "
            f"p99 latency sits around {int(18 + p['spin_ms'] * 1.8)} ms."
        )
    elif config.category is FaultCategory.MEM_LEAK:
        symptom = (
            f"Resident memory grows roughly "
            f"{p['leak_kb'] * p['cb_rate'] / 25000.0 * 60:.1f} percent per minute."
        )
    elif config.category is FaultCategory.NET_DELAY:
        symptom = (
            f"Median latency is fine but the slow calls cluster around "
            f"{int(p['delay_ms'])} ms extra, sometimes several times that."
        )
    else:
        symptom = (
            f"CPU settles around {min(100, int(45 + p['spin_ms'] * 0.25))} percent "
            f"while resident memory adds about "
            f"{p['leak_kb'] * p['cb_rate'] / 50000.0 * 60:.1f} percent per minute."
        )
    parts = [opener, symptom, _CONTEXT[int(rng.integers(4))]]
    if run.crashed:
        if config.category is FaultCategory.CPU_OVERLOAD:
            parts.append("The worker eventually shed load and restarted itself.")
        else:
            parts.append("The worker eventually crashed with an out-of-memory error.")
    return " ".join(parts)


def resolution_text(config: FaultConfig) -> str:
    """Mitigation that closed the incident; shared by both runs of a
    configuration since they are the same fault."""
    p = config.params
    if config.category is FaultCategory.CPU_OVERLOAD:
        return (
            f"Reverted the change that ran about {p['spin_ms']} ms of synchronous "
            f"work on the {config.service} request path; moved the computation to "
            "a background pool and added a run-queue depth alert."
        )
    if config.category is FaultCategory.MEM_LEAK:
        return (
            f"Fixed the completion callback in {config.service} to release its "
            f"{p['leak_kb']} KB buffer after each event; restarted affected "
            "workers and added heap-growth alerting."
        )
    if config.category is FaultCategory.NET_DELAY:
        return (
            f"Removed the debug sleep of about {p['delay_ms']} ms left in the "
            f"{config.service} connection pool and tightened the upstream timeout "
            "so slow calls fail fast."
        )
    return (
        f"Rolled back the canary build {p['build']} on {config.service}, which had "
        "combined the busy-loop patch with the leaking completion callback; "
        "counters returned to baseline after the rollback."
    )


def generate_corpus(
    configs_per_category: int = 100,
    seed: int = 0,
    duration_s: int = 120,
    categories: tuple[FaultCategory, ...] = CATEGORIES,
    describer: ChatProvider | None = None,
) -> list[BugTicket]:
    """categories x configs_per_category x 2 runs, fully determined by
    the root seed."""
    if configs_per_category < 1:
        raise ConfigError("need at least one configuration per category")
    master = np.random.default_rng(np.random.SeedSequence(seed))
    tickets: list[BugTicket] = []
    for category in categories:
        for k in range(configs_per_category):
            config = draw_config(category, k, master, duration_s)
            for run_index in range(RUNS_PER_CONFIG):
                run = simulate_run(config, run_index)
                description = describe_ticket(run, describer)
                tickets.append(
                    dataclasses.replace(run.ticket, description=description)
                )
    return tickets


DESCRIPTION_FILE = "description.txt"
RESOLUTION_FILE = "resolution.txt"
LOG_FILE = "log.txt"
TELEMETRY_FILE = "telemetry.csv"
LABELS_FILE = "labels.json"


def save_corpus(tickets: list[BugTicket], path: str | Path) -> None:
    """One directory per ticket: description.txt, resolution.txt,
    log.txt, telemetry.csv, labels.json."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for ticket in tickets:
        d = root / ticket.bug_id
        d.mkdir(exist_ok=True)
        (d / DESCRIPTION_FILE).write_text(ticket.description + "\n", encoding="utf-8")
        (d / RESOLUTION_FILE).write_text(ticket.resolution + "\n", encoding="utf-8")
        (d / LOG_FILE).write_text(ticket.raw_log, encoding="utf-8")
        (d / TELEMETRY_FILE).write_text(
            render_telemetry_csv(list(ticket.telemetry_series)), encoding="utf-8"
        )
        (d / LABELS_FILE).write_text(
            json.dumps(ticket.labels, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )


def load_corpus(path: str | Path) -> list[BugTicket]:
    """Read every ticket directory back, sorted by bug id."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"corpus directory {root} does not exist")
    tickets: list[BugTicket] = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        required = [DESCRIPTION_FILE, RESOLUTION_FILE, LOG_FILE, LABELS_FILE]
        missing = [name for name in required if not (d / name).exists()]
        if missing:
            raise DataError(f"ticket {d.name} is missing {', '.join(missing)}")
        labels = json.loads((d / LABELS_FILE).read_text(encoding="utf-8"))
        telemetry: tuple[TelemetrySeries, ...] = ()
        tpath = d / TELEMETRY_FILE
        if tpath.exists():
            telemetry = tuple(read_telemetry_csv(tpath.read_text(encoding="utf-8")))
        tickets.append(
            BugTicket(
                bug_id=labels.get("bug_id", d.name),
                description=(d / DESCRIPTION_FILE)
                .read_text(encoding="utf-8")
                .rstrip("\n"),
                resolution=(d / RESOLUTION_FILE)
                .read_text(encoding="utf-8")
                .rstrip("\n"),
                raw_log=(d / LOG_FILE).read_text(encoding="utf-8"),
                telemetry_series=telemetry,
                labels=labels,
            )
        )
    if not tickets:
        raise DataError(f"corpus directory {root} holds no ticket directories")
    return tickets
