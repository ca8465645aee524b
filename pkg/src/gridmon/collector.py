"""The station's data-collection engine.

Periodic collection tasks sit in a priority queue keyed by (next_due,
task_id) and are handed to a dynamic worker pool. Scheduling is fixed
rate: a task due at t is next due at t+period no matter when it actually
ran, so load does not accumulate drift. A hung or failing task is hard
cancelled at its deadline, its late result discarded, and only its own
cadence backs off; every other task keeps its latency.

Results leave the engine through a bounded channel so no slow consumer
can ever stall a worker; overflow is counted, not blocked on.
"""
from __future__ import annotations

import heapq
import itertools
import logging
import queue
import shlex
import subprocess
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

from .clock import Clock
from .metrics import MetricValue

log = logging.getLogger(__name__)


class EngineError(Exception):
    pass


@dataclass
class TaskRun:
    """Everything a module sees for one execution."""
    task_id: str
    target: str
    due_ms: int
    deadline_ms: int
    cancel: threading.Event
    clock: Clock
    stale: bool = False  # set when the deadline reaper gave up on us
    dispatched_ms: float = 0.0


class CollectorModule:
    """Contract for pluggable collectors.

    collect() must honor run.cancel (the engine enforces the deadline and
    will discard late results); values it returns should carry their own
    timestamps, anything without one gets stamped by the engine.
    """

    name = "abstract"

    def collect(self, run: TaskRun) -> list[MetricValue]:  # pragma: no cover
        raise NotImplementedError


@dataclass
class TaskSpec:
    task_id: str
    module_name: str
    target: str
    period_ms: int
    deadline_ms: int
    next_due: int = 0
    consecutive_failures: int = 0
    last_due: int = 0
    runs: int = 0


@dataclass(frozen=True)
class PoolState:
    active_workers: int
    idle_workers: int
    max_workers: int
    queue_depth: int


class CollectionEngine:
    def __init__(self, clock: Clock,
                 sink: Optional[Callable[[str, list[MetricValue]], None]] = None,
                 max_workers: int = 64,
                 default_deadline_ms: int = 10_000,
                 idle_target: int = 4,
                 idle_ttl_ms: int = 30_000,
                 backoff_cap_ms: int = 600_000,
                 channel_size: int = 10_000):
        self.clock = clock
        self.sink = sink
        self.max_workers = max_workers
        self.default_deadline_ms = default_deadline_ms
        self.idle_target = idle_target
        self.idle_ttl_ms = idle_ttl_ms
        self.backoff_cap_ms = backoff_cap_ms

        self._modules: dict[str, CollectorModule] = {}
        self._module_enabled: dict[str, bool] = {}

        self._lock = threading.Lock()          # tasks + heap
        self._tasks: dict[str, TaskSpec] = {}
        self._heap: list[tuple[int, str]] = []
        self._ids = itertools.count(1)

        self._plock = threading.Lock()         # pool counters
        self._total_workers = 0
        self._busy_workers = 0
        self._work: queue.Queue = queue.Queue()

        self._running: dict[int, TaskRun] = {}  # live runs for the reaper
        self._run_ids = itertools.count(1)
        self._reaper_wake = threading.Condition()

        self._results: queue.Queue = queue.Queue(maxsize=channel_size)

        # observability
        self.saturation_count = 0
        self.dispatched = 0
        self.completed = 0
        self.failed = 0
        self.values_collected = 0
        self.dropped_results = 0
        self.latencies_ms: list[float] = []
        self._active_samples = [0.0, 0]  # (sum, n) of busy-worker samples

        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    # ----------------------------------------------------------- plugins

    def register_module(self, module: CollectorModule) -> None:
        self._modules[module.name] = module
        self._module_enabled.setdefault(module.name, True)

    def set_module_enabled(self, name: str, enabled: bool) -> bool:
        """Admin toggle: disabled modules skip dispatch but keep cadence."""
        if name not in self._modules:
            return False
        self._module_enabled[name] = enabled
        return True

    def module_enabled(self, name: str) -> bool:
        return self._module_enabled.get(name, False)

    # -------------------------------------------------------- scheduling

    def schedule(self, module_name: str, target: str, period_ms: int,
                 deadline_ms: Optional[int] = None,
                 task_id: Optional[str] = None,
                 first_due: Optional[int] = None) -> str:
        """Queue a periodic task; the first run is due immediately unless
        first_due pins it (simulations pin it for reproducible schedules)."""
        if module_name not in self._modules:
            raise EngineError(f"unknown module {module_name!r}")
        if period_ms <= 0:
            raise EngineError("period_ms must be positive")
        deadline = deadline_ms if deadline_ms else self.default_deadline_ms
        if deadline > period_ms:
            log.warning("task %s: deadline %dms exceeds period %dms",
                        target, deadline, period_ms)
        tid = task_id or f"t{next(self._ids):06d}"
        due = self.clock.now_ms() if first_due is None else first_due
        spec = TaskSpec(task_id=tid, module_name=module_name, target=target,
                        period_ms=period_ms, deadline_ms=deadline,
                        next_due=due, last_due=due)
        with self._lock:
            if tid in self._tasks:
                raise EngineError(f"duplicate task id {tid!r}")
            self._tasks[tid] = spec
            heapq.heappush(self._heap, (spec.next_due, tid))
        return tid

    def cancel_task(self, task_id: str) -> bool:
        with self._lock:
            return self._tasks.pop(task_id, None) is not None

    def task(self, task_id: str) -> Optional[TaskSpec]:
        return self._tasks.get(task_id)

    def effective_period(self, spec: TaskSpec) -> int:
        """Backoff kicks in from the third consecutive failure."""
        if spec.consecutive_failures >= 3:
            factor = 2 ** (spec.consecutive_failures - 2)
            return min(spec.period_ms * factor, self.backoff_cap_ms)
        return spec.period_ms

    def run_due(self, now: int) -> list[str]:
        """Dispatch every due task there is capacity for, in (due, id) order."""
        dispatched: list[str] = []
        while True:
            with self._lock:
                if not self._heap or self._heap[0][0] > now:
                    break
                due, tid = heapq.heappop(self._heap)
                spec = self._tasks.get(tid)
                if spec is None or spec.next_due != due:
                    continue  # stale heap entry
                if not self._module_enabled.get(spec.module_name, False):
                    spec.last_due = due
                    spec.next_due = due + self.effective_period(spec)
                    heapq.heappush(self._heap, (spec.next_due, tid))
                    continue
                if not self._reserve_worker():
                    self.saturation_count += 1
                    heapq.heappush(self._heap, (due, tid))  # stays queued
                    break
                spec.last_due = due
                spec.next_due = due + self.effective_period(spec)
                spec.runs += 1
                heapq.heappush(self._heap, (spec.next_due, tid))
            run = TaskRun(task_id=tid, target=spec.target, due_ms=due,
                          deadline_ms=spec.deadline_ms, cancel=threading.Event(),
                          clock=self.clock,
                          dispatched_ms=self.clock.monotonic_ms())
            rid = next(self._run_ids)
            with self._reaper_wake:
                self._running[rid] = run
                self._reaper_wake.notify()
            self.dispatched += 1
            self._work.put((rid, run, self._modules[spec.module_name]))
            dispatched.append(tid)
        return dispatched

    def _reserve_worker(self) -> bool:
        with self._plock:
            if self._busy_workers >= self.max_workers:
                return False
            if self._busy_workers >= self._total_workers:
                self._total_workers += 1
                t = threading.Thread(target=self._worker_loop,
                                     name=f"collector-worker-{self._total_workers}",
                                     daemon=True)
                t.start()
            self._busy_workers += 1
            return True

    # ------------------------------------------------------------ workers

    def _worker_loop(self) -> None:
        while not self._stop.is_set():
            try:
                item = self._work.get(timeout=self.clock.wall_seconds(self.idle_ttl_ms) or 0.05)
            except queue.Empty:
                with self._plock:
                    idle = self._total_workers - self._busy_workers
                    if idle > self.idle_target:
                        self._total_workers -= 1
                        return
                continue
            if item is None:
                return
            rid, run, module = item
            try:
                values = module.collect(run)
                error = None
            except Exception as e:  # module bugs must not kill the worker
                values, error = [], e
            with self._reaper_wake:
                self._running.pop(rid, None)
            with self._plock:
                self._busy_workers -= 1
            if run.stale:
                continue  # cancelled: late result discarded
            if error is None:
                self.complete(run.task_id, values or [], run)
            else:
                self.fail_or_timeout(run.task_id, repr(error))

    def complete(self, task_id: str, values: list[MetricValue],
                 run: Optional[TaskRun] = None) -> None:
        """Successful run: forward values, reset the failure cadence."""
        now = self.clock.now_ms()
        stamped = [v if v.time > 0 else
                   MetricValue(v.farm, v.cluster, v.node, v.param, now, v.value)
                   for v in values]
        with self._lock:
            spec = self._tasks.get(task_id)
            if spec is not None:
                if spec.consecutive_failures >= 3:
                    spec.next_due = spec.last_due + spec.period_ms
                    heapq.heappush(self._heap, (spec.next_due, task_id))
                spec.consecutive_failures = 0
        self.completed += 1
        self.values_collected += len(stamped)
        if run is not None:
            self.latencies_ms.append(self.clock.monotonic_ms() - run.dispatched_ms)
        if stamped:
            try:
                self._results.put_nowait((task_id, stamped))
            except queue.Full:
                self.dropped_results += len(stamped)

    def fail_or_timeout(self, task_id: str, cause: str) -> None:
        """Failed or cancelled run: back off this task, leave the rest alone."""
        with self._lock:
            spec = self._tasks.get(task_id)
            if spec is None:
                return
            spec.consecutive_failures += 1
            if spec.consecutive_failures >= 3:
                spec.next_due = spec.last_due + self.effective_period(spec)
                heapq.heappush(self._heap, (spec.next_due, task_id))
        self.failed += 1
        log.debug("task %s failed: %s", task_id, cause)

    # ------------------------------------------------------------ engine

    def start(self) -> None:
        for fn, name in ((self._scheduler_loop, "collector-scheduler"),
                         (self._reaper_loop, "collector-reaper"),
                         (self._sink_loop, "collector-sink")):
            t = threading.Thread(target=fn, name=name, daemon=True)
            t.start()
            self._threads.append(t)

    def stop(self) -> None:
        self._stop.set()
        with self._reaper_wake:
            self._reaper_wake.notify()
        self._results.put(None)
        for _ in range(self._total_workers):
            self._work.put(None)
        for t in self._threads:
            t.join(timeout=2)

    def _scheduler_loop(self) -> None:
        while not self._stop.is_set():
            now = self.clock.now_ms()
            self.run_due(now)
            with self._plock:
                self._active_samples[0] += self._busy_workers
                self._active_samples[1] += 1
            with self._lock:
                head = self._heap[0][0] if self._heap else now + 200
            self.clock.sleep(min(max(head - self.clock.now_ms(), 5), 200))

    def _reaper_loop(self) -> None:
        """Hard-cancel runs past their deadline; their tasks fail immediately."""
        while not self._stop.is_set():
            now = self.clock.monotonic_ms()
            expired: list[tuple[int, TaskRun]] = []
            with self._reaper_wake:
                soonest = None
                for rid, run in self._running.items():
                    deadline_at = run.dispatched_ms + run.deadline_ms
                    if deadline_at <= now:
                        expired.append((rid, run))
                    elif soonest is None or deadline_at < soonest:
                        soonest = deadline_at
                for rid, _ in expired:
                    self._running.pop(rid, None)
                if not expired:
                    wait_ms = 100 if soonest is None else max(soonest - now, 1)
                    self._reaper_wake.wait(self.clock.wall_seconds(min(wait_ms, 500)) or 0.01)
            for _, run in expired:
                run.stale = True
                run.cancel.set()
                self.fail_or_timeout(run.task_id, "deadline exceeded")

    def _sink_loop(self) -> None:
        while True:
            item = self._results.get()
            if item is None:
                return
            task_id, values = item
            if self.sink:
                try:
                    self.sink(task_id, values)
                except Exception:
                    log.exception("result sink failed")

    # -------------------------------------------------------------- state

    def pool_state(self) -> PoolState:
        with self._plock:
            busy, total = self._busy_workers, self._total_workers
        with self._lock:
            now = self.clock.now_ms()
            backlog = sum(1 for due, tid in self._heap
                          if due <= now and tid in self._tasks
                          and self._tasks[tid].next_due == due)
        return PoolState(active_workers=busy, idle_workers=total - busy,
                         max_workers=self.max_workers, queue_depth=backlog)

    def mean_active_workers(self) -> float:
        s, n = self._active_samples
        return s / n if n else 0.0

    def reap_idle(self) -> None:
        """Nudge surplus idle workers to exit without waiting out their TTL."""
        with self._plock:
            surplus = (self._total_workers - self._busy_workers) - self.idle_target
        for _ in range(max(surplus, 0)):
            self._work.put(None)
            with self._plock:
                self._total_workers -= 1


class ExecModule(CollectorModule):
    """Runs an external command and parses metric lines from stdout.

    Line format: `<farm>/<cluster>/<node>/<param> <value> [<epoch_ms>]`.
    The run's target is substituted for `{target}` in the command. The
    deadline is enforced by killing the process, a real hard cancel.
    """

    name = "exec"

    def __init__(self, command: str):
        self.command = command

    def collect(self, run: TaskRun) -> list[MetricValue]:
        argv = [a.replace("{target}", run.target) for a in shlex.split(self.command)]
        timeout_s = run.clock.wall_seconds(run.deadline_ms)
        try:
            proc = subprocess.run(argv, capture_output=True, text=True,
                                  timeout=max(timeout_s, 0.05))
        except subprocess.TimeoutExpired as e:
            raise EngineError(f"exec timed out: {argv[0]}") from e
        if proc.returncode != 0:
            raise EngineError(f"exec failed rc={proc.returncode}: {proc.stderr[:200]}")
        now = run.clock.now_ms()
        out: list[MetricValue] = []
        for line in proc.stdout.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            key = parts[0].split("/")
            if len(key) != 4 or len(parts) < 2:
                continue
            t = int(parts[2]) if len(parts) > 2 else now
            try:
                out.append(MetricValue(key[0], key[1], key[2], key[3],
                                       t, float(parts[1])))
            except ValueError:
                continue
        return out
