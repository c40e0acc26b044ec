# SPDX-License-Identifier: MIT

from __future__ import annotations

import collections
import copy
import dataclasses
import heapq
import itertools
import warnings

from fractions import Fraction
from typing import Any, Counter, Dict, List, Mapping, Optional, Tuple

import mcsim._kernel

from mcsim._model import (
    ConfigurationError, KernelError, McsimError, McsimWarning, NtfnCap, Rights, ThreadState, Time, TraceRecord
)
from mcsim._programs import (
    RECEIVES, AckIrq, Checkpoint, Complete, Compute, Local, Program, ProgramContext, ProgramGenerator,
    ProgramTimer, Request, Syscall
)


_SETTLE_LIMIT = 100_000


@dataclasses.dataclass(frozen=True)
class PeriodicJobs():
    '''Job release pattern used to judge deadlines: job ``k`` is due at ``offset + (k + 1) * period``.'''
    period: Time
    offset: Time = 0


@dataclasses.dataclass
class Job():
    thread: str
    index: int
    release: Time
    deadline: Time
    completion: Optional[Time] = None

    @property
    def missed(self) -> bool:
        return self.completion is None or self.completion > self.deadline


@dataclasses.dataclass(frozen=True)
class Segment():
    start: Time
    end: Time
    thread: Optional[str]
    sc: Optional[str]


@dataclasses.dataclass
class RunResult():
    '''Everything a run produced.'''
    horizon: Time
    trace: List[TraceRecord]
    consumed: Dict[str, Time]
    charged: Dict[str, Time]
    idle: Time
    jobs: Dict[str, List[Job]]
    timeline: List[Segment]
    ledger: Dict[str, int]
    externals: List[Tuple[Time, str]]
    errors: Dict[str, str]

    @property
    def misses(self) -> List[Job]:
        return [job for jobs in self.jobs.values() for job in jobs if job.missed]

    def share(self, thread: str) -> Fraction:
        '''Fraction of the horizon ``thread`` spent on the CPU.'''
        if not self.horizon:
            return Fraction(0)
        return Fraction(self.consumed.get(thread, 0), self.horizon)

    def summary(self) -> Dict[str, Any]:
        return {
            'horizon': self.horizon,
            'idle': self.idle,
            'threads': {
                thread: {
                    'consumed': self.consumed.get(thread, 0),
                    'jobs': len(self.jobs.get(thread, [])),
                    'misses': sum(job.missed for job in self.jobs.get(thread, [])),
                }
                for thread in sorted(set(self.consumed) | set(self.jobs))
            },
            'scs': dict(sorted(self.charged.items())),
            'ledger': dict(sorted(self.ledger.items())),
            'errors': dict(sorted(self.errors.items())),
        }


@dataclasses.dataclass
class _Runner():
    thread: str
    program: Program
    ctx: ProgramContext
    generator: Optional[ProgramGenerator]
    jobs: Optional[PeriodicJobs] = None
    pending: Optional[Request] = None
    result: Any = None
    waiting: bool = False
    compute_left: Time = 0
    completed: List[Job] = dataclasses.field(default_factory=list)
    checkpoints: Dict[str, Dict[str, Any]] = dataclasses.field(default_factory=dict)


class Engine():
    '''Discrete-event driver that runs thread programs on a :class:`~mcsim.Kernel`.

    Time only advances while the current thread computes. At any instant the
    current thread's zero-time requests are served first, then the kernel
    timer, then external events in the order they were scheduled.
    '''
    def __init__(self, kernel: mcsim._kernel.Kernel, horizon: Time) -> None:
        if horizon < 0:
            raise ConfigurationError(f'Invalid horizon {horizon}', key='run.horizon')
        self.kernel = kernel
        self.horizon = horizon
        self.clock: Time = kernel.clock
        self._runners: Dict[str, _Runner] = {}
        self._events: List[Tuple[Time, int, str, str]] = []
        self._seq = itertools.count()
        self._device: Dict[str, int] = {}
        self._externals: List[Tuple[Time, str]] = []
        self._consumed: Counter[str] = collections.Counter()
        self._idle: Time = 0
        self._timeline: List[Segment] = []
        self._errors: Dict[str, str] = {}
        kernel.faults.rollback_hooks.append(self._rollback)

    # setup

    def add_program(
        self,
        thread: str,
        program: Program,
        params: Optional[Mapping[str, Any]] = None,
        *,
        jobs: Optional[PeriodicJobs] = None,
    ) -> None:
        if thread not in self.kernel.threads:
            raise ConfigurationError(f'Unknown thread `{thread}`', key=f'thread.{thread}')
        if thread in self._runners:
            raise ConfigurationError(f'Thread `{thread}` already has a program', key=f'thread.{thread}.program')
        ctx = ProgramContext(thread, params or {}, lambda: self.clock)
        runner = _Runner(thread, program, ctx, program.start(ctx), jobs)
        runner.checkpoints[''] = {}
        self._runners[thread] = runner

    def start_thread(self, thread: str, at: Time = 0) -> None:
        self._push(at, 'start', thread)

    def add_interrupt(self, at: Time, ntfn: str) -> None:
        '''Schedule an external interrupt; these are the inputs a replay needs.'''
        if ntfn not in self.kernel.notifications:
            raise ConfigurationError(f'Unknown notification `{ntfn}`', key='interrupt.ntfn')
        self._push(at, 'irq', ntfn)

    def _push(self, at: Time, kind: str, arg: str) -> int:
        seq = next(self._seq)
        heapq.heappush(self._events, (at, seq, kind, arg))
        return seq

    def _record(self, category: str, subject: str = '', object: str = '', **detail: object) -> None:
        self.kernel.trace.append(TraceRecord(
            self.clock, category, subject, object, tuple(sorted((key, str(value)) for key, value in detail.items()))
        ))

    # main loop

    def run(self) -> RunResult:
        while True:
            self._settle()
            event = self._next_event()
            if event is None or event[0] > self.horizon:
                break
            when, kind, arg = event
            self._advance(when)
            self._fire(kind, arg)
        self._advance(self.horizon)
        return self._finish()

    def _current_runner(self) -> Optional[_Runner]:
        current = self.kernel.current
        if current is None:
            return None
        return self._runners.get(current)

    def _next_event(self) -> Optional[Tuple[Time, str, str]]:
        candidates: List[Tuple[Time, int, int, str, str]] = []
        runner = self._current_runner()
        if runner is not None and runner.compute_left > 0:
            candidates.append((self.clock + runner.compute_left, 0, 0, 'compute', runner.thread))
        deadline = self.kernel.sched.state.timer_deadline
        if deadline is not None:
            candidates.append((max(deadline, self.clock), 1, 0, 'timer', ''))
        while self._events:
            at, seq, kind, arg = self._events[0]
            if kind == 'device' and self._device.get(arg) != seq:
                heapq.heappop(self._events)
                continue
            candidates.append((max(at, self.clock), 2, seq, kind, arg))
            break
        if not candidates:
            return None
        when, rank, _, kind, arg = min(candidates)
        if rank == 2:
            heapq.heappop(self._events)
        return when, kind, arg

    def _advance(self, when: Time) -> None:
        elapsed = when - self.clock
        if elapsed < 0:
            raise AssertionError(f'Time went back from {self.clock} to {when}')
        if elapsed:
            current = self.kernel.current
            if current is None:
                self._idle += elapsed
            else:
                self._consumed[current] += elapsed
                runner = self._runners.get(current)
                if runner is not None and runner.compute_left:
                    runner.compute_left -= elapsed
            self._segment(self.clock, when, current, self.kernel.sched.state.current_sc)
        self.clock = when

    def _segment(self, start: Time, end: Time, thread: Optional[str], sc: Optional[str]) -> None:
        if self._timeline:
            last = self._timeline[-1]
            if last.end == start and last.thread == thread and last.sc == sc:
                self._timeline[-1] = dataclasses.replace(last, end=end)
                return
        self._timeline.append(Segment(start, end, thread, sc))

    def _fire(self, kind: str, arg: str) -> None:
        kernel = self.kernel
        if kind == 'timer':
            kernel.timer_interrupt(self.clock)
        elif kind == 'irq':
            self._externals.append((self.clock, arg))
            kernel.irq(self.clock, arg, source='external')
        elif kind == 'device':
            del self._device[arg]
            kernel.irq(self.clock, arg)
        elif kind == 'start':
            runner = self._runners.get(arg)
            home = kernel.threads[arg].home_sc
            if runner is not None and runner.jobs is not None and home is not None:
                sc = kernel.scs[home]
                sc.next_refill = self.clock + sc.period
            with kernel.invocation(self.clock):
                kernel.start(arg)

    # programs

    def _settle(self) -> None:
        for _ in range(_SETTLE_LIMIT):
            runner = self._current_runner()
            if runner is None or runner.compute_left > 0:
                return
            self._step(runner)
        raise McsimError(f'No progress at time {self.clock}: too many requests without computing')

    def _step(self, runner: _Runner) -> None:
        request = runner.pending
        if request is None:
            request = self._resume(runner)
            if request is None:
                return
        if isinstance(request, Compute):
            runner.pending = None
            runner.compute_left = request.duration
        elif isinstance(request, Local):
            runner.pending = None
            runner.result = self._local(runner, request)
        else:
            assert isinstance(request, Syscall)
            self._syscall(runner, request)

    def _resume(self, runner: _Runner) -> Optional[Request]:
        '''Feed the last outcome to the program and fetch its next request.'''
        assert runner.generator is not None
        if runner.waiting:
            runner.waiting = False
            value = self.kernel.outcomes.pop(runner.thread, None)
        else:
            value, runner.result = runner.result, None
        try:
            if isinstance(value, KernelError):
                request = runner.generator.throw(value)
            else:
                request = runner.generator.send(value)
        except StopIteration:
            self._halt(runner, 'exit')
            return None
        except KernelError as e:
            self._errors[runner.thread] = f'{type(e).__name__}: {e}'
            self._halt(runner, 'error', error=type(e).__name__)
            return None
        if not isinstance(request, Request):
            raise McsimError(f'Program `{runner.program.name}` yielded {request!r} instead of a request')
        runner.pending = request
        return request

    def _syscall(self, runner: _Runner, request: Syscall) -> None:
        kernel = self.kernel
        with kernel.invocation(self.clock):
            thread = kernel.threads[runner.thread]
            if kernel.current != thread.id or thread.state is not ThreadState.RUNNING:
                # out of budget on entry, issued again when the thread next runs
                return
            runner.pending = None
            try:
                value = request.issue(kernel, thread.id)
            except KernelError as e:
                value = e
            if thread.state.blocked and thread.state is not ThreadState.BLOCKED_ON_FAULT:
                runner.waiting = True
            else:
                runner.result = kernel.outcomes.pop(thread.id, value)

    def _local(self, runner: _Runner, request: Local) -> Any:
        if isinstance(request, Checkpoint):
            runner.checkpoints[request.name or ''] = copy.deepcopy(runner.ctx.state)
            self._record('checkpoint', runner.thread, checkpoint=request.name or '')
            return None
        if isinstance(request, Complete):
            return self._complete(runner)
        assert isinstance(request, (ProgramTimer, AckIrq))
        try:
            self.kernel.authority.require(runner.thread, NtfnCap(request.ntfn, Rights.RECV))
        except KernelError as e:
            return e
        if isinstance(request, ProgramTimer):
            self._device[request.ntfn] = self._push(max(request.at, self.clock), 'device', request.ntfn)
        else:
            self.kernel.ledger['irq-ack'] += 1
        return None

    def _complete(self, runner: _Runner) -> int:
        index = len(runner.completed)
        if runner.jobs is None:
            self._record('complete', runner.thread, job=index)
            runner.completed.append(Job(runner.thread, index, self.clock, self.clock, self.clock))
            return index
        release = runner.jobs.offset + index * runner.jobs.period
        job = Job(runner.thread, index, release, release + runner.jobs.period, self.clock)
        runner.completed.append(job)
        self._record('complete', runner.thread, job=index)
        if job.missed:
            self._record('deadline-miss', runner.thread, job=index, deadline=job.deadline)
        return index

    def _halt(self, runner: _Runner, reason: str, **detail: object) -> None:
        runner.generator = None
        runner.pending = None
        self._record(reason, runner.thread, **detail)
        with self.kernel.invocation(self.clock):
            self.kernel.halt(runner.thread, reason)

    def _rollback(self, thread: str, checkpoint: Optional[str]) -> None:
        '''Restore the last commit of ``thread`` and restart its program at its first receive.'''
        runner = self._runners.get(thread)
        if runner is None:
            return
        saved = runner.checkpoints.get(checkpoint or '')
        if saved is None:
            warnings.warn(f'Thread `{thread}` has no checkpoint `{checkpoint}`, restarting clean', McsimWarning)
            saved = runner.checkpoints['']
        runner.ctx.state = copy.deepcopy(saved)
        generator = runner.program.start(runner.ctx)
        try:
            request = next(generator)
            while not isinstance(request, RECEIVES):
                request = generator.send(None)
        except StopIteration:
            raise McsimError(f'Program `{runner.program.name}` never receives and cannot be restarted') from None
        runner.generator = generator
        runner.pending = None
        runner.result = None
        runner.compute_left = 0
        runner.waiting = True
        self._record('restart', thread, checkpoint=checkpoint or '')

    # results

    def _finish(self) -> RunResult:
        kernel = self.kernel
        state = kernel.sched.state
        charged = {sc.id: sc.charged for sc in kernel.scs.values()}
        if state.current_sc is not None:
            charged[state.current_sc] += self.horizon - state.now

        jobs: Dict[str, List[Job]] = {}
        for runner in self._runners.values():
            if runner.jobs is None and not runner.completed:
                continue
            jobs[runner.thread] = list(runner.completed)
            if runner.jobs is None:
                continue
            due = max(self.horizon - runner.jobs.offset, 0) // runner.jobs.period
            for index in range(len(runner.completed), due):
                release = runner.jobs.offset + index * runner.jobs.period
                job = Job(runner.thread, index, release, release + runner.jobs.period)
                jobs[runner.thread].append(job)
                self._record('deadline-miss', runner.thread, job=index, deadline=job.deadline)

        return RunResult(
            horizon=self.horizon,
            trace=kernel.trace,
            consumed=dict(self._consumed),
            charged=charged,
            idle=self._idle,
            jobs=jobs,
            timeline=list(self._timeline),
            ledger=dict(kernel.ledger),
            externals=list(self._externals),
            errors=dict(self._errors),
        )
