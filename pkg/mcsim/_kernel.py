# SPDX-License-Identifier: MIT

from __future__ import annotations

import collections
import contextlib
import dataclasses

from typing import Any, Counter, Dict, Iterator, List, Mapping, Optional, Union

import mcsim._crit
import mcsim._ipc
import mcsim._sched
import mcsim._timefault

from mcsim._model import (
    AlreadyBound, AuthorityTable, BadLevel, BadParams, ConfigurationError, Endpoint, ExceedsMcc, ExceedsMcp, KernelConfig,
    KernelError, McsimError, Message, NotBound, Notification, ScCap, SchedulingContext, TcbCap, Thread,
    ThreadState, Time, TraceRecord
)


Outcome = Union[Message, KernelError, int, None]


class InvariantViolation(McsimError):
    '''The kernel state broke one of its invariants.'''


class Kernel():
    '''Kernel objects and the system calls that act on them.

    Every system call names its invoker (``actor``) and is checked against
    the authority table before it changes anything, so a failed call leaves
    the state as it was. Entering and leaving the kernel is explicit, see
    :meth:`invocation`.
    '''
    def __init__(self, config: Optional[KernelConfig] = None) -> None:
        self.config = config or KernelConfig()
        self.threads: Dict[str, Thread] = {}
        self.scs: Dict[str, SchedulingContext] = {}
        self.endpoints: Dict[str, Endpoint] = {}
        self.notifications: Dict[str, Notification] = {}
        self.authority = AuthorityTable()
        self.ledger: Counter[str] = collections.Counter()
        self.trace: List[TraceRecord] = []
        self.outcomes: Dict[str, Outcome] = {}
        self.check = False
        self._bound: Dict[str, str] = {}
        self.crit = mcsim._crit.Criticality(self)
        self.sched = mcsim._sched.Scheduler(self)
        self.ipc = mcsim._ipc.Ipc(self)
        self.faults = mcsim._timefault.TimeoutFaults(self)

    @property
    def clock(self) -> Time:
        return self.sched.state.entry_time

    @property
    def current(self) -> Optional[str]:
        return self.sched.state.current_thread

    def record(
        self,
        category: str,
        subject: str = '',
        object: str = '',
        *,
        detail: Optional[Mapping[str, str]] = None,
    ) -> None:
        self.trace.append(TraceRecord(
            self.clock, category, subject, object, tuple(sorted((detail or {}).items()))
        ))

    def deliver(self, thread: str, outcome: Outcome) -> None:
        self.outcomes[thread] = outcome

    def effective_priority(self, thread: str) -> int:
        return self.threads[thread].effective_priority

    def bound_notification(self, thread: str) -> Optional[Notification]:
        name = self._bound.get(thread)
        return self.notifications[name] if name is not None else None

    # object creation

    def _check_name(self, name: str, kind: str) -> None:
        if not name:
            raise ConfigurationError(f'A {kind} needs a name')
        if name in self.threads or name in self.scs or name in self.endpoints or name in self.notifications:
            raise ConfigurationError(f'Duplicate object name `{name}`', key=f'{kind}.{name}')

    def create_sc(self, name: str, budget: Time = 0, period: Time = 1, data: int = 0) -> SchedulingContext:
        self._check_name(name, 'sc')
        if period <= 0 or budget < 0 or budget > period:
            raise ConfigurationError(f'Invalid budget {budget} for period {period}', key=f'sc.{name}')
        sc = SchedulingContext(name, budget, period, remaining=budget, next_refill=self.clock + period, data=data)
        self.scs[name] = sc
        return sc

    def create_thread(
        self,
        name: str,
        priority: int = 0,
        *,
        mcp: Optional[int] = None,
        criticality: int = 0,
        mcc: Optional[int] = None,
        timeout_handler: Optional[str] = None,
    ) -> Thread:
        '''Create a suspended thread; bind a scheduling context and resume it to make it run.'''
        self._check_name(name, 'thread')
        if not 0 <= priority <= self.config.max_priority:
            raise ConfigurationError(
                f'Priority {priority} is outside [0, {self.config.max_priority}]', key=f'thread.{name}.priority'
            )
        if not 0 <= criticality < self.config.criticality_levels:
            raise ConfigurationError(
                f'Criticality {criticality} is outside [0, {self.config.criticality_levels - 1}]',
                key=f'thread.{name}.criticality',
            )
        if mcp is not None and not 0 <= mcp <= self.config.max_priority:
            raise ConfigurationError(
                f'MCP {mcp} is outside [0, {self.config.max_priority}]', key=f'thread.{name}.mcp'
            )
        if timeout_handler is not None and timeout_handler not in self.endpoints:
            raise ConfigurationError(
                f'Unknown timeout handler endpoint `{timeout_handler}`', key=f'thread.{name}.timeout-handler'
            )
        thread = Thread(
            name,
            base_priority=priority,
            mcp=priority if mcp is None else mcp,
            criticality=criticality,
            mcc=criticality if mcc is None else mcc,
            timeout_handler=timeout_handler,
        )
        thread.effective_priority = self.crit.effective_priority(thread)
        self.threads[name] = thread
        return thread

    def create_endpoint(self, name: str) -> Endpoint:
        self._check_name(name, 'endpoint')
        endpoint = Endpoint(name)
        self.endpoints[name] = endpoint
        return endpoint

    def create_notification(self, name: str, bound: Optional[str] = None) -> Notification:
        self._check_name(name, 'notification')
        notification = Notification(name)
        if bound is not None:
            if bound not in self.threads:
                raise ConfigurationError(f'Unknown thread `{bound}`', key=f'notification.{name}.bound')
            if bound in self._bound:
                raise ConfigurationError(
                    f'Thread `{bound}` already has a bound notification', key=f'notification.{name}.bound'
                )
            notification.bound_thread = bound
            self._bound[bound] = name
        self.notifications[name] = notification
        return notification

    # kernel entry and exit

    def enter(self, now: Time, *, timer: bool = False) -> None:
        if self.sched.kernel_entry(now, timer=timer):
            current = self.sched.current
            assert current is not None
            self._overrun(current)
        if timer:
            self.sched.release_wakeup(now)

    def _overrun(self, thread: Thread) -> None:
        if thread.timeout_handler is not None:
            self.faults.raise_timeout(thread)
        else:
            self.sched.budget_expire(thread)

    def exit(self) -> Optional[str]:
        chosen = self.sched.kernel_exit()
        if self.check:
            self.check_invariants()
        return chosen

    @contextlib.contextmanager
    def invocation(self, now: Time, *, timer: bool = False) -> Iterator[None]:
        '''Run the body between a kernel entry at ``now`` and the following exit.'''
        self.enter(now, timer=timer)
        try:
            yield
        finally:
            self.exit()

    def timer_interrupt(self, now: Time) -> None:
        with self.invocation(now, timer=True):
            pass

    def irq(self, now: Time, ntfn: str, *, source: str = 'device') -> None:
        '''Deliver an external interrupt to a notification.'''
        with self.invocation(now):
            self.record('irq', object=ntfn, detail={'source': source})
            self.ipc.notify(self.notifications[ntfn])

    def start(self, target: str) -> None:
        '''Boot a thread without a capability, as the loader does for initial threads.'''
        self._resume(target, 'boot')

    def halt(self, target: str, reason: str = 'exit') -> None:
        '''Stop a thread whose program ended.'''
        self._suspend(target, reason)

    # thread and scheduling-context control

    def bind_sc(self, actor: str, sc_id: str, thread_id: str) -> None:
        self.authority.require(actor, ScCap(sc_id))
        self.authority.require(actor, TcbCap(thread_id))
        self.attach(sc_id, thread_id)

    def attach(self, sc_id: str, thread_id: str) -> None:
        '''Bind without a capability, as the loader does for initial threads.'''
        sc = self.scs[sc_id]
        thread = self.threads[thread_id]
        if sc.home_thread is not None:
            raise AlreadyBound(f'Scheduling context `{sc_id}` is bound to `{sc.home_thread}`')
        if thread.home_sc is not None:
            raise AlreadyBound(f'Thread `{thread_id}` is bound to `{thread.home_sc}`')
        sc.home_thread = thread.id
        thread.home_sc = sc.id
        self.record('bind', sc.id, thread.id)
        if thread.current_sc is None and sc.running_thread is None:
            thread.current_sc = sc.id
            sc.running_thread = thread.id
            if thread.state is ThreadState.INACTIVE:
                self.sched.make_runnable(thread)

    def unbind_sc(self, actor: str, sc_id: str) -> None:
        self.authority.require(actor, ScCap(sc_id))
        sc = self.scs[sc_id]
        if sc.home_thread is None:
            raise NotBound(f'Scheduling context `{sc_id}` is not bound')
        thread = self.threads[sc.home_thread]
        sc.home_thread = None
        thread.home_sc = None
        self.record('unbind', sc.id, thread.id)
        if sc.running_thread != thread.id:
            return
        sc.running_thread = None
        thread.current_sc = None
        if thread.state in (ThreadState.READY, ThreadState.OUT_OF_BUDGET):
            self.sched.dequeue(thread)
            thread.state = ThreadState.INACTIVE

    def set_priority(self, actor: str, target: str, priority: int) -> None:
        self.authority.require(actor, TcbCap(target))
        if priority > self.threads[actor].mcp:
            raise ExceedsMcp(f'Priority {priority} is above the MCP of `{actor}`')
        if not 0 <= priority <= self.config.max_priority:
            raise BadParams(f'Invalid priority {priority}')
        thread = self.threads[target]
        thread.base_priority = priority
        self.sched.reprioritise(thread, self.crit.effective_priority(thread))
        self.record('set-priority', actor, target, detail={'priority': str(priority)})

    def set_criticality(self, actor: str, target: str, criticality: int) -> None:
        self.authority.require(actor, TcbCap(target))
        if not 0 <= criticality < self.config.criticality_levels:
            raise BadLevel(f'Criticality {criticality} is out of range')
        if criticality > self.threads[actor].mcc:
            raise ExceedsMcc(f'Criticality {criticality} is above the MCC of `{actor}`')
        thread = self.threads[target]
        if criticality == thread.criticality:
            return
        self.crit.move(thread, criticality)
        self.sched.reprioritise(thread, self.crit.effective_priority(thread))
        self.record('set-criticality', actor, target, detail={'criticality': str(criticality)})

    def set_mcp(self, actor: str, target: str, mcp: int) -> None:
        self.authority.require(actor, TcbCap(target))
        if not 0 <= mcp <= self.config.max_priority:
            raise BadParams(f'Invalid MCP {mcp}')
        if mcp > self.threads[actor].mcp:
            raise ExceedsMcp(f'MCP {mcp} is above the MCP of `{actor}`')
        self.threads[target].mcp = mcp

    def set_mcc(self, actor: str, target: str, mcc: int) -> None:
        self.authority.require(actor, TcbCap(target))
        if mcc > self.threads[actor].mcc:
            raise ExceedsMcc(f'MCC {mcc} is above the MCC of `{actor}`')
        self.threads[target].mcc = mcc

    def resume(self, actor: str, target: str) -> None:
        self.authority.require(actor, TcbCap(target))
        self._resume(target, actor)

    def _resume(self, target: str, actor: str) -> None:
        thread = self.threads[target]
        if thread.state is not ThreadState.SUSPENDED:
            return
        self.crit.enlist(thread)
        thread.effective_priority = self.crit.effective_priority(thread)
        self.record('resume', actor, target)
        self.sched.make_runnable(thread)

    def suspend(self, actor: str, target: str) -> None:
        '''Stop a thread, cancelling whatever it was blocked on.'''
        self.authority.require(actor, TcbCap(target))
        self._suspend(target, actor)

    def _suspend(self, target: str, actor: str) -> None:
        thread = self.threads[target]
        if thread.state is ThreadState.SUSPENDED:
            return
        self.sched.dequeue(thread)
        if thread.state in (ThreadState.BLOCKED_SEND, ThreadState.BLOCKED_RECV, ThreadState.BLOCKED_ON_FAULT):
            endpoint = self.endpoints.get(thread.blocked_on or '')
            if endpoint is not None:
                endpoint.remove(thread.id)
        elif thread.state is ThreadState.WAITING_NOTIFICATION:
            self.notifications[thread.blocked_on or ''].waiter = None
        if thread.state.blocked and thread.state is not ThreadState.BLOCKED_ON_FAULT:
            self.deliver(thread.id, None)
        thread.state = ThreadState.SUSPENDED
        thread.blocked_on = None
        self.crit.delist(thread)
        self.record('suspend', actor, target)

    # inspection

    def snapshot(self) -> Dict[str, Any]:
        '''Plain-data copy of the whole kernel state.'''
        state = self.sched.state
        return {
            'threads': [dataclasses.asdict(thread) for _, thread in sorted(self.threads.items())],
            'scs': [dataclasses.asdict(sc) for _, sc in sorted(self.scs.items())],
            'endpoints': [dataclasses.asdict(ep) for _, ep in sorted(self.endpoints.items())],
            'notifications': [dataclasses.asdict(n) for _, n in sorted(self.notifications.items())],
            'authority': self.authority.snapshot(),
            'ready': state.ready.snapshot(),
            'release': state.release.snapshot(),
            'criticality': self.crit.snapshot(),
            'outcomes': sorted(self.outcomes),
            'timer': (state.now, state.current_thread, state.current_sc, state.timer_deadline),
        }

    def check_invariants(self) -> None:
        '''Raise :class:`InvariantViolation` if the state is inconsistent.'''
        problems = list(self._violations())
        if problems:
            raise InvariantViolation(f'At {self.clock}: ' + '; '.join(problems))

    def _violations(self) -> Iterator[str]:
        state = self.sched.state
        for sc in self.scs.values():
            if sc.running_thread is not None and self.threads[sc.running_thread].current_sc != sc.id:
                yield f'`{sc.id}` runs `{sc.running_thread}` which does not run on it'
            if sc.remaining > sc.budget:
                yield f'`{sc.id}` holds more than its budget'
        running = [thread.id for thread in self.threads.values() if thread.state is ThreadState.RUNNING]
        if running not in ([], [state.current_thread]):
            yield f'running threads {running} do not match current `{state.current_thread}`'
        for thread in self.threads.values():
            yield from self._thread_violations(thread)
        yield from self._queue_violations()

    def _thread_violations(self, thread: Thread) -> Iterator[str]:
        ready, release = self.sched.state.ready, self.sched.state.release
        if thread.current_sc is not None and self.scs[thread.current_sc].running_thread != thread.id:
            yield f'`{thread.id}` runs on `{thread.current_sc}` which does not list it'
        if (thread.state is ThreadState.READY) != (thread.id in ready):
            yield f'`{thread.id}` is {thread.state.value} but ready-queue membership disagrees'
        if (thread.state is ThreadState.OUT_OF_BUDGET) != (thread.id in release):
            yield f'`{thread.id}` is {thread.state.value} but release-queue membership disagrees'
        if thread.state in (ThreadState.READY, ThreadState.RUNNING):
            if thread.current_sc is None:
                yield f'`{thread.id}` is {thread.state.value} without a scheduling context'
            elif thread.state is ThreadState.READY:
                if self.sched.remaining(self.scs[thread.current_sc]) < self.sched.admission:
                    yield f'`{thread.id}` is ready without enough budget to leave the kernel'
        yield from self._bookkeeping_violations(thread)

    def _bookkeeping_violations(self, thread: Thread) -> Iterator[str]:
        top = self.config.max_priority
        if not (0 <= thread.base_priority <= top and 0 <= thread.mcp <= top):
            yield f'`{thread.id}` has a priority or MCP outside [0, {self.config.max_priority}]'
        if thread.state is not ThreadState.SUSPENDED and thread.effective_priority != self.crit.effective_priority(thread):
            yield f'`{thread.id}` has a stale effective priority'
        enlisted = [c for c, queue in enumerate(self.crit.state.queues) if thread.id in queue]
        expected = [] if thread.state is ThreadState.SUSPENDED else [thread.criticality]
        if enlisted != expected:
            yield f'`{thread.id}` is in criticality queues {enlisted}, expected {expected}'
        seen = {thread.id}
        link = thread.call_stack_next
        while link is not None:
            if link in seen:
                yield f'call stack from `{thread.id}` loops'
                break
            seen.add(link)
            link = self.threads[link].call_stack_next

    def _queue_violations(self) -> Iterator[str]:
        ready = self.sched.state.ready
        for priority, queue in ready.snapshot():
            if priority not in ready.occupancy:
                yield f'priority {priority} is occupied but its bit is clear'
        if ready.highest() is not None and not ready.queue(ready.highest() or 0):
            yield 'occupancy bitmap points at an empty queue'
        for endpoint in self.endpoints.values():
            if len({item.direction for item in endpoint.queue}) > 1:
                yield f'`{endpoint.id}` queues senders and receivers'
            priorities = [self.threads[item.thread].effective_priority for item in endpoint.queue]
            if priorities != sorted(priorities, reverse=True):
                yield f'`{endpoint.id}` is not in priority order'
        for notification in self.notifications.values():
            if notification.word not in (0, 1) or (notification.waiter is not None and notification.word):
                yield f'`{notification.id}` has word {notification.word} with waiter {notification.waiter}'
