# SPDX-License-Identifier: MIT

from __future__ import annotations

import bisect
import collections
import dataclasses
import itertools

from typing import TYPE_CHECKING, Counter, Deque, Dict, Iterator, List, Optional, Tuple

from mcsim._model import (
    BadParams, ExceedsMcp, NoBudget, NotBound, SchedControl, ScCap, SchedulingContext, Thread, ThreadState, Time
)


if TYPE_CHECKING:  # pragma: no cover
    import mcsim._kernel


class PriorityBitmap():
    '''Two-level occupancy bitfield, one bit per effective priority.'''

    WORD_BITS = 32

    def __init__(self, levels: int) -> None:
        self._top = 0
        self._words = [0] * -(-levels // self.WORD_BITS)

    def set(self, priority: int) -> None:
        word, bit = divmod(priority, self.WORD_BITS)
        self._words[word] |= 1 << bit
        self._top |= 1 << word

    def clear(self, priority: int) -> None:
        word, bit = divmod(priority, self.WORD_BITS)
        self._words[word] &= ~(1 << bit)
        if not self._words[word]:
            self._top &= ~(1 << word)

    def __contains__(self, priority: int) -> bool:
        word, bit = divmod(priority, self.WORD_BITS)
        return bool(self._words[word] >> bit & 1)

    def highest(self) -> Optional[int]:
        if not self._top:
            return None
        word = self._top.bit_length() - 1
        return word * self.WORD_BITS + self._words[word].bit_length() - 1


class ReadyQueues():
    '''One FIFO per effective priority, indexed through a :class:`PriorityBitmap`.'''

    def __init__(self, levels: int, ledger: Counter[str]) -> None:
        self._queues: List[Deque[str]] = [collections.deque() for _ in range(levels)]
        self._where: Dict[str, int] = {}
        self._ledger = ledger
        self.occupancy = PriorityBitmap(levels)

    def __contains__(self, thread: object) -> bool:
        return thread in self._where

    def __len__(self) -> int:
        return len(self._where)

    def __iter__(self) -> Iterator[Tuple[int, str]]:
        for priority in reversed(range(len(self._queues))):
            for thread in self._queues[priority]:
                yield priority, thread

    def priority_of(self, thread: str) -> int:
        return self._where[thread]

    def queue(self, priority: int) -> List[str]:
        return list(self._queues[priority])

    def enqueue(self, thread: str, priority: int, *, head: bool = False) -> None:
        if thread in self._where:
            raise AssertionError(f'Thread `{thread}` is already queued')
        queue = self._queues[priority]
        if head:
            queue.appendleft(thread)
        else:
            queue.append(thread)
        self._where[thread] = priority
        self.occupancy.set(priority)
        self._ledger['ready-enqueue'] += 1

    def remove(self, thread: str) -> None:
        priority = self._where.pop(thread)
        queue = self._queues[priority]
        queue.remove(thread)
        if not queue:
            self.occupancy.clear(priority)
        self._ledger['ready-dequeue'] += 1

    def highest(self) -> Optional[int]:
        return self.occupancy.highest()

    def pop_highest(self) -> Optional[str]:
        priority = self.occupancy.highest()
        if priority is None:
            return None
        queue = self._queues[priority]
        thread = queue.popleft()
        del self._where[thread]
        if not queue:
            self.occupancy.clear(priority)
        self._ledger['ready-dequeue'] += 1
        return thread

    def snapshot(self) -> List[Tuple[int, List[str]]]:
        return [
            (priority, list(queue))
            for priority, queue in enumerate(self._queues)
            if queue
        ]


class ReleaseQueue():
    '''Threads waiting for a refill, ordered by refill time, FIFO on ties.'''

    def __init__(self, ledger: Counter[str]) -> None:
        self._entries: List[Tuple[Time, int, str]] = []
        self._keys: Dict[str, Tuple[Time, int, str]] = {}
        self._seq = itertools.count()
        self._ledger = ledger

    def __contains__(self, thread: object) -> bool:
        return thread in self._keys

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return (thread for _, _, thread in self._entries)

    def insert(self, thread: str, refill: Time) -> None:
        if thread in self._keys:
            raise AssertionError(f'Thread `{thread}` is already waiting for a refill')
        entry = (refill, next(self._seq), thread)
        bisect.insort(self._entries, entry)
        self._keys[thread] = entry
        self._ledger['release-enqueue'] += 1

    def remove(self, thread: str) -> None:
        entry = self._keys.pop(thread)
        del self._entries[bisect.bisect_left(self._entries, entry)]
        self._ledger['release-dequeue'] += 1

    def head(self) -> Optional[Tuple[Time, str]]:
        if not self._entries:
            return None
        refill, _, thread = self._entries[0]
        return refill, thread

    def pop(self) -> str:
        _, _, thread = self._entries.pop(0)
        del self._keys[thread]
        self._ledger['release-dequeue'] += 1
        return thread

    def snapshot(self) -> List[Tuple[Time, str]]:
        return [(refill, thread) for refill, _, thread in self._entries]


@dataclasses.dataclass
class KernelState():
    ready: ReadyQueues
    release: ReleaseQueue
    kernel_wcet: Time = 1
    # timestamp of the last charge, rolled back on exits without a switch
    now: Time = 0
    consumed_since_entry: Time = 0
    entry_time: Time = 0
    current_thread: Optional[str] = None
    # the scheduling context time is being consumed from
    current_sc: Optional[str] = None
    reprogram: bool = False
    timer_deadline: Optional[Time] = None
    switch_candidate: Optional[str] = None


class Scheduler():
    '''Fixed-priority round-robin scheduling with budget enforcement.

    Charging is lazy: time is only deducted from a scheduling context when
    the kernel exits onto a different one, or when an operation needs the
    exact figure (``consume``, ``yield_to``, budget changes).
    '''
    def __init__(self, kernel: mcsim._kernel.Kernel) -> None:
        self._kernel = kernel
        levels = kernel.config.effective_levels
        self.state = KernelState(
            ReadyQueues(levels, kernel.ledger),
            ReleaseQueue(kernel.ledger),
            kernel.config.kernel_wcet,
        )

    @property
    def admission(self) -> Time:
        '''Least budget a thread must hold to be placed in the ready queues.'''
        return max(self.state.kernel_wcet, 1)

    @property
    def current(self) -> Optional[Thread]:
        if self.state.current_thread is None:
            return None
        return self._kernel.threads[self.state.current_thread]

    def remaining(self, sc: SchedulingContext) -> Time:
        '''Budget left, counting consumption not charged yet.'''
        if sc.id == self.state.current_sc:
            return sc.remaining - (self.state.entry_time - self.state.now)
        return sc.remaining

    def kernel_entry(self, now: Time, *, timer: bool = False) -> bool:
        '''Update the timestamp; returns whether the running budget must be treated as expired.'''
        state = self.state
        if now < state.entry_time:
            raise AssertionError(f'Kernel entry at {now} precedes the previous entry at {state.entry_time}')
        state.entry_time = now
        state.consumed_since_entry = now - state.now
        if state.current_thread is None or state.current_sc is None:
            return False
        if self.current is None or self.current.state is not ThreadState.RUNNING:
            return False
        left = self._kernel.scs[state.current_sc].remaining - state.consumed_since_entry
        if left < state.kernel_wcet or (timer and left <= 0):
            self.commit_charge()
            return True
        return False

    def commit_charge(self) -> None:
        state = self.state
        amount = state.entry_time - state.now
        if state.current_sc is not None and amount:
            sc = self._kernel.scs[state.current_sc]
            sc.remaining = max(sc.remaining - amount, 0)
            sc.consumed += amount
            sc.charged += amount
        state.now = state.entry_time
        state.consumed_since_entry = 0

    def charge_and_maybe_rollback(self, sc_switch: bool) -> None:
        if sc_switch:
            self.commit_charge()
        else:
            self.state.now = self.state.entry_time - self.state.consumed_since_entry

    def kernel_exit(self) -> Optional[str]:
        '''Pick the next thread, settle the charge and program the timer.'''
        state = self.state
        chosen = self.schedule()
        sc = self._kernel.threads[chosen].current_sc if chosen is not None else None
        self.charge_and_maybe_rollback(sc != state.current_sc)
        state.current_sc = sc
        self._program_timer()
        return chosen

    def _program_timer(self) -> None:
        state = self.state
        deadline: Optional[Time] = None
        if state.current_sc is not None:
            sc = self._kernel.scs[state.current_sc]
            deadline = min(state.now + sc.remaining, sc.next_refill)
        head = state.release.head()
        if head is not None:
            deadline = head[0] if deadline is None else min(deadline, head[0])
        state.reprogram = deadline != state.timer_deadline
        if state.reprogram:
            state.timer_deadline = deadline
            self._kernel.ledger['timer-program'] += 1
            self._kernel.record('timer', detail={'deadline': '-' if deadline is None else str(deadline)})

    def schedule(self) -> Optional[str]:
        '''Choose the thread to run: the head of the highest occupied priority, or idle.'''
        state = self.state
        kernel = self._kernel
        current = self.current
        if current is not None and current.state is ThreadState.RUNNING and current.current_sc is None:
            current.state = ThreadState.INACTIVE
        running = current if current is not None and current.state is ThreadState.RUNNING else None

        candidate_id, state.switch_candidate = state.switch_candidate, None
        if candidate_id is not None:
            candidate = kernel.threads[candidate_id]
            if candidate.state is ThreadState.READY and candidate_id not in state.ready:
                top = state.ready.highest()
                if (top is None or candidate.effective_priority >= top) and (
                    running is None or candidate.effective_priority > running.effective_priority
                ):
                    if running is not None:
                        self._preempt(running)
                    self._dispatch(candidate)
                    return candidate_id
                state.ready.enqueue(candidate_id, candidate.effective_priority)

        kernel.ledger['schedule'] += 1
        top = state.ready.highest()
        if running is not None:
            if top is None or top <= running.effective_priority:
                return running.id
            self._preempt(running)
        thread_id = state.ready.pop_highest()
        if thread_id is None:
            if state.current_thread is not None:
                kernel.record('idle')
            state.current_thread = None
            return None
        self._dispatch(kernel.threads[thread_id])
        return thread_id

    def _preempt(self, thread: Thread) -> None:
        assert thread.current_sc is not None
        if self.remaining(self._kernel.scs[thread.current_sc]) < self.admission:
            self.budget_expire(thread)
            return
        thread.state = ThreadState.READY
        self.state.ready.enqueue(thread.id, thread.effective_priority, head=True)
        self._kernel.record('preempt', thread.id, thread.current_sc or '')

    def _dispatch(self, thread: Thread) -> None:
        if thread.current_sc is not None:
            sc = self._kernel.scs[thread.current_sc]
            # waited in the ready queue past its period boundary
            if sc.next_refill <= self.state.entry_time:
                self.refill(sc)
        thread.state = ThreadState.RUNNING
        self.state.current_thread = thread.id
        self._kernel.record('dispatch', thread.id, thread.current_sc or '')

    def dequeue(self, thread: Thread) -> None:
        '''Take a thread out of the ready and release queues.'''
        state = self.state
        if thread.id in state.ready:
            state.ready.remove(thread.id)
        elif thread.id in state.release:
            state.release.remove(thread.id)
        if state.switch_candidate == thread.id:
            state.switch_candidate = None

    def refill(self, sc: SchedulingContext) -> None:
        '''Restore the full budget; the next refill stays on the period grid.'''
        if sc.id == self.state.current_sc:
            self.commit_charge()
        late = self.state.entry_time - sc.next_refill
        sc.remaining = sc.budget
        sc.next_refill += (max(late, 0) // sc.period + 1) * sc.period

    def make_runnable(self, thread: Thread, *, direct: bool = False) -> None:
        '''Admit a thread that may run again.

        Without a scheduling context it becomes inactive, without enough
        budget it waits in the release queue. ``direct`` offers it to the
        next :meth:`schedule` call as a direct-switch candidate.
        '''
        state = self.state
        if thread.current_sc is None:
            thread.state = ThreadState.INACTIVE
            return
        sc = self._kernel.scs[thread.current_sc]
        if sc.next_refill <= state.entry_time:
            self.refill(sc)
        if self.remaining(sc) < self.admission:
            thread.state = ThreadState.OUT_OF_BUDGET
            state.release.insert(thread.id, sc.next_refill)
            return
        thread.state = ThreadState.READY
        if not direct:
            state.ready.enqueue(thread.id, thread.effective_priority)
            return
        previous = state.switch_candidate
        if previous is not None and previous != thread.id:
            other = self._kernel.threads[previous]
            if other.state is ThreadState.READY and previous not in state.ready:
                state.ready.enqueue(previous, other.effective_priority)
        state.switch_candidate = thread.id

    def reprioritise(self, thread: Thread, priority: int) -> bool:
        if priority == thread.effective_priority:
            return False
        thread.effective_priority = priority
        if thread.id in self.state.ready:
            self.state.ready.remove(thread.id)
            self.state.ready.enqueue(thread.id, priority)
        queued = (ThreadState.BLOCKED_SEND, ThreadState.BLOCKED_RECV, ThreadState.BLOCKED_ON_FAULT)
        if thread.state in queued and thread.blocked_on in self._kernel.endpoints:
            self._kernel.endpoints[thread.blocked_on].reorder(self._kernel.effective_priority)
            self._kernel.ledger['endpoint-reorder'] += 1
        return True

    def budget_expire(self, thread: Thread) -> None:
        '''Move a thread whose budget ran out to the release queue.'''
        self.dequeue(thread)
        sc_id = thread.current_sc or ''
        self._kernel.record('expire', thread.id, sc_id)
        self.make_runnable(thread)

    def release_wakeup(self, now: Time) -> List[str]:
        '''Refill every thread whose refill time has come, in queue order.

        The running thread is refilled in place when its own period ends.
        '''
        release = self.state.release
        woken = []
        current = self.current
        if current is not None and current.state is ThreadState.RUNNING and self.state.current_sc is not None:
            sc = self._kernel.scs[self.state.current_sc]
            if sc.next_refill <= now:
                self.refill(sc)
                self._kernel.record('refill', current.id, sc.id, detail={'next': str(sc.next_refill)})
        while release:
            head = release.head()
            assert head is not None
            if head[0] > now:
                break
            thread = self._kernel.threads[release.pop()]
            assert thread.current_sc is not None
            sc = self._kernel.scs[thread.current_sc]
            self.refill(sc)
            self._kernel.record('refill', thread.id, sc.id, detail={'next': str(sc.next_refill)})
            if self.remaining(sc) >= self.admission:
                thread.state = ThreadState.READY
                self.state.ready.enqueue(thread.id, thread.effective_priority)
                woken.append(thread.id)
            else:
                release.insert(thread.id, sc.next_refill)
        return woken

    def yield_(self, actor: str, sc_id: str) -> None:
        '''Give up the rest of the budget of ``sc`` until its next refill.'''
        self._kernel.authority.require(actor, ScCap(sc_id))
        sc = self._kernel.scs[sc_id]
        if sc.id == self.state.current_sc:
            self.commit_charge()
        sc.remaining = 0
        self._kernel.record('yield', actor, sc.id)
        if sc.running_thread is None:
            return
        thread = self._kernel.threads[sc.running_thread]
        if thread.state in (ThreadState.RUNNING, ThreadState.READY, ThreadState.OUT_OF_BUDGET):
            self.dequeue(thread)
            self.make_runnable(thread)

    def yield_to(self, actor: str, sc_id: str) -> Time:
        '''Move the thread running on ``sc`` to the head of its priority; returns its consumption.'''
        self._kernel.authority.require(actor, ScCap(sc_id))
        sc = self._kernel.scs[sc_id]
        if sc.running_thread is None:
            raise NotBound(f'Scheduling context `{sc_id}` has no thread to yield to')
        target = self._kernel.threads[sc.running_thread]
        if target.effective_priority > self._kernel.threads[actor].mcp:
            raise ExceedsMcp(
                f'Thread `{target.id}` runs at priority {target.effective_priority}, '
                f'above the MCP of `{actor}`'
            )
        if self.remaining(sc) < self.admission:
            raise NoBudget(f'Scheduling context `{sc_id}` has {self.remaining(sc)} left')
        if sc.id == self.state.current_sc:
            self.commit_charge()
        sc.yield_from = actor
        if target.id in self.state.ready:
            self.state.ready.remove(target.id)
            self.state.ready.enqueue(target.id, target.effective_priority, head=True)
        self._kernel.record('yield-to', actor, target.id, detail={'sc': sc.id})
        return self._drain(sc)

    def consume(self, actor: str, sc_id: str) -> Time:
        '''Time accounted to ``sc`` since the last enquiry.'''
        self._kernel.authority.require(actor, ScCap(sc_id))
        sc = self._kernel.scs[sc_id]
        if sc.id == self.state.current_sc:
            self.commit_charge()
        return self._drain(sc)

    @staticmethod
    def _drain(sc: SchedulingContext) -> Time:
        consumed, sc.consumed = sc.consumed, 0
        return consumed

    def sc_configure(self, actor: str, sc_id: str, budget: Time, period: Time, data: int = 0) -> None:
        '''Set budget and period; there is no admission test.'''
        self._kernel.authority.require(actor, SchedControl())
        if period <= 0 or budget < 0 or budget > period:
            raise BadParams(f'Invalid budget {budget} for period {period}')
        sc = self._kernel.scs[sc_id]
        if sc.id == self.state.current_sc:
            self.commit_charge()
        sc.budget = budget
        sc.period = period
        sc.data = data
        sc.remaining = budget
        sc.next_refill = self.state.entry_time + period
        self._kernel.record(
            'sc-configure', actor, sc.id, detail={'budget': str(budget), 'period': str(period)}
        )
        if sc.running_thread is None:
            return
        thread = self._kernel.threads[sc.running_thread]
        if thread.state in (ThreadState.READY, ThreadState.OUT_OF_BUDGET):
            self.dequeue(thread)
            self.make_runnable(thread)
        elif thread.state is ThreadState.RUNNING and self.remaining(sc) < self.admission:
            self.budget_expire(thread)
