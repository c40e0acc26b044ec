# SPDX-License-Identifier: MIT

'''User-level schedulers built from kernel mechanisms.

Each scheduler is a thread program running one priority above its clients.
The policies themselves are pure step functions so they can be tested
without a kernel.
'''

from __future__ import annotations

import bisect
import collections
import dataclasses
import heapq

from fractions import Fraction
from typing import Any, Deque, Dict, List, Optional, Sequence, Set, Tuple

from mcsim._model import KernelError, Time
from mcsim._programs import (
    AckIrq, Bind, Call, Complete, Compute, Consume, HandlerReply, ProgramContext, ProgramGenerator, ProgramTimer,
    Recv, ReplyRecv, SaveCaller, SetCaller, Signal, Unbind, Wait, YieldTo, program
)


# policies

def coop_shared_step(clients: Sequence[str], caller: str) -> str:
    '''Round robin: the client after the one that just yielded.'''
    return clients[(list(clients).index(caller) + 1) % len(clients)]


def preemptive_shared_step(clients: Sequence[str], running: str, runnable: Optional[Set[str]] = None) -> str:
    '''Round robin over ``runnable`` (all clients by default), starting after ``running``.'''
    start = list(clients).index(running)
    for offset in range(1, len(clients) + 1):
        candidate = clients[(start + offset) % len(clients)]
        if runnable is None or candidate in runnable:
            return candidate
    return running


class EdfState():
    '''Release and deadline queues of a user-level EDF scheduler.

    Clients are indices; each has a backlog of released, unfinished jobs
    identified by their absolute deadlines.
    '''
    def __init__(self, periods: Sequence[Time], offsets: Optional[Sequence[Time]] = None) -> None:
        self.periods = list(periods)
        offsets = offsets or [0] * len(self.periods)
        self.releases: List[Tuple[Time, int]] = [(offset, index) for index, offset in enumerate(offsets)]
        heapq.heapify(self.releases)
        self.deadlines: List[Tuple[Time, int]] = []
        self.backlog: List[Deque[Time]] = [collections.deque() for _ in self.periods]
        self.running: Optional[int] = None
        self.waiting: Set[int] = set()


@dataclasses.dataclass(frozen=True)
class EdfDecision():
    dispatch: Optional[int]
    released: Tuple[int, ...]
    next_timeout: Optional[Time]
    # 'reply' to a client blocked on its call, 'yield-to' the preempted
    # holder of the SC, 'bind' a client that is off the SC, or 'idle'
    via: str


def edf_schedule_step(state: EdfState, now: Time, completed: Optional[int] = None) -> EdfDecision:
    if completed is not None:
        backlog = state.backlog[completed]
        if backlog:
            backlog.popleft()
        state.deadlines = [entry for entry in state.deadlines if entry[1] != completed]
        heapq.heapify(state.deadlines)
        if backlog:
            heapq.heappush(state.deadlines, (backlog[0], completed))
        state.waiting.add(completed)
        if state.running == completed:
            state.running = None

    released = []
    while state.releases and state.releases[0][0] <= now:
        release, index = heapq.heappop(state.releases)
        deadline = release + state.periods[index]
        state.backlog[index].append(deadline)
        if len(state.backlog[index]) == 1:
            heapq.heappush(state.deadlines, (deadline, index))
        heapq.heappush(state.releases, (deadline, index))
        released.append(index)

    dispatch = state.deadlines[0][1] if state.deadlines else None
    if dispatch is None:
        via = 'idle'
    elif dispatch in state.waiting:
        via = 'reply'
        state.waiting.discard(dispatch)
    elif dispatch == state.running:
        via = 'yield-to'
    else:
        via = 'bind'
    state.running = dispatch
    return EdfDecision(
        dispatch,
        tuple(released),
        state.releases[0][0] if state.releases else None,
        via,
    )


class CfsState():
    '''Clients ordered by virtual runtime.'''
    def __init__(self, weights: Sequence[int]) -> None:
        if not weights or any(weight <= 0 for weight in weights):
            raise ValueError(f'Invalid weights {weights}')
        self.weights = list(weights)
        self.vruntime = [Fraction(0)] * len(self.weights)
        self.queue: List[Tuple[Fraction, int]] = [(Fraction(0), index) for index in range(len(self.weights))]


def cfs_schedule_step(state: CfsState, ran: Optional[int] = None, consumed: Time = 0) -> int:
    '''Charge ``consumed`` to ``ran`` scaled by its weight and pick the smallest virtual runtime.'''
    if ran is not None:
        state.queue.remove((state.vruntime[ran], ran))
        state.vruntime[ran] += Fraction(consumed, state.weights[ran])
        bisect.insort(state.queue, (state.vruntime[ran], ran))
    return state.queue[0][1]


# clients

@program
def yielding_client(params: Dict[str, Any]) -> ProgramGenerator:
    '''Compute, then yield to the scheduler with a call carrying the client index.'''
    ep, index, work = params['ep'], params['index'], params.get('work', 1)
    while True:
        yield Compute(work)
        yield Complete()
        yield Call(ep, index)


@program
def signalling_client(params: Dict[str, Any]) -> ProgramGenerator:
    '''Cooperative client with its own SC: wake the next one, yield to it, wait to be woken.'''
    own = params['ntfn']
    work = params.get('work', 1)
    if not params.get('first', False):
        yield Wait(own)
    while True:
        yield Compute(work)
        yield Complete()
        yield Signal(params['next-ntfn'])
        try:
            yield YieldTo(params['next-sc'])
        except KernelError:
            pass
        yield Wait(own)


@program
def edf_client(params: Dict[str, Any]) -> ProgramGenerator:
    '''One job per release: compute the budget, then report to the scheduler.'''
    ep, index, work = params['ep'], params['index'], params['work']
    while True:
        yield Compute(work)
        yield Complete()
        yield Call(ep, index)


# schedulers

@program
def coop_shared_scheduler(ctx: ProgramContext, params: Dict[str, Any]) -> ProgramGenerator:
    '''Clients share one SC and yield by calling the scheduler.

    The scheduler saves the caller's reply capability, moves the SC to the
    next client and replies to it, or starts it if it never ran.
    '''
    clients: List[str] = list(params['clients'])
    sc, ep = params['sc'], params['ep']
    holder = clients[0]
    started = {holder}
    yield Bind(sc, holder)
    message = yield Recv(ep)
    while True:
        caller = clients[message.badge]
        chosen = coop_shared_step(clients, caller)
        if chosen == caller:
            message = yield ReplyRecv(ep)
            continue
        yield SaveCaller(ctx.name, caller)
        yield Unbind(sc)
        yield Bind(sc, chosen)
        if chosen in started:
            yield SetCaller(chosen)
            message = yield ReplyRecv(ep)
        else:
            started.add(chosen)
            message = yield Recv(ep)


@program
def preemptive_shared_scheduler(ctx: ProgramContext, params: Dict[str, Any]) -> ProgramGenerator:
    '''Round robin on a shared SC driven by timer notifications.'''
    clients: List[str] = list(params['clients'])
    sc, timer, quantum = params['sc'], params['timer'], params['quantum']
    running = clients[0]
    yield Bind(sc, running)
    yield ProgramTimer(timer, ctx.now + quantum)
    while True:
        yield Wait(timer)
        yield AckIrq(timer)
        chosen = preemptive_shared_step(clients, running)
        if chosen != running:
            yield Unbind(sc)
            yield Bind(sc, chosen)
            running = chosen
        yield ProgramTimer(timer, ctx.now + quantum)


@program
def timeout_scheduler(params: Dict[str, Any]) -> ProgramGenerator:
    '''Clients have their own SCs and this thread as timeout handler.

    Each fault is answered with a plain resume, so the client waits for its
    refill, and the next client in the ring is moved to the head.
    '''
    clients: List[str] = list(params['clients'])
    scs: List[str] = list(params['scs'])
    ep = params['ep']
    while True:
        message = yield Recv(ep)
        fault = message.fault
        yield HandlerReply((), fault)
        chosen = (clients.index(fault.faulting_thread) + 1) % len(clients)
        try:
            yield YieldTo(scs[chosen])
        except KernelError:
            pass


@program
def edf_scheduler(ctx: ProgramContext, params: Dict[str, Any]) -> ProgramGenerator:
    '''Earliest deadline first on one SC shared by all clients.'''
    clients: List[str] = list(params['clients'])
    sc, ep, timer = params['sc'], params['ep'], params['timer']
    state = EdfState(params['periods'], params.get('offsets'))
    holder: Optional[str] = None
    completed: Optional[int] = None
    while True:
        decision = edf_schedule_step(state, ctx.now, completed)
        completed = None
        if decision.next_timeout is not None:
            yield ProgramTimer(timer, decision.next_timeout)
        if decision.dispatch is None:
            message = yield Recv(ep)
        else:
            chosen = clients[decision.dispatch]
            if chosen != holder:
                if holder is not None:
                    yield Unbind(sc)
                yield Bind(sc, chosen)
                holder = chosen
            if decision.via == 'reply':
                yield SetCaller(chosen)
                message = yield ReplyRecv(ep)
            else:
                if decision.via == 'yield-to':
                    yield YieldTo(sc)
                message = yield Recv(ep)
        if message.notification is not None:
            yield AckIrq(timer)
        else:
            completed = message.badge
            yield SaveCaller(ctx.name, clients[message.badge])


@program
def cfs_scheduler(ctx: ProgramContext, params: Dict[str, Any]) -> ProgramGenerator:
    '''Weighted fair share over clients with their own SCs, one quantum at a time.'''
    scs: List[str] = list(params['scs'])
    state = CfsState(params.get('weights') or [1] * len(scs))
    timer, quantum = params['timer'], params['quantum']
    ran: Optional[int] = None
    while True:
        consumed = 0
        if ran is not None:
            consumed = yield Consume(scs[ran])
        chosen = cfs_schedule_step(state, ran, consumed)
        try:
            yield YieldTo(scs[chosen])
        except KernelError:
            pass
        yield ProgramTimer(timer, ctx.now + quantum)
        yield Wait(timer)
        yield AckIrq(timer)
        ran = chosen
