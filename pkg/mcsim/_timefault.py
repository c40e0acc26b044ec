# SPDX-License-Identifier: MIT

from __future__ import annotations

import dataclasses
import enum

from typing import TYPE_CHECKING, Callable, List, Optional, Sequence, Union

from mcsim._model import (
    BadLevel, BadParams, NoFault, NoReplyCap, RequestAborted, SchedControl, TcbCap, Thread, ThreadState, Time
)


if TYPE_CHECKING:  # pragma: no cover
    import mcsim._kernel


class FaultReason(enum.Enum):
    BUDGET_EXPIRED = 'budget-expired'
    CRITICALITY_SWITCH = 'criticality-switch'


@dataclasses.dataclass(frozen=True)
class TimeoutFault():
    '''Fault message the kernel sends to a thread's timeout handler.'''
    faulting_thread: str
    sc_in_use: Optional[str]
    sc_owner: Optional[str]
    reason: FaultReason
    timestamp: Time


@dataclasses.dataclass(frozen=True)
class ExtendBudget():
    amount: Time


@dataclasses.dataclass(frozen=True)
class RollbackAndReset():
    checkpoint: Optional[str] = None


@dataclasses.dataclass(frozen=True)
class SuspendOwner():
    pass


@dataclasses.dataclass(frozen=True)
class RaiseSystemCriticality():
    level: int


HandlerAction = Union[ExtendBudget, RollbackAndReset, SuspendOwner, RaiseSystemCriticality]


def describe_action(action: HandlerAction) -> str:
    if isinstance(action, ExtendBudget):
        return f'extend:{action.amount}'
    if isinstance(action, RollbackAndReset):
        return 'rollback' if action.checkpoint is None else f'rollback:{action.checkpoint}'
    if isinstance(action, SuspendOwner):
        return 'suspend-owner'
    return f'raise-criticality:{action.level}'


class TimeoutFaults():
    '''Timeout exceptions and the replies of their handlers.

    A thread with a timeout handler does not wait for its refill when its
    budget runs out: it blocks and a :class:`TimeoutFault` is sent, like a
    call, to the handler endpoint.
    '''
    def __init__(self, kernel: mcsim._kernel.Kernel) -> None:
        self._kernel = kernel
        # called with the rolled back thread and the checkpoint name
        self.rollback_hooks: List[Callable[[str, Optional[str]], None]] = []

    def raise_timeout(self, thread: Thread, reason: FaultReason = FaultReason.BUDGET_EXPIRED) -> TimeoutFault:
        kernel = self._kernel
        if thread.timeout_handler is None:
            raise AssertionError(f'Thread `{thread.id}` has no timeout handler')
        sc = thread.current_sc
        fault = TimeoutFault(
            thread.id,
            sc,
            kernel.scs[sc].home_thread if sc is not None else None,
            reason,
            kernel.clock,
        )
        kernel.sched.dequeue(thread)
        thread.state = ThreadState.BLOCKED_ON_FAULT
        thread.blocked_on = thread.timeout_handler
        kernel.record(
            'timeout-fault', thread.id, sc or '',
            detail={'reason': reason.value, 'owner': fault.sc_owner or '', 'handler': thread.timeout_handler},
        )
        kernel.ipc.send_fault(thread, fault)
        return fault

    def handler_reply(
        self,
        handler: str,
        fault: Optional[TimeoutFault] = None,
        actions: Sequence[HandlerAction] = (),
    ) -> None:
        '''Answer the outstanding fault in the handler's reply slot, applying ``actions`` in order.

        With no actions the faulted thread simply resumes, waiting for its
        refill if it has no budget left.
        '''
        kernel = self._kernel
        replier = kernel.threads[handler]
        reply = replier.reply_slot
        if reply is None or reply.fault is None:
            raise NoFault(f'Thread `{handler}` holds no timeout fault')
        if fault is not None and reply.fault != fault:
            raise NoFault(f'Thread `{handler}` holds a different fault')
        outstanding = reply.fault
        self._validate(handler, outstanding, actions)

        replier.reply_slot = None
        faulted = kernel.threads[outstanding.faulting_thread]
        kernel.record(
            'fault-reply', handler, faulted.id,
            detail={'actions': ','.join(describe_action(action) for action in actions) or 'resume'},
        )
        resume = True
        for action in actions:
            if isinstance(action, ExtendBudget):
                assert outstanding.sc_in_use is not None
                sc = kernel.scs[outstanding.sc_in_use]
                sc.budget += action.amount
                sc.remaining += action.amount
            elif isinstance(action, RaiseSystemCriticality):
                kernel.crit.set_system_criticality(handler, action.level)
            elif isinstance(action, SuspendOwner):
                assert outstanding.sc_owner is not None
                kernel.suspend(handler, outstanding.sc_owner)
            else:
                self._rollback(faulted, action.checkpoint)
                resume = False
        if resume and faulted.state is ThreadState.BLOCKED_ON_FAULT:
            faulted.blocked_on = None
            kernel.sched.make_runnable(faulted)

    def _validate(self, handler: str, fault: TimeoutFault, actions: Sequence[HandlerAction]) -> None:
        kernel = self._kernel
        extension = 0
        for action in actions:
            if isinstance(action, ExtendBudget):
                kernel.authority.require(handler, SchedControl())
                if fault.sc_in_use is None or action.amount < 0:
                    raise BadParams('Cannot extend the budget of this fault')
                extension += action.amount
                sc = kernel.scs[fault.sc_in_use]
                if sc.budget + extension > sc.period:
                    raise BadParams(
                        f'Budget {sc.budget + extension} would exceed the period {sc.period} of `{sc.id}`'
                    )
            elif isinstance(action, RaiseSystemCriticality):
                kernel.authority.require(handler, SchedControl())
                if not 0 <= action.level < kernel.config.criticality_levels:
                    raise BadLevel(f'Criticality {action.level} is out of range')
            elif isinstance(action, SuspendOwner):
                if fault.sc_owner is None:
                    raise BadParams(f'The scheduling context used by `{fault.faulting_thread}` has no owner')
                kernel.authority.require(handler, TcbCap(fault.sc_owner))
            else:
                kernel.authority.require(handler, TcbCap(fault.faulting_thread))
                if kernel.threads[fault.faulting_thread].reply_slot is None:
                    raise NoReplyCap(f'Thread `{fault.faulting_thread}` serves no request to abort')

    def _rollback(self, server: Thread, checkpoint: Optional[str]) -> None:
        '''Abort the request the server was working on and put it back on its endpoint.'''
        kernel = self._kernel
        reply = server.reply_slot
        assert reply is not None
        server.reply_slot = None
        kernel.ipc.answer(server, reply, RequestAborted(f'`{server.id}` was rolled back'))
        if server.state is ThreadState.BLOCKED_ON_FAULT:
            server.blocked_on = None
        kernel.record('rollback', server.id, reply.caller, detail={'checkpoint': checkpoint or ''})
        assert reply.endpoint is not None
        kernel.ipc.receive(server, kernel.endpoints[reply.endpoint])
        for hook in self.rollback_hooks:
            hook(server.id, checkpoint)
