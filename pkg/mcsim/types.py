# SPDX-License-Identifier: MIT

'''Names for program files loaded through ``kernel.programs``.'''

from mcsim._model import Message, RequestAborted, Time
from mcsim._programs import (
    AckIrq, Bind, Call, Checkpoint, Complete, Compute, Configure, Consume, HandlerReply, NbSend, NbSendWait,
    ProgramContext, ProgramGenerator, ProgramTimer, Recv, Reply, ReplyRecv, Request, Resume, SaveCaller,
    Send, SetCaller, SetCriticality, SetPriority, SetSystemCriticality, Signal, SignalRecv, Suspend,
    SwapCaller, Unbind, Wait, Yield, YieldTo
)
from mcsim._timefault import (
    ExtendBudget, FaultReason, HandlerAction, RaiseSystemCriticality, RollbackAndReset, SuspendOwner,
    TimeoutFault
)


__all__ = [
    'AckIrq',
    'Bind',
    'Call',
    'Checkpoint',
    'Complete',
    'Compute',
    'Configure',
    'Consume',
    'ExtendBudget',
    'FaultReason',
    'HandlerAction',
    'HandlerReply',
    'Message',
    'NbSend',
    'NbSendWait',
    'ProgramContext',
    'ProgramGenerator',
    'ProgramTimer',
    'RaiseSystemCriticality',
    'Recv',
    'Reply',
    'ReplyRecv',
    'Request',
    'RequestAborted',
    'Resume',
    'RollbackAndReset',
    'SaveCaller',
    'Send',
    'SetCaller',
    'SetCriticality',
    'SetPriority',
    'SetSystemCriticality',
    'Signal',
    'SignalRecv',
    'Suspend',
    'SuspendOwner',
    'SwapCaller',
    'Time',
    'TimeoutFault',
    'Unbind',
    'Wait',
    'Yield',
    'YieldTo',
]
