# SPDX-License-Identifier: MIT

from __future__ import annotations

import dataclasses
import enum
import fractions

from typing import TYPE_CHECKING, Any, Callable, Dict, FrozenSet, List, Mapping, Optional, Set, Tuple, Union

import pep621


if TYPE_CHECKING:  # pragma: no cover
    import mcsim._timefault


Time = int
Slot = str

# Ncrit * 2**Np must fit in this many effective priorities
MAX_EFFECTIVE_PRIORITIES = 1024


class McsimError(Exception):
    '''Simulator error.'''


class ConfigurationError(McsimError):
    '''Error in a scenario or task-set description.'''
    def __init__(self, msg: str, *, key: Optional[str] = None):
        super().__init__(msg)
        self._key = key

    @property
    def key(self) -> Optional[str]:
        return self._key


class McsimWarning(Warning):
    '''Simulator warning.'''


class Fetcher(pep621.DataFetcher):
    '''Typed field access to a parsed table; missing fields read as ``None``.

    Errors name the field by its dotted key, list indices included.
    '''
    def __init__(self, data: Mapping[str, Any], prefix: str = '') -> None:
        super().__init__(data)
        self._prefix = prefix

    @property
    def prefix(self) -> str:
        return self._prefix

    def _key(self, key: str) -> str:
        return f'{self._prefix}.{key}' if self._prefix else key

    def _invalid(self, key: str, expecting: str) -> ConfigurationError:
        return ConfigurationError(
            f'Field `{self._key(key)}` has an invalid type, expecting {expecting}', key=self._key(key)
        )

    def get(self, key: str) -> Any:
        try:
            return super().get(key)
        except KeyError:
            return None

    def get_int(self, key: str, default: Optional[int] = None) -> int:
        value = self.get(key)
        if value is None:
            if default is None:
                raise ConfigurationError(f'Field `{self._key(key)}` missing', key=self._key(key))
            return default
        if not isinstance(value, int) or isinstance(value, bool):
            raise self._invalid(key, f'an integer (got `{value}`)')
        return value

    def get_opt_int(self, key: str) -> Optional[int]:
        if self.get(key) is None:
            return None
        return self.get_int(key)

    def get_opt_str(self, key: str) -> Optional[str]:
        value = self.get(key)
        if value is not None and not isinstance(value, str):
            raise self._invalid(key, 'a string')
        return value

    def get_name(self) -> str:
        name = self.get_opt_str('name')
        if not name:
            raise ConfigurationError(f'Field `{self._key("name")}` missing', key=self._key('name'))
        return name

    def get_strings(self, key: str) -> List[str]:
        value = self.get(key)
        if value is None:
            return []
        if not isinstance(value, list) or not all(isinstance(item, str) for item in value):
            raise self._invalid(key, 'a list of strings')
        return value

    def get_table(self, key: str) -> Dict[str, Any]:
        value = self.get(key)
        if value is None:
            return {}
        if not isinstance(value, dict):
            raise self._invalid(key, 'a table')
        return value

    def tables(self, key: str) -> List[Tuple[Fetcher, Dict[str, Any]]]:
        value = self.get(key)
        if value is None:
            return []
        if not isinstance(value, list) or not all(isinstance(item, dict) for item in value):
            raise ConfigurationError(f'Field `{self._key(key)}` must be an array of tables', key=self._key(key))
        return [(Fetcher(item, f'{self._key(key)}[{index}]'), item) for index, item in enumerate(value)]


class KernelError(McsimError):
    '''A kernel operation was rejected, the kernel state is unchanged.'''


class NoAuthority(KernelError):
    '''The invoker does not hold the capability the operation consumes.'''


class AlreadyBound(KernelError):
    '''The scheduling context or the thread is already bound.'''


class NotBound(KernelError):
    '''The scheduling context is not bound to a thread.'''


class ExceedsMcp(KernelError):
    '''The requested priority is above the invoker's maximum controlled priority.'''


class ExceedsMcc(KernelError):
    '''The requested criticality is above the invoker's maximum controlled criticality.'''


class NoBudget(KernelError):
    '''The scheduling context does not hold enough budget to leave the kernel.'''


class BadParams(KernelError):
    '''Invalid scheduling parameters.'''


class BadLevel(KernelError):
    '''Criticality level out of range.'''


class DonationRefused(KernelError):
    '''A passive receiver needs a scheduling context the sender does not lend.'''


class NoReplyCap(KernelError):
    '''The thread holds no reply capability.'''


class EmptySlot(KernelError):
    '''The reply-capability slot is empty.'''


class NoFault(KernelError):
    '''No timeout fault is outstanding.'''


class ObjectBusy(KernelError):
    '''The kernel object or slot is already in use.'''


class RequestAborted(KernelError):
    '''The server aborted the request on behalf of a timeout handler.'''


class ThreadState(enum.Enum):
    RUNNING = 'running'
    READY = 'ready'
    OUT_OF_BUDGET = 'out-of-budget'
    BLOCKED_SEND = 'blocked-send'
    BLOCKED_RECV = 'blocked-recv'
    BLOCKED_ON_REPLY = 'blocked-on-reply'
    BLOCKED_ON_FAULT = 'blocked-on-fault'
    WAITING_NOTIFICATION = 'waiting-notification'
    # runnable, but without a scheduling context
    INACTIVE = 'inactive'
    SUSPENDED = 'suspended'

    @property
    def blocked(self) -> bool:
        return self in (
            ThreadState.BLOCKED_SEND,
            ThreadState.BLOCKED_RECV,
            ThreadState.BLOCKED_ON_REPLY,
            ThreadState.BLOCKED_ON_FAULT,
            ThreadState.WAITING_NOTIFICATION,
        )


class Direction(enum.Enum):
    SEND = 'send'
    RECV = 'recv'


class Rights(enum.Flag):
    SEND = 1
    RECV = 2
    ALL = 3


@dataclasses.dataclass(frozen=True)
class KernelConfig():
    '''Build-time kernel options.'''
    priority_bits: int = 8
    criticality_levels: int = 4
    kernel_wcet: Time = 1

    def __post_init__(self) -> None:
        if self.priority_bits < 1:
            raise ConfigurationError('Priority bits must be positive', key='kernel.priority-bits')
        if self.criticality_levels < 1:
            raise ConfigurationError(
                'At least one criticality level is required', key='kernel.criticality-levels'
            )
        if self.criticality_levels * 2 ** self.priority_bits > MAX_EFFECTIVE_PRIORITIES:
            raise ConfigurationError(
                f'{self.criticality_levels} criticality levels with {self.priority_bits} priority bits '
                f'exceed {MAX_EFFECTIVE_PRIORITIES} effective priorities',
                key='kernel.criticality-levels',
            )
        if self.kernel_wcet < 0:
            raise ConfigurationError('Kernel WCET must not be negative', key='kernel.kernel-wcet')

    @property
    def max_priority(self) -> int:
        return 2 ** self.priority_bits - 1

    @property
    def effective_levels(self) -> int:
        return self.criticality_levels * 2 ** self.priority_bits


@dataclasses.dataclass
class SchedulingContext():
    '''Authority to consume CPU time: a budget per period.'''
    id: str
    budget: Time = 0
    period: Time = 1
    remaining: Time = 0
    next_refill: Time = 0
    # accounted since the last consume enquiry
    consumed: Time = 0
    # accounted since creation, never reset
    charged: Time = 0
    home_thread: Optional[str] = None
    running_thread: Optional[str] = None
    yield_from: Optional[str] = None
    data: int = 0

    @property
    def utilization(self) -> fractions.Fraction:
        return fractions.Fraction(self.budget, self.period)


@dataclasses.dataclass
class ReplyCapability():
    '''Single-use capability to answer a caller.'''
    id: int
    caller: str
    donated_sc: Optional[str] = None
    endpoint: Optional[str] = None
    fault: Optional[mcsim._timefault.TimeoutFault] = None


@dataclasses.dataclass
class Thread():
    id: str
    base_priority: int = 0
    effective_priority: int = 0
    mcp: int = 0
    criticality: int = 0
    mcc: int = 0
    state: ThreadState = ThreadState.SUSPENDED
    blocked_on: Optional[str] = None
    home_sc: Optional[str] = None
    current_sc: Optional[str] = None
    timeout_handler: Optional[str] = None
    reply_slot: Optional[ReplyCapability] = None
    saved_callers: Dict[Slot, ReplyCapability] = dataclasses.field(default_factory=dict)
    call_stack_prev: Optional[str] = None
    call_stack_next: Optional[str] = None

    @property
    def passive(self) -> bool:
        return self.home_sc is None


@dataclasses.dataclass(frozen=True)
class Message():
    '''What a receiver gets out of a rendezvous.'''
    badge: int = 0
    payload: Any = None
    sender: Optional[str] = None
    notification: Optional[str] = None
    fault: Optional[mcsim._timefault.TimeoutFault] = None


@dataclasses.dataclass
class QueuedIpc():
    thread: str
    direction: Direction
    willing_to_donate: bool = False
    badge: int = 0
    payload: Any = None
    is_call: bool = False
    fault: Optional[mcsim._timefault.TimeoutFault] = None


@dataclasses.dataclass
class Endpoint():
    '''Rendezvous point, queued threads ordered by effective priority, FIFO within a priority.'''
    id: str
    queue: List[QueuedIpc] = dataclasses.field(default_factory=list)

    @property
    def direction(self) -> Optional[Direction]:
        return self.queue[0].direction if self.queue else None

    def enqueue(self, item: QueuedIpc, priority_of: Callable[[str], int]) -> None:
        if self.queue and self.queue[0].direction is not item.direction:
            raise AssertionError(f'Endpoint `{self.id}` already queues {self.queue[0].direction.value}ers')
        self.queue.append(item)
        self.reorder(priority_of)

    def reorder(self, priority_of: Callable[[str], int]) -> None:
        # sort is stable: FIFO within a priority
        self.queue.sort(key=lambda item: -priority_of(item.thread))

    def remove(self, thread: str) -> Optional[QueuedIpc]:
        for i, item in enumerate(self.queue):
            if item.thread == thread:
                return self.queue.pop(i)
        return None


@dataclasses.dataclass
class Notification():
    '''Binary semaphore with an optional bound thread.'''
    id: str
    word: int = 0
    waiter: Optional[str] = None
    bound_thread: Optional[str] = None


@dataclasses.dataclass(frozen=True)
class SchedControl():
    pass


@dataclasses.dataclass(frozen=True)
class ScCap():
    sc: str


@dataclasses.dataclass(frozen=True)
class TcbCap():
    thread: str


@dataclasses.dataclass(frozen=True)
class EndpointCap():
    endpoint: str
    rights: Rights = Rights.ALL


@dataclasses.dataclass(frozen=True)
class NtfnCap():
    notification: str
    rights: Rights = Rights.ALL


Capability = Union[SchedControl, ScCap, TcbCap, EndpointCap, NtfnCap]


@dataclasses.dataclass(frozen=True)
class Authority():
    holder: str
    kind: Capability


def describe_capability(cap: Capability) -> str:
    if isinstance(cap, SchedControl):
        return 'sched-control'
    if isinstance(cap, ScCap):
        return f'sc:{cap.sc}'
    if isinstance(cap, TcbCap):
        return f'tcb:{cap.thread}'
    if isinstance(cap, EndpointCap):
        return f'ep:{cap.endpoint}:{_rights_str(cap.rights)}'
    return f'ntfn:{cap.notification}:{_rights_str(cap.rights)}'


def _rights_str(rights: Rights) -> str:
    return {Rights.SEND: 'send', Rights.RECV: 'recv'}.get(rights, 'all')


def parse_capability(text: str) -> Capability:
    '''Parse the scenario spelling of a capability (``sched-control``, ``tcb:NAME``, ``ep:NAME:send``, ...).'''
    if text == 'sched-control':
        return SchedControl()
    kind, _, rest = text.partition(':')
    if not rest:
        raise ConfigurationError(f'Invalid capability `{text}`')
    name, _, rights_text = rest.partition(':')
    try:
        rights = {'': Rights.ALL, 'all': Rights.ALL, 'send': Rights.SEND, 'recv': Rights.RECV}[rights_text]
    except KeyError:
        raise ConfigurationError(f'Invalid rights `{rights_text}` in capability `{text}`') from None
    if kind == 'sc':
        return ScCap(name)
    if kind == 'tcb':
        return TcbCap(name)
    if kind == 'ep':
        return EndpointCap(name, rights)
    if kind == 'ntfn':
        return NtfnCap(name, rights)
    raise ConfigurationError(f'Unknown capability kind `{kind}` in `{text}`')


class AuthorityTable():
    '''Which thread holds which capability.

    Stands in for the capability space: there is no derivation tree, a grant
    is either present or not.
    '''
    def __init__(self) -> None:
        self._grants: Dict[str, Set[Capability]] = {}

    def grant(self, holder: str, cap: Capability) -> None:
        self._grants.setdefault(holder, set()).add(cap)

    def revoke(self, holder: str, cap: Capability) -> None:
        self._grants.get(holder, set()).discard(cap)

    def grants(self, holder: str) -> FrozenSet[Capability]:
        return frozenset(self._grants.get(holder, ()))

    def holds(self, holder: str, cap: Capability) -> bool:
        for granted in self._grants.get(holder, ()):
            if granted == cap:
                return True
            if isinstance(cap, EndpointCap) and isinstance(granted, EndpointCap):
                if granted.endpoint == cap.endpoint and cap.rights in granted.rights:
                    return True
            if isinstance(cap, NtfnCap) and isinstance(granted, NtfnCap):
                if granted.notification == cap.notification and cap.rights in granted.rights:
                    return True
        return False

    def require(self, holder: str, cap: Capability) -> Authority:
        if not self.holds(holder, cap):
            raise NoAuthority(f'Thread `{holder}` does not hold `{describe_capability(cap)}`')
        return Authority(holder, cap)

    def snapshot(self) -> Dict[str, List[str]]:
        return {
            holder: sorted(describe_capability(cap) for cap in caps)
            for holder, caps in sorted(self._grants.items())
        }


@dataclasses.dataclass(frozen=True)
class TraceRecord():
    time: Time
    category: str
    subject: str = ''
    object: str = ''
    detail: Tuple[Tuple[str, str], ...] = ()

    def as_row(self) -> List[str]:
        return [
            str(self.time),
            self.category,
            self.subject,
            self.object,
            ';'.join(f'{key}={value}' for key, value in self.detail),
        ]
