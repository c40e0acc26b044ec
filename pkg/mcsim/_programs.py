# SPDX-License-Identifier: MIT

from __future__ import annotations

import dataclasses
import inspect
import sys

from typing import TYPE_CHECKING, Any, Callable, Dict, Generator, Mapping, Optional, Sequence, Tuple

import mcsim._timefault

from mcsim._model import ConfigurationError, KernelError, Message, McsimError, NoBudget, RequestAborted, Time


if TYPE_CHECKING:  # pragma: no cover
    import mcsim._kernel


class Request():
    '''Something a program asks of the simulator.'''


@dataclasses.dataclass(frozen=True)
class Compute(Request):
    '''Run on the CPU for ``duration`` ticks.'''
    duration: Time


class Syscall(Request):
    '''Request served by entering the kernel.'''
    def issue(self, kernel: mcsim._kernel.Kernel, actor: str) -> Any:  # pragma: no cover
        raise NotImplementedError


class Local(Request):
    '''Request served by the simulator without entering the kernel.'''


@dataclasses.dataclass(frozen=True)
class Call(Syscall):
    ep: str
    badge: int = 0
    donate: bool = True
    payload: Any = None

    def issue(self, kernel: mcsim._kernel.Kernel, actor: str) -> Any:
        return kernel.ipc.call(actor, self.ep, self.donate, self.badge, self.payload)


@dataclasses.dataclass(frozen=True)
class Send(Syscall):
    ep: str
    badge: int = 0
    payload: Any = None

    def issue(self, kernel: mcsim._kernel.Kernel, actor: str) -> Any:
        return kernel.ipc.send(actor, self.ep, self.badge, self.payload)


@dataclasses.dataclass(frozen=True)
class NbSend(Syscall):
    ep: str
    badge: int = 0
    payload: Any = None

    def issue(self, kernel: mcsim._kernel.Kernel, actor: str) -> Any:
        return kernel.ipc.nbsend(actor, self.ep, self.badge, self.payload)


@dataclasses.dataclass(frozen=True)
class Recv(Syscall):
    ep: str

    def issue(self, kernel: mcsim._kernel.Kernel, actor: str) -> Any:
        return kernel.ipc.recv(actor, self.ep)


@dataclasses.dataclass(frozen=True)
class ReplyRecv(Syscall):
    ep: str
    badge: int = 0
    payload: Any = None

    def issue(self, kernel: mcsim._kernel.Kernel, actor: str) -> Any:
        return kernel.ipc.reply_recv(actor, self.ep, self.badge, self.payload)


@dataclasses.dataclass(frozen=True)
class Reply(Syscall):
    badge: int = 0
    payload: Any = None
    abort: bool = False

    def issue(self, kernel: mcsim._kernel.Kernel, actor: str) -> Any:
        return kernel.ipc.reply(actor, self.badge, self.payload, abort=self.abort)


@dataclasses.dataclass(frozen=True)
class NbSendWait(Syscall):
    send_ep: str
    recv_ep: str
    badge: int = 0

    def issue(self, kernel: mcsim._kernel.Kernel, actor: str) -> Any:
        return kernel.ipc.nbsend_wait(actor, self.send_ep, self.recv_ep, self.badge)


@dataclasses.dataclass(frozen=True)
class Signal(Syscall):
    ntfn: str

    def issue(self, kernel: mcsim._kernel.Kernel, actor: str) -> Any:
        return kernel.ipc.signal(actor, self.ntfn)


@dataclasses.dataclass(frozen=True)
class Wait(Syscall):
    ntfn: str

    def issue(self, kernel: mcsim._kernel.Kernel, actor: str) -> Any:
        return kernel.ipc.wait(actor, self.ntfn)


@dataclasses.dataclass(frozen=True)
class SignalRecv(Syscall):
    ntfn: str
    ep: str

    def issue(self, kernel: mcsim._kernel.Kernel, actor: str) -> Any:
        return kernel.ipc.signal_recv(actor, self.ntfn, self.ep)


@dataclasses.dataclass(frozen=True)
class Yield(Syscall):
    '''Give up the rest of a budget; defaults to the invoker's own scheduling context.'''
    sc: Optional[str] = None

    def issue(self, kernel: mcsim._kernel.Kernel, actor: str) -> Any:
        thread = kernel.threads[actor]
        sc = self.sc or thread.home_sc or thread.current_sc
        if sc is None:
            raise NoBudget(f'Thread `{actor}` has no scheduling context to yield')
        return kernel.sched.yield_(actor, sc)


@dataclasses.dataclass(frozen=True)
class YieldTo(Syscall):
    sc: str

    def issue(self, kernel: mcsim._kernel.Kernel, actor: str) -> Any:
        return kernel.sched.yield_to(actor, self.sc)


@dataclasses.dataclass(frozen=True)
class Consume(Syscall):
    sc: str

    def issue(self, kernel: mcsim._kernel.Kernel, actor: str) -> Any:
        return kernel.sched.consume(actor, self.sc)


@dataclasses.dataclass(frozen=True)
class Configure(Syscall):
    sc: str
    budget: Time
    period: Time
    data: int = 0

    def issue(self, kernel: mcsim._kernel.Kernel, actor: str) -> Any:
        return kernel.sched.sc_configure(actor, self.sc, self.budget, self.period, self.data)


@dataclasses.dataclass(frozen=True)
class Bind(Syscall):
    sc: str
    thread: str

    def issue(self, kernel: mcsim._kernel.Kernel, actor: str) -> Any:
        return kernel.bind_sc(actor, self.sc, self.thread)


@dataclasses.dataclass(frozen=True)
class Unbind(Syscall):
    sc: str

    def issue(self, kernel: mcsim._kernel.Kernel, actor: str) -> Any:
        return kernel.unbind_sc(actor, self.sc)


@dataclasses.dataclass(frozen=True)
class Resume(Syscall):
    thread: str

    def issue(self, kernel: mcsim._kernel.Kernel, actor: str) -> Any:
        return kernel.resume(actor, self.thread)


@dataclasses.dataclass(frozen=True)
class Suspend(Syscall):
    thread: str

    def issue(self, kernel: mcsim._kernel.Kernel, actor: str) -> Any:
        return kernel.suspend(actor, self.thread)


@dataclasses.dataclass(frozen=True)
class SetPriority(Syscall):
    thread: str
    priority: int

    def issue(self, kernel: mcsim._kernel.Kernel, actor: str) -> Any:
        return kernel.set_priority(actor, self.thread, self.priority)


@dataclasses.dataclass(frozen=True)
class SetCriticality(Syscall):
    thread: str
    criticality: int

    def issue(self, kernel: mcsim._kernel.Kernel, actor: str) -> Any:
        return kernel.set_criticality(actor, self.thread, self.criticality)


@dataclasses.dataclass(frozen=True)
class SetSystemCriticality(Syscall):
    level: int

    def issue(self, kernel: mcsim._kernel.Kernel, actor: str) -> Any:
        return kernel.crit.set_system_criticality(actor, self.level)


@dataclasses.dataclass(frozen=True)
class SaveCaller(Syscall):
    target: str
    slot: str

    def issue(self, kernel: mcsim._kernel.Kernel, actor: str) -> Any:
        return kernel.ipc.save_caller(actor, self.target, self.slot)


@dataclasses.dataclass(frozen=True)
class SetCaller(Syscall):
    slot: str

    def issue(self, kernel: mcsim._kernel.Kernel, actor: str) -> Any:
        return kernel.ipc.set_caller(actor, self.slot)


@dataclasses.dataclass(frozen=True)
class SwapCaller(Syscall):
    a: str
    b: str

    def issue(self, kernel: mcsim._kernel.Kernel, actor: str) -> Any:
        return kernel.ipc.swap_caller(actor, self.a, self.b)


@dataclasses.dataclass(frozen=True)
class HandlerReply(Syscall):
    actions: Tuple[mcsim._timefault.HandlerAction, ...] = ()
    fault: Optional[mcsim._timefault.TimeoutFault] = None

    def issue(self, kernel: mcsim._kernel.Kernel, actor: str) -> Any:
        return kernel.faults.handler_reply(actor, self.fault, self.actions)


@dataclasses.dataclass(frozen=True)
class Checkpoint(Local):
    '''Commit the program state; a rollback restores the last commit.'''
    name: Optional[str] = None


@dataclasses.dataclass(frozen=True)
class Complete(Local):
    '''Mark the current job of a periodic thread as done.'''


@dataclasses.dataclass(frozen=True)
class ProgramTimer(Local):
    '''Arm the timer device to signal ``ntfn`` at absolute time ``at``.'''
    ntfn: str
    at: Time


@dataclasses.dataclass(frozen=True)
class AckIrq(Local):
    ntfn: str


RECEIVES = (Recv, ReplyRecv, SignalRecv, NbSendWait)

ProgramGenerator = Generator[Request, Any, None]


class ProgramContext():
    '''What a running program sees of the simulation.'''
    def __init__(self, name: str, params: Mapping[str, Any], clock: Callable[[], Time]) -> None:
        self._name = name
        self._clock = clock
        self.params: Dict[str, Any] = dict(params)
        # user state, saved by checkpoints and restored by rollbacks
        self.state: Dict[str, Any] = {}

    @property
    def name(self) -> str:
        return self._name

    @property
    def now(self) -> Time:
        return self._clock()


class Program():
    _SUPPORTED_PARAMS = (
        'ctx',
        'params',
        'name',
    )

    def __init__(self, name: str, call: Callable[..., ProgramGenerator]) -> None:
        self._name = name
        self._set_callable(call)

    def _set_callable(self, call: Callable[..., ProgramGenerator]) -> None:
        '''Set and validate the program callable.'''
        self._callable = call
        self._params = inspect.signature(self._callable).parameters

        for param in self._params:
            if param not in self._SUPPORTED_PARAMS:
                raise McsimError(
                    f'Program `{self.name}` has unknown parameter `{param}`'
                )

    def start(self, ctx: ProgramContext) -> ProgramGenerator:
        '''Create a fresh generator for a thread.'''
        kwargs = {
            'ctx': ctx,
            'params': ctx.params,
            'name': ctx.name,
        }
        return self._callable(**{
            arg: val for arg, val in kwargs.items()
            if arg in self._params
        })

    @property
    def name(self) -> str:
        '''Program name.'''
        return self._name


def program(func: Callable[..., ProgramGenerator]) -> Program:
    '''Decorator that marks a generator function as a thread program.'''
    return Program(func.__name__.replace('_', '-'), func)


def collect_programs(module: object) -> Dict[str, Program]:
    return {
        value.name: value
        for value in (getattr(module, attr) for attr in dir(module) if not attr.startswith('_'))
        if isinstance(value, Program)
    }


# verb scripts

@dataclasses.dataclass(frozen=True)
class _Mark():
    pass


@dataclasses.dataclass(frozen=True)
class _Loop():
    pass


@dataclasses.dataclass(frozen=True)
class _ComputeBadge():
    pass


def _int(word: str, verb: str) -> int:
    try:
        return int(word)
    except ValueError:
        raise ConfigurationError(f'Expected a number in `{verb}`, got `{word}`') from None


def _opt_int(args: Sequence[str], index: int, text: str) -> int:
    return _int(args[index], text) if len(args) > index else 0


def _call(args: Sequence[str], text: str) -> Call:
    rest = [arg for arg in args[1:] if arg != 'nodonate']
    return Call(args[0], _int(rest[0], text) if rest else 0, 'nodonate' not in args[1:])


# verb -> (least arguments, most arguments, builder)
_VERBS: Dict[str, Tuple[int, int, Callable[[Sequence[str], str], object]]] = {
    'compute': (1, 1, lambda a, t: _ComputeBadge() if a[0] == 'badge' else Compute(_int(a[0], t))),
    'call': (1, 3, _call),
    'send': (1, 2, lambda a, t: Send(a[0], _opt_int(a, 1, t))),
    'nbsend': (1, 2, lambda a, t: NbSend(a[0], _opt_int(a, 1, t))),
    'recv': (1, 1, lambda a, t: Recv(a[0])),
    'reply-recv': (1, 2, lambda a, t: ReplyRecv(a[0], _opt_int(a, 1, t))),
    'reply': (0, 1, lambda a, t: Reply(_opt_int(a, 0, t))),
    'nbsend-wait': (2, 3, lambda a, t: NbSendWait(a[0], a[1], _opt_int(a, 2, t))),
    'signal': (1, 1, lambda a, t: Signal(a[0])),
    'wait': (1, 1, lambda a, t: Wait(a[0])),
    'signal-recv': (2, 2, lambda a, t: SignalRecv(a[0], a[1])),
    'yield': (0, 1, lambda a, t: Yield(a[0] if a else None)),
    'yield-to': (1, 1, lambda a, t: YieldTo(a[0])),
    'consume': (1, 1, lambda a, t: Consume(a[0])),
    'bind': (2, 2, lambda a, t: Bind(a[0], a[1])),
    'unbind': (1, 1, lambda a, t: Unbind(a[0])),
    'resume': (1, 1, lambda a, t: Resume(a[0])),
    'suspend': (1, 1, lambda a, t: Suspend(a[0])),
    'configure': (3, 3, lambda a, t: Configure(a[0], _int(a[1], t), _int(a[2], t))),
    'set-system-criticality': (1, 1, lambda a, t: SetSystemCriticality(_int(a[0], t))),
    'checkpoint': (0, 1, lambda a, t: Checkpoint(a[0] if a else None)),
    'complete': (0, 0, lambda a, t: Complete()),
    'mark': (0, 0, lambda a, t: _Mark()),
    'loop': (0, 0, lambda a, t: _Loop()),
}


def parse_verb(text: str) -> object:
    '''Turn one scenario verb such as ``call ep nodonate 3`` into a request.'''
    words = text.split()
    if not words:
        raise ConfigurationError('Empty verb')
    verb, args = words[0], words[1:]
    if verb not in _VERBS:
        raise ConfigurationError(f'Unknown verb `{verb}`')
    least, most, build = _VERBS[verb]
    if not least <= len(args) <= most:
        raise ConfigurationError(f'Verb `{verb}` takes {least} to {most} arguments, got `{text}`')
    return build(args, text)


class ScriptProgram(Program):
    '''Program given as a list of verbs.

    ``loop`` jumps back to the verb after the last ``mark`` (or to the
    start), ``compute badge`` computes for as many ticks as the badge of the
    last message received.
    '''
    def __init__(self, name: str, verbs: Sequence[str]) -> None:
        steps = []
        for index, verb in enumerate(verbs):
            try:
                steps.append(parse_verb(verb))
            except ConfigurationError as e:
                raise ConfigurationError(str(e), key=f'{name}[{index}]') from None
        self._steps = steps
        super().__init__(name, self._run)

    def _run(self, ctx: ProgramContext) -> ProgramGenerator:
        start = 0
        index = 0
        badge = 0
        while index < len(self._steps):
            step = self._steps[index]
            index += 1
            if isinstance(step, _Mark):
                start = index
                continue
            if isinstance(step, _Loop):
                index = start
                continue
            request = Compute(badge) if isinstance(step, _ComputeBadge) else step
            assert isinstance(request, Request)
            result = yield request
            if isinstance(result, Message):
                badge = result.badge


# handler actions in scenario spelling

def parse_action(text: str) -> mcsim._timefault.HandlerAction:
    '''``extend:5``, ``raise-criticality:1``, ``suspend-owner``, ``rollback`` or ``rollback:NAME``.'''
    kind, _, value = text.partition(':')
    if kind == 'extend':
        return mcsim._timefault.ExtendBudget(_int(value, text))
    if kind == 'raise-criticality':
        return mcsim._timefault.RaiseSystemCriticality(_int(value, text))
    if kind == 'suspend-owner' and not value:
        return mcsim._timefault.SuspendOwner()
    if kind == 'rollback':
        return mcsim._timefault.RollbackAndReset(value or None)
    raise ConfigurationError(f'Unknown handler action `{text}`')


# built-in programs

@program
def periodic(params: Dict[str, Any]) -> ProgramGenerator:
    '''Compute ``work`` ticks per job, then sleep until the next refill.'''
    work = params.get('work', 1)
    while True:
        yield Compute(work)
        yield Complete()
        yield Yield()


@program
def spin() -> ProgramGenerator:
    '''Compute forever.'''
    while True:
        yield Compute(10 ** 9)


@program
def client(params: Dict[str, Any]) -> ProgramGenerator:
    '''Periodic client: local work, a call to a server, then sleep.'''
    ep = params['ep']
    work = params.get('work', 0)
    request = params.get('request', 1)
    while True:
        if work:
            yield Compute(work)
        try:
            yield Call(ep, request, params.get('donate', True))
        except RequestAborted:
            # the server rolled back, this job is lost
            yield Yield()
            continue
        yield Complete()
        yield Yield()


@program
def passive_init(params: Dict[str, Any]) -> ProgramGenerator:
    '''Start a server on a lent scheduling context and take it back once the server waits.'''
    sc, server, ntfn = params['sc'], params['server'], params['ntfn']
    yield Bind(sc, server)
    yield Resume(server)
    yield Wait(ntfn)
    yield Unbind(sc)


@program
def passive_server(params: Dict[str, Any]) -> ProgramGenerator:
    '''Signal readiness, then serve requests for ``work`` ticks each (the badge if unset).'''
    ep = params['ep']
    work = params.get('work')
    message = yield SignalRecv(params['ntfn'], ep)
    while True:
        yield Compute(work if work is not None else message.badge)
        message = yield ReplyRecv(ep, message.badge)


@program
def timeout_handler(params: Dict[str, Any]) -> ProgramGenerator:
    '''Answer every timeout fault on ``ep`` with the configured actions.'''
    ep = params['ep']
    actions = tuple(parse_action(action) for action in params.get('actions', []))
    once = params.get('once', False)
    used = False
    while True:
        message = yield Recv(ep)
        yield HandlerReply(() if once and used else actions, message.fault)
        used = True


@program
def buffered_server(ctx: ProgramContext, params: Dict[str, Any]) -> ProgramGenerator:
    '''Accumulating server with two buffers: ``total`` is always consistent, ``scratch`` is the dirty copy.

    Each request adds its badge to the total in ``work`` one-tick steps and
    commits with a checkpoint; the reply carries the new total.
    '''
    ep = params['ep']
    work = params.get('work', 1)
    ctx.state.setdefault('total', 0)
    ctx.state.setdefault('scratch', None)
    if params.get('ntfn'):
        # started passive: report readiness to the thread lending the SC
        message = yield SignalRecv(params['ntfn'], ep)
    else:
        message = yield Recv(ep)
    while True:
        ctx.state['scratch'] = [ctx.state['total']]
        for _ in range(work):
            yield Compute(1)
            ctx.state['scratch'].append(message.badge)
        ctx.state['total'] = ctx.state['scratch'][0] + message.badge
        ctx.state['scratch'] = None
        yield Checkpoint()
        message = yield ReplyRecv(ep, ctx.state['total'])


@program
def rollback_handler(params: Dict[str, Any]) -> ProgramGenerator:
    '''Roll a faulting server back to its last commit, aborting the client's request.'''
    ep = params['ep']
    while True:
        message = yield Recv(ep)
        fault = message.fault
        try:
            yield HandlerReply((mcsim._timefault.RollbackAndReset(),), fault)
        except KernelError:
            # not serving a request: plain resume
            yield HandlerReply((), fault)


def builtin_programs() -> Dict[str, Program]:
    import mcsim._ulsched

    programs = collect_programs(sys.modules[__name__])
    programs.update(collect_programs(mcsim._ulsched))
    return programs


def resolve_program(spec: object, available: Mapping[str, Program], *, key: str) -> Program:
    '''A program is either the name of a registered program or a list of verbs.'''
    if isinstance(spec, str):
        if spec not in available:
            raise ConfigurationError(f'Unknown program `{spec}`', key=key)
        return available[spec]
    if isinstance(spec, list) and all(isinstance(verb, str) for verb in spec):
        return ScriptProgram(key, spec)
    raise ConfigurationError('Field has an invalid type, expecting a program name or a list of verbs', key=key)
