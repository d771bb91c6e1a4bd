"""Discrete-event scheduler driving simulated client threads.

Client threads are plain generators. They yield request objects (a
:class:`Post`, a list of posts issued in parallel, :class:`Park`,
:class:`Sleep` or :class:`Rpc`) and are resumed with the result once the
simulated clock reaches the completion time. Everything runs on one OS
thread, so a fixed seed gives a byte-identical schedule.
"""
from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field
from typing import Any, Callable, Generator, Optional


class SimulationError(RuntimeError):
    pass


class Livelock(SimulationError):
    """Raised when an operation exceeds its retry budget."""


@dataclass
class Post:
    qp: Any
    commands: list


@dataclass
class Sleep:
    duration: float


@dataclass
class Rpc:
    """Request/response call to a memory server's memory thread."""

    ms_id: int
    fn: Callable[[], Any]


class Waiter:
    """Handle a parked thread hands to whoever will wake it up."""

    __slots__ = ("owner", "_resume", "woken", "payload")

    def __init__(self, owner: Any = None):
        self.owner = owner
        self._resume: Optional[Callable[[Any], None]] = None
        self.woken = False
        self.payload = None

    def wake(self, payload: Any = None) -> None:
        assert not self.woken, "waiter woken twice"
        self.woken = True
        self.payload = payload
        if self._resume is not None:
            self._resume(payload)


@dataclass
class Park:
    waiter: Waiter


class Task:
    __slots__ = ("sim", "gen", "name", "done", "result", "error", "started_at",
                 "finished_at", "_callbacks")

    def __init__(self, sim: "Simulator", gen: Generator, name: str = ""):
        self.sim = sim
        self.gen = gen
        self.name = name
        self.done = False
        self.result = None
        self.error: Optional[BaseException] = None
        self.started_at = sim.now
        self.finished_at: Optional[float] = None
        self._callbacks: list[Callable[["Task"], None]] = []

    def add_done_callback(self, fn: Callable[["Task"], None]) -> None:
        if self.done:
            fn(self)
        else:
            self._callbacks.append(fn)

    def _finish(self) -> None:
        self.done = True
        self.finished_at = self.sim.now
        for fn in self._callbacks:
            fn(self)
        self._callbacks.clear()

    def step(self, value: Any = None, exc: Optional[BaseException] = None) -> None:
        try:
            if exc is not None:
                req = self.gen.throw(exc)
            else:
                req = self.gen.send(value)
        except StopIteration as stop:
            self.result = stop.value
            self._finish()
            return
        except BaseException as err:  # surfaced by Simulator.run
            self.error = err
            self._finish()
            self.sim._failed.append(self)
            return
        self.sim._dispatch(self, req)


class Simulator:
    """Event heap plus the request dispatcher.

    ``fabric`` is attached by :class:`dmtree.fabric.Fabric` on construction;
    posts are forwarded to it.
    """

    def __init__(self):
        self.now = 0.0
        self._heap: list = []
        self._seq = itertools.count()
        self._failed: list[Task] = []
        self.fabric = None
        self.events = 0

    def call_at(self, t: float, fn: Callable, *args) -> None:
        if t < self.now:
            t = self.now
        heapq.heappush(self._heap, (t, next(self._seq), fn, args))

    def spawn(self, gen: Generator, name: str = "", at: Optional[float] = None) -> Task:
        task = Task(self, gen, name)
        self.call_at(self.now if at is None else at, task.step)
        return task

    def run(self, until: Optional[Task] = None, max_time: Optional[float] = None) -> None:
        heap = self._heap
        pop = heapq.heappop
        while heap:
            if until is not None and until.done:
                break
            if max_time is not None and heap[0][0] > max_time:
                break
            t, _, fn, args = pop(heap)
            self.now = t
            self.events += 1
            fn(*args)
            if self._failed:
                task = self._failed.pop(0)
                raise task.error
        if until is not None and not until.done:
            raise SimulationError(f"task {until.name!r} blocked forever (deadlock?)")

    def run_task(self, gen: Generator, name: str = "") -> Any:
        """Spawn ``gen`` and run the world until it finishes; return its value."""
        task = self.spawn(gen, name)
        self.run(until=task)
        return task.result

    # -- request dispatch -------------------------------------------------

    def _dispatch(self, task: Task, req: Any) -> None:
        if isinstance(req, Post):
            self.fabric.submit(req.qp, req.commands, self.now,
                               lambda comp: task.step(comp.results),
                               lambda err: task.step(exc=err))
        elif isinstance(req, list):
            self._gather(task, req)
        elif isinstance(req, Park):
            w = req.waiter
            if w.woken:
                self.call_at(self.now, task.step, w.payload)
            else:
                w._resume = lambda payload: self.call_at(self.now, task.step, payload)
        elif isinstance(req, Sleep):
            self.call_at(self.now + req.duration, task.step)
        elif isinstance(req, Rpc):
            self.fabric.submit_rpc(req.ms_id, req.fn, self.now,
                                   lambda value: task.step(value),
                                   lambda err: task.step(exc=err))
        else:
            task.step(exc=SimulationError(f"unknown request {req!r}"))

    def _gather(self, task: Task, posts: list) -> None:
        if not posts:
            self.call_at(self.now, task.step, [])
            return
        results: list = [None] * len(posts)
        state = {"left": len(posts), "failed": False}

        def done(i, comp):
            results[i] = comp.results
            state["left"] -= 1
            if state["left"] == 0 and not state["failed"]:
                task.step(results)

        def fail(err):
            if not state["failed"]:
                state["failed"] = True
                task.step(exc=err)

        for i, p in enumerate(posts):
            self.fabric.submit(p.qp, p.commands, self.now,
                               lambda comp, i=i: done(i, comp), fail)
