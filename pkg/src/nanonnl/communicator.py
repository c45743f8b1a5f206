"""Simulated multi-worker data-parallel training inside one process.

Workers are threads; all_reduce is a blocking collective with barrier
semantics. The reduction is a left fold in ascending rank order so that
floating-point non-associativity cannot make two runs differ, and an
optional division flag turns the sum into a mean (the data-parallel step
uses the mean so K shards of a batch reproduce the full-batch gradient).

A group's replicas all start from the same seed, keep their own registry,
graph and solver, and stay bitwise synchronized: after every step the
parameter bytes of all ranks are hashed and compared.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CollectiveTimeout,
    DivergedReplicas,
    InvalidWorkerCount,
    ShapeMismatchAcrossRanks,
)
from .graph import Variable
from .parameters import ParameterRegistry, registry_scope
from .solver import DynamicLossScaler, SgdSolver, dynamic_step
from .tensor import NdArray

__all__ = [
    "Communicator",
    "CommunicatorGroup",
    "DataParallelTrainer",
    "data_parallel_step",
]


class _SharedState:
    def __init__(self, n: int, timeout: float):
        self.n = n
        self.timeout = timeout
        self.barrier = threading.Barrier(n)
        self.slots: list = [None] * n
        self.error: Exception | None = None


class Communicator:
    """One rank's view of the worker group."""

    def __init__(self, rank: int, state: _SharedState):
        self.rank = rank
        self.n_workers = state.n
        self._state = state

    def _wait(self) -> None:
        try:
            self._state.barrier.wait(timeout=self._state.timeout)
        except threading.BrokenBarrierError:
            raise CollectiveTimeout(
                f"rank {self.rank}: a peer failed to join within {self._state.timeout}s"
            ) from None

    def barrier(self) -> None:
        self._wait()

    def all_reduce(self, buffers: list[NdArray], division: bool = False) -> None:
        """Replace every rank's buffers with the elementwise sum (or mean)
        across ranks. Collective: blocks until all ranks have entered with
        shape-matching buffer lists; reduces in ascending rank order."""
        st = self._state
        st.slots[self.rank] = list(buffers)
        self._wait()  # everyone deposited
        if self.rank == 0:
            try:
                self._reduce(division)
            except Exception as exc:  # propagate to every rank
                st.error = exc
        self._wait()  # reduction visible
        err = st.error
        self._wait()  # everyone has read the error slot
        if self.rank == 0:
            st.error = None
            st.slots = [None] * st.n
        if err is not None:
            raise type(err)(str(err))  # fresh instance per rank

    def _reduce(self, division: bool) -> None:
        st = self._state
        counts = {len(s) for s in st.slots}
        if len(counts) != 1:
            raise ShapeMismatchAcrossRanks(f"buffer counts differ across ranks: {sorted(counts)}")
        for i in range(counts.pop()):
            shapes = {s[i].shape for s in st.slots}
            if len(shapes) != 1:
                raise ShapeMismatchAcrossRanks(f"buffer {i} shapes differ: {sorted(shapes)}")
            acc = st.slots[0][i].values.astype(np.float32, copy=True)
            for rank in range(1, st.n):
                acc += st.slots[rank][i].values
            if division:
                acc /= np.float32(st.n)
            for rank in range(st.n):
                st.slots[rank][i].write(acc)


class CommunicatorGroup:
    """Factory for a fixed-size group of rank communicators."""

    def __init__(self, n_workers: int, timeout: float = 60.0):
        if n_workers < 1:
            raise InvalidWorkerCount(f"need at least one worker, got {n_workers}")
        self.n_workers = n_workers
        self._shared = _SharedState(n_workers, timeout)
        self.communicators = [Communicator(rank, self._shared) for rank in range(n_workers)]

    def run(self, fn) -> list:
        """Run fn(communicator) on every rank in parallel; returns per-rank
        results, re-raising the lowest-rank worker failure."""
        results: list = [None] * self.n_workers
        failures: list = [None] * self.n_workers

        def target(rank: int):
            try:
                results[rank] = fn(self.communicators[rank])
            except Exception as exc:
                failures[rank] = exc
                self._shared.barrier.abort()

        threads = [threading.Thread(target=target, args=(rank,), name=f"worker-{rank}")
                   for rank in range(self.n_workers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        self._shared.barrier.reset()
        # a failing rank aborts the barrier, surfacing as CollectiveTimeout
        # on its peers; report the root cause first
        root = [e for e in failures if e is not None and not isinstance(e, CollectiveTimeout)]
        if root:
            raise root[0]
        for exc in failures:
            if exc is not None:
                raise exc
        return results


@dataclass
class _Replica:
    registry: ParameterRegistry
    handles: dict[str, Variable]
    solver: SgdSolver
    scaler: DynamicLossScaler | None
    params: list[Variable] = field(default_factory=list)


class DataParallelTrainer:
    """K lock-step replicas: shard the batch, average gradients, update.

    build_fn(shard_batch_size) runs once per rank under that rank's
    registry (all seeded identically, so initial weights are bitwise
    equal) and must return a dict with Variables under keys "x", "label",
    "loss", and optionally "logits".

    loss_scaling: None for plain SGD, a float for a fixed scale, or a
    DynamicLossScaler template (each rank gets its own copy; decisions
    stay identical because reduced gradients are identical).
    """

    def __init__(self, n_workers: int, batch_size: int, build_fn, lr: float,
                 seed: int, loss_scaling=None, clip_norm: float | None = None,
                 timeout: float = 60.0, check_sync: bool = True):
        if batch_size % n_workers != 0:
            raise InvalidWorkerCount(
                f"batch size {batch_size} not divisible by {n_workers} workers")
        self.group = CommunicatorGroup(n_workers, timeout)
        self.batch_size = batch_size
        self.shard_size = batch_size // n_workers
        self.check_sync = check_sync
        self.static_scale = float(loss_scaling) if isinstance(loss_scaling, (int, float)) else None
        self.replicas: list[_Replica] = []
        for _ in range(n_workers):
            registry = ParameterRegistry(seed)
            with registry_scope(registry):
                handles = build_fn(self.shard_size)
            solver = SgdSolver(lr, clip_norm=clip_norm).setup(registry.get_parameters())
            scaler = None
            if isinstance(loss_scaling, DynamicLossScaler):
                scaler = DynamicLossScaler(loss_scaling.loss_scale, loss_scaling.scaling_factor,
                                           loss_scaling.interval, loss_scaling.counter)
            replica = _Replica(registry, handles, solver, scaler)
            replica.params = list(registry.get_parameters().values())
            self.replicas.append(replica)

    @property
    def rank0(self) -> _Replica:
        return self.replicas[0]

    def _param_digest(self, replica: _Replica) -> bytes:
        h = hashlib.sha256()
        for p in replica.params:
            h.update(p.data.tobytes())
        return h.digest()

    def step(self, x_batch: np.ndarray, label_batch: np.ndarray) -> float:
        """One synchronized training step over the full batch.

        Each rank runs forward/backward on its disjoint shard, gradients
        are mean-all-reduced, and every rank applies the identical update.
        Returns the batch loss (mean of shard losses).
        """

        def work(comm: Communicator) -> float:
            r = self.replicas[comm.rank]
            lo = comm.rank * self.shard_size
            r.handles["x"].d = x_batch[lo:lo + self.shard_size]
            r.handles["label"].d = label_batch[lo:lo + self.shard_size]
            loss = r.handles["loss"]
            loss.forward()
            if r.scaler is not None:
                loss.backward(grad_seed=r.scaler.loss_scale)
            elif self.static_scale is not None:
                loss.backward(grad_seed=self.static_scale)
            else:
                loss.backward()
            comm.all_reduce([p.grad for p in r.params], division=True)
            if r.scaler is not None:
                dynamic_step(r.scaler, r.solver)
            elif self.static_scale is not None:
                r.solver.scale_grad(1.0 / self.static_scale)
                r.solver.clip_grad_by_norm()
                r.solver.update()
            else:
                r.solver.clip_grad_by_norm()
                r.solver.update()
            return float(loss.d)

        losses = self.group.run(work)
        if self.check_sync:
            digests = {self._param_digest(r) for r in self.replicas}
            if len(digests) != 1:
                raise DivergedReplicas("parameter bytes differ across ranks after step")
        return float(np.mean(losses))


def data_parallel_step(trainer: DataParallelTrainer, x_batch, label_batch) -> float:
    """Convenience alias for one synchronized step on an existing trainer."""
    return trainer.step(x_batch, label_batch)
