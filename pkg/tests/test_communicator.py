import numpy as np
import pytest

from nanonnl import ParameterRegistry, SgdSolver, Variable, registry_scope
from nanonnl import functions as F
from nanonnl.communicator import (
    CommunicatorGroup,
    DataParallelTrainer,
    data_parallel_step,
)
from nanonnl.errors import (
    CollectiveTimeout,
    DivergedReplicas,
    InvalidWorkerCount,
    ShapeMismatchAcrossRanks,
)
from nanonnl.networks import mlp
from nanonnl.tensor import NdArray, RngState


def _mlp_builder(n_classes=3, dim=6):
    def build(shard_size):
        x = Variable((shard_size, dim))
        label = Variable((shard_size,))
        logits = mlp(x, n_classes, hidden=(8,))
        loss = F.softmax_cross_entropy(logits, label)
        return {"x": x, "label": label, "loss": loss, "logits": logits}
    return build


def _batch(n, dim, classes, seed=1):
    rng = RngState(seed=seed)
    x = rng.next_uniform((n, dim), -1, 1)
    t = (np.arange(n) % classes).astype(np.float32)
    return x, t


class TestGroup:
    def test_invalid_worker_count(self):
        with pytest.raises(InvalidWorkerCount):
            CommunicatorGroup(0)

    def test_ranks_unique(self):
        group = CommunicatorGroup(4)
        assert [c.rank for c in group.communicators] == [0, 1, 2, 3]
        assert all(c.n_workers == 4 for c in group.communicators)

    def test_replicas_start_bitwise_equal(self):
        trainer = DataParallelTrainer(4, 8, _mlp_builder(), lr=0.1, seed=3)
        reference = {n: v.data.tobytes()
                     for n, v in trainer.rank0.registry.get_parameters().items()}
        for replica in trainer.replicas[1:]:
            for name, v in replica.registry.get_parameters().items():
                assert v.data.tobytes() == reference[name]


class TestAllReduce:
    def test_two_ranks_sum(self):
        group = CommunicatorGroup(2)
        buffers = [NdArray.from_values([1.0, 2.0]), NdArray.from_values([3.0, 4.0])]

        def work(comm):
            comm.all_reduce([buffers[comm.rank]])
            return buffers[comm.rank].values.tolist()

        results = group.run(work)
        assert results == [[4.0, 6.0], [4.0, 6.0]]

    def test_single_rank_identity_bitwise(self):
        group = CommunicatorGroup(1)
        buf = NdArray.from_values(RngState(seed=2).next_uniform((7,), -1, 1))
        before = buf.tobytes()
        group.run(lambda comm: comm.all_reduce([buf]))
        assert buf.tobytes() == before

    def test_division_averages(self):
        group = CommunicatorGroup(4)
        buffers = [NdArray.from_values(np.ones(3, dtype=np.float32)) for _ in range(4)]

        def work(comm):
            comm.all_reduce([buffers[comm.rank]], division=True)
            return buffers[comm.rank].values.tolist()

        for vals in group.run(work):
            assert vals == [1.0, 1.0, 1.0]

    def test_shape_mismatch_across_ranks(self):
        group = CommunicatorGroup(2)
        shapes = [(3,), (4,)]

        def work(comm):
            comm.all_reduce([NdArray((shapes[comm.rank]))])

        with pytest.raises(ShapeMismatchAcrossRanks):
            group.run(work)

    def test_count_mismatch_across_ranks(self):
        group = CommunicatorGroup(2)

        def work(comm):
            bufs = [NdArray((2,))] * (comm.rank + 1)
            comm.all_reduce(bufs)

        with pytest.raises(ShapeMismatchAcrossRanks):
            group.run(work)

    def test_collective_timeout(self):
        group = CommunicatorGroup(2, timeout=0.2)

        def work(comm):
            if comm.rank == 1:
                return "never joined"
            comm.all_reduce([NdArray((2,))])

        with pytest.raises(CollectiveTimeout):
            group.run(work)

    def test_deterministic_rank_order_reduction(self):
        # the same values reduce to bitwise-identical results on every run
        vals = [RngState(seed=r).next_uniform((64,), -1, 1) for r in range(4)]

        def reduce_once():
            group = CommunicatorGroup(4)
            bufs = [NdArray.from_values(v) for v in vals]
            group.run(lambda comm: comm.all_reduce([bufs[comm.rank]], division=True))
            return bufs[0].tobytes()

        assert reduce_once() == reduce_once()


class TestDataParallelStep:
    def test_k_workers_match_single_worker_full_batch(self):
        x, t = _batch(16, 6, 3)

        # single-worker oracle: full batch, one forward/backward
        reg = ParameterRegistry(seed=3)
        with registry_scope(reg):
            handles = _mlp_builder()(16)
        handles["x"].d = x
        handles["label"].d = t
        handles["loss"].forward()
        handles["loss"].backward()
        want = {n: v.g.copy() for n, v in reg.get_parameters().items()}

        for k in (1, 2, 4):
            trainer = DataParallelTrainer(k, 16, _mlp_builder(), lr=0.1, seed=3)
            trainer.step(x, t)
            got = {n: v.g.copy() for n, v in trainer.rank0.registry.get_parameters().items()}
            for name in want:
                np.testing.assert_allclose(got[name], want[name], rtol=1e-6, atol=1e-7,
                                           err_msg=f"K={k} {name}")

    def test_single_worker_step_is_bitwise_plain_training(self):
        x, t = _batch(8, 6, 3)

        reg = ParameterRegistry(seed=4)
        with registry_scope(reg):
            handles = _mlp_builder()(8)
        solver = SgdSolver(lr=0.1).setup(reg.get_parameters())
        handles["x"].d = x
        handles["label"].d = t
        handles["loss"].forward()
        handles["loss"].backward()
        solver.update()
        want = {n: v.data.tobytes() for n, v in reg.get_parameters().items()}

        trainer = DataParallelTrainer(1, 8, _mlp_builder(), lr=0.1, seed=4)
        data_parallel_step(trainer, x, t)
        for name, v in trainer.rank0.registry.get_parameters().items():
            assert v.data.tobytes() == want[name]

    def test_post_step_parameter_hash_identical(self):
        x, t = _batch(8, 6, 3)
        trainer = DataParallelTrainer(2, 8, _mlp_builder(), lr=0.1, seed=5)
        trainer.step(x, t)  # raises DivergedReplicas on mismatch
        digests = {trainer._param_digest(r) for r in trainer.replicas}
        assert len(digests) == 1

    def test_diverged_replicas_detected(self):
        x, t = _batch(8, 6, 3)
        trainer = DataParallelTrainer(2, 8, _mlp_builder(), lr=0.1, seed=6)
        # sabotage one replica's master weights so its update diverges
        slot = next(iter(trainer.replicas[1].solver.slots.values()))
        slot.master += 1.0
        with pytest.raises(DivergedReplicas):
            trainer.step(x, t)

    def test_steps_deterministic_across_runs(self):
        x, t = _batch(16, 6, 3)

        def run():
            trainer = DataParallelTrainer(4, 16, _mlp_builder(), lr=0.1, seed=7)
            for _ in range(3):
                trainer.step(x, t)
            return [v.data.tobytes()
                    for v in trainer.rank0.registry.get_parameters().values()]

        assert run() == run()

    def test_losses_match_full_batch_loss(self):
        x, t = _batch(16, 6, 3)
        single = DataParallelTrainer(1, 16, _mlp_builder(), lr=0.1, seed=8)
        loss1 = single.step(x, t)
        quad = DataParallelTrainer(4, 16, _mlp_builder(), lr=0.1, seed=8)
        loss4 = quad.step(x, t)
        assert abs(loss1 - loss4) < 1e-6 * max(1.0, abs(loss1))
