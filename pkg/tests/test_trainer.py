import numpy as np
import pytest
import torch

from tcl.data import SyntheticGroupDataset
from tcl.errors import DataRevokedError, DivergedLoss, EmptyClass, MissingMemory
from tcl.losses import LossConfig
from tcl.model import ContinualModel, EmbeddingTrunk, MLPTrunk
from tcl.trainer import (ContinualLearner, TaskData, TrainerConfig, build_replay_batch, finalize_task,
                         load_checkpoint, probe_pretrained_behavior, run_task, stratified_batches, train_task)

FAST = TrainerConfig(epochs=3, probe_steps=100, task_head_steps=150)


def small_bench(**kw):
    args = dict(n_groups=2, classes_per_group=3, input_dim=16, noise=0.3, n_train=40, n_test=40)
    args.update(kw)
    return SyntheticGroupDataset(**args)


def learner_for(bench, seed=0, trunk=None, config=FAST, loss=None):
    if trunk is None:
        trunk = MLPTrunk(bench.input_dim, 32, 8, seed=seed).fit_projection(bench.pretraining_sample(30, seed))
    return ContinualLearner(trunk, loss or LossConfig(), config, seed=seed)


def start(learner, task):
    learner.begin_task(task.task_id, task.taxonomy)
    y = np.array([learner.registry.id_of(n) for n in task.y_train])
    return TaskData(task.task_id, task.x_train, y)


@pytest.fixture(scope="module")
def trained():
    bench = small_bench()
    tasks = bench.tasks(3)
    learner = learner_for(bench)
    trunk_sum = learner.model.trunk.checksum()
    snapshots, states, datas = [], [], []
    for task in tasks:
        data = start(learner, task)
        probe_pretrained_behavior(learner, task.task_id, data)
        state = train_task(learner, task.task_id, data)
        states.append(finalize_task(learner, state))
        datas.append(data)
        snapshots.append([b.detach().clone() for b in learner.model.bank.blocks])
    return dict(bench=bench, tasks=tasks, learner=learner, trunk_sum=trunk_sum, snapshots=snapshots,
                states=states, datas=datas)


def test_probe_grows_relation_matrix():
    bench = small_bench()
    tasks = bench.tasks(3)
    learner = learner_for(bench)
    sizes = []
    for task in tasks[:2]:
        data = start(learner, task)
        probe_pretrained_behavior(learner, task.task_id, data)
        sizes.append(learner.relation.M.shape)
        learner.states[task.task_id] = finalize_task(learner, train_task(learner, task.task_id, data))
    assert sizes == [(2, 2), (4, 4)]


def test_probe_deterministic():
    bench = small_bench()
    task = bench.tasks(3)[0]
    a, b = learner_for(bench), learner_for(bench)
    for lr in (a, b):
        probe_pretrained_behavior(lr, 1, start(lr, task))
    assert np.array_equal(a.relation.M, b.relation.M)


def test_probe_matches_generator_distances():
    # identity trunk: pretrained memories estimate the generators themselves
    bench = small_bench(n_train=4000, noise=0.3, input_dim=12, n_groups=2, classes_per_group=2)
    task = bench.tasks(1)[0]
    learner = learner_for(bench, trunk=EmbeddingTrunk(bench.input_dim),
                          config=TrainerConfig(gmm_components=1))
    probe_pretrained_behavior(learner, 1, start(learner, task))
    ids = [bench.class_names.index(learner.registry.name_of(c)) for c in range(4)]
    for i in range(4):
        for j in range(i + 1, 4):
            truth = bench.generator_w2(ids[i], ids[j])
            assert abs(learner.relation.M[i, j] - truth) <= 0.1 * truth


def test_probe_empty_class():
    bench = small_bench()
    task = bench.tasks(3)[0]
    learner = learner_for(bench)
    data = start(learner, task)
    keep = data.y != data.y[0]
    with pytest.raises(EmptyClass):
        probe_pretrained_behavior(learner, 1, TaskData(1, data.x[keep], data.y[keep]))


def test_replay_batch_counts(trained):
    learner, task = trained["learner"], trained["tasks"][2]
    x = task.x_test[:10]
    y = np.array([learner.registry.id_of(n) for n in task.y_test[:10]])
    batch, labels = build_replay_batch(learner, 3, x, y, 8, 0)
    old = [c for c in range(learner.registry.num_classes) if learner.registry.task_of(c) < 3]
    assert len(old) == 4
    pseudo = labels[~batch.is_new_task]
    assert len(pseudo) == 32
    assert sorted(np.bincount(pseudo.numpy())[old].tolist()) == [8, 8, 8, 8]
    assert bool(batch.is_new_task[:10].all())
    batch1, _ = build_replay_batch(learner, 1, x, y, 8, 0)
    assert bool(batch1.is_new_task.all())


def test_replay_missing_memory():
    bench = small_bench()
    tasks = bench.tasks(3)
    learner = learner_for(bench)
    data = start(learner, tasks[0])
    probe_pretrained_behavior(learner, 1, data)
    learner.begin_task(2, tasks[1].taxonomy)
    with pytest.raises(MissingMemory):
        build_replay_batch(learner, 2, tasks[1].x_train[:4], np.zeros(4, int), 2, 0)


def test_stratified_batches_give_every_anchor_a_positive():
    rng = np.random.default_rng(0)
    y = np.repeat([3, 5, 9, 11], [25, 30, 17, 40])
    seen = np.concatenate(stratified_batches(y, 24, rng))
    for b in stratified_batches(y, 24, rng):
        assert min(np.bincount(y[b])[np.unique(y[b])]) >= 2
    assert len(seen) >= len(y) - 4


def test_freeze_invariants(trained):
    learner, snaps = trained["learner"], trained["snapshots"]
    assert learner.model.trunk.checksum() == trained["trunk_sum"]
    for t in range(1, 3):
        for i in range(t):
            assert torch.equal(snaps[t][i], snaps[t - 1][i])


def test_revoked_data_unreadable(trained):
    for data in trained["datas"]:
        with pytest.raises(DataRevokedError):
            data.x
        with pytest.raises(DataRevokedError):
            data.y


def test_memories_exist_after_finalize(trained):
    learner = trained["learner"]
    for c in range(learner.registry.num_classes):
        assert c in learner.adapted and c in learner.pretrained
        assert learner.adapted[c].space_tag == "adapted"


def test_loss_decreases():
    for seed in range(3):
        bench = small_bench(seed=seed)
        learner = learner_for(bench, seed, config=TrainerConfig(epochs=8, seed=seed))
        task = bench.tasks(3, order_seed=seed)[0]
        data = start(learner, task)
        probe_pretrained_behavior(learner, 1, data)
        state = train_task(learner, 1, data)
        assert state.loss_history[-1] < state.loss_history[0]


def test_seeded_rerun_reproduces_loss():
    bench = small_bench()
    task = bench.tasks(3)[0]
    finals = []
    for _ in range(2):
        learner = learner_for(bench)
        data = start(learner, task)
        probe_pretrained_behavior(learner, 1, data)
        finals.append(train_task(learner, 1, data).loss_history[-1])
    assert abs(finals[0] - finals[1]) <= 1e-6


def test_diverged_loss():
    bench = small_bench()
    task = bench.tasks(3)[0]
    learner = learner_for(bench)
    data = start(learner, task)
    probe_pretrained_behavior(learner, 1, data)
    with torch.no_grad():
        learner.model.head.weight.fill_(float("nan"))
    with pytest.raises(DivergedLoss):
        train_task(learner, 1, data)


def test_prompts_differ_after_training(trained):
    learner, task = trained["learner"], trained["tasks"][0]
    with torch.no_grad():
        a = learner.model.encode_task(task.x_test, 1)
        b = learner.model.encode_task(task.x_test, 3)
        pre = learner.model.pretrained_features(task.x_test)
    assert not torch.allclose(a, b)
    assert not torch.allclose(a, pre / pre.norm(dim=1, keepdim=True))


def test_probe_beats_head_on_own_task(trained):
    learner = trained["learner"]
    for i, task in enumerate(trained["tasks"], start=1):
        y = np.array([learner.registry.id_of(n) for n in task.y_test])
        with torch.no_grad():
            z = learner.model.encode_task(task.x_test, i)
            classes = np.array(learner.model.probe_classes[i])
            probe = classes[learner.model.probe_logits(i, z).argmax(1).numpy()]
            logits = learner.model.logits(z)[:, classes]
            head = classes[logits.argmax(1).numpy()]
        assert np.mean(probe == y) >= np.mean(head == y) - 1e-12


def test_single_task_predicts_task_one():
    bench = small_bench()
    task = bench.tasks(3)[0]
    learner = learner_for(bench)
    run_task(learner, 1, task.taxonomy, task.x_train, task.y_train)
    assert set(learner.model.predict_task(bench.tasks(3)[2].x_test).tolist()) == {1}


def test_task_prediction_on_separable_tasks():
    # one group per task, groups far apart: task identity is linearly obvious
    bench = small_bench(n_groups=3, classes_per_group=2, group_radius=6.0, noise=0.3)
    tasks = bench.tasks(3, mode="by_group")
    learner = learner_for(bench)
    for task in tasks:
        run_task(learner, task.task_id, task.taxonomy, task.x_train, task.y_train)
    acc = np.mean([np.mean(learner.model.predict_task(t.x_test) == t.task_id) for t in tasks])
    assert acc > 0.95


def test_checkpoint_round_trip(trained, tmp_path):
    from tcl.trainer import save_checkpoint

    learner = trained["learner"]
    for t in (1, 2, 3):
        save_checkpoint(learner, tmp_path, t)
    restored = learner_for(trained["bench"])
    load_checkpoint(restored, tmp_path, 3)
    assert restored.model.state_hash() == learner.model.state_hash() == trained["states"][-1].model_hash
    again = ContinualModel.load(tmp_path / "model" / "task_3")
    assert again.state_hash() == learner.model.state_hash()
    assert np.array_equal(restored.relation.M, learner.relation.M)
    x = trained["tasks"][1].x_test
    assert torch.equal(restored.model.encode_task(x, 2), learner.model.encode_task(x, 2))
    assert np.array_equal(restored.model.predict_task(x), learner.model.predict_task(x))
