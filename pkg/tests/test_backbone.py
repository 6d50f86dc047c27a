import numpy as np
import pytest

from relcil.backbone import (
    Backbone,
    BackboneConfig,
    load_checkpoint,
    pretrain_accuracy,
    pretrain_base,
    save_checkpoint,
)
from relcil.errors import ConfigError, ContractError
from relcil.numerics import rng_stream
from relcil.stream import StreamSpec, make_stream


def small(**kw):
    cfg = dict(input_dim=5, width=6, layers=4, rank=2)
    cfg.update(kw)
    return Backbone(BackboneConfig(**cfg), seed=3)


def with_tasks(bb, k, scale=0.3):
    rng = np.random.default_rng(k)
    for t in range(1, k + 1):
        bb.add_task_adapter(t)
        bb.adapters[-1].B = rng.normal(scale=scale, size=bb.adapters[-1].B.shape)
    bb.invalidate()
    return bb


def test_config_invariants():
    with pytest.raises(ConfigError):
        BackboneConfig(layers=1)
    with pytest.raises(ConfigError):
        BackboneConfig(width=4, rank=5)
    with pytest.raises(ConfigError):
        BackboneConfig(rank=0)
    with pytest.raises(ConfigError):
        BackboneConfig(layers=3, adapter_targets=[4])


def test_residual_identity_in_traces():
    bb = with_tasks(small(), 2)
    tr = bb.forward_batch(np.random.default_rng(0).normal(size=(5, 5)), 2)
    # the stored state is exactly the rounded sum of its two parts
    assert np.array_equal(tr.z[:, 1:], tr.z[:, :-1] + tr.h)
    np.testing.assert_allclose(tr.z[:, -1], tr.z[:, 0] + tr.h.sum(axis=1), atol=1e-10)


def test_zero_weights_give_zero_residuals():
    bb = small()
    bb.W0[:] = 0.0
    bb.invalidate()
    tr = bb.forward(np.ones(5), 0)
    assert np.all(tr.h == 0) and np.array_equal(tr.z[-1], tr.z[0])


def test_new_adapter_is_identity_bitwise():
    bb = with_tasks(small(), 2)
    bb.add_task_adapter(3)
    assert np.all(bb.adapters[-1].B == 0)
    X = np.random.default_rng(1).normal(size=(4, 5))
    a, b = bb.forward_batch(X, 3), bb.forward_batch(X, 2)
    assert a.z.tobytes() == b.z.tobytes()
    prev, cur = bb.dual_forward(X, 3)
    assert prev.z.tobytes() == cur.z.tobytes()


def test_adapter_count_and_duplicates():
    bb = small()
    for t in (1, 2, 3):
        bb.add_task_adapter(t)
    assert len(bb.adapters) == 3 and all(a.A.shape[0] == 4 for a in bb.adapters)
    with pytest.raises(ContractError):
        bb.add_task_adapter(3)


def test_adapter_init_variance():
    cfg = BackboneConfig(input_dim=4, width=100, layers=2, rank=50)
    bb = Backbone(cfg)
    A = bb.add_task_adapter(1).A
    assert A.size >= 10_000
    assert abs(A.var() - 1 / cfg.rank) < 0.2 / cfg.rank
    assert abs(A.mean()) < 0.05


def test_effective_weight_oracle():
    bb = with_tasks(small(), 3)
    for layer in range(1, 5):
        assert np.array_equal(bb.effective_weight(layer, 0), bb.W0[layer - 1])
        for h in range(4):
            W = bb.W0[layer - 1].copy()
            for ad in bb.adapters[:h]:
                for i in range(6):
                    for j in range(6):
                        W[i, j] += sum(ad.B[layer - 1][i, k] * ad.A[layer - 1][k, j] for k in range(2))
            np.testing.assert_allclose(bb.effective_weight(layer, h), W, atol=1e-13)
    with pytest.raises(ContractError):
        bb.effective_weight(1, 4)


def test_all_zero_B_means_base_weight():
    bb = small()
    for t in (1, 2):
        bb.add_task_adapter(t)
    assert np.array_equal(bb.weights(2), bb.W0)


def test_logits_and_unknown_class():
    bb = small()
    bb.add_classes([0, 1])
    bb.heads[0] = np.arange(6.0)
    tr = bb.forward(np.ones(5), 0, classes=(0, 1))
    np.testing.assert_allclose(tr.logits, [tr.z[-1] @ bb.heads[0], 0.0])
    with pytest.raises(ContractError):
        bb.forward(np.ones(5), 0, classes=(7,))


def test_prediction_ties_go_to_lowest_class():
    bb = small()
    bb.add_classes([3, 1, 2])
    for c in (1, 2, 3):
        bb.heads[c] = np.ones(6)
    assert bb.predict(np.ones((2, 5)), 0, (3, 2, 1)).tolist() == [1, 1]


def test_adapter_gradient_paths():
    bb = with_tasks(small(), 1)
    bb.add_task_adapter(2)
    bb.add_classes([0, 1])
    bb.trainable_classes = (0, 1)
    bb.heads[0] = np.ones(6)
    X = np.random.default_rng(0).normal(size=(3, 5))
    W = bb.weights(2)
    tr = bb.forward_batch(X, 2, (0, 1), weights=W)
    dW, _, _ = bb.backward_batch(tr, W, dlogits=np.ones((3, 2)))
    dA, dB = bb.adapter_grads(dW)
    assert np.all(dA == 0)  # B = 0 blocks the path into A
    assert np.any(dB != 0)


def test_param_vector_roundtrip():
    bb = with_tasks(small(), 2)
    bb.add_classes([4, 5])
    bb.trainable_classes = (4, 5)
    p = np.arange(bb.n_trainable(), dtype=float)
    bb.set_params(p)
    assert np.array_equal(bb.get_params(), p)
    with pytest.raises(ContractError):
        bb.set_params(p[:-1])


def test_checkpoint_roundtrip(tmp_path):
    bb = with_tasks(small(), 2)
    bb.add_classes([0, 2])
    bb.heads[2] = np.linspace(0, 1, 6)
    save_checkpoint(bb, tmp_path / "ck.npz")
    other = load_checkpoint(tmp_path / "ck.npz")
    assert other.frozen_bytes(2) == bb.frozen_bytes(2)
    assert all(np.array_equal(other.heads[c], bb.heads[c]) for c in bb.heads)
    assert other.config == bb.config and other.seed == bb.seed


def test_pretrain_noop_and_determinism():
    cfg = BackboneConfig(input_dim=5, width=6, layers=3, rank=2, pretrain_epochs=0)
    bb = pretrain_base(cfg, np.zeros((0, 5)), np.zeros(0, dtype=int), seed=1)
    assert np.array_equal(bb.W0, Backbone(cfg, 1).W0)
    assert bb.forward(np.ones(5), 0).z.shape == (4, 6)
    cfg = BackboneConfig(input_dim=5, width=6, layers=3, rank=2, pretrain_epochs=2)
    X = np.random.default_rng(0).normal(size=(20, 5))
    y = np.repeat([10, 11], 10)
    a = pretrain_base(cfg, X, y, seed=4)
    b = pretrain_base(cfg, X, y, seed=4)
    assert a.W0.tobytes() == b.W0.tobytes()
    with pytest.raises(ConfigError):
        pretrain_base(cfg, X, y, seed=4, stream_classes=[11, 12])


def test_pretrain_separable_base_classes():
    spec = StreamSpec(total_classes=4, tasks=1, base_classes=4, seed=2)
    base, _ = make_stream(spec)
    bb = pretrain_base(BackboneConfig(), base.X, base.y, seed=2, stream_classes=range(4))
    assert pretrain_accuracy(bb, base.X, base.y) > 0.95
    assert bb.adapters == [] and bb.heads == {}


def test_adapter_rng_is_reproducible():
    a, b = small(), small()
    a.add_task_adapter(1)
    b.add_task_adapter(1, rng_stream(3, "init", "adapter", 1))
    assert np.array_equal(a.adapters[0].A, b.adapters[0].A)
