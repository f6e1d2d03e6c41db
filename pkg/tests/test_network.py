import numpy as np
import pytest

from fbsal import tensor as T
from fbsal.cli import gradcheck_setup
from fbsal.losses import LossWeights, hybrid_loss, sample_nonfixations
from fbsal.network import (
    FEEDBACK_SOURCES,
    ConvBlock,
    FeedbackNet,
    FeedbackNetConfig,
    feedback_param_count,
    param_count,
    read_checkpoint,
    standardize_images,
)
from fbsal.tensor import Parameter, Tensor


def image(seed=0, n=1, hw=32):
    return np.random.default_rng(seed).random((n, 3, hw, hw))


def enumerate_params(net: FeedbackNet) -> int:
    return sum(p.data.size for p in net.params)


# ---------------------------------------------------------------- shapes and zero propagation


def test_forward_feature_shapes():
    fwd = FeedbackNet().encode_forward(image())
    shapes = {k: fwd.h[k].shape for k in range(2, 6)}
    assert shapes == {2: (1, 4, 16, 16), 3: (1, 8, 8, 8), 4: (1, 8, 4, 4), 5: (1, 8, 2, 2)}


def test_input_must_divide_by_16():
    with pytest.raises(T.ShapeError, match="divisible by 16"):
        FeedbackNet().encode_forward(np.zeros((1, 3, 24, 32)))


def test_zero_input_zero_bias_gives_zero_features():
    fwd = FeedbackNet().encode_forward(np.zeros((1, 3, 32, 32)))
    for h in fwd.h.values():
        assert not h.data.any()


def test_zero_feedback_weights_give_zero_features():
    net = FeedbackNet(seed=1)
    fwd = net.encode_forward(image())
    for k in FEEDBACK_SOURCES:
        net.feedback[k][0].data[:] = 0.0
        for f in net.feedback_pass(fwd.h[k], k, fwd.h1).values():
            assert not f.data.any()


def test_feedback_pass_rejects_bad_source():
    net = FeedbackNet()
    fwd = net.encode_forward(image())
    with pytest.raises(ValueError):
        net.feedback_pass(fwd.h[2], 1, fwd.h1)


def test_decode_zero_features_give_zero_score():
    net = FeedbackNet()
    feats = [Tensor(np.zeros((1, c, s, s))) for c, s in [(4, 16), (8, 8), (8, 4), (8, 2)]]
    assert not net.decode_score(feats, 1, (32, 32)).data.any()
    with pytest.raises(ValueError):
        net.decode_score([], 1, (32, 32))


def test_fuse_with_delta_smoothing_and_equal_weights_is_relu_mean(rng):
    net = FeedbackNet()
    k = net.cfg.smoothing_kernel
    net.smoothing_weight.data[:] = 0.0
    net.smoothing_weight.data[0, 0, k // 2, k // 2] = 1.0
    net.fusion_weight.data[:] = 0.2
    scores = [Tensor(rng.normal(size=(1, 1, 32, 32))) for _ in range(5)]
    out = net.fuse_final(scores).data
    expected = np.maximum(np.mean([s.data for s in scores], axis=0), 0.0)
    np.testing.assert_allclose(out, expected, atol=1e-12)
    assert not net.fuse_final([Tensor(np.zeros((1, 1, 32, 32)))] * 5).data.any()


def test_fuse_rejects_mismatched_scores():
    net = FeedbackNet()
    with pytest.raises(T.ShapeError):
        net.fuse_final([Tensor(np.zeros((1, 1, 32, 32)))] * 4 + [Tensor(np.zeros((1, 1, 16, 16)))])


def test_full_run_shapes():
    scores = FeedbackNet().run(image(n=2))
    assert sorted(scores.S) == [1, 2, 3, 4, 5]
    for s in scores.heads + [scores.fused]:
        assert s.shape == (2, 1, 32, 32)


def test_ablation_emits_one_head():
    scores = FeedbackNet(FeedbackNetConfig(feedback_enabled=False)).run(image())
    assert len(scores.heads) == 1
    assert scores.fused.shape == (1, 1, 32, 32)


def test_eval_run_is_bit_identical():
    net = FeedbackNet(seed=3)
    x = image(4)
    a, b = net.run(x), net.run(x)
    for n in a.S:
        assert a.S[n].data.tobytes() == b.S[n].data.tobytes()
    assert a.fused.data.tobytes() == b.fused.data.tobytes()


def test_every_parameter_reaches_the_output():
    net, _ = gradcheck_setup(None, seed=0)
    net.fusion_weight.data[:] = np.abs(net.fusion_weight.data)
    tape = T.backward(T.tsum(net.run(image(1, 2)).fused))
    on_tape = {id(node) for node in tape.nodes}
    for p in net.params:
        assert id(p) in on_tape, p.name
        assert p.grad is not None and np.any(p.grad), p.name


def test_standardize_images():
    x = image(2, 2)
    x[1, 2] = 0.7
    z = standardize_images(x)
    np.testing.assert_allclose(z[0].mean(axis=(1, 2)), 0.0, atol=1e-12)
    np.testing.assert_allclose(z[0].std(axis=(1, 2)), 1.0, atol=1e-12)
    assert not z[1, 2].any()
    np.testing.assert_allclose(standardize_images(3.0 * x + 1.0), z, atol=1e-12)


# ---------------------------------------------------------------- parameter counts


def test_feedback_adds_1024_parameters():
    full, ablated = FeedbackNetConfig(), FeedbackNetConfig(feedback_enabled=False)
    assert param_count(full)[0] - param_count(ablated)[0] == 1024
    assert feedback_param_count(full) == 148 + 292 + 292 + 292
    assert enumerate_params(FeedbackNet(full)) - enumerate_params(FeedbackNet(ablated)) == 1024


def test_param_count_matches_enumeration_fixed_width_two():
    cfg = FeedbackNetConfig(fixed_width=2)
    assert param_count(cfg)[0] == enumerate_params(FeedbackNet(cfg))


def test_param_count_matches_enumeration_on_random_configs():
    rng = np.random.default_rng(11)
    for _ in range(10):
        cfg = FeedbackNetConfig(
            block_channels=tuple(int(c) for c in rng.integers(1, 9, size=5)),
            block_layers=int(rng.integers(1, 4)),
            head_mid_channels=int(rng.integers(1, 9)),
            smoothing_kernel=int(rng.choice([1, 3, 9, 41])),
            fixed_width=int(rng.integers(1, 5)) if rng.random() < 0.3 else None,
            feedback_enabled=bool(rng.random() < 0.7),
        )
        total, items = param_count(cfg)
        assert total == sum(items.values())
        assert total == enumerate_params(FeedbackNet(cfg, seed=1))
        forward_only = FeedbackNetConfig(**{**cfg.__dict__, "feedback_enabled": False})
        w = cfg.widths
        expected = sum(9 * w[k - 1] * w[0] + w[0] for k in FEEDBACK_SOURCES)
        if cfg.feedback_enabled:
            assert total - param_count(forward_only)[0] == expected
            assert param_count(forward_only)[0] < total


# ---------------------------------------------------------------- weight sharing


def test_feedback_passes_reuse_forward_parameters():
    net = FeedbackNet(seed=2)
    seen = []
    originals = list(net.blocks)

    class Spy:
        def __init__(self, inner):
            self.inner, self.params, self.out_channels = inner, inner.params, inner.out_channels

        def __call__(self, x):
            seen.append((self.inner, [id(p) for p in self.inner.params]))
            return self.inner(x)

    net.blocks = [Spy(b) for b in originals]
    net.run(image())
    ids = {id(p) for p in net.params}
    for inner, used in seen:
        assert all(i in ids for i in used)
    counts = [sum(inner is b for inner, _ in seen) for b in originals]
    assert counts == [1, 5, 5, 5, 5]


def test_update_to_shared_block_reaches_every_pathway():
    net = FeedbackNet(seed=2)
    x = image()
    before = net.pathway_features(x)
    w = net.blocks[2].convs[0][0]
    w.grad = np.ones_like(w.data)
    T.sgd_step([w], lr=0.5)
    after = net.pathway_features(x)
    for n in before:
        assert not np.array_equal(before[n][1].data, after[n][1].data), n


class PerUseBlock:
    """Block that draws a private copy of its parameters on every call."""

    def __init__(self, inner: ConvBlock):
        self.inner = inner
        self.params = inner.params
        self.out_channels = inner.out_channels
        self.uses: list[list[Parameter]] = []

    def __call__(self, x):
        copies = []
        for i, (w, b) in enumerate(self.inner.convs):
            wc, bc = Parameter(w.data.copy(), w.name), Parameter(b.data.copy(), b.name)
            copies += [wc, bc]
            x = T.relu(T.conv2d(x, wc, bc, stride=self.inner.stride if i == 0 else 1, padding=1))
        self.uses.append(copies)
        return x


def test_shared_gradient_is_sum_of_per_use_gradients():
    net, objective = gradcheck_setup(None, seed=0)
    T.zero_grad(net.params)
    T.backward(objective())
    shared = {p.name: p.grad.copy() for p in net.params}

    wrappers = [PerUseBlock(b) for b in net.blocks]
    net.blocks = wrappers
    T.zero_grad(net.params)
    T.backward(objective())
    for b in wrappers:
        assert len(b.uses) == (1 if b is wrappers[0] else 5)
        for j, p in enumerate(b.params):
            assert p.grad is None
            per_use = sum(use[j].grad for use in b.uses)
            np.testing.assert_allclose(per_use, shared[p.name], rtol=0, atol=1e-10)


def test_total_gradient_is_sum_of_per_pathway_gradients():
    net, _ = gradcheck_setup(None, seed=1)
    x = image(5, 2)
    gts = [np.random.default_rng(i).random((32, 32)) for i in range(2)]
    fix = [sample_nonfixations((g > 0.9).astype(float), np.random.default_rng(i)) for i, g in enumerate(gts)]
    w = LossWeights()

    def head_terms():
        scores = net.run(x)
        per_head = {n: sum((hybrid_loss(s[i, 0], gts[i], fix[i], w) for i, _ in enumerate(gts)), Tensor(0.0)) for n, s in scores.S.items()}
        fused = sum((hybrid_loss(scores.fused[i, 0], gts[i], fix[i], w) for i in range(2)), Tensor(0.0))
        return per_head, fused

    T.zero_grad(net.params)
    per_head, fused = head_terms()
    total = w.lambda1 * sum(per_head.values(), Tensor(0.0)) / 5 + w.lambda2 * fused
    T.backward(total)
    joint = {p.name: p.grad.copy() for p in net.params}

    summed = {p.name: np.zeros_like(p.data) for p in net.params}
    for key in [1, 2, 3, 4, 5, "fused"]:
        T.zero_grad(net.params)
        per_head, fused = head_terms()
        term = w.lambda2 * fused if key == "fused" else w.lambda1 * per_head[key] / 5
        T.backward(term)
        for p in net.params:
            if p.grad is not None:
                summed[p.name] += p.grad
    name = "block3.conv0.weight"
    assert np.any(joint[name])
    for p in net.params:
        np.testing.assert_allclose(summed[p.name], joint[p.name], rtol=0, atol=1e-10)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    a, b = FeedbackNet(seed=1), FeedbackNet(seed=2)
    a.save(tmp_path / "c.sfbn")
    b.load(tmp_path / "c.sfbn")
    for pa, pb in zip(a.params, b.params):
        np.testing.assert_array_equal(pb.data, pa.data.astype(np.float32))
    assert list(read_checkpoint(tmp_path / "c.sfbn")) == [p.name for p in a.params]
    b.save(tmp_path / "d.sfbn")
    assert (tmp_path / "c.sfbn").read_bytes() == (tmp_path / "d.sfbn").read_bytes()


def test_checkpoint_truncation_reports_offset(tmp_path):
    net = FeedbackNet()
    net.save(tmp_path / "c.sfbn")
    buf = (tmp_path / "c.sfbn").read_bytes()
    (tmp_path / "t.sfbn").write_bytes(buf[:-10])
    with pytest.raises(ValueError, match="truncated at offset"):
        net.load(tmp_path / "t.sfbn")
    (tmp_path / "m.sfbn").write_bytes(b"XXXX" + buf[4:])
    with pytest.raises(ValueError, match="magic"):
        net.load(tmp_path / "m.sfbn")


def test_checkpoint_rejects_other_architecture(tmp_path):
    FeedbackNet().save(tmp_path / "full.sfbn")
    FeedbackNet(FeedbackNetConfig(feedback_enabled=False)).save(tmp_path / "abl.sfbn")
    with pytest.raises(KeyError):
        FeedbackNet(FeedbackNetConfig(feedback_enabled=False)).load(tmp_path / "full.sfbn")
    with pytest.raises(KeyError):
        FeedbackNet().load(tmp_path / "abl.sfbn")
    with pytest.raises(T.ShapeError):
        FeedbackNet(FeedbackNetConfig(head_mid_channels=4)).load(tmp_path / "full.sfbn")


def test_config_validation():
    with pytest.raises(ValueError):
        FeedbackNetConfig(block_channels=(4, 4, 8))
    with pytest.raises(ValueError):
        FeedbackNetConfig(smoothing_kernel=4)
    with pytest.raises(ValueError):
        FeedbackNetConfig(feedback_mode="sum")
    with pytest.raises(ValueError):
        FeedbackNetConfig(dropout_p=1.0)


def test_additive_feedback_mode_runs():
    scores = FeedbackNet(FeedbackNetConfig(feedback_mode="add", upsample_mode="bilinear")).run(image())
    assert len(scores.heads) == 5
