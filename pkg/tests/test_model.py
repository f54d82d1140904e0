import dataclasses

import numpy as np
import pytest

from depthup import model
from depthup import tensor as T
from depthup.errors import ConfigError, FormatError, ShapeError, TrainingError
from depthup.model import NetworkConfig


def dense(cin, cout, k=3):
    return k * k * cin * cout + cout


def sep(cin, cout, k=3):
    return k * k * cin + cin * cout + cout


def expected_params(cfg: NetworkConfig) -> int:
    """Closed-form parameter total, written out independently of the builder."""
    F, L = cfg.base_filters, cfg.cascades
    conv = sep if cfg.separable else dense
    n = 0
    for k in range(L):
        fk = F * 2 ** k
        n += conv(6 if k == 0 else fk // 2, fk) + conv(fk, fk)
        n += conv(1 if k == 0 else fk // 2, fk) + conv(fk, fk)
    width = F * 2 ** L
    n += cfg.bottleneck_convs * conv(width, width)
    cin = width
    for k in reversed(range(L)):
        fk = F * 2 ** k
        n += 4 * cin * fk + fk
        extra = 2 * fk if (k == 1 and cfg.skip_enc_dec_level2) else fk if (k == 0 and cfg.skip_enc_dec_level1) else 0
        n += conv(fk + extra, fk)
        cin = fk
    if cfg.skip_Cnext_input:
        n += conv(3, F) + conv(F, F)
    n += dense(F * (1 + cfg.skip_D_input + cfg.skip_Cnext_input), 1, k=1)
    return n


def tiny_sample(rng, h=16, w=16, dtype=np.float64):
    d = rng.uniform(0.3, 0.9, (h, w, 1))
    d[rng.random((h, w)) < 0.2] = 0
    gt = rng.uniform(0.3, 0.9, (h, w, 1))
    return model.Sample(rng.random((h, w, 3)).astype(dtype), d.astype(dtype), rng.random((h, w, 3)).astype(dtype),
                        gt.astype(dtype), rng.random((h, w)) < 0.8)


def test_bottleneck_at_960x540():
    cfg = NetworkConfig(cascades=5, input_h=540, input_w=960)
    assert cfg.bottleneck_dims == (30, 16)
    net = model.build(cfg)
    assert net.layers["mid0"].cin == 8 * 2 ** 5


@pytest.mark.parametrize("kw", [{}, {"separable": True}, {"cascades": 2}, {"cascades": 4, "skip_D_input": False},
                                {"skip_Cnext_input": False, "skip_enc_dec_level1": False},
                                {"skip_enc_dec_level2": False, "bottleneck_convs": 1}])
def test_param_count_closed_form(kw):
    cfg = NetworkConfig(**kw)
    assert model.param_count(model.build(cfg)) == expected_params(cfg)


def test_param_count_increases_with_cascades():
    counts = [model.param_count(model.build(NetworkConfig(cascades=c))) for c in (2, 3, 4, 5)]
    assert counts == sorted(set(counts))


def test_config_validation():
    with pytest.raises(ConfigError):
        NetworkConfig(cascades=6).validate()
    with pytest.raises(ConfigError):
        NetworkConfig(base_filters=2).validate()
    with pytest.raises(ConfigError):
        NetworkConfig(cascades=5, input_h=20, input_w=20).validate()
    with pytest.raises(ConfigError):
        NetworkConfig.from_dict({"cascades": 3, "bogus": 1})
    with pytest.raises(ConfigError):
        model.ablate(NetworkConfig(), "skip_nowhere")
    assert model.ablate(NetworkConfig(), "skip_D_input").skip_D_input is False


def test_odd_sizes_round_trip_through_decoder():
    rng = np.random.default_rng(0)
    net = model.build(NetworkConfig(cascades=3, input_h=27, input_w=35))
    out = net.forward(tiny_sample(rng, 27, 35, np.float32))
    assert out.shape == (27, 35, 1) and np.isfinite(out).all()


def test_sample_shape_checks():
    rng = np.random.default_rng(0)
    s = tiny_sample(rng)
    with pytest.raises(ShapeError):
        model.Sample(s.c_t[:8], s.d_t, s.c_next, s.gt, s.gt_mask)
    with pytest.raises(ShapeError):
        model.Sample(s.c_t, s.d_t, s.c_next, s.gt, s.gt_mask[:4])
    net = model.build(NetworkConfig(cascades=2, input_h=32, input_w=32))
    with pytest.raises(ShapeError):
        net.forward(s)


def test_build_is_deterministic_and_forward_pure():
    cfg = NetworkConfig(cascades=2, input_h=16, input_w=16)
    a, b = model.build(cfg, seed=3), model.build(cfg, seed=3)
    for p, q in zip(a.params, b.params):
        np.testing.assert_array_equal(p.value, q.value)
    s = tiny_sample(np.random.default_rng(1), dtype=np.float32)
    np.testing.assert_array_equal(a.forward(s), a.forward(s))
    c = model.build(cfg, seed=4)
    assert not np.array_equal(a.params[0].value, c.params[0].value)


def test_zero_head_gives_bias_everywhere():
    net = model.build(NetworkConfig(cascades=2, input_h=16, input_w=16))
    head = net.layers["head"].params
    head["head.w"].value[...] = 0
    head["head.b"].value[...] = 0.25
    out = net.forward(tiny_sample(np.random.default_rng(2), dtype=np.float32))
    np.testing.assert_array_equal(out, 0.25)


def test_end_to_end_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    cfg = NetworkConfig(cascades=2, input_h=16, input_w=16, base_filters=4)
    net = model.build(cfg, seed=1, dtype=T.PRECISE)
    # zero biases put ReLU kinks exactly on depth holes; check at a generic point
    for name, p in net.named_params():
        if name.endswith(".b"):
            p.value[...] = rng.uniform(-0.05, 0.05, p.value.shape)
    batch = [tiny_sample(rng), tiny_sample(rng)]
    gt, mask = model.stack_targets(batch, np.float64)

    def loss():
        out = net.forward_batch(*net._stack(batch))
        return model.masked_rmse(out[..., 0], gt, mask)

    out, tape = net.forward_train(*net._stack(batch))
    net.zero_grad()
    net.backward(tape, model.masked_rmse_grad(out[..., 0], gt, mask)[..., None])
    eps = 1e-6
    worst = 0.0
    for name, p in net.named_params():
        flat = p.value.reshape(-1)
        grad = p.grad.reshape(-1)
        for idx in rng.choice(flat.size, size=min(3, flat.size), replace=False):
            old = flat[idx]
            flat[idx] = old + eps
            up = loss()
            flat[idx] = old - eps
            down = loss()
            flat[idx] = old
            fd = (up - down) / (2 * eps)
            err = abs(fd - grad[idx]) / max(abs(fd) + abs(grad[idx]), 1e-7)
            worst = max(worst, err)
    assert worst < 1e-4


def test_separable_network_gradient():
    rng = np.random.default_rng(6)
    cfg = NetworkConfig(cascades=2, input_h=8, input_w=8, base_filters=4, separable=True)
    net = model.build(cfg, seed=2, dtype=T.PRECISE)
    batch = [tiny_sample(rng, 8, 8)]
    gt, mask = model.stack_targets(batch, np.float64)
    out, tape = net.forward_train(*net._stack(batch))
    net.zero_grad()
    net.backward(tape, model.masked_rmse_grad(out[..., 0], gt, mask)[..., None])
    p = net.layers["rgb0a"].params["rgb0a.dw"]
    flat, grad = p.value.reshape(-1), p.grad.reshape(-1)
    for idx in (0, 7, 13):
        old = flat[idx]
        flat[idx] = old + 1e-6
        up = model.masked_rmse(net.forward_batch(*net._stack(batch))[..., 0], gt, mask)
        flat[idx] = old - 1e-6
        down = model.masked_rmse(net.forward_batch(*net._stack(batch))[..., 0], gt, mask)
        flat[idx] = old
        fd = (up - down) / 2e-6
        assert abs(fd - grad[idx]) <= 1e-4 * max(abs(fd), 1e-6)


def test_train_step_overfits_one_sample():
    rng = np.random.default_rng(7)
    net = model.build(NetworkConfig(cascades=2, input_h=16, input_w=16, base_filters=4), seed=0)
    s = tiny_sample(rng, dtype=np.float32)
    first = model.train_step(net, [s], lr=3e-3)
    for _ in range(150):
        last = model.train_step(net, [s], lr=3e-3)
    assert last < 0.3 * first


def test_train_step_errors():
    net = model.build(NetworkConfig(cascades=2, input_h=16, input_w=16))
    with pytest.raises(TrainingError):
        model.train_step(net, [])
    s = tiny_sample(np.random.default_rng(0), dtype=np.float32)
    s.gt_mask[...] = False
    with pytest.raises(TrainingError):
        model.train_step(net, [s])


def test_resized_and_astype_share_behaviour():
    net = model.build(NetworkConfig(cascades=2, input_h=16, input_w=16))
    big = net.resized(32, 24)
    assert big.params[0] is net.params[0]
    assert big.config.input_h == 32
    wide = net.astype(np.float64)
    assert wide.dtype == np.float64 and net.dtype == np.float32


def test_weights_round_trip(tmp_path):
    cfg = NetworkConfig(cascades=2, input_h=16, input_w=16, skip_enc_dec_level2=False)
    net = model.build(cfg, seed=9)
    path = tmp_path / "w.bin"
    model.save_weights(net, path)
    back = model.load_weights(path, expect=cfg)
    assert back.config == cfg
    for (n1, p), (n2, q) in zip(net.named_params(), back.named_params()):
        assert n1 == n2
        np.testing.assert_array_equal(p.value, q.value)


def test_weights_errors(tmp_path):
    cfg = NetworkConfig(cascades=2, input_h=16, input_w=16)
    path = tmp_path / "w.bin"
    model.save_weights(model.build(cfg), path)
    raw = path.read_bytes()
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        model.load_weights(bad)
    bad.write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="truncated"):
        model.load_weights(bad)
    bad.write_bytes(raw + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        model.load_weights(bad)
    bad.write_bytes(raw[:4] + b"\x07\0\0\0" + raw[8:])
    with pytest.raises(FormatError, match="version"):
        model.load_weights(bad)
    with pytest.raises(FormatError, match="mismatch"):
        model.load_weights(path, expect=dataclasses.replace(cfg, cascades=3))
