import numpy as np
import pytest

from tempseg.network import (
    ModelConfig,
    SegmentationModel,
    count_params_flops,
    init_params,
    load_checkpoint,
    save_checkpoint,
    tcn_block_forward,
    upsample_to_original,
)
from tempseg.seqcore import ShapeError, Tensor, conv1d_dilated

rng = np.random.default_rng(808)


def tiny_cfg(**kw):
    base = dict(n_classes=3, d_in=6, d_model=8, n_blocks=2, n_decoders=1, heads=2,
                s_avg=8, w_min=2, w_max=4)
    base.update(kw)
    return ModelConfig(**base)


# -- plumbing -------------------------------------------------------------


def test_upsample_linear_example():
    x = Tensor(np.array([[0.0], [2.0]]))
    y = upsample_to_original(x, 4, 2)
    assert np.allclose(y.data[:, 0], [0.0, 1.0, 2.0, 2.0])  # edge held


def test_upsample_requires_matching_reduction():
    with pytest.raises(ShapeError):
        upsample_to_original(Tensor(np.zeros((3, 2))), 10, 2)  # ceil(10/2)=5 != 3


def test_upsample_identity_at_stride_one():
    x = Tensor(rng.normal(size=(7, 3)))
    assert np.array_equal(upsample_to_original(x, 7, 1).data, x.data)


def test_tcn_stack_receptive_field():
    # 10 blocks, k=3, dilation 2^l: causal one-sided reach sum(2*2^l) = 2046
    # positive weights keep every path alive through the ReLUs so the
    # perturbation extent equals the theoretical receptive field
    cw = Tensor(np.full((2, 2, 3), 0.1))
    cb = Tensor(np.zeros(2))
    pw = Tensor(np.full((2, 2, 1), 0.1))
    pb = Tensor(np.zeros(2))

    def stack(x):
        h = Tensor(x)
        for i in range(10):
            h = tcn_block_forward(h, cw, cb, pw, pb, dilation=2 ** i, mode="causal")
        return h.data

    T = 2100
    base = stack(np.zeros((2, T)))
    hit = np.zeros((2, T))
    hit[:, 0] = 1.0
    diff = np.abs(stack(hit) - base).sum(axis=0)
    touched = np.nonzero(diff)[0]
    assert touched.max() == 2046
    assert touched.min() == 0


def test_causal_conv_ignores_future():
    x = rng.normal(size=(3, 30))
    w = Tensor(rng.normal(size=(3, 3, 3)))
    b = Tensor(rng.normal(size=(3,)))
    ya = conv1d_dilated(Tensor(x), w, b, dilation=4, mode="causal").data
    x2 = x.copy()
    x2[:, 20:] += 100.0
    yb = conv1d_dilated(Tensor(x2), w, b, dilation=4, mode="causal").data
    assert np.array_equal(ya[:, :20], yb[:, :20])


# -- config ---------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_cfg(heads=3).validate()  # dual windows need even heads
    with pytest.raises(ValueError):
        tiny_cfg(d_model=0).validate()
    with pytest.raises(ValueError):
        tiny_cfg(temporal_dropout=1.5).validate()


def test_config_dict_round_trip():
    cfg = tiny_cfg(stride=2, temporal_dropout=0.1)
    again = ModelConfig.from_dict(cfg.to_dict())
    assert again == cfg


# -- model forward --------------------------------------------------------


def test_forward_shapes_and_stage_count():
    cfg = tiny_cfg(n_decoders=2)
    model = SegmentationModel(cfg)
    T = 21
    out = model.forward(Tensor(rng.normal(size=(T, cfg.d_in))))
    assert len(out.stages) == 3  # encoder + two decoders
    for st in out.stages:
        assert st.action_logits.shape == (T, cfg.n_classes)
        assert st.boundary_scores.shape == (T,)
        assert st.features.shape == (T, cfg.d_model)
        assert np.all(st.boundary_scores.data >= 0) and np.all(st.boundary_scores.data <= 1)


def test_forward_with_stride_keeps_original_length():
    cfg = tiny_cfg(stride=4)
    model = SegmentationModel(cfg)
    T = 30  # not divisible by the stride
    out = model.forward(Tensor(rng.normal(size=(T, cfg.d_in))))
    assert out.stages[-1].action_logits.shape == (T, cfg.n_classes)


def test_forward_random_tiny_configs_finite():
    r = np.random.default_rng(77)
    for _ in range(25):
        heads = int(r.choice([2, 4]))
        cfg = ModelConfig(
            n_classes=int(r.integers(2, 5)),
            d_in=int(r.integers(3, 9)),
            d_model=int(r.choice([8, 16])),
            n_blocks=int(r.integers(1, 4)),
            n_decoders=int(r.integers(0, 3)),
            heads=heads,
            stride=int(r.choice([1, 2])),
            s_avg=8,
            w_min=2,
            w_max=8,
            seed=int(r.integers(0, 1000)),
        )
        T = int(r.integers(9, 40))
        out = SegmentationModel(cfg).forward(Tensor(r.normal(size=(T, cfg.d_in))))
        for st in out.stages:
            assert np.all(np.isfinite(st.action_logits.data))
            assert np.all(np.isfinite(st.boundary_scores.data))


def test_dropout_only_in_training_mode():
    cfg = tiny_cfg(temporal_dropout=0.5)
    model = SegmentationModel(cfg)
    x = Tensor(rng.normal(size=(16, cfg.d_in)))
    a = model.forward(x, training=False).stages[-1].action_logits.data
    b = model.forward(x, training=False).stages[-1].action_logits.data
    assert np.array_equal(a, b)  # eval path consumes no rng
    c = model.forward(x, training=True).stages[-1].action_logits.data
    d = model.forward(x, training=True).stages[-1].action_logits.data
    assert not np.array_equal(c, d)  # different dropout draws


def test_deterministic_init_by_seed():
    pa = init_params(tiny_cfg(seed=9), np.random.default_rng(9))
    pb = init_params(tiny_cfg(seed=9), np.random.default_rng(9))
    assert sorted(pa) == sorted(pb)
    for k in pa:
        assert np.array_equal(pa[k].data, pb[k].data)


# -- parameter budget and checkpoints -------------------------------------


def test_param_count_matches_instantiated_model():
    for cfg in (tiny_cfg(), tiny_cfg(n_decoders=0, stride=2), ModelConfig()):
        n, _ = count_params_flops(cfg, T=64)
        model = SegmentationModel(cfg)
        assert n == sum(p.data.size for p in model.params.values())


def test_default_config_near_reference_budget():
    n, _ = count_params_flops(ModelConfig(), T=2048)
    assert abs(n - 11_945_000) / 11_945_000 < 0.20


def test_flops_grow_with_T():
    cfg = tiny_cfg()
    _, f1 = count_params_flops(cfg, T=64)
    _, f2 = count_params_flops(cfg, T=128)
    assert f2 > f1


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_cfg(n_decoders=2, stride=2)
    model = SegmentationModel(cfg)
    p = tmp_path / "model.ckpt"
    save_checkpoint(p, cfg, model.params, extra={"opt.step": np.array([3.0])})
    cfg2, params2, extra = load_checkpoint(p)
    assert cfg2 == cfg
    assert sorted(params2) == sorted(model.params)
    for k in params2:
        assert np.array_equal(params2[k].data, model.params[k].data)
    assert extra["opt.step"][0] == 3.0
    # restored model predicts identically
    x = Tensor(rng.normal(size=(15, cfg.d_in)))
    a = model.forward(x).stages[-1].action_logits.data
    b = SegmentationModel(cfg2, params2).forward(x).stages[-1].action_logits.data
    assert np.array_equal(a, b)


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "junk.ckpt"
    p.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(ValueError):
        load_checkpoint(p)
