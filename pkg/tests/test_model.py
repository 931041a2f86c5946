import numpy as np
import pytest

from rtfvit.checkpoint import load_checkpoint, save_checkpoint
from rtfvit.errors import ConfigError, DimensionError, ValidationError
from rtfvit.gradcheck import check_model, tiny_config
from rtfvit.model import (
    BranchOutputs,
    MultiViewModel,
    combined_loss,
    forward_infer,
    forward_train,
    head_forward,
)
from rtfvit.tensor import Tape, Tensor
from rtfvit.train import AdamState, TrainConfig, adamw_step
from rtfvit.vit import ModelConfig, TokenSet


def cfg16(**kw):
    base = dict(image_size=16, patch_size=8, dim=16, depth=2, heads=2, local_fraction=0.5)
    base.update(kw)
    return ModelConfig(**base)


def images(seed, b=3, size=16):
    rng = np.random.default_rng(seed)
    return (rng.random((b, size, size, 1)).astype(np.float32),
            rng.random((b, size, size, 1)).astype(np.float32))


def test_rtf_disabled_has_no_rtf_logit():
    m = MultiViewModel(cfg16(), "concat", rtf_enabled=False)
    out = forward_train(m, *images(0), np.random.default_rng(0))
    assert out.y_hat.shape == (3, 1) and out.y_hat_rtf is None


def test_identical_views_average_branches_agree():
    m = MultiViewModel(cfg16(), "average", rtf_enabled=True)
    x, _ = images(1)
    out = forward_train(m, x, x.copy(), np.random.default_rng(0))
    assert np.array_equal(out.y_hat.values, out.y_hat_rtf.values)


def test_forward_train_deterministic():
    m = MultiViewModel(cfg16(), "concat", True)
    x1, x2 = images(2)
    a = forward_train(m, x1, x2, np.random.default_rng(5))
    b = forward_train(m, x1, x2, np.random.default_rng(5))
    assert a.y_hat.values.tobytes() == b.y_hat.values.tobytes()
    assert a.y_hat_rtf.values.tobytes() == b.y_hat_rtf.values.tobytes()


@pytest.mark.parametrize("strategy", ["average", "clscat", "concat"])
def test_infer_matches_train_global_branch(strategy):
    m = MultiViewModel(cfg16(), strategy, True)
    x1, x2 = images(3)
    y_train = forward_train(m, x1, x2, np.random.default_rng(0)).y_hat.values
    y1 = forward_infer(m, x1, x2).values
    y2 = forward_infer(m, x1, x2).values
    assert y_train.tobytes() == y1.tobytes() == y2.tobytes()
    m.rtf_enabled = False
    assert forward_infer(m, x1, x2).values.tobytes() == y1.tobytes()


def test_geometry_mismatch():
    m = MultiViewModel(cfg16(), "concat", True)
    with pytest.raises(DimensionError):
        forward_infer(m, *images(0, size=32))


def test_local_encoder_runs_once_per_forward():
    for shared in (True, False):
        m = MultiViewModel(cfg16(shared_local=shared), "concat", True)
        before = m.local.calls
        forward_train(m, *images(0), np.random.default_rng(0))
        assert m.local.calls - before == 1
        # global stage: once per branch
        assert m.global_.calls == 2


def test_loss_examples():
    zero = Tensor(np.zeros((1, 1)))
    both = combined_loss(BranchOutputs(zero, zero), np.ones(1))
    assert abs(both.item() - 2 * np.log(2)) < 1e-12
    single = combined_loss(BranchOutputs(zero, None), np.ones(1))
    assert abs(single.item() - np.log(2)) < 1e-12
    with pytest.raises(ValidationError):
        combined_loss(BranchOutputs(zero, None), np.array([2.0]))


def test_head_reads_cls_rows_only():
    m = MultiViewModel(cfg16(), "concat", True, dtype=np.float64)
    rng = np.random.default_rng(0)
    z = rng.normal(size=(2, 10, 16))
    base = head_forward(TokenSet(Tensor(z), (0, 5)), m).values
    perm = z.copy()
    perm[:, [1, 2, 3, 4, 6, 7, 8, 9]] = z[:, [9, 8, 7, 6, 4, 3, 2, 1]]
    np.testing.assert_array_equal(head_forward(TokenSet(Tensor(perm), (0, 5)), m).values, base)
    # mean of rows 0 and 5 equals a single CLS row holding that mean
    mean = z.copy()
    mean[:, 0] = 0.5 * (z[:, 0] + z[:, 5])
    np.testing.assert_allclose(head_forward(TokenSet(Tensor(mean), (0,)), m).values, base, rtol=1e-12)


@pytest.mark.parametrize("strategy,rtf", [("average", True), ("clscat", True), ("concat", True),
                                          ("concat", False)])
def test_full_model_gradients(strategy, rtf):
    assert check_model(strategy, rtf).passed


def _global_grads(rtf_term: bool, strategy="concat"):
    m = MultiViewModel(tiny_config(), strategy, True, seed=0, dtype=np.float64)
    x1, x2 = images(4, b=2)
    y = np.array([1.0, 0.0])
    with Tape() as tape:
        out = forward_train(m, x1, x2, np.random.default_rng(0))
        if not rtf_term:
            out = BranchOutputs(out.y_hat, None)
        loss = combined_loss(out, y)
    tape.backward(loss)
    return {k: p.grad.copy() for k, p in m.parameters().items() if k.startswith("block1.")}


def test_rtf_branch_contributes_to_global_gradients():
    with_rtf, without = _global_grads(True), _global_grads(False)
    m = MultiViewModel(tiny_config(), "concat", True, seed=0, dtype=np.float64)
    x1, x2 = images(4, b=2)
    y = np.array([1.0, 0.0])
    with Tape() as tape:
        out = forward_train(m, x1, x2, np.random.default_rng(0))
        loss = combined_loss(BranchOutputs(out.y_hat_rtf, None), y)
    tape.backward(loss)
    rtf_only = {k: p.grad for k, p in m.parameters().items() if k.startswith("block1.")}
    for k in with_rtf:
        np.testing.assert_allclose(with_rtf[k], without[k] + rtf_only[k], rtol=1e-9, atol=1e-12)
    assert any(np.abs(g).max() > 0 for g in rtf_only.values())


def test_loss_decreases_on_separable_toy():
    rng = np.random.default_rng(0)
    y = np.repeat([0.0, 1.0], 16)
    level = np.where(y == 1, 0.8, 0.2)[:, None, None, None]
    x1 = np.clip(level + rng.normal(0, 0.05, (32, 16, 16, 1)), 0, 1).astype(np.float32)
    x2 = np.clip(level + rng.normal(0, 0.05, (32, 16, 16, 1)), 0, 1).astype(np.float32)
    m = MultiViewModel(cfg16(), "concat", True, seed=0)
    params, state = m.parameters(), AdamState()
    cfg = TrainConfig(lr=1e-2)
    mask_rng = np.random.default_rng(1)
    losses = []
    for _ in range(50):
        m.zero_grad()
        with Tape() as tape:
            loss = combined_loss(forward_train(m, x1, x2, mask_rng), y)
        tape.backward(loss)
        adamw_step(params, {k: p.grad for k, p in params.items()}, state, cfg)
        losses.append(loss.item())
    assert losses[-1] < 0.5 * losses[0]
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_unknown_input_view():
    with pytest.raises(ConfigError):
        MultiViewModel(cfg16(), "concat", True, input_view="left")


def test_single_view_ignores_other_view():
    m = MultiViewModel(cfg16(), "concat", True, input_view="view1")
    x1, x2 = images(6)
    a = forward_infer(m, x1, x2).values
    b = forward_infer(m, x1, np.zeros_like(x2)).values
    assert np.array_equal(a, b)


def test_checkpoint_roundtrip(tmp_path):
    m = MultiViewModel(cfg16(shared_local=False), "clscat", False, seed=3)
    save_checkpoint(m, tmp_path / "ck")
    loaded = load_checkpoint(tmp_path / "ck")
    assert loaded.strategy == m.strategy and loaded.rtf_enabled is False
    assert loaded.cfg == m.cfg
    x1, x2 = images(7)
    assert forward_infer(m, x1, x2).values.tobytes() == forward_infer(loaded, x1, x2).values.tobytes()
    manifest = (tmp_path / "ck" / "params.manifest.tsv").read_text().splitlines()
    assert manifest[0] == "name\toffset\tshape" and len(manifest) == len(m.parameters()) + 1


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path)


def test_state_dict_mismatch():
    m = MultiViewModel(cfg16(), "concat", True)
    state = m.state_dict()
    state.pop("head.b")
    with pytest.raises(ConfigError):
        m.load_state_dict(state)
