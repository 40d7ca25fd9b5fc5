import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mm3d import detector as det
from mm3d.detector import (CheckpointFormatError, Detector, apply_deltas, checkpoint_bytes, cls_module,
                           cross_attn, dynamic_conv, forward_2d, forward_3d, fuse_max, fuse_mean,
                           fuse_weighted, init_proposals, load_state, manifest_diff, model_from_checkpoint,
                           param_manifest, parse_checkpoint, reg_module, self_attn)
from mm3d.numerics import DTYPE
from mm3d.training.loop import transfer_weights

from conftest import micro_config


def _rand(rng, *shape):
    return torch.as_tensor(rng.normal(size=shape), dtype=DTYPE)


def _volumes(rng, s, cfg):
    return torch.as_tensor(rng.random((2, s, *cfg.image_size)), dtype=DTYPE)


# -- proposals and manifest ----------------------------------------------------

def test_init_proposals_full_image():
    cfg = micro_config(n_proposals=4, image_size=(12, 16))
    b, h = init_proposals(Detector(cfg, seed=3))
    assert torch.equal(b, torch.tensor([[0.0, 0.0, 16.0, 12.0]] * 4, dtype=DTYPE))
    assert h.shape == (4, 16)
    h2 = init_proposals(Detector(cfg, seed=3))[1]
    assert torch.equal(h, h2)
    assert not torch.equal(h, init_proposals(Detector(cfg, seed=4))[1])
    assert 0.005 < float(h.detach().std()) < 0.05


def test_manifest_has_one_box_and_one_feature_entry():
    cfg = micro_config(n_proposals=4)
    man = param_manifest(Detector(cfg))
    assert [n for n, s in man if n.startswith("init_")] == ["init_boxes", "init_feats"]
    assert dict(man)["init_boxes"] == (4, 4) and dict(man)["init_feats"] == (4, 16)
    names = [n for n, _ in man]
    assert len(names) == len(set(names))


def test_manifest_parity_and_variants():
    base = param_manifest(Detector(micro_config(fusion="weighted"), seed=0))
    for fusion in ("mean", "max"):
        assert param_manifest(Detector(micro_config(fusion=fusion), seed=1)) == base
    for fusion in ("timesform", "querysummary", "mlpregress"):
        man = param_manifest(Detector(micro_config(fusion=fusion)))
        d = manifest_diff(base, man)
        assert d["only_in_a"] == [] and d["shape_mismatch"] == []
        assert d["only_in_b"] and all(".fusion." in n for n in d["only_in_b"])
    qs = manifest_diff(base, param_manifest(Detector(micro_config(fusion="querysummary"))))["only_in_b"]
    assert all(f"heads.{i}.fusion.query" in qs for i in range(6))


def test_manifest_stable_across_seeds():
    a, b = Detector(micro_config(), seed=0), Detector(micro_config(), seed=1)
    assert param_manifest(a) == param_manifest(b)
    assert not torch.equal(a.heads[0].cls.weight, b.heads[0].cls.weight)


# -- attention and dynamic conv ------------------------------------------------

def test_self_attn_single_proposal(rng):
    head = Detector(micro_config(), seed=0).heads[0]
    h = _rand(rng, 1, 16)
    _, attn = head.self_attn.attn(h, h)
    assert torch.allclose(attn, torch.ones_like(attn))
    mod = head.self_attn
    expect = mod.norm(h + mod.attn.out(mod.attn.v(h)))
    assert torch.allclose(self_attn(head, h), expect, atol=1e-12)


@settings(max_examples=20)
@given(st.integers(0, 1000))
def test_self_attn_and_dynamic_conv_equivariant(seed):
    r = np.random.default_rng(seed)
    head = Detector(micro_config(), seed=seed).heads[1]
    h = _rand(r, 5, 16)
    f = _rand(r, 5, 4, 16)
    perm = torch.as_tensor(r.permutation(5))
    assert torch.allclose(self_attn(head, h)[perm], self_attn(head, h[perm]), atol=1e-12)
    assert torch.allclose(dynamic_conv(head, h, f)[perm], dynamic_conv(head, h[perm], f[perm]), atol=1e-12)
    assert torch.allclose(cls_module(head, h)[perm], cls_module(head, h[perm]), atol=1e-12)
    b = torch.tensor([[1.0, 2.0, 8.0, 9.0]], dtype=DTYPE).repeat(5, 1)
    assert torch.allclose(reg_module(head, h, b, (12, 12))[perm], reg_module(head, h[perm], b, (12, 12)),
                          atol=1e-12)


def test_cross_attn_zero_alt_view(rng):
    head = Detector(micro_config(), seed=0).heads[0]
    with torch.no_grad():
        head.cross_attn.attn.v.bias.zero_()
    h = _rand(rng, 3, 16)
    out = cross_attn(head, h, torch.zeros_like(h))
    mod = head.cross_attn
    assert torch.allclose(out, mod.norm(h + mod.attn.out.bias), atol=1e-12)


def test_cross_attn_view_swap_symmetry(rng):
    head = Detector(micro_config(), seed=0).heads[2]
    a, b = _rand(rng, 3, 16), _rand(rng, 3, 16)
    both = cross_attn(head, torch.stack([a, b]), torch.stack([b, a]))
    assert torch.allclose(both[0], cross_attn(head, a, b), atol=1e-12)
    assert torch.allclose(both[1], cross_attn(head, b, a), atol=1e-12)


def test_dynamic_conv_shapes_and_duplicates(rng):
    for k in (1, 2, 3):
        head = Detector(micro_config(pool=k), seed=0).heads[0]
        h = _rand(rng, 4, 16)
        f = _rand(rng, 4, k * k, 16)
        h[2], f[2] = h[0], f[0]
        out = dynamic_conv(head, h, f)
        assert out.shape == (4, 16)
        assert torch.equal(out[0], out[2])


# -- box regression ----------------------------------------------------------

def test_apply_deltas():
    b = torch.tensor([[2.0, 3.0, 6.0, 9.0]], dtype=DTYPE)
    assert torch.allclose(apply_deltas(b, torch.zeros(1, 4, dtype=DTYPE), (12, 12)), b, atol=1e-12)
    wide = apply_deltas(b, torch.tensor([[0.0, 0.0, math.log(2.0), 0.0]], dtype=DTYPE), (12, 12))
    assert torch.allclose(wide, torch.tensor([[0.0, 3.0, 8.0, 9.0]], dtype=DTYPE), atol=1e-12)
    big = apply_deltas(b, torch.tensor([[0.0, 0.0, 3.0, 3.0]], dtype=DTYPE), (12, 12))
    assert float(big.min()) >= 0 and float(big[..., 2:].max()) <= 12
    out = apply_deltas(b, torch.tensor([[10.0, -10.0, -5.0, 2.0]], dtype=DTYPE), (12, 12))
    assert bool((out[..., 2] > out[..., 0]).all() and (out[..., 3] > out[..., 1]).all())


# -- fusion ------------------------------------------------------------------

def test_fusion_examples(rng):
    a, b = _rand(rng, 3, 4), _rand(rng, 3, 4)
    hs = torch.stack([a, b])
    h, w = fuse_mean(hs, torch.zeros(2, 3, dtype=DTYPE))
    assert torch.allclose(h, (a + b) / 2, atol=1e-15) and torch.allclose(w, torch.full_like(w, 0.5))
    m = torch.tensor([[0.0, 1.0, 2.0], [math.log(3.0), 1.0, 1.5]], dtype=DTYPE)
    h, w = fuse_weighted(hs, m)
    assert torch.allclose(w[:, 0], torch.tensor([0.25, 0.75], dtype=DTYPE), atol=1e-15)
    h, w = fuse_max(hs, m)
    assert torch.equal(w[:, 0], torch.tensor([0.0, 1.0], dtype=DTYPE))
    assert torch.equal(w[:, 1], torch.tensor([1.0, 0.0], dtype=DTYPE))  # tie -> lowest slice
    assert torch.equal(h[0], b[0]) and torch.equal(h[1], a[1]) and torch.equal(h[2], a[2])


@given(st.integers(0, 10_000), st.floats(0.01, 5.0))
def test_weighted_fusion_monotone_suspicion(seed, c):
    r = np.random.default_rng(seed)
    m = torch.as_tensor(r.normal(size=(5, 3)), dtype=DTYPE)
    s, n = int(r.integers(5)), int(r.integers(3))
    _, w0 = fuse_weighted(torch.zeros(5, 3, 2, dtype=DTYPE), m)
    m2 = m.clone()
    m2[s, n] += c
    _, w1 = fuse_weighted(torch.zeros(5, 3, 2, dtype=DTYPE), m2)
    assert w1[s, n] > w0[s, n]
    if int(w0[:, n].argmax()) == s:
        assert int(w1[:, n].argmax()) == s


# -- full forward passes -----------------------------------------------------

def test_forward_2d_shapes_and_determinism(rng):
    cfg = micro_config()
    model = Detector(cfg, seed=0)
    x = torch.as_tensor(rng.random((2, 12, 12)), dtype=DTYPE)
    out = forward_2d(model, x)
    assert len(out.heads) == 6
    for o in out.heads:
        assert o.boxes.shape == (2, 3, 4) and o.logits.shape == (2, 3) and o.feats.shape == (2, 3, 16)
        assert bool((o.boxes[..., 2] > o.boxes[..., 0]).all())
    again = forward_2d(model, x)
    assert all(torch.equal(a.logits, b.logits) and torch.equal(a.boxes, b.boxes)
               for a, b in zip(out.heads, again.heads))


def test_forward_many_proposals_no_nms(rng):
    cfg = micro_config(n_proposals=50, image_size=(16, 16))
    out = forward_3d(Detector(cfg), _volumes(rng, 3, cfg))
    last = out.heads[-1]
    assert last.boxes.shape == (2, 50, 4) and last.logits.shape == (2, 50) and last.z.shape == (2, 50)


def test_forward_rejects_mismatched_input(rng):
    model = Detector(micro_config())
    with pytest.raises(ValueError):
        forward_2d(model, torch.zeros(2, 16, 16, dtype=DTYPE))
    with pytest.raises(ValueError):
        forward_3d(model, torch.zeros(3, 2, 12, 12, dtype=DTYPE))
    mlp = Detector(micro_config(fusion="mlpregress", n_slices=4))
    with pytest.raises(ValueError):
        forward_3d(mlp, torch.zeros(2, 3, 12, 12, dtype=DTYPE))


@pytest.mark.parametrize("fusion", ["weighted", "mean", "max"])
def test_single_slice_reduces_to_2d(fusion, rng):
    cfg = micro_config(fusion=fusion)
    model = Detector(cfg, seed=5)
    vol = _volumes(rng, 1, cfg)
    o3 = forward_3d(model, vol).heads
    o2 = forward_2d(model, vol[:, 0]).heads
    for a, b in zip(o3, o2):
        assert torch.allclose(a.boxes, b.boxes, atol=1e-12, rtol=0)
        assert torch.allclose(a.logits, b.logits, atol=1e-12, rtol=0)
        assert torch.allclose(a.feats, b.feats, atol=1e-12, rtol=0)
        assert torch.equal(a.w, torch.ones_like(a.w)) and bool((a.z == 0).all())


def test_slice_duplication_leaves_fused_features(rng):
    cfg = micro_config()
    model = Detector(cfg, seed=2)
    vol = _volumes(rng, 3, cfg)
    a = forward_3d(model, vol).heads
    b = forward_3d(model, vol.repeat_interleave(2, dim=1)).heads
    for x, y in zip(a, b):
        assert torch.allclose(x.feats, y.feats, atol=1e-9, rtol=0)
        assert torch.allclose(y.w[:, 0::2], x.w / 2, atol=1e-12)
        assert torch.allclose(y.w[:, 1::2], x.w / 2, atol=1e-12)


def test_head_output_contract(rng):
    cfg = micro_config()
    out = forward_3d(Detector(cfg, seed=9), _volumes(rng, 4, cfg))
    for o in out.heads:
        assert o.w.shape == (2, 4, 3) and o.m_slices.shape == (2, 4, 3)
        assert torch.allclose(o.w.sum(1), torch.ones(2, 3, dtype=DTYPE), atol=1e-9)
        assert torch.equal(o.z, o.w.argmax(1))
        assert torch.allclose(o.w, torch.softmax(o.m_slices, dim=1), atol=1e-14)


def test_contract_check_catches_violation():
    w = torch.tensor([[0.5], [0.6]], dtype=DTYPE)
    with pytest.raises(AssertionError):
        det.check_slice_weights(w, torch.tensor([1]))
    w = torch.tensor([[0.4], [0.6]], dtype=DTYPE)
    with pytest.raises(AssertionError):
        det.check_slice_weights(w, torch.tensor([0]))
    det.check_slice_weights(w, torch.tensor([1]))


# -- checkpoints ---------------------------------------------------------------

def test_checkpoint_round_trip_and_format():
    model = Detector(micro_config(), seed=4)
    raw = checkpoint_bytes(model, {"note": "x"})
    assert raw.startswith(b"MM3DCKPT1")
    ck = parse_checkpoint(raw)
    assert ck.manifest == param_manifest(model) and ck.meta["note"] == "x"
    back = model_from_checkpoint(parse_checkpoint(checkpoint_bytes(model, {"model": model.cfg.to_dict()})))
    for (n, p), (_, q) in zip(model.named_parameters(), back.named_parameters()):
        assert torch.equal(p, q), n
    assert checkpoint_bytes(model) == checkpoint_bytes(model)


def test_corrupted_checkpoint_reports_offset():
    raw = checkpoint_bytes(Detector(micro_config()))
    with pytest.raises(CheckpointFormatError, match="offset"):
        parse_checkpoint(raw[:-5])
    with pytest.raises(CheckpointFormatError, match="offset 0"):
        parse_checkpoint(b"NOTACKPT!" + raw[9:])


def test_transfer_2d_to_3d_and_variants():
    ck = checkpoint_bytes(Detector(micro_config(), seed=1))
    rep = transfer_weights(ck, Detector(micro_config(fusion="weighted"), seed=2))
    assert rep.missing == [] and rep.unexpected == []
    qs = Detector(micro_config(fusion="querysummary"), seed=2)
    rep = transfer_weights(ck, qs)
    assert rep.missing and all(".fusion." in n for n in rep.missing)
    assert rep.unexpected == []


def test_transfer_shape_mismatch_is_an_error():
    ck = parse_checkpoint(checkpoint_bytes(Detector(micro_config(n_proposals=4))))
    with pytest.raises(ValueError, match="init_boxes"):
        load_state(Detector(micro_config(n_proposals=3)), ck, strict=False)
