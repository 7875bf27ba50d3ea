import numpy as np
import pytest

from lens import nn
from lens.maskhead import EmptyGroundTruth, MaskHead, binarize, dice_term, seg_loss, seg_loss_per_sample
from lens.numerics import Tensor, grad_check, no_grad
from lens.synthworld import Scene, ShapeSpec, render


@pytest.fixture(scope="module")
def head():
    return MaskHead(dim=32, heads=4, enc_depth=2, dec_depth=2, seed=0)


def _image(x=8, y=8):
    return render(Scene(32, 32, (ShapeSpec("rectangle", "red", x, y, 4, 4),)))


def test_grid_shape_and_determinism(head):
    img = _image()
    a = head.encode_image(img).data
    b = head.encode_image(img).data
    assert a.shape == (1, 64, 32)
    assert np.array_equal(a, b)


def test_indivisible_image_rejected(head):
    with pytest.raises(ValueError):
        head.encode_image(np.zeros((30, 30, 3)))


def test_translation_moves_response(head):
    blank = head.encode_image(np.zeros((32, 32, 3))).data[0]

    def hot(x):
        feats = head.encode_image(_image(x, 8)).data[0]
        return int(np.argmax(np.linalg.norm(feats - blank, axis=1)))

    a, b = hot(8), hot(12)
    assert a == 2 * 8 + 2
    assert b == a + 1


def test_decode_shape(head):
    grid = head.encode_image(_image())
    prompt = Tensor(np.random.default_rng(0).normal(size=(5, 32)).astype(np.float32))
    assert head.decode_mask(grid, prompt).shape == (1, 32, 32)


def test_prompt_dim_mismatch(head):
    grid = head.encode_image(_image())
    with pytest.raises(ValueError):
        head.decode_mask(grid, Tensor(np.zeros((3, 16), dtype=np.float32)))


def test_zero_attention_output_is_prompt_independent():
    h = MaskHead(dim=32, heads=4, enc_depth=1, dec_depth=2, seed=1)
    for i in range(h.dec_depth):
        h.params[f"dec.{i}.attn.o.w"].data[:] = 0.0
        h.params[f"dec.{i}.attn.o.b"].data[:] = 0.0
    grid = h.encode_image(_image())
    with no_grad():
        zero = h.decode_mask(grid, Tensor(np.zeros((4, 32), dtype=np.float32))).data
        other = h.decode_mask(grid, Tensor(np.ones((4, 32), dtype=np.float32))).data
        # the same field computed without any attention term
        x = grid
        for i in range(h.dec_depth):
            x = x + nn.mlp(nn.norm(x, h.params, f"dec.{i}.ln2."), h.params, f"dec.{i}.")
        patches = nn.linear(nn.norm(x, h.params, "dec.ln_out."), h.params, "dec.out.").data
    field = patches.reshape(8, 8, 4, 4).transpose(0, 2, 1, 3).reshape(32, 32)
    assert np.array_equal(zero, other)
    assert np.allclose(zero[0], field, atol=1e-5)


def test_patch_placement():
    h = MaskHead(dim=32, heads=4, enc_depth=1, dec_depth=1, seed=2)
    h.params["dec.out.w"].data[:] = 0.0
    h.params["dec.out.b"].data[:] = np.arange(16, dtype=np.float32)
    grid = h.encode_image(_image())
    with no_grad():
        out = h.decode_mask(grid, Tensor(np.zeros((1, 32), dtype=np.float32))).data[0]
    # every 4x4 tile holds the row-major bias pattern
    assert np.array_equal(out[4:8, 12:16], np.arange(16).reshape(4, 4))


def test_prompt_gradient_nonzero(head):
    grid = head.encode_image(_image())
    prompt = Tensor.param(np.random.default_rng(3).normal(size=(4, 32)))
    gt = np.zeros((32, 32), dtype=bool)
    gt[8:12, 8:12] = True
    seg_loss(head.decode_mask(grid, prompt), gt[None]).backward()
    assert np.abs(prompt.grad).sum() > 0


def test_oracle_prompt_shape(head):
    p = head.oracle_prompt(np.array([[1, 2, 5, 6], [0, 0, 32, 32]]), 7)
    assert p.shape == (2, 7, 32)
    assert np.array_equal(p.data[0, 0], p.data[0, 6])


def test_dice_hand_example():
    # gt [1,1,0,0], p = 0.5 everywhere: 1 - (2*1 + 1) / (2 + 2 + 1)
    logits = Tensor(np.zeros((1, 2, 2), dtype=np.float32))
    gt = np.array([[[1, 1], [0, 0]]], dtype=bool)
    assert dice_term(logits, gt)[0] == pytest.approx(0.4, abs=1e-12)


def test_saturated_loss_is_tiny():
    gt = np.zeros((1, 8, 8), dtype=bool)
    gt[0, 2:5, 1:6] = True
    logits = Tensor(np.where(gt, 20.0, -20.0).astype(np.float32))
    assert seg_loss(logits, gt).item() <= 1e-6


def test_loss_perfect_beats_inverted():
    rng = np.random.default_rng(4)
    for _ in range(20):
        gt = rng.random((1, 6, 6)) < 0.4
        gt[0, 0, 0] = True
        gt[0, 5, 5] = False
        good = Tensor(np.where(gt, 3.0, -3.0).astype(np.float32))
        bad = Tensor(np.where(gt, -3.0, 3.0).astype(np.float32))
        assert seg_loss(good, gt).item() < seg_loss(bad, gt).item()


def test_loss_permutation_invariant():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=36).astype(np.float32)
    gt = rng.random(36) < 0.5
    gt[0] = True
    perm = rng.permutation(36)
    a = seg_loss(Tensor(logits.reshape(1, 6, 6)), gt.reshape(1, 6, 6)).item()
    b = seg_loss(Tensor(logits[perm].reshape(1, 6, 6)), gt[perm].reshape(1, 6, 6)).item()
    assert a == pytest.approx(b, rel=1e-6)


def test_loss_matches_formula():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 3, 3))
    gt = rng.random((2, 3, 3)) < 0.5
    gt[:, 0, 0] = True
    p = 1 / (1 + np.exp(-x))
    expect = []
    for b in range(2):
        pp, gg = p[b].ravel(), gt[b].ravel().astype(float)
        dice = 1 - (2 * (pp * gg).sum() + 1) / (pp.sum() + gg.sum() + 1)
        pt = np.where(gg > 0, pp, 1 - pp)
        at = np.where(gg > 0, 0.25, 0.75)
        focal = np.mean(-at * (1 - pt) ** 2 * np.log(pt))
        expect.append(dice + focal)
    got = seg_loss_per_sample(Tensor(x.astype(np.float32)), gt).data
    assert np.allclose(got, expect, atol=1e-5)


def test_empty_gt_rejected():
    with pytest.raises(EmptyGroundTruth):
        seg_loss(Tensor(np.zeros((1, 4, 4), dtype=np.float32)), np.zeros((1, 4, 4), dtype=bool))


def test_seg_loss_gradient():
    rng = np.random.default_rng(7)
    x = Tensor.param(rng.normal(size=(2, 4, 4)))
    gt = rng.random((2, 4, 4)) < 0.5
    gt[:, 0, 0] = True
    report = grad_check(lambda: seg_loss(x, gt), {"x": x})
    assert report.passed, str(report)


def test_binarize():
    assert not binarize(-np.ones((3, 3))).any()
    checker = np.where(np.indices((4, 4)).sum(0) % 2 == 0, 1.0, -1.0)
    assert np.array_equal(binarize(checker), checker > 0)
    assert np.array_equal(binarize(checker, 1e-9), binarize(checker, -1e-9))
