import numpy as np
import pytest
import torch

from optreelab.errors import CondWidthError, GradCheckFailure, ShapeError
from optreelab.nets import (
    AlignmentModel, NetConfig, TeacherEmbedder, decode_ots, encode_funcimg, encode_ots, gradcheck, match_head,
    teacher_embedder,
)
from optreelab.tree import ConstVec


@pytest.fixture
def model(tiny_net):
    return AlignmentModel(tiny_net).eval()


def test_shapes(model, small_triples):
    cfg = model.cfg
    t = small_triples[0]
    hi = encode_funcimg(t.image, model)
    assert hi.shape == (cfg.n_image_tokens, cfg.d_f)
    ho = encode_ots(t.ots, t.consts, hi, model)
    assert ho.shape == (cfg.max_ots_len + cfg.max_consts, cfg.d_f)
    assert encode_ots(t.ots, t.consts, None, model).shape == ho.shape
    assert decode_ots(t.ots, t.consts.masked(), hi, model).shape == (cfg.max_ots_len - 1, cfg.vocab_size)
    assert match_head(ho, model).shape == (2,)


def test_image_encoder_is_deterministic_and_lipschitz(model, small_triples):
    img = small_triples[1].image
    a = encode_funcimg(img, model)
    assert torch.equal(a, encode_funcimg(img, model))
    vals = torch.tensor(img.values[None], dtype=torch.float32)
    mask = torch.tensor(img.finite_mask[None])
    g = torch.Generator().manual_seed(0)
    # Lipschitz estimate from random small perturbations, then one single-pixel probe
    ratios = []
    for _ in range(20):
        d = torch.randn(vals.shape, generator=g) * 1e-3 * mask
        ratios.append(((model.encode_image(vals + d, mask) - model.encode_image(vals, mask)).norm() / d.norm()).item())
    lip = 10 * max(ratios)
    pix = torch.zeros_like(vals)
    j = int(np.flatnonzero(img.finite_mask[0])[0])
    pix[0, 0, j] = 1e-3
    change = (model.encode_image(vals + pix, mask) - model.encode_image(vals, mask)).norm().item()
    assert change <= lip * 1e-3


def test_cross_attention_is_live(model, small_triples):
    t = small_triples[2]
    zero = torch.zeros(model.cfg.n_image_tokens, model.cfg.d_f)
    assert not torch.allclose(encode_ots(t.ots, t.consts, None, model), encode_ots(t.ots, t.consts, zero, model))
    hi = encode_funcimg(t.image, model)
    perm = torch.randperm(hi.shape[0], generator=torch.Generator().manual_seed(0))
    a = decode_ots(t.ots, None, hi, model)
    b = decode_ots(t.ots, None, hi[perm] * torch.linspace(0.5, 1.5, hi.shape[0])[:, None], model)
    assert not torch.allclose(a, b)


def test_masked_constants_hide_values(model, small_triples):
    t = next(x for x in small_triples if x.consts.true_len > 0)
    hi = encode_funcimg(t.image, model)
    other = ConstVec(t.consts.values + 1.0, np.zeros(t.consts.true_len, dtype=bool))
    a = encode_ots(t.ots, t.consts.masked(), hi, model)
    b = encode_ots(t.ots, other, hi, model)
    assert torch.equal(a, b)
    assert not torch.equal(a, encode_ots(t.ots, t.consts, hi, model))


def test_decoder_is_causal(model, small_triples):
    t = small_triples[3]
    hi = encode_funcimg(t.image, model)
    ids = torch.tensor([t.ots.ids[:-1]])
    base = model.decode(ids, hi[None])[0]
    for k in (0, 3, 10):
        alt = ids.clone()
        alt[0, k + 1 :] = torch.randint(1, 20, (alt.shape[1] - k - 1,), generator=torch.Generator().manual_seed(k))
        out = model.decode(alt, hi[None])[0]
        assert torch.allclose(out[: k + 1], base[: k + 1], atol=1e-6)


def test_cond_width_checked(model, small_triples):
    t = small_triples[0]
    with pytest.raises(CondWidthError):
        encode_ots(t.ots, t.consts, torch.zeros(5, model.cfg.d_f + 1), model)
    with pytest.raises(ShapeError):
        model.encode_image(torch.zeros(1, 3, 10), torch.ones(1, 3, 10, dtype=torch.bool))


def test_match_head_examples(model):
    h = torch.randn(12, model.cfg.d_f)
    h2 = h.clone()
    h2[1:] = torch.randn(11, model.cfg.d_f)
    assert torch.equal(match_head(h, model), match_head(h2, model))
    with torch.no_grad():
        model.match_head.weight.zero_()
        model.match_head.bias.zero_()
    assert match_head(h, model).tolist() == [0.0, 0.0]


def test_embedder_identity_and_rows():
    emb = TeacherEmbedder(8, 16, 8).double()
    emb.identity_init_()
    th = torch.randn(5, 8, dtype=torch.float64)
    assert torch.equal(emb(th), th)
    emb = TeacherEmbedder(8, 16, 4)
    perm = torch.tensor([3, 0, 4, 1, 2])
    th = torch.randn(5, 8)
    assert torch.equal(emb(th)[perm], emb(th[perm]))
    with pytest.raises(ShapeError):
        TeacherEmbedder(8, 10, 8).identity_init_()


def test_embedder_parameter_count():
    d_in, w, d_f = 64, 48, 32
    assert TeacherEmbedder(d_in, w, d_f).n_params() == d_in * w + w * d_f + w + d_f


def test_teacher_embedder_from_numpy(model):
    th = np.random.default_rng(0).standard_normal((6, model.cfg.teacher_width)).astype(np.float32)
    assert teacher_embedder(th, model).shape == (6, model.cfg.d_f)


def test_weights_tied_between_encoder_and_decoder(model):
    # one backbone object serves both directions; a change shows up in both
    ids = torch.full((1, model.cfg.max_ots_len), 1)
    ids[0, 0] = 2
    cond = torch.randn(1, 4, model.cfg.d_f)
    before_dec = model.decode(ids[:, :5], cond)
    before_enc = model.encode_ots(ids, torch.zeros(1, 8), torch.zeros(1, 8, dtype=torch.bool),
                                  torch.zeros(1, 8, dtype=torch.bool), cond)
    with torch.no_grad():
        model.ots.blocks[0].attn.v.weight.mul_(3.0)
    assert not torch.allclose(before_dec, model.decode(ids[:, :5], cond))
    assert not torch.allclose(before_enc, model.encode_ots(ids, torch.zeros(1, 8), torch.zeros(1, 8, dtype=torch.bool),
                                                           torch.zeros(1, 8, dtype=torch.bool), cond))


def test_config_validation():
    with pytest.raises(ValueError):
        NetConfig(d_f=30, heads=4)
    with pytest.raises(ValueError):
        NetConfig(patch_size=7)
    assert NetConfig().config_hash() != NetConfig(d_f=16).config_hash()


def test_gradcheck_linear_exact():
    g = torch.Generator().manual_seed(0)
    w = torch.randn(4, 3, generator=g, dtype=torch.float64, requires_grad=True)
    x = torch.randn(10, 4, generator=g, dtype=torch.float64)
    y = torch.randn(10, 3, generator=g, dtype=torch.float64)

    def loss():
        return ((x @ w - y) ** 2).sum()

    rep = gradcheck({"w": w}, loss, tolerance=1e-10, n_coords=12, h=1e-3)
    assert rep.ok and rep.n_coords == 12


def test_gradcheck_flags_corrupted_gradient():
    w = torch.randn(5, dtype=torch.float64, requires_grad=True)

    def loss():
        return (w**3).sum()

    bad = {"w": 3 * w.detach() ** 2 + 0.01}
    with pytest.raises(GradCheckFailure):
        gradcheck({"w": w}, loss, analytic=bad, n_coords=5)
    rep = gradcheck({"w": w}, loss, analytic=bad, n_coords=5, raise_on_failure=False)
    assert rep.failing() and not rep.ok
