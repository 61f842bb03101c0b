import numpy as np
import pytest

from compfuse import pipeline
from compfuse import tensor as T
from compfuse.config import FREEZE_SCHEDULE, GROUPS, PipelineConfig
from compfuse.llm import BOS, EOS, SEP, decode, decode_text, embed_text, encode_text, prompt_ids
from compfuse.pipeline import forward, forward_trace, generate, init_params
from compfuse.tensor import Tensor
from compfuse.vision import ImageInput

CFG = PipelineConfig()


@pytest.fixture(scope="module")
def params():
    return init_params(CFG, 0)


@pytest.fixture(scope="module")
def img():
    return ImageInput(np.random.default_rng(5).random((100, 140, 3)))


def ids(n, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=n).tolist()


# ------------------------------------------------------------------ text side


def test_tokenizer_round_trip():
    assert decode_text(encode_text("red box")) == "red box"
    assert prompt_ids("hi") == [BOS, ord("h"), ord("i"), SEP]
    assert decode_text([BOS, 104, EOS]) == "h"


def test_embed_examples(params):
    assert len(embed_text([], params.llm)) == 0
    e = params.llm.embedding.data
    out = embed_text([3, 1], params.llm).tokens.data
    assert out[0].tobytes() == e[3].tobytes() and out[1].tobytes() == e[1].tobytes()
    rep = embed_text([9, 9], params.llm)
    assert rep.tokens.data[0].tobytes() == rep.tokens.data[1].tobytes()
    assert rep.mask.all()


def test_embed_rejects_out_of_range(params):
    with pytest.raises(ValueError):
        embed_text([CFG.vocab_size], params.llm)


# -------------------------------------------------------------------- forward


def test_forward_shapes_for_seven_tokens(params, img):
    tr = forward_trace(params, img, ids(7))
    assert tr.h_v2t.tokens.shape == (256, CFG.d_t)
    assert tr.h_vc.tokens.shape == (64, CFG.d_t)
    assert tr.h_ft.shape == (7, CFG.d_t)
    assert tr.h_m.shape == (71, CFG.d_t)
    assert tr.logits.shape == (71, CFG.vocab_size)


def test_merge_layout(params, img):
    tr = forward_trace(params, img, ids(9))
    assert tr.h_m.data[:64].tobytes() == tr.h_vc.tokens.data.tobytes()
    assert tr.h_m.data[64:].tobytes() == tr.h_ft.data.tobytes()


def test_decoder_is_causal(params):
    r = np.random.default_rng(1)
    merged = r.standard_normal((80, CFG.d_t))
    base = decode(Tensor(merged), params.llm, CFG).data
    for i in (0, 40, 63, 70):
        m2 = merged.copy()
        m2[i + 1 :] = r.standard_normal(m2[i + 1 :].shape) * 10
        out = decode(Tensor(m2), params.llm, CFG).data
        assert out[: i + 1].tobytes() == base[: i + 1].tobytes()


def test_later_text_never_changes_earlier_logits(params, img):
    a = ids(10, 1)
    b = a[:6] + ids(4, 2)
    la, lb = forward(params, img, a).data, forward(params, img, b).data
    assert la[: 64 + 6].tobytes() == lb[: 64 + 6].tobytes()


def test_substitution_identity(img, monkeypatch):
    fused = init_params(CFG, 3)
    plain = init_params(CFG.replace(fusion="none"), 3)
    monkeypatch.setattr(pipeline, "fuse", lambda hv2t, ht, p, cfg: ht.tokens)
    a = forward(fused, img, ids(6)).data
    monkeypatch.undo()
    b = forward(plain, img, ids(6)).data
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize(
    "comp,fusion", [("none", "none"), ("mlp", "none"), ("conv2d", "cross"), ("maxpool2d", "decoder"), ("mlp", "combined")]
)
def test_padding_invariance_end_to_end(img, comp, fusion):
    p = init_params(CFG.replace(compressor=comp, fusion=fusion), 0)
    grid = pipeline.prepare_image(img, p.cfg)
    assert grid.count < 256
    noise = np.random.default_rng(2).standard_normal((256 - grid.count, 768)) * 30
    a = forward(p, grid, ids(5)).data
    b = forward(p, grid, ids(5), pad_values=noise).data
    assert a.tobytes() == b.tobytes()


def test_baseline_feeds_all_visual_tokens(img):
    p = init_params(CFG.replace(compressor="none", fusion="none"), 0)
    tr = forward_trace(p, img, ids(4))
    assert tr.h_m.shape == (260, CFG.d_t) and tr.flops["compress"] == tr.flops["fuse"] == 0


def test_too_much_text_rejected(params, img):
    with pytest.raises(ValueError):
        forward(params, img, ids(CFG.max_text + 1))


# ------------------------------------------------------------------- generate


def test_generate_one_step_is_argmax(params, img):
    prompt = prompt_ids("describe")
    out = generate(params, img, prompt, max_steps=1)
    assert out == [int(np.argmax(forward(params, img, prompt).data[-1]))]


def test_generate_deterministic(params, img):
    a = generate(params, img, prompt_ids("x"), max_steps=5)
    assert a == generate(params, img, prompt_ids("x"), max_steps=5) and 1 <= len(a) <= 5


def test_generate_rejects_zero_steps(params, img):
    with pytest.raises(ValueError):
        generate(params, img, [BOS], max_steps=0)


# -------------------------------------------------------------- init and grads


def test_init_deterministic_and_copy_rule():
    a, b = init_params(CFG, 11), init_params(CFG, 11)
    for (n1, t1), (n2, t2) in zip(a.named().items(), b.named().items()):
        assert n1 == n2 and t1.data.tobytes() == t2.data.tobytes()
    for (_, f), (_, l0) in zip(a.fuse.decoder.named("x"), a.llm.blocks[0].named("y")):
        assert f.data.tobytes() == l0.data.tobytes() and f is not l0 and f.data is not l0.data


def test_shared_modules_share_initial_weights():
    a = init_params(CFG.replace(fusion="cross"), 4)
    b = init_params(CFG.replace(fusion="combined"), 4)
    for name in ("proj.w1", "comp.mixer", "llm.embedding", "fuse.cross.wq"):
        assert a.named()[name].data.tobytes() == b.named()[name].data.tobytes()


@pytest.mark.parametrize("stage", [1, 2, 3])
def test_gradient_reaches_every_unfrozen_module(stage, img):
    p = init_params(CFG, 0)
    p.set_frozen(FREEZE_SCHEDULE[stage])
    toks = ids(6)
    logits = forward(p, img, toks)
    T.backward(T.cross_entropy(logits, [64 + i for i in range(5)], toks[1:]))
    for g in GROUPS:
        grads = [t.grad for t in p.group(g).values()]
        if g in FREEZE_SCHEDULE[stage]:
            assert all(x is None for x in grads), g
        else:
            assert any(x is not None and np.abs(x).sum() > 0 for x in grads), g
