import numpy as np
import pytest
from hypothesis import given, strategies as st

from wslab import lm
from conftest import rand_model


def test_init_deterministic_and_shaped():
    cfg = lm.ModelConfig(V=8, d=4)
    a, b = lm.init_model(cfg, 1), lm.init_model(cfg, 1)
    assert a.digest() == b.digest()
    assert a.embedding.shape == (8, 4) and a.embedding.dtype == np.float32
    assert np.abs(a.embedding).max() <= 1 / np.sqrt(4)
    assert not np.array_equal(a.embedding, lm.init_model(cfg, 2).embedding)


def test_config_validation():
    for bad in (dict(d=1), dict(context=1), dict(n_layers=0), dict(n_layers=5), dict(block="rnn")):
        with pytest.raises(ValueError):
            lm.ModelConfig(V=8, **bad)


def test_zero_model_gives_equal_logits():
    m = lm.zero_model(lm.ModelConfig(V=8, d=4, block="attn"))
    z = lm.forward_logits(m, [1, 2, 3])
    assert np.all(z == z[0])


@pytest.mark.parametrize("block", ["mlp", "attn"])
def test_softmax_normalized_and_pure(block):
    m = lm.init_model(lm.ModelConfig(V=11, d=6, block=block, n_layers=2), 0)
    ctx = [3, 1, 4, 1, 5]
    z = lm.forward_logits(m, ctx)
    assert abs(lm.softmax(z).sum() - 1) < 1e-6
    assert np.array_equal(z, lm.forward_logits(m, ctx))


def test_empty_context_rejected():
    m = lm.init_model(lm.ModelConfig(V=8, d=4), 0)
    with pytest.raises(ValueError, match="empty context"):
        lm.forward_logits(m, [])


@pytest.mark.parametrize("block", ["mlp", "attn"])
def test_embedding_path_equivalence(block):
    m = lm.init_model(lm.ModelConfig(V=8, d=4, block=block), 0)
    seq = [1, 5, 2, 7]
    exact = lm.forward_from_embeddings(m, m.embedding[seq])
    assert np.array_equal(exact, lm.forward_logits(m, seq))
    assert np.array_equal(exact, lm.forward_from_embeddings(m, m.embedding[seq] + 0.0))
    prev = None
    for n in (1e-2, 1e-4, 1e-6):
        noise = np.zeros((4, 4))
        noise[-1, 0] = n
        diff = np.abs(lm.forward_from_embeddings(m.astype(np.float64), m.embedding[seq].astype(np.float64) + noise)
                      - lm.forward_from_embeddings(m.astype(np.float64), m.embedding[seq].astype(np.float64))).max()
        assert diff > 0
        if prev is not None:
            assert diff < prev
        prev = diff


def test_dimension_mismatch_rejected():
    m = lm.init_model(lm.ModelConfig(V=8, d=4), 0)
    with pytest.raises(ValueError):
        lm.forward_from_embeddings(m, np.zeros((3, 5)))


def test_generate_contract():
    m = lm.init_model(lm.ModelConfig(V=8, d=4, context=6), 0)
    assert lm.generate(m, [1, 2], 0) == [1, 2]
    g = lm.generate(m, [1, 2], 20, lm.greedy_sampler, 0)
    assert g == lm.generate(m, [1, 2], 20, lm.greedy_sampler, 5) and len(g) == 22
    a = lm.generate(m, [1, 2], 30, lm.multinomial_sampler, 1)
    b = lm.generate(m, [1, 2], 30, lm.multinomial_sampler, 2)
    assert a != b
    assert a == lm.generate(m, [1, 2], 30, lm.multinomial_sampler, 1)


def test_generate_passes_hook_arguments():
    m = lm.init_model(lm.ModelConfig(V=8, d=4), 0)
    seen = []

    def hook(logits, tokens, step, rng):
        seen.append((len(logits), list(tokens), step))
        return step % 8
    lm.generate(m, [3], 3, hook, 0)
    assert seen == [(8, [3], 0), (8, [3, 0], 1), (8, [3, 0, 1], 2)]


def test_generate_embedding_noise_deterministic():
    m = lm.init_model(lm.ModelConfig(V=8, d=4), 0)
    a = lm.generate(m, [1, 2], 20, lm.multinomial_sampler, 3, embedding_noise=0.5)
    assert a == lm.generate(m, [1, 2], 20, lm.multinomial_sampler, 3, embedding_noise=0.5)


def _numeric_grads(m, batch, h=1e-6):
    out = {}
    for name, t in m.tensors.items():
        g = np.zeros_like(t)
        it = np.nditer(t, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = t[i]
            t[i] = old + h
            lp, _ = lm.loss_and_grads(m, batch)
            t[i] = old - h
            lm_, _ = lm.loss_and_grads(m, batch)
            t[i] = old
            g[i] = (lp - lm_) / (2 * h)
        out[name] = g
    return out


def gradient_check(block, tied, n_layers=1, pre_embedded=False, with_noise=False, seed=0):
    m = rand_model(block=block, tied=tied, n_layers=n_layers, seed=seed)
    rng = np.random.default_rng(seed)
    batch = []
    for L in (5, 3):
        ids = rng.integers(0, 8, L + 1)
        x = m.embedding[ids[:-1]] + rng.normal(0, 0.1, (L, 4)) if pre_embedded else ids[:-1]
        targets = ids[1:].copy()
        targets[0] = -1  # masked position
        item = (x, targets) + ((rng.normal(0, 0.2, (L, 4)),) if with_noise else ())
        batch.append(item)
    _, ana = lm.loss_and_grads(m, batch)
    num = _numeric_grads(m, batch)
    worst = 0.0
    for k in m.tensors:
        a, n = ana[k], num[k]
        denom = max(np.abs(a).max(), np.abs(n).max(), 1e-8)
        worst = max(worst, float(np.abs(a - n).max() / denom))
    return worst


@pytest.mark.parametrize("block,tied,n_layers", [("mlp", False, 1), ("attn", False, 1), ("mlp", True, 2),
                                                 ("attn", True, 2)])
def test_gradient_check(block, tied, n_layers):
    assert gradient_check(block, tied, n_layers) < 1e-4


def test_gradient_check_pre_embedded_with_hidden_noise():
    assert gradient_check("attn", False, pre_embedded=True, with_noise=True) < 1e-4


def test_training_reduces_loss_and_is_deterministic():
    m = lm.init_model(lm.ModelConfig(V=8, d=4, context=16, hidden=8), 0)
    data = lm.lm_dataset([[1, 2, 3, 4, 5, 6, 7, 1, 2, 3]])
    cfg = lm.TrainConfig(epochs=50, lr=1e-2, seed=3)
    a, curve = lm.train(m, data, cfg)
    b, _ = lm.train(m, data, cfg)
    assert curve[-1] < curve[0]
    assert a.digest() == b.digest()
    assert m.digest() == lm.init_model(m.config, 0).digest()  # input untouched


@pytest.mark.parametrize("opt", ["adam", "sgd"])
def test_zero_lr_leaves_params(opt):
    m = lm.init_model(lm.ModelConfig(V=8, d=4), 0)
    data = lm.lm_dataset([[1, 2, 3, 4], [4, 3, 2, 1]])
    out, curve = lm.train(m, data, lm.TrainConfig(epochs=5, lr=0.0, optimizer=opt))
    assert out.digest() == m.digest()
    assert len(set(curve)) == 1


def test_frozen_tensor_not_updated():
    m = lm.init_model(lm.ModelConfig(V=8, d=4), 0)
    out, _ = lm.train(m, lm.lm_dataset([[1, 2, 3, 4]]), lm.TrainConfig(epochs=3, lr=1e-2, frozen=("embedding",)))
    assert np.array_equal(out.embedding, m.embedding)
    assert not np.array_equal(out.tensors["out_w"], m.tensors["out_w"])


def test_divergence_reported():
    m = lm.init_model(lm.ModelConfig(V=8, d=4), 0)
    m.tensors["out_b"][:] = np.nan
    with pytest.raises(lm.DivergenceError, match="divergence at epoch 1"):
        lm.train(m, lm.lm_dataset([[1, 2, 3]]), lm.TrainConfig(epochs=2))


def test_perplexity_closed_forms():
    V = 9
    m = lm.zero_model(lm.ModelConfig(V=V, d=4))
    assert lm.perplexity(m, [1, 2, 3, 4, 5]) == pytest.approx(V, rel=1e-6)
    # p(next) = 0.5 everywhere on a 2-token model
    two = lm.zero_model(lm.ModelConfig(V=2, d=2))
    assert lm.perplexity(two, [0, 1, 1, 0]) == pytest.approx(2.0, rel=1e-6)
    # probability one on the true next token: a huge bias toward token 3
    sure = lm.zero_model(lm.ModelConfig(V=V, d=4))
    sure.tensors["out_b"][3] = 200.0
    assert lm.perplexity(sure, [3, 3, 3, 3]) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ValueError):
        lm.perplexity(m, [1])


def test_perplexity_start_scores_suffix_only():
    m = lm.init_model(lm.ModelConfig(V=8, d=4), 0)
    seq = [1, 2, 3, 4, 5, 6]
    lp = lm.token_logprobs(m, seq)
    assert lm.perplexity(m, seq, start=3) == pytest.approx(float(np.exp(-lp[2:].mean())))


def test_embedding_stats_examples():
    m = lm.zero_model(lm.ModelConfig(V=4, d=2))
    s = lm.embedding_stats(m)
    assert (s.mean, s.std) == (0.0, 0.0)
    m.tensors["embedding"][:] = np.array([[1, -1], [-1, 1], [1, -1], [-1, 1]])
    s = lm.embedding_stats(m, 10)
    assert s.mean == 0 and s.std == 1
    assert sum(c for _, c in s.histogram) == 8


@given(st.integers(0, 2 ** 31), st.sampled_from(["mlp", "attn"]), st.booleans())
def test_checkpoint_round_trip(seed, block, tied):
    m = lm.init_model(lm.ModelConfig(V=7, d=3, context=5, hidden=4, block=block, tied=tied), seed)
    back = lm.parse_container(lm.checkpoint_bytes(m))
    header, tensors = back
    assert header["kind"] == "model" and header["block"] == block
    assert all(np.array_equal(tensors[k], v) for k, v in m.tensors.items())


def test_checkpoint_file(tmp_path):
    m = lm.init_model(lm.ModelConfig(V=7, d=3), 4)
    lm.save_checkpoint(m, tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:4] == b"WSLM"
    assert lm.load_checkpoint(tmp_path / "m.ckpt").digest() == m.digest()
    (tmp_path / "bad.ckpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        lm.load_checkpoint(tmp_path / "bad.ckpt")
