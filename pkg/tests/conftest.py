import numpy as np
import pytest
from hypothesis import settings

from wslab import corpus, lm

settings.register_profile("wslab", deadline=None, max_examples=60)
settings.load_profile("wslab")


@pytest.fixture(scope="session")
def docs():
    return corpus.read_corpus()


@pytest.fixture(scope="session")
def vocab(docs):
    return corpus.build_vocabulary("\n".join(docs), "char", 64)


@pytest.fixture(scope="session")
def small_provider(docs, vocab):
    """A briefly trained mlp model; good enough to have non-uniform predictions."""
    cfg = lm.ModelConfig(V=vocab.size, d=8, context=32, hidden=32, block="mlp")
    seqs = corpus.training_windows(docs[:400], vocab, 33)
    model, _ = lm.train(lm.init_model(cfg, 1), lm.lm_dataset(seqs), lm.TrainConfig(epochs=2, lr=5e-3, seed=0))
    return model


def rand_model(V=8, d=4, block="mlp", tied=False, seed=0, context=8, hidden=6, n_layers=1, dtype=np.float64):
    cfg = lm.ModelConfig(V=V, d=d, context=context, hidden=hidden, n_layers=n_layers, block=block, tied=tied)
    m = lm.init_model(cfg, seed).astype(dtype)
    rng = np.random.default_rng(seed + 100)
    # nonzero biases so their gradients are exercised
    for k, v in m.tensors.items():
        if k.endswith(("b1", "b2")) or k == "out_b":
            m.tensors[k] = rng.normal(0, 0.3, v.shape).astype(dtype)
    return m


TINY_INI = """
[data]
n_train = 40
n_test = 20
prompt_len = 8
gen_len = 16

[provider]
d = 8
hidden = 16
context = 32
block = mlp
epochs = 1

[surrogate]
d = 8
hidden = 16
context = 32
block = mlp
epochs = 2
pretrain_epochs = 1

[attack]
train_sizes = 10, 40
sweep_epsilons = 300, 6
"""


@pytest.fixture(scope="session")
def tiny_cfg():
    from wslab.config import parse_config
    return parse_config(TINY_INI)


@pytest.fixture(scope="session")
def tiny_lab(tiny_cfg, docs):
    from wslab.evaluation import Lab
    return Lab(tiny_cfg, docs=docs)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
