import pytest
import torch

from qbtlab.model import ModelConfig, build_model
from qbtlab.synthdata import Batch, CipherTaskSpec, generate_task


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def random_batch(rng, vocab_lo, vocab_hi, lengths, lang="s"):
    return Batch.from_sequences([rng.integers(vocab_lo, vocab_hi, size=n).tolist() for n in lengths], lang)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(vocab_size=24, n_enc_layers=2, n_dec_layers=2, d_model=16, n_heads=2, d_ff=32, max_positions=32, dropout=0.0)


@pytest.fixture
def tiny_model(tiny_cfg):
    return build_model(tiny_cfg, seed=0).eval()


@pytest.fixture(scope="session")
def small_task():
    spec = CipherTaskSpec(seed=3, content_vocab_per_lang=10, min_len=3, max_len=8,
                          corpus_size_per_lang=300, valid_size=20, test_size=40)
    return generate_task(spec)


def pytest_terminal_summary(terminalreporter):
    from _acceptance_log import RESULTS, summary_lines

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in summary_lines():
            terminalreporter.write_line(line)
