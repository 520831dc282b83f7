import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from advcap.data import build_vocabulary, encode_split, make_toy_corpus  # noqa: E402
from advcap.model import CaptionModel, ModelConfig  # noqa: E402
from advcap.training import TrainConfig, train_baseline  # noqa: E402


def tiny_config(**kw) -> ModelConfig:
    base = dict(image_size=8, patch_size=4, channels=3, embed_dim=16, encoder_layers=1, decoder_layers=1,
                attention_heads=2, ffn_dim=32, vocab_size=12, max_caption_len=6, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed=0, dtype=torch.float32, **kw) -> CaptionModel:
    torch.manual_seed(seed)
    return CaptionModel(tiny_config(**kw)).to(dtype).eval()


def generic_weights(model: CaptionModel, std: float = 0.3, seed: int = 0) -> CaptionModel:
    """Redraw matrices and embeddings at a larger scale so input gradients sit well above
    the round-off floor of a central-difference check."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.dim() > 1 or "token" in name or "pos" in name:
                p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * std)
    return model


def random_batch(cfg: ModelConfig, batch=2, seed=0, dtype=torch.float32):
    from advcap.model import BOS, EOS, PAD, CaptionBatch, ImageBatch

    g = torch.Generator().manual_seed(seed)
    pixels = torch.rand(batch, cfg.channels, cfg.image_size, cfg.image_size, generator=g, dtype=dtype)
    tokens = torch.full((batch, cfg.max_caption_len), PAD, dtype=torch.long)
    for i in range(batch):
        n = int(torch.randint(1, cfg.max_caption_len - 1, (1,), generator=g))
        tokens[i, 0] = BOS
        tokens[i, 1:n + 1] = torch.randint(4, cfg.vocab_size, (n,), generator=g)
        tokens[i, n + 1] = EOS
    return ImageBatch(pixels, [f"img{i}" for i in range(batch)]), CaptionBatch(tokens, tokens != PAD)


@pytest.fixture(scope="session")
def toy_splits(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    train, test = make_toy_corpus(seed=0, num_images=20, image_size=16, root=root)
    vocab = build_vocabulary(train)
    return {"train": encode_split(train, vocab, 16, 12), "test": encode_split(test, vocab, 16, 12),
            "vocab": vocab, "corpus": (train, test), "root": root}


@pytest.fixture(scope="session")
def small_config():
    return dict(image_size=16, patch_size=4, embed_dim=32, encoder_layers=1, decoder_layers=1,
                attention_heads=2, ffn_dim=64, max_caption_len=12)


@pytest.fixture(scope="session")
def trained_toy(toy_splits, small_config):
    """A small model fitted to the 16-image toy train split."""
    cfg = ModelConfig(vocab_size=len(toy_splits["vocab"]), **small_config)
    art = train_baseline(toy_splits["train"], TrainConfig(epochs=150, batch_size=8, learning_rate=2e-3), cfg)
    return art.model


ACCEPTANCE_SEEDS = (0, 1, 2, 3, 4)
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record a PASS/FAIL line for the end-of-run summary."""
    def record(name: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy_experiments(tmp_path_factory):
    """Default-config toy experiment for each fixed seed. Set ADVCAP_RUNS_DIR to keep and reuse the runs."""
    import os
    import time

    from advcap.experiment import ExperimentConfig, run_experiment

    root = Path(os.environ["ADVCAP_RUNS_DIR"]) if os.environ.get("ADVCAP_RUNS_DIR") \
        else tmp_path_factory.mktemp("toy_runs")
    t0 = time.time()
    reports = {s: run_experiment(ExperimentConfig().with_seed(s), root / f"seed{s}") for s in ACCEPTANCE_SEEDS}
    return {"reports": reports, "root": root, "seconds": time.time() - t0}
