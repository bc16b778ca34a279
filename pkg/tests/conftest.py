import numpy as np
import pytest
import torch

from struggle_online.data import FeatureStream
from struggle_online.models import ModelConfig, Variant
from struggle_online.synth import CorpusConfig, generate_corpus


def small_config(variant="CMERT", **kw) -> ModelConfig:
    base = dict(variant=variant, d_model=16, heads=2, ff_dim=24, enc_layers=1, dec_layers=1,
                n_latent=4, long_len=16, long_sample_rate=4, short_len=4,
                anticipation_len=3, near_future_len=4, dropout=0.0, d_slow=6, d_fast=2)
    if variant == "LSTR":
        base["near_past_len"] = 0
    base.update(kw)
    return ModelConfig(**base)


def random_stream(n, cfg, seed=0, video_id="v") -> FeatureStream:
    rng = np.random.default_rng(seed)
    return FeatureStream(video_id, rng.standard_normal((n, cfg.d_total)), 3.125,
                         cfg.d_slow, cfg.d_fast)


def closed_form_params(cfg: ModelConfig) -> int:
    d, ff = cfg.d_model, cfg.ff_dim
    layer = 2 * 4 * (d * d + d) + 3 * 2 * d + (d * ff + ff) + (ff * d + d)
    norm = 2 * d
    total = (cfg.d_total * d + d)                       # fusion
    total += cfg.long_tokens * d                        # long positions
    total += (cfg.near_past_len + cfg.short_len) * d    # short/near-past positions
    total += cfg.n_latent * d + cfg.enc_layers * layer + norm
    if cfg.anticipation_len:
        total += d + cfg.anticipation_len * d
    total += 2 * d + 2                                  # classifier
    if cfg.variant is Variant.LSTR:
        total += cfg.dec_layers * layer + norm
    else:
        total += cfg.dec_layers * layer + norm          # initial stage
        total += cfg.near_future_len * d + layer + norm  # near-future stage
        total += cfg.dec_layers * layer + norm          # refinement
    return total


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """4 activities x 1 task x 2 participants x 2 attempts of 60 s."""
    out = tmp_path_factory.mktemp("tiny_corpus")
    cfg = CorpusConfig(tasks_per_activity=1, participants=2, attempts=2, video_duration=60.0,
                       master_seed=11)
    generate_corpus(cfg, out)
    return out


def pytest_terminal_summary(terminalreporter):
    mod = next((m for name, m in __import__("sys").modules.items()
                if name.endswith("test_acceptance") and hasattr(m, "RESULTS")), None)
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        ok, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    missing = [n for n in range(1, 13) if n not in mod.RESULTS]
    if missing:
        terminalreporter.write_line(f"not run: {missing}")
