import sys
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from refinevl.corpus import build_vocab, gen_synthetic, reference_spec  # noqa: E402
from refinevl.dictionary import build_manual_dictionary  # noqa: E402
from refinevl.encoders import ModelConfig, ModelState  # noqa: E402
from refinevl.trainer import TrainConfig, train_iteration1  # noqa: E402

TINY_TEXTS = ["There is pneumothorax.", "No cardiomegaly.", "Heart size is normal.",
              "The lungs are clear."]


def make_tiny_state(dtype=torch.float64, seed=0, trained=True, **overrides) -> ModelState:
    """C=8 model over 4x4 images with 2x2 patches (2 patches per side)."""
    vocab = build_vocab(TINY_TEXTS)
    kw = dict(vocab_size=len(vocab), patch_size=2, width=8, layers=1, heads=2, proj_dim=8,
              itm_layers=1, ffn_mult=2, dropout=0.0)
    kw.update(overrides)
    state = ModelState(ModelConfig(**kw), vocab, seed=seed)
    state.model.to(dtype)
    if trained:
        state.meta["trained_epochs"] = 1
    state.model.eval()
    return state


@pytest.fixture
def tiny_state():
    return make_tiny_state()


@pytest.fixture(scope="session")
def manual_dictionary():
    return build_manual_dictionary()


@pytest.fixture(scope="session")
def reference_run(manual_dictionary):
    """Iteration-1 model trained once on the pinned reference corpus."""
    train = gen_synthetic(reference_spec(500, seed=0))
    held = gen_synthetic(reference_spec(200, seed=1000))
    t0 = time.perf_counter()
    state, record = train_iteration1(train, TrainConfig.reference(1, seed=0),
                                     dictionary=manual_dictionary)
    seconds = time.perf_counter() - t0
    return SimpleNamespace(state=state, record=record, train=train, held=held,
                           dictionary=manual_dictionary, seconds=seconds)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ---------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion


_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
    config.addinivalue_line("markers", "slow: trains the reference model")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "details": []})
    entry["ok"] &= rep.passed
    entry["details"].extend(str(v) for k, v in item.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        detail = f" [{'; '.join(e['details'])}]" if e["details"] else ""
        terminalreporter.write_line(
            f"criterion {number:2d}: {'PASS' if e['ok'] else 'FAIL'}  {e['title']}{detail}")
