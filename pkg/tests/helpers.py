"""Shared test utilities: tiny training batches, finite-difference gradient checks,
and the held-out ITM pairing used by the trained-model checks."""

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from conftest import TINY_TEXTS, make_tiny_state
from refinevl.cli import run
from refinevl.corpus import reference_spec, split_sentences
from refinevl.dictionary import bundled_fixture_dir
from refinevl.encoders import encode_image, itm_forward
from refinevl.trainer import TrainConfig, batch_losses

LOSS_KEYS = ("L_g", "L_l", "L_itm", "L_mlm", "L")


def tiny_problem(seed=0, n=3):
    """Tiny float64 model and a batch of n 4x4 images, each paired with a two-sentence report."""
    state = make_tiny_state(seed=seed)
    g = np.random.default_rng(seed)
    images = torch.from_numpy(g.uniform(size=(n, 4, 4)))
    splits = []
    for i in range(n):
        a, b = TINY_TEXTS[i % 4], TINY_TEXTS[(i + 1) % 4]
        splits.append(state.split_text(split_sentences(f"{a} {b}")))
    return state, images, splits


def _losses(state, images, splits, mask_ratio, rng_seed):
    return batch_losses(state, images, splits, mask_ratio, np.random.default_rng(rng_seed))


def gradient_check(seed=0, n_coords=300, step=1e-4, mask_ratio=0.3, tol=1e-3):
    """Compare autograd gradients of every loss with central differences.

    Returns {loss name: fraction of sampled coordinates with relative error < tol}.
    """
    state, images, splits = tiny_problem(seed)
    params = [p for p in state.model.parameters() if p.requires_grad]
    analytic = {}
    for key in LOSS_KEYS:
        state.model.zero_grad()
        _losses(state, images, splits, mask_ratio, seed)[key].backward()
        analytic[key] = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
                         for p in params]

    g = np.random.default_rng(seed + 1)
    sizes = np.array([p.numel() for p in params])
    picks = []
    for _ in range(n_coords):
        k = int(g.choice(len(params), p=sizes / sizes.sum()))
        picks.append((k, int(g.integers(sizes[k]))))

    ok = {key: 0 for key in LOSS_KEYS}
    with torch.no_grad():
        for k, flat in picks:
            view = params[k].view(-1)
            orig = view[flat].item()
            view[flat] = orig + step
            up = _losses(state, images, splits, mask_ratio, seed)
            view[flat] = orig - step
            down = _losses(state, images, splits, mask_ratio, seed)
            view[flat] = orig
            for key in LOSS_KEYS:
                num = (up[key].item() - down[key].item()) / (2 * step)
                ana = analytic[key][k].view(-1)[flat].item()
                rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                ok[key] += rel < tol
    return {key: ok[key] / n_coords for key in LOSS_KEYS}


def held_out_itm_pairs(held, diseases, dictionary, n_pairs=200, seed=0):
    """Pairs of (image with the glyph, image without it, positive template)."""
    g = np.random.default_rng(seed)
    pairs = []
    for k in range(n_pairs):
        d = diseases[k % len(diseases)]
        pos = [s for s in held if s.labels.get(d, False)]
        neg = [s for s in held if not s.labels.get(d, False)]
        pairs.append((pos[(k // len(diseases)) % len(pos)], neg[int(g.integers(len(neg)))],
                      dictionary[d].positive_template))
    return pairs


def itm_pair_win_rate(state, pairs):
    wins = 0
    for pos, neg, sentence in pairs:
        tokens = state.split_text([sentence]).token_ids
        p = [torch.softmax(itm_forward(encode_image(s.image, state), tokens, state), -1)[0]
             for s in (pos, neg)]
        wins += bool(p[0] > p[1])
    return wins / len(pairs)


def tree_digest(root):
    """sha256 over relative paths and bytes of every file below root."""
    h = hashlib.sha256()
    root = Path(root)
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def run_cli_pipeline(root, n_samples=48, epochs=(2, 1), ratio=1.0, seed=0):
    """gen -> dict -> pretrain -> refine -> finetune -> eval through the CLI.

    Returns {stage: CommandResult} and leaves every artifact under root.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "spec.json").write_text(json.dumps(reference_spec(n_samples, seed=seed).to_dict()))
    (root / "iter1.json").write_text(json.dumps(
        TrainConfig.desk(1, epochs=epochs[0]).to_dict()))
    (root / "iter2.json").write_text(json.dumps(
        TrainConfig.desk(2, epochs=epochs[1], refinement_ratio=ratio).to_dict()))
    s = str(seed)
    steps = {
        "gen": ["gen-synthetic", "--spec", f"{root}/spec.json", "--out", f"{root}/corpus",
                "--seed", s],
        "dict": ["build-dict", "--mode", "llm", "--fixtures", str(bundled_fixture_dir()),
                 "--source", "claude3", "--out", f"{root}/dict.json"],
        "pretrain": ["pretrain", "--config", f"{root}/iter1.json", "--corpus", f"{root}/corpus",
                     "--dict", f"{root}/dict.json", "--out", f"{root}/it1", "--seed", s],
        "refine": ["refine", "--config", f"{root}/iter2.json", "--corpus", f"{root}/corpus",
                   "--checkpoint", f"{root}/it1/model.zip", "--dict", f"{root}/dict.json",
                   "--out", f"{root}/refined", "--seed", s],
        "finetune": ["finetune", "--config", f"{root}/iter2.json", "--corpus", f"{root}/corpus",
                     "--checkpoint", f"{root}/it1/model.zip",
                     "--refined", f"{root}/refined/refined.jsonl", "--out", f"{root}/it2",
                     "--seed", s],
        "eval": ["eval", "--checkpoint", f"{root}/it2/model.zip", "--corpus", f"{root}/corpus",
                 "--dict", f"{root}/dict.json", "--out", f"{root}/eval", "--heatmaps"],
    }
    return {name: run(argv) for name, argv in steps.items()}

