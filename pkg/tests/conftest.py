"""Session fixtures for the acceptance suite.

The acceptance checkpoint (stage-0 reference plus stage-1 gated decoder at
m=2, n=1) is expensive, so it is trained once per session and shared by
every criterion that needs it.  A terminal-summary hook prints one
pass/fail line per acceptance test.
"""

from __future__ import annotations

import time

import numpy as np
import pytest

from keygate import fileio
from keygate.data import DatasetSpec, generate_dataset, split
from keygate.keys import generate_key
from keygate.model import StructureConfig
from keygate.training import TrainHParams, train_gated, train_reference

SEED = 0


@pytest.fixture(scope="session")
def acceptance_dataset():
    images = generate_dataset(DatasetSpec(count=500, seed=SEED))
    train, held = split(images, 0.9, SEED)
    return train, held


@pytest.fixture(scope="session")
def acceptance_reference(acceptance_dataset):
    """Stage-0 model, its report, its checkpoint snapshot, and wall time."""
    train, held = acceptance_dataset
    hp = TrainHParams(
        learning_rate=1e-3,
        steps=800,
        batch_size=16,
        seed=SEED,
        cycle_weight=0.05,
        moment_weight=0.02,
    )
    t0 = time.perf_counter()
    model, report = train_reference(train, hp, eval_images=held)
    elapsed = time.perf_counter() - t0
    snapshot = fileio.checkpoint_from_reference(model)  # record arrays are copies
    return {"model": model, "report": report, "snapshot": snapshot, "seconds": elapsed}


@pytest.fixture(scope="session")
def acceptance_key():
    return generate_key(SEED)


@pytest.fixture(scope="session")
def acceptance_gated(acceptance_reference, acceptance_dataset, acceptance_key):
    """Stage-1 decoder at m=2, n=1 with the repulsion weight at 0.1."""
    train, _ = acceptance_dataset
    hp = TrainHParams(
        learning_rate=2e-4,
        steps=800,
        batch_size=8,
        lambda_repulsion=0.1,
        seed=SEED,
    )
    config = StructureConfig(m=2, n=1)
    t0 = time.perf_counter()
    model, report = train_gated(acceptance_reference["model"], config, acceptance_key, train, hp)
    elapsed = time.perf_counter() - t0
    return {"model": model, "report": report, "seconds": elapsed}


@pytest.fixture(scope="session")
def acceptance_latents(acceptance_reference, acceptance_dataset):
    """100 evaluation latents: 50 encoded held-out images plus 50 Gaussians."""
    _, held = acceptance_dataset
    model = acceptance_reference["model"]
    rng = np.random.default_rng(np.random.SeedSequence((SEED, 31)))
    encoded = model.encode_np(held[:50])
    gauss = rng.standard_normal((50,) + model.arch.latent_shape).astype(np.float32)
    return np.concatenate([encoded, gauss], axis=0)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    outcomes: dict[str, str] = {}
    for status in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::" not in nodeid:
                continue
            name = nodeid.split("::")[-1]
            if status == "passed" and getattr(rep, "when", "call") != "call":
                continue
            # A later failure/error wins over an earlier pass record.
            if outcomes.get(name) in ("failed", "error"):
                continue
            outcomes[name] = status
    if not outcomes:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name in sorted(outcomes):
        status = outcomes[name]
        label = {"passed": "PASS", "skipped": "SKIP"}.get(status, "FAIL")
        terminalreporter.write_line(f"{label}  {name}")
