import hashlib
import json
import os
from pathlib import Path

import numpy as np
import pytest

from gmmtrack.config import RunConfig, apply_overrides
from gmmtrack.workflows import build_models

# filled by the acceptance suite, printed once at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        tr.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def models():
    return build_models(RunConfig())


@pytest.fixture(scope="session")
def scene(models):
    return models[0]


@pytest.fixture(scope="session")
def kin(models):
    return models[1]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TOY_FOREST = ["forest.layer1_images=16", "forest.layer2_images=8", "forest.held_out_images=4",
              "forest.pixels_per_image=300", "forest.layer1_max_depth=10", "forest.layer2_max_depth=10",
              "forest.candidate_offsets=30", "forest.thresholds=10"]


@pytest.fixture(scope="session")
def toy_bank(models):
    """Small forest bank, enough to exercise the full pipeline quickly."""
    from gmmtrack.workflows import train_forest_bank

    cfg = apply_overrides(RunConfig(), TOY_FOREST)
    bank, _ = train_forest_bank(cfg, *models, log=lambda m: None)
    return bank


def _cached_bank(request, cfg: RunConfig, models):
    from gmmtrack.classify import ForestBank
    from gmmtrack.workflows import train_forest_bank

    key = hashlib.sha256(json.dumps({"forest": cfg.to_dict()["forest"], "object": cfg.to_dict()["object"],
                                     "seed": cfg.seed}, sort_keys=True).encode()).hexdigest()[:16]
    override = os.environ.get("GMMTRACK_FORESTS")
    root = Path(override) if override else request.config.cache.mkdir(f"gmmtrack-forests-{key}")
    report_path = root / "report.json"
    if report_path.exists() and (root / "layer1.forest").exists():
        return ForestBank.load(root), json.loads(report_path.read_text())
    bank, report = train_forest_bank(cfg, *models, log=lambda m: print(m, flush=True))
    bank.save(root)
    report_path.write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True))
    return bank, report.as_dict()


@pytest.fixture(scope="session")
def desk_forests(request, models):
    """Desk-scale forest bank (2000 layer-1 images, 1000 per viewpoint) with its held-out report.

    Training takes tens of minutes on one core, so the result is kept in the pytest
    cache keyed by the training configuration; set GMMTRACK_FORESTS to reuse a bank
    trained by ``scripts/train_desk_forests.py``.
    """
    return _cached_bank(request, RunConfig(), models)
