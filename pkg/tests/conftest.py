import json
import os
import sys

import pytest
from hypothesis import settings

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

settings.register_profile("suite", deadline=None, max_examples=25,
                          derandomize=True)
settings.load_profile("suite")


@pytest.fixture(scope="session")
def make_bundle(tmp_path_factory):
    """Session-cached synthetic dataset factory: make_bundle('C3') etc."""
    from pngnn.synth import SynthConfig, generate

    cache: dict[tuple, tuple] = {}

    def factory(structure: str, seed: int = 0, **kw):
        key = (structure, seed, tuple(sorted(kw.items())))
        if key not in cache:
            cache[key] = generate(SynthConfig(structure=structure,
                                              seed=seed, **kw))
        return cache[key]

    return factory


@pytest.fixture(scope="session")
def train_run(make_bundle, tmp_path_factory):
    """Session-cached training-run factory shared across test modules.

    train_run(structure, model, seed, **config_overrides) returns
    (test_metrics_record, train_minutes). Heavy — used by the acceptance
    criteria that need trained models.
    """
    from pngnn.training import TrainConfig, train, evaluate_checkpoint

    root = os.path.join(os.path.dirname(__file__), "..", "configs",
                        "synthetic.json")
    with open(root) as fh:
        base = json.load(fh)
    cache: dict[tuple, tuple] = {}

    def factory(structure: str, model: str, seed: int, **overrides):
        import time
        key = (structure, model, seed, tuple(sorted(
            (k, json.dumps(v, sort_keys=True)) for k, v in overrides.items())))
        if key not in cache:
            bundle, _ = make_bundle(structure)
            cfg_json = {**base, "model": model, "seed": seed}
            for k, v in overrides.items():
                if isinstance(v, dict) and isinstance(cfg_json.get(k), dict):
                    cfg_json[k] = {**cfg_json[k], **v}
                else:
                    cfg_json[k] = v
            cfg = TrainConfig.from_json(cfg_json)
            out = tmp_path_factory.mktemp(
                f"run_{structure}_{model}_s{seed}")
            t0 = time.time()
            result = train(cfg, bundle, str(out))
            record, _ = evaluate_checkpoint(result.checkpoint_path,
                                            bundle, "test")
            cache[key] = (record, (time.time() - t0) / 60.0)
        return cache[key]

    return factory
