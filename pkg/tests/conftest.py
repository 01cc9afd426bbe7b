"""Shared trained models for the acceptance and trained-model tests.

Training takes a while on one core, so checkpoints are cached in pytest's
cache directory under a key built from the training configuration and the
source of every function that influences training. Delete
``.pytest_cache/d/cevc-models`` (or run with ``--cache-clear``) to retrain.
"""
import hashlib
import inspect
import json
import time
from dataclasses import asdict

import pytest

from cevc import codec, entropy, harness, networks, quantizer, tensor
from cevc.codec import checkpoint_load, checkpoint_save
from cevc.harness import TrainConfig, synthetic_clips, train
from cevc.networks import NetworkConfig

BASE_TRAIN = TrainConfig(lam=0.01, lr=5e-4, epochs=30, train_clips=64, clip_frames=6, val_clips=4, seed=0)
SWEEP_LAMBDAS = (0.003, 0.01, 0.03, 0.1)
SWEEP_TUNE = dict(lr=2e-4, epochs=5, train_clips=64, clip_frames=6, val_clips=4, seed=1)
HELD_OUT_SEED = 777
HELD_OUT_CLIPS = 20
HELD_OUT_FRAMES = 6


def _source_digest():
    h = hashlib.sha256()
    for mod in (tensor, networks, entropy, quantizer):
        h.update(inspect.getsource(mod).encode())
    for fn in (codec.rd_loss, codec.frame_rate_bits, harness.train, harness.pair_loss, harness.evaluate_loss,
               harness.Adam, harness.synthetic_clips, harness.gen_synthetic_video, harness._texture,
               harness._crop, harness.frame_pairs):
        h.update(inspect.getsource(fn).encode())
    return h.hexdigest()


class ModelCache:
    def __init__(self, root):
        self.root = root
        self.source = _source_digest()

    def get(self, name, recipe, build):
        key = hashlib.sha256(json.dumps([self.source, recipe], sort_keys=True).encode()).hexdigest()[:16]
        path = self.root / f"{name}-{key}.ckpt"
        meta_path = self.root / f"{name}-{key}.json"
        if path.exists() and meta_path.exists():
            return checkpoint_load(path), json.loads(meta_path.read_text())
        start = time.process_time()
        model, log = build()
        meta = {"recipe": recipe, "cpu_seconds": time.process_time() - start,
                "best_epoch": log.best_epoch, "epochs": log.epochs}
        checkpoint_save(model, path)
        meta_path.write_text(json.dumps(meta))
        # always hand out the stored float32 weights so cold and warm runs agree
        return checkpoint_load(path), meta


@pytest.fixture(scope="session")
def model_cache(request):
    return ModelCache(request.config.cache.mkdir("cevc-models"))


def _base(cache, conditional):
    net = NetworkConfig(conditional=conditional)
    recipe = {"train": asdict(BASE_TRAIN), "net": net.to_dict()}
    name = "conditional" if conditional else "factorized"
    model, meta = cache.get(name, recipe, lambda: train(BASE_TRAIN, net))
    model.freeze()
    return model, meta


@pytest.fixture(scope="session")
def conditional_model(model_cache):
    return _base(model_cache, True)


@pytest.fixture(scope="session")
def factorized_model(model_cache):
    return _base(model_cache, False)


@pytest.fixture(scope="session")
def sweep_models(model_cache, conditional_model):
    """The conditional model fine-tuned at each sweep lambda for a few epochs."""
    base, base_meta = conditional_model
    out = []
    for lam in SWEEP_LAMBDAS:
        cfg = TrainConfig(lam=lam, **SWEEP_TUNE)
        recipe = {"base": base_meta["recipe"], "tune": asdict(cfg)}

        def build(cfg=cfg):
            start = codec.checkpoint_from_bytes(codec.checkpoint_bytes(base))
            return train(cfg, start.config, model=start)

        model, meta = model_cache.get(f"sweep-{lam}", recipe, build)
        model.freeze()
        out.append((lam, model, meta))
    return out


@pytest.fixture(scope="session")
def held_out():
    return synthetic_clips(HELD_OUT_SEED, HELD_OUT_CLIPS, HELD_OUT_FRAMES, 64)


# one summary line per acceptance criterion, collected by the tests
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
