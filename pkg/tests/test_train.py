import json

import numpy as np
import pytest

from pretextbench import checkpoint
from pretextbench.encoder import EncoderConfig
from pretextbench.errors import ConfigError, DecodeError, NumericAbort
from pretextbench.manifest import DatasetManifest
from pretextbench.objectives import ObjectiveConfig
from pretextbench.synth import SynthSpec, synth_dataset
from pretextbench.train import (
    RunConfig,
    Runner,
    Schedule,
    _teacher_names,
    init_state,
    load_encoder,
    load_split,
    pretrain,
    sample_batch,
)

KINDS = ["contrastive", "byol", "clustering", "barlow_twins", "vicreg"]


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    m = synth_dataset(SynthSpec(n_tracks=10, n_classes=2, duration=10.0, seed=5), root)
    return m, load_split(m, "train")


def _config(kind, out, **obj):
    return RunConfig(
        objective=ObjectiveConfig(kind=kind, n_prototypes=16, **obj),
        encoder=EncoderConfig(hidden_dims=[16]),
        schedule=Schedule(epochs=2, steps_per_epoch=2, batch_pairs=4),
        output_dir=str(out),
    )


def test_sample_batch_shapes_and_independent_slots(tiny):
    _, tracks = tiny
    a, p, meta = sample_batch(tracks[:1], 6, seed=0, step=0)
    assert a.shape == p.shape == (6, 398, 128)
    # a single track drawn six times still yields different pairs
    assert len({(ia, ip) for _, ia, ip in meta}) > 1
    for _, ia, ip in meta:
        assert 400 <= abs(ia - ip) <= 1600
    again = sample_batch(tracks[:1], 6, seed=0, step=0)
    assert np.array_equal(a, again[0]) and meta == again[2]


@pytest.mark.parametrize("kind", KINDS)
def test_pretrain_writes_run_directory(kind, tiny, tmp_path):
    _, tracks = tiny
    res = pretrain(_config(kind, tmp_path), tracks)
    assert res.last_checkpoint == tmp_path / "checkpoints" / "last.ckpt"
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["epoch_0001.ckpt", "last.ckpt"]
    assert len(res.losses) == 4 and np.isfinite(res.losses).all()
    assert [d["epoch"] for d in res.diagnostics] == [-1, 0, 1]
    records = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert records[-1]["type"] == "done"
    assert sum(r["type"] == "step" for r in records) == 4
    params, meta = load_encoder(res.last_checkpoint)
    assert meta["objective"] == kind and meta["global_step"] == 4 and meta["last"]
    assert "encoder/w0" in params
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert RunConfig.from_dict(cfg).objective.kind == kind


def test_keep_all_epoch_checkpoints(tiny, tmp_path):
    cfg = _config("contrastive", tmp_path)
    cfg.keep_epoch_checkpoints = 0
    pretrain(cfg, tiny[1])
    assert len(list((tmp_path / "checkpoints").glob("epoch_*.ckpt"))) == 2


def test_same_seed_same_bytes(tiny, tmp_path):
    a = pretrain(_config("clustering", tmp_path / "a"), tiny[1])
    b = pretrain(_config("clustering", tmp_path / "b"), tiny[1])
    assert a.last_checkpoint.read_bytes() == b.last_checkpoint.read_bytes()
    assert a.losses == b.losses


def test_seed_changes_the_batches(tiny, tmp_path):
    a = _config("contrastive", tmp_path / "a")
    b = _config("contrastive", tmp_path / "b")
    b.seed = 1
    assert pretrain(a, tiny[1]).losses != pretrain(b, tiny[1]).losses


@pytest.mark.parametrize("kind", ["byol", "clustering"])
def test_backward_leaves_teacher_untouched(kind, tiny, tmp_path):
    state = init_state(_config(kind, tmp_path), tiny[1])
    runner = Runner(state)
    before = checkpoint.tensors_hash({k: v.data for k, v in state.teacher.params.items()})
    a, p, _ = sample_batch(tiny[1], 4, 0, 0)
    loss, _ = runner.loss(a, p)
    loss.backward()
    assert checkpoint.tensors_hash({k: v.data for k, v in state.teacher.params.items()}) == before
    assert all(v.grad is None for v in state.teacher.params.values())
    assert any(state.student[k].grad is not None for k in _teacher_names(state.student) if "running" not in k)


def test_teacher_tracks_student_with_zero_momentum(tiny, tmp_path):
    cfg = _config("byol", tmp_path, ema_momentum=0.0)
    cfg.schedule.epochs = 1
    state = init_state(cfg, tiny[1])
    runner = Runner(state)
    a, p, _ = sample_batch(tiny[1], 4, 0, 0)
    loss, extras = runner.loss(a, p)
    loss.backward()
    state.optimizer.step()
    runner.after_step(extras)
    for k, v in state.teacher.params.items():
        assert np.array_equal(v.data, state.student[k].data)


def test_huge_learning_rate_aborts(tiny, tmp_path):
    cfg = _config("barlow_twins", tmp_path)
    cfg.optimizer.lr = 1e30
    with pytest.raises(NumericAbort) as e:
        pretrain(cfg, tiny[1])
    assert e.value.objective == "barlow_twins"
    last = json.loads((tmp_path / "log.jsonl").read_text().splitlines()[-1])
    assert last["type"] == "abort"


@pytest.mark.parametrize(
    "mutate",
    [
        lambda c: setattr(c.schedule, "batch_pairs", 1),
        lambda c: setattr(c.optimizer, "lr", 0.0),
        lambda c: setattr(c.objective, "kind", "simsiam"),
        lambda c: setattr(c.objective, "ema_momentum", 1.5),
        lambda c: setattr(c.data, "val_fraction", 1.0),
        lambda c: setattr(c.encoder, "time_pool", 0),
    ],
)
def test_invalid_configs(mutate, tmp_path):
    cfg = _config("byol", tmp_path)
    mutate(cfg)
    with pytest.raises(ConfigError):
        cfg.validate()


def test_from_dict_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"objectve": {}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"objective": {"temprature": 0.1}})
    d = RunConfig().to_dict()
    assert RunConfig.from_dict(d) == RunConfig()


def test_missing_audio_names_the_track(tiny, tmp_path):
    m, _ = tiny
    broken = DatasetManifest(m.label_names, m.entries[:2], m.dataset, tmp_path)
    with pytest.raises(DecodeError, match=m.entries[0].track_id):
        load_split(broken, m.entries[0].split)
