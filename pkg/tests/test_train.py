import json

import numpy as np
import pytest

from hybridssm.blocks import AttnConfig, HybridConfig, SsmConfig
from hybridssm.data import CorpusSource, PackedBatch, build_synthetic_corpus, load_corpus
from hybridssm.dynamics import ScheduleSpec
from hybridssm.train import TrainConfig, Trainer, TrainingAborted, group_rms, load_train_config
from hybridssm.verify import check_resume

MODEL = HybridConfig(d_model=32, n_layers=1, vocab=257, alloc=(2, 2, 4),
                     ssm=SsmConfig(d_head=8, d_state=8, chunk_size=16), attn=AttnConfig(d_head=8))


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    build_synthetic_corpus(d, 30_000, seed=1)
    return load_corpus(d)


def alternating_source():
    return {"ab": CorpusSource.from_docs("ab", [[97, 98] * 40] * 20)}


def corrupt_batch(rng, rows=2, T=32):
    resets = np.zeros((rows, T), bool)
    resets[:, 0] = True
    return PackedBatch(rng.integers(0, 256, (rows, T)), resets, np.zeros((rows, T), int),
                       np.tile(np.arange(T), (rows, 1)))


def test_skip_guard_leaves_moments_untouched():
    cfg = TrainConfig(model=MODEL, schedule=ScheduleSpec(eta0=1e-2, lam0=0.1, batch=2), seq_len=32, log_every=0)
    tr = Trainer(cfg, alternating_source())
    for _ in range(60):
        assert not tr.train_step()["skipped"]
    before = tr.opt.copy()
    params = {k: v.copy() for k, v in tr.model.arrays().items()}
    rec = tr.train_step(corrupt_batch(np.random.default_rng(0)))
    assert rec["skipped"] and rec["loss"] > 5 * np.median(tr.loss_window)
    assert tr.opt.step == before.step
    assert all(np.array_equal(tr.opt.m[k], before.m[k]) and np.array_equal(tr.opt.v[k], before.v[k]) for k in before.m)
    assert all(np.array_equal(params[k], v) for k, v in tr.model.arrays().items())
    after = tr.train_step()
    assert not after["skipped"] and after["loss"] < 0.1 and tr.opt.step == before.step + 1


def test_metrics_and_checkpoints(tmp_path, corpus):
    cfg = TrainConfig(model=MODEL, schedule=ScheduleSpec(eta0=2e-3, lam0=0.1, warmup_tokens=500, batch=2),
                      seq_len=16, steps=12, log_every=3, ckpt_every=5, out_dir=str(tmp_path))
    Trainer(cfg, corpus).run()
    recs = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in recs] == [3, 6, 9, 12]
    for r in recs:
        assert {"tokens", "loss", "eta", "lambda", "batch", "grad_norm", "param_rms"} <= set(r)
        assert all(np.isfinite(v) for v in r["param_rms"].values())
    assert recs[0]["tokens"] == 3 * 2 * 16 and recs[0]["eta"] < recs[-1]["eta"]
    assert sorted(p.name for p in tmp_path.glob("ckpt_*.json")) == ["ckpt_0000005.json", "ckpt_0000010.json"]
    man = json.loads((tmp_path / "ckpt_0000010.json").read_text())
    assert man["step"] == 10 and man["optimizer"]["step"] == 10


def test_non_finite_loss_aborts_and_saves(tmp_path, corpus):
    cfg = TrainConfig(model=MODEL, schedule=ScheduleSpec(eta0=1e-3, lam0=0.1, batch=2), seq_len=16,
                      out_dir=str(tmp_path))
    tr = Trainer(cfg, corpus)
    tr.train_step()
    tr.model.params["W_unemb"].data[:] = np.nan
    with pytest.warns(RuntimeWarning, match="non-finite"), pytest.raises(TrainingAborted, match="step 1"):
        tr.train_step()
    assert (tmp_path / "aborted.json").exists() and (tmp_path / "aborted.bin").exists()
    back = Trainer.resume(tmp_path / "aborted", corpus)
    assert back.step == 1 and np.isnan(back.model.params["W_unemb"].data).all()


def test_resume_replays_exactly():
    r = check_resume(steps=6)
    assert r.passed, r.detail


def test_config_round_trip(tmp_path):
    cfg = TrainConfig(model=MODEL, schedule=ScheduleSpec(eta0=1e-3, lam0=0.1, stable_tokens=1e5, decay_tokens=1e4),
                      steps=7)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert load_train_config(path) == cfg


def test_parameter_norms_stabilize(tmp_path, corpus):
    """With weight decay every matrix group settles; compare logged norms across the last quarter."""
    steps = 1200
    cfg = TrainConfig(model=MODEL, schedule=ScheduleSpec(eta0=5e-3, lam0=4.0, batch=8), seq_len=32, steps=steps,
                      log_every=10, out_dir=str(tmp_path))
    Trainer(cfg, corpus).run()
    recs = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    tail = [r["param_rms"] for r in recs if r["step"] >= 3 * steps // 4]
    half = len(tail) // 2
    for g in tail[0]:
        assert all(np.isfinite(t[g]) for t in tail)
        if g.startswith("W_") and g != "W_conv1d":
            early = np.mean([t[g] for t in tail[:half]])
            late = np.mean([t[g] for t in tail[half:]])
            assert abs(late / early - 1) < 0.05, g


def test_group_rms():
    out = group_rms({"W_emb": np.full((2, 2), 3.0), "layers.0.mlp.W_up": np.array([[3.0, 4.0]])})
    assert out == {"W_emb": 3.0, "W_up": pytest.approx(np.sqrt(12.5))}
