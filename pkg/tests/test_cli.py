import csv
import json
import subprocess
import sys

import pytest

from hybridssm.blocks import AttnConfig, HybridConfig, SsmConfig
from hybridssm.cli import main
from hybridssm.dynamics import ScheduleSpec
from hybridssm.mup import SweepRecord
from hybridssm.train import TrainConfig


@pytest.fixture
def train_config(tmp_path):
    model = HybridConfig(d_model=32, n_layers=1, vocab=257, alloc=(2, 2, 4),
                         ssm=SsmConfig(d_head=8, d_state=8, chunk_size=8), attn=AttnConfig(d_head=8))
    cfg = TrainConfig(model=model, schedule=ScheduleSpec(eta0=2e-3, lam0=0.1, batch=2), seq_len=16, log_every=2,
                      ckpt_every=3)
    path = tmp_path / "train.json"
    path.write_text(json.dumps(cfg.to_dict()))
    return path


def test_train_and_resume(tmp_path, train_config):
    corpus, out = tmp_path / "corpus", tmp_path / "run"
    assert main(["train", "--config", str(train_config), "--corpus", str(corpus), "--out", str(out),
                 "--steps", "4", "--synthetic", "6000"]) == 0
    assert (out / "final.json").exists() and (out / "ckpt_0000003.bin").exists()
    assert main(["train", "--config", str(train_config), "--corpus", str(corpus), "--out", str(out),
                 "--steps", "6", "--resume", str(out / "ckpt_0000003")]) == 0
    steps = [json.loads(l)["step"] for l in (out / "metrics.jsonl").read_text().splitlines()]
    assert steps == [2, 4, 4, 6]
    assert json.loads((out / "final.json").read_text())["step"] == 6


def test_verify_subset(capsys):
    assert main(["verify", "--only", "schedules", "tuner"]) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") == 2 and "2/2 checks passed" in out
    with pytest.raises(SystemExit):
        main(["verify", "--only", "nonsense"])


def test_sweep_stages_chain(tmp_path):
    s0, s1 = tmp_path / "s0.jsonl", tmp_path / "s1.jsonl"
    assert main(["sweep", "--oracle", "bowl", "--out", str(s0), "--centers", "m_x=1,m_z=-1"]) == 0
    recs = [SweepRecord.from_json(l) for l in s0.read_text().splitlines()]
    assert [r.multiplier for r in recs] == ["m_x", "m_z"] and all(r.p == 2.0 for r in recs)
    assert main(["sweep", "--oracle", "bowl", "--out", str(s1), "--stage", str(s0),
                 "--centers", "m_x=1,m_z=-1", "--coarse-stages", "1"]) == 0
    side = json.loads((tmp_path / "s1.mults.json").read_text())
    assert side["stage"] == 1 and side["p"] == pytest.approx(2 ** 0.5)


def test_stability_outputs(tmp_path, capsys):
    assert main(["stability", "--out", str(tmp_path), "--n-eta", "200", "--steps", "200", "--alphas", "1,0.3"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["eta_star"] > 0 and set(summary["amplitude_ratio"]) == {"1", "0.3"}
    rows = list(csv.reader(open(tmp_path / "eigen_scan.csv")))
    assert rows[0] == ["eta", "alpha=1", "alpha=0.3"] and len(rows) == 201
    traj = list(csv.reader(open(tmp_path / "trajectory.csv")))
    assert traj[0] == ["alpha", "step", "dt_raw", "A_log", "loss"]


def test_toy_and_throughput(capsys):
    assert main(["toy", "--steps", "20000", "--seeds", "3"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["exact"]["x_inf"] == pytest.approx(0.05 * 2.0 / 0.15)
    assert "second_moment_se" in res["simulated"]
    assert main(["throughput", "--global-batch", "64", "--micro-batch", "4", "--t-micro", "1", "--n-dp", "1,2,32"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert rows[0]["throughput"] == 4.0 and rows[1]["throughput"] == 8.0 and "error" in rows[2]


def test_schedule_csv(tmp_path):
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps(ScheduleSpec(eta0=1e-3, lam0=0.1, power_mode="EPS", t0=100).to_dict()))
    out = tmp_path / "s.csv"
    assert main(["schedule", "--spec", str(spec), "--until", "1600", "--points", "17", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out, encoding="utf-8")))
    assert list(rows[0]) == ["tokens", "η", "λ", "b", "η_eff", "λ_eff"]
    assert float(rows[-1]["η"]) == pytest.approx(5e-4) and float(rows[-1]["λ"]) == pytest.approx(0.05)
    assert len({r["λ_eff"] for r in rows[1:]}) == 1


def test_pack_from_text(tmp_path):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    a.write_text("Year 2023, again.")
    b.write_text("hello")
    out = tmp_path / "digests.jsonl"
    assert main(["pack", "--corpus", str(tmp_path / "c"), "--inputs", str(a), str(b), "--batches", "3",
                 "--batch", "1", "--seq-len", "8", "--out", str(out)]) == 0
    man = json.loads((tmp_path / "c" / "text.json").read_text())
    assert man["n_docs"] == 2 and man["n_tokens"] == 17 + 1 + 5 + 1
    lines = [json.loads(l) for l in out.read_text().splitlines()]
    assert [l["batch"] for l in lines] == [0, 1, 2] and len({l["digest"] for l in lines}) == 3


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "hybridssm", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "stability" in r.stdout
