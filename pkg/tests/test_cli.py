import csv
import json
import statistics

import numpy as np
import pytest

from ebmpose.cli import (
    MetricsRecord,
    RunConfig,
    format_config,
    parse_config,
    read_metrics,
    run,
    summarize,
    write_csv,
    write_metrics,
)
from ebmpose.errors import ConfigError, ParseError
from ebmpose.geom import PriorConfig
from ebmpose.energynet import TrainConfig

FAST = "pipeline.K = 4\nprior.level = 0\nprior.n_inplane = 2\n"


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """A workdir with a small dataset, a held-out set and an untrained checkpoint."""
    d = tmp_path_factory.mktemp("work")
    (d / "fast.cfg").write_text(FAST)
    assert run(["--workdir", str(d), "gen-data", "--n", "6", "--seed", "3", "--out", "train.jsonl"]) == 0
    assert run(["--workdir", str(d), "gen-data", "--n", "4", "--seed", "3", "--stream", "1", "--out", "test.jsonl"]) == 0
    assert run(["--workdir", str(d), "train", "--data", "train.jsonl", "--object", "box:20,10,6", "--steps", "0", "--out", "m.ckpt"]) == 0
    return d


def test_gen_data_byte_identical(tmp_path):
    for name in ("a.jsonl", "b.jsonl"):
        assert run(["--workdir", str(tmp_path), "gen-data", "--n", "100", "--seed", "7", "--out", name]) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert run(["--workdir", str(tmp_path), "gen-data", "--n", "100", "--seed", "8", "--out", "c.jsonl"]) == 0
    assert (tmp_path / "a.jsonl").read_bytes() != (tmp_path / "c.jsonl").read_bytes()


# --- config -------------------------------------------------------------------


def test_config_roundtrip():
    cfg = RunConfig(seed=5, train=TrainConfig(batch_size=32, learning_rate=3e-4, mask_prob=0.25), prior=PriorConfig(level=2, n_inplane=3))
    cfg.pipeline = {"K": 8, "t0_est": 0.8, "prefilter": False, "rank_t": 0.05}
    text = format_config(cfg)
    back = parse_config(text)
    assert format_config(back) == text
    assert back.train == cfg.train and back.prior == cfg.prior and back.seed == 5
    pc = back.pipeline_config()
    assert pc.K == 8 and pc.t0_est == 0.8 and not pc.stages.prefilter and pc.rank_t == 0.05
    assert parse_config(format_config(RunConfig())).pipeline_config() == RunConfig().pipeline_config()


def test_config_comments_and_blank_lines():
    cfg = parse_config("# header\n\nseed = 9  # master seed\ntrain.n_steps = 10\n")
    assert cfg.seed == 9 and cfg.train.n_steps == 10


@pytest.mark.parametrize(
    "text, line",
    [
        ("seed = 1\ntrain.nsteps = 5\n", 2),
        ("bogus.key = 1\n", 1),
        ("seed = 1\n\njust words\n", 3),
        ("seed = x\n", 1),
    ],
)
def test_config_unknown_keys_rejected(text, line):
    with pytest.raises(ParseError, match=f"line {line}"):
        parse_config(text)


def test_config_invalid_values():
    with pytest.raises(ConfigError):
        parse_config("train.mask_prob = 0.9\n")


# --- metrics ------------------------------------------------------------------


def make_records(n=25, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        out.append(
            MetricsRecord(
                method=["ours", "grid-match"][i % 2],
                object_id=["box_a", "box_b"][(i // 2) % 2],
                index=i,
                error=float(rng.gamma(2.0, 0.7)),
                metric="ADD-S",
                s2=float(rng.random()),
                seconds=0.01 * i,
                n_accepted_steps=i,
                n_rhs_evals=7 * i,
                energies=[float(v) for v in rng.normal(size=3)],
                pose=[float(v) for v in rng.normal(size=12)],
            )
        )
    return out


def test_metrics_roundtrip(tmp_path):
    recs = make_records()
    write_metrics(recs, tmp_path / "m.jsonl")
    assert read_metrics(tmp_path / "m.jsonl") == recs


def test_metrics_parse_errors(tmp_path):
    recs = make_records(4)
    write_metrics(recs, tmp_path / "m.jsonl")
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    (tmp_path / "bad.jsonl").write_text("\n".join(lines[:2] + [lines[2][:30]] + lines[3:]) + "\n")
    with pytest.raises(ParseError, match="line 3"):
        read_metrics(tmp_path / "bad.jsonl")
    (tmp_path / "extra.jsonl").write_text(lines[0] + "\n" + lines[1].replace('"error"', '"zzz": 1, "error"') + "\n")
    with pytest.raises(ParseError, match="line 2"):
        read_metrics(tmp_path / "extra.jsonl")


def test_summary_recomputable_from_jsonl(tmp_path):
    write_metrics(make_records(41, seed=3), tmp_path / "m.jsonl")
    write_csv(summarize(read_metrics(tmp_path / "m.jsonl")), tmp_path / "s.csv")
    # independent aggregation with the json and statistics modules
    groups = {}
    for line in (tmp_path / "m.jsonl").read_text().splitlines():
        r = json.loads(line)
        groups.setdefault((r["method"], r["object_id"], r["metric"]), []).append(r["error"])
    with open(tmp_path / "s.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(groups)
    for row in rows:
        errs = groups[(row["method"], row["object_id"], row["metric"])]
        assert int(row["n"]) == len(errs)
        assert abs(float(row["median"]) - statistics.median(errs)) <= 1e-9
        assert abs(float(row["mean"]) - statistics.fmean(errs)) <= 1e-9


# --- end-to-end wiring --------------------------------------------------------


def test_eval_untrained_checkpoint(work):
    rc = run(["--workdir", str(work), "--config", "fast.cfg", "eval", "--data", "test.jsonl", "--object", "box:20,10,6", "--ckpt", "m.ckpt", "--limit", "2"])
    assert rc == 0
    recs = read_metrics(work / "results" / "metrics_ours.jsonl")
    assert len(recs) == 2
    assert all(r.metric == "ADD-S" and np.isfinite(r.error) and r.n_rhs_evals > 0 for r in recs)
    with open(work / "results" / "summary_ours.csv") as fh:
        assert list(csv.DictReader(fh))[0]["method"] == "ours"


@pytest.mark.parametrize("method", ["grid-match", "icp-global", "icp-partial"])
def test_eval_baselines(work, method):
    rc = run(["--workdir", str(work), "eval", "--data", "test.jsonl", "--object", "box:20,10,6", "--method", method, "--limit", "2"])
    assert rc == 0
    recs = read_metrics(work / "results" / f"metrics_{method}.jsonl")
    assert len(recs) == 2 and all(np.isfinite(r.error) for r in recs)


def test_train_regression_and_eval(work):
    assert run(["--workdir", str(work), "train", "--data", "train.jsonl", "--object", "box:20,10,6", "--method", "regression", "--steps", "2", "--out", "r.ckpt"]) == 0
    assert (work / "r.ckpt.loss.csv").read_text().count("\n") == 3
    assert run(["--workdir", str(work), "eval", "--data", "test.jsonl", "--object", "box:20,10,6", "--method", "regression", "--ckpt", "r.ckpt"]) == 0


def test_ablate_t0_rows(work):
    rc = run(["--workdir", str(work), "--config", "fast.cfg", "ablate", "--data", "test.jsonl", "--object", "box:20,10,6", "--ckpt", "m.ckpt", "--sweep", "t0", "--values", "0.4,1.0", "--limit", "1", "--out", "t0.csv"])
    assert rc == 0
    with open(work / "t0.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["t0"]) for r in rows] == [0.4, 1.0]


def test_track_and_uncertainty(work):
    base = ["--workdir", str(work), "--config", "fast.cfg"]
    assert run(base + ["track", "--object", "box:20,10,6", "--ckpt", "m.ckpt", "--trajectories", "1", "--steps", "2"]) == 0
    assert (work / "tracking.csv").exists()
    assert run(base + ["uncertainty", "--data", "test.jsonl", "--object", "box:20,10,6", "--ckpt", "m.ckpt", "--sets", "1", "--set-size", "2"]) == 0
    assert (work / "uncertainty.csv").exists()


def test_exit_codes(work, capsys):
    with pytest.raises(SystemExit) as exc:
        run(["eval"])
    assert exc.value.code == 2
    (work / "bad.cfg").write_text("train.nope = 1\n")
    assert run(["--workdir", str(work), "--config", "bad.cfg", "gen-data", "--n", "1"]) == 2
    assert run(["--workdir", str(work), "eval", "--data", "test.jsonl", "--object", "box:20,10,6"]) == 2
    assert run(["--workdir", str(work), "eval", "--data", "missing.jsonl", "--object", "box:20,10,6", "--method", "grid-match"]) == 1
    (work / "junk.ckpt").write_bytes(b"ebmpose-ckpt v1\n{}\n")
    assert run(["--workdir", str(work), "eval", "--data", "test.jsonl", "--object", "box:20,10,6", "--ckpt", "junk.ckpt"]) == 1
    assert run(["--workdir", str(work), "gen-data", "--n", "1", "--object", "box:1,2"]) == 2
    assert "ebmpose: error:" in capsys.readouterr().err
