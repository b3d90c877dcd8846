import hashlib
import io
import json

import pytest

from oilad import cli, config
from oilad.data import load_jsonl
from oilad.errors import ConfigError
from oilad.evaluation import trajectory_verdict
from oilad.features import read_features_csv
from oilad.iforest import IsoForest
from oilad.policy import load_checkpoint


class TestResolve:
    def test_defaults(self):
        cfg = config.resolve({}, environ={})
        assert cfg["env"]["name"] == "grid15"
        assert cfg["seed"] == 0 and cfg["train"]["seed"] == 0

    def test_preset_then_file_then_override(self):
        cfg = config.resolve({"preset": "grid5", "detect": {"w_q": 4}}, ["detect.w_q=5"], environ={})
        assert cfg["env"]["name"] == "grid5"
        assert cfg["detect"]["w_q"] == 5
        assert cfg["detect"]["w_v"] == 3

    def test_seed_resolution(self):
        assert config.resolve({}, environ={"OILAD_SEED": "4"})["model"]["seed"] == 4
        cfg = config.resolve({"seed": 2, "data": {"seed": 9}}, environ={"OILAD_SEED": "4"})
        assert (cfg["data"]["seed"], cfg["model"]["seed"]) == (9, 2)
        assert config.resolve({}, ["global.seed=6"], environ={})["detect"]["seed"] == 6

    def test_override_values_parse_as_toml(self):
        assert config.parse_override("train.lr_action=[1e-4, 1e-3]") == ("train", "lr_action", [1e-4, 1e-3])
        assert config.parse_override("detect.rule=fraction") == ("detect", "rule", "fraction")
        assert config.train_config(config.resolve({}, ["train.lr_action=[1e-4, 1e-3]"],
                                                  environ={})).lr_action == (1e-4, 1e-3)

    @pytest.mark.parametrize("doc,overrides", [
        ({"preset": "nope"}, []),
        ({"bogus": {}}, []),
        ({"data": {"bogus": 1}}, []),
        ({}, ["nodot=1"]),
        ({}, ["detect.contamination=0.6"]),
        ({"env": {"discount": 1.0}}, []),
    ])
    def test_errors(self, doc, overrides):
        with pytest.raises(ConfigError):
            config.resolve(doc, overrides, environ={})

    def test_bad_env_seed(self):
        with pytest.raises(ConfigError):
            config.resolve({}, environ={"OILAD_SEED": "x"})

    def test_load_file(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('preset = "taxi"\n[train]\niterations = 3\n')
        cfg = config.load(p, environ={})
        assert cfg["env"]["name"] == "taxi" and cfg["train"]["iterations"] == 3
        with pytest.raises(ConfigError):
            config.load(tmp_path / "missing.toml")
        p.write_text("[train\n")
        with pytest.raises(ConfigError):
            config.load(p)

    def test_snapshot_is_canonical(self):
        a = config.resolve({}, environ={})
        b = config.resolve({}, environ={})
        assert config.snapshot(a) == config.snapshot(b)

    def test_presets_resolve(self):
        for name in config.PRESETS:
            cfg = config.resolve({"preset": name}, environ={})
            config.train_config(cfg)
            config.window_config(cfg)


RUN_TOML = """\
preset = "grid5"
seed = 3

[data]
n_train = 60
n_test_normal = 50
n_detour = 12
n_perturbed = 12
test_size = 30
resamples = 2

[model]
embed_dim = 16
max_seq_len = 32

[train]
iterations = 15
batch_size = 8
monotonic_batch_size = 8

[detect]
n_trees = 15
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.toml"
    cfg.write_text(RUN_TOML)
    paths = {k: str(root / v) for k, v in [("cfg", "run.toml"), ("train", "train.jsonl"),
                                           ("test", "test.jsonl"), ("model", "model.ckpt"),
                                           ("forest", "forest.json"), ("root", "")]}

    def call(*argv):
        return cli.main([*argv, "--config", paths["cfg"]])

    assert call("gen", "--split", "train", "--out", paths["train"]) == 0
    assert call("gen", "--split", "test", "--out", paths["test"]) == 0
    assert call("train", "--data", paths["train"], "--out", paths["model"]) == 0
    assert call("fit-boundary", "--model", paths["model"], "--data", paths["train"],
                "--out", paths["forest"]) == 0
    paths["call"] = call
    return paths


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


class TestCommands:
    def test_generated_files(self, run):
        train = load_jsonl(run["train"])
        test = load_jsonl(run["test"])
        assert len(train) == 60 and not any(t.is_anomaly for t in train)
        assert len(test) == 50 + 12 + 12
        assert load_checkpoint(run["model"]).cfg.embed_dim == 16
        assert IsoForest.load(run["forest"]).n_trees == 15

    def test_manifest(self, run):
        doc = json.loads(open(run["model"] + ".manifest.json").read())
        assert doc["command"] == "train"
        assert doc["outputs"][run["model"]] == sha(run["model"])
        assert doc["inputs"]["data"]["sha256"] == sha(run["train"])
        assert doc["seeds"] == {"data": 3, "model": 3, "train": 3, "detect": 3}
        assert doc["config"]["preset"] == "grid5"

    def test_features(self, run, tmp_path):
        out = tmp_path / "f.csv"
        assert run["call"]("features", "--model", run["model"], "--data", run["test"], "--out", str(out)) == 0
        pts = read_features_csv(out)
        assert {p.label for p in pts} >= {"normal"} and all(p.f_ao <= 0 for p in pts)

    def test_score_and_follow_agree(self, run, tmp_path, capsys, monkeypatch):
        out = tmp_path / "s.jsonl"
        assert run["call"]("score", "--model", run["model"], "--forest", run["forest"],
                           "--data", run["test"], "--out", str(out)) == 0
        batch = {r["id"]: r for r in map(json.loads, out.read_text().splitlines())}
        test = load_jsonl(run["test"])
        lines = []
        for t in list(test)[:8]:
            lines += [json.dumps({"id": t.id, "s": list(map(float, s)), "a": int(a)}) for s, a in t.steps]
            lines.append(json.dumps({"id": t.id, "end": True}))
        monkeypatch.setattr("sys.stdin", io.StringIO("\n".join(lines) + "\n"))
        capsys.readouterr()
        assert run["call"]("score", "--model", run["model"], "--forest", run["forest"], "--follow") == 0
        records = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
        verdicts = {r["id"]: r for r in records if "verdict" in r}
        assert len(verdicts) == 8
        for tid, r in verdicts.items():
            assert r["verdict"] == batch[tid]["verdict"]
            assert r["windows"] == batch[tid]["windows"]
            # short trajectories get their single fallback window only at the end
            flags = [w["anomalous"] for w in records if w.get("id") == tid and "score" in w]
            if flags:
                assert sum(flags) == batch[tid]["flagged"]
                assert (r["verdict"] == "anomalous") == trajectory_verdict(flags)

    def test_eval(self, run, tmp_path, capsys):
        out = tmp_path / "r.json"
        assert run["call"]("eval", "--model", run["model"], "--forest", run["forest"],
                           "--data", run["test"], "--out", str(out)) == 0
        rep = json.loads(out.read_text())
        assert set(rep["classes"]) == {"policy_anomaly", "perturbed_anomaly"}
        assert (tmp_path / "r.json.csv").read_text().startswith("class,recall,precision,f1")
        assert "F1=" in capsys.readouterr().out

    def test_sweep(self, run, tmp_path):
        out = tmp_path / "sweep.csv"
        assert run["call"]("sweep", "--model", run["model"], "--data", run["train"], "--test", run["test"],
                           "--sizes", "2,4", "--vary", "w_v", "--out", str(out)) == 0
        rows = out.read_text().splitlines()
        assert rows[0].startswith("w_q,w_v,") and len(rows) == 3
        assert run["call"]("sweep", "--model", run["model"], "--data", run["train"], "--test", run["test"],
                           "--out", str(out)) == 2

    def test_ablate(self, run, tmp_path):
        out = tmp_path / "abl.csv"
        assert run["call"]("ablate", "--data", run["train"], "--test", run["test"], "--out", str(out),
                           "--set", "train.iterations=3") == 0
        assert [r.split(",")[0] for r in out.read_text().splitlines()] == ["objective", "Obj1", "Obj2", "Obj1+2"]

    def test_verify_values(self, run, tmp_path):
        out = tmp_path / "v.json"
        assert run["call"]("verify-values", "--model", run["model"], "--data", run["test"],
                           "--episodes", "50", "--out", str(out)) == 0
        doc = json.loads(out.read_text())
        assert set(doc) == {"expert", "anomalous"}
        assert -1 <= doc["expert"]["scc"] <= 1

    def test_check_theorem(self, tmp_path, capsys):
        out = tmp_path / "th.json"
        assert cli.main(["check-theorem", "--set", "env.name=grid15", "--out", str(out)]) == 0
        rows = json.loads(out.read_text())
        assert len(rows) == 6 and all(r["condition"] and r["closed_form"] for r in rows)

    @pytest.mark.parametrize("kind", ["latent", "values"])
    def test_plot_data(self, run, tmp_path, kind):
        out = tmp_path / f"{kind}.csv"
        assert run["call"]("plot-data", kind, "--model", run["model"], "--data", run["test"],
                           "--out", str(out)) == 0
        assert len(out.read_text().splitlines()) > 10


class TestExitCodes:
    def test_missing_config(self, tmp_path, capsys):
        assert cli.main(["gen", "--out", str(tmp_path / "x"), "--config", str(tmp_path / "no.toml")]) == 2
        assert "ConfigError" in capsys.readouterr().err

    def test_bad_override(self, tmp_path):
        assert cli.main(["gen", "--out", str(tmp_path / "x"), "--set", "data.nope=1"]) == 2

    def test_missing_model(self, tmp_path):
        assert cli.main(["features", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "f")]) == 2

    def test_corrupt_checkpoint(self, run, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage")
        assert run["call"]("features", "--model", str(bad), "--data", run["test"],
                           "--out", str(tmp_path / "f")) == 4

    def test_forest_version(self, run, tmp_path):
        doc = json.loads(open(run["forest"]).read())
        doc["oilad_forest_version"] = 99
        bad = tmp_path / "f.json"
        bad.write_text(json.dumps(doc))
        assert run["call"]("score", "--model", run["model"], "--forest", str(bad),
                           "--data", run["test"]) == 3

    def test_bad_stream_line(self, run, monkeypatch):
        monkeypatch.setattr("sys.stdin", io.StringIO("not json\n"))
        assert run["call"]("score", "--model", run["model"], "--forest", run["forest"], "--follow") == 2

    def test_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["gen"])
        assert exc.value.code == 2
