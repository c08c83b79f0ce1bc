"""Training loop, evaluation reports, the ablation sweep, and the command line."""
import csv
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from triplenet import cli, trainer
from triplenet.netgraph import ConfigError, NetworkConfig, build_network, load_checkpoint, save_checkpoint
from triplenet.synthdata import GenConfig, generate_dataset, load_dataset, save_dataset

NET = dict(input_size=[32, 32], num_classes=2, encoder_levels=[[8, 2], [8, 4], [8, 8], [8, 16]],
           decoder_levels=3, decoder_channels=8, ic_channels=4)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    gen = GenConfig(image_size=(32, 32), num_classes=2, min_size=0.25)
    save_dataset(generate_dataset(8, 0, gen), d, gen.class_names())
    return d


def write_config(path, data_dir, **train):
    tr = {"iterations": 6, "lr_stages": [[0.5, 0.01], [0.5, 0.001]], "batch_size": 4, "log_interval": 2}
    tr.update(train)
    cfg = {"schema_version": 1, "seed": 3, "network": NET, "data": {"train": str(data_dir)},
           "train": tr, "output_dir": str(path.parent / "run")}
    path.write_text(json.dumps(cfg))
    return path


class TestSchedule:
    def test_default_desk_schedule(self):
        st = trainer.TrainSettings()
        assert [(s.iterations, s.lr) for s in st.lr_stages] == [(1200, 1e-3), (500, 1e-4), (300, 1e-5)]
        assert st.lr_at(1) == 1e-3 and st.lr_at(1200) == 1e-3
        assert st.lr_at(1201) == 1e-4 and st.lr_at(1700) == 1e-4
        assert st.lr_at(1701) == 1e-5 and st.lr_at(2000) == 1e-5

    def test_stages_must_partition_iterations(self):
        st = trainer.TrainSettings(iterations=10, lr_stages=[trainer.LRStage(4, 0.1)])
        with pytest.raises(ConfigError, match="cover 4 iterations"):
            st.validate()

    def test_logged_lr_follows_schedule(self, data_dir, tmp_path):
        cfg = trainer.RunConfig.load(write_config(tmp_path / "c.json", data_dir, log_interval=1))
        _, mlog = trainer.train(cfg)
        assert [r["iteration"] for r in mlog.records] == list(range(1, 7))
        assert [r["lr"] for r in mlog.records] == [0.01] * 3 + [0.001] * 3
        assert all(np.isfinite(v) for r in mlog.records for v in r.values())


class TestConfigFile:
    def test_round_trip(self, data_dir, tmp_path):
        cfg = trainer.RunConfig.load(write_config(tmp_path / "c.json", data_dir))
        again = trainer.RunConfig.from_dict(cfg.to_dict())
        assert again == cfg

    @pytest.mark.parametrize("patch,msg", [
        ({"schema_version": 2}, "schema_version"),
        ({"optimizer": "adam"}, "unknown config keys"),
        ({"train": {"iterations": 4, "lr_stages": [[0.5, 0.1], [0.4, 0.01]]}}, "sum to 1"),
        ({"train": {"iterations": 4, "momentun": 0.9}}, "bad config"),
    ])
    def test_invalid(self, data_dir, tmp_path, patch, msg):
        p = write_config(tmp_path / "c.json", data_dir)
        d = json.loads(p.read_text())
        d.update(patch)
        p.write_text(json.dumps(d))
        with pytest.raises(ConfigError, match=msg):
            trainer.RunConfig.load(p)

    @pytest.mark.parametrize("name", ["desk.json", "ablate_small.json"])
    def test_shipped_configs_parse(self, name):
        cfg = trainer.RunConfig.load(Path(__file__).parents[1] / "configs" / name)
        cfg.network.validate()
        cfg.train.validate()

    def test_relative_paths_resolve_against_config(self, tmp_path):
        p = tmp_path / "sub" / "c.json"
        p.parent.mkdir()
        p.write_text(json.dumps({"schema_version": 1, "data": {"train": "d"}, "output_dir": "o"}))
        cfg = trainer.RunConfig.load(p)
        assert cfg.train_dir == str(p.parent / "d") and cfg.output_dir == str(p.parent / "o")


class TestTraining:
    def test_determinism_bit_identical(self, data_dir, tmp_path):
        cfg = trainer.RunConfig.load(write_config(tmp_path / "c.json", data_dir))
        trainer.train(cfg, out_dir=tmp_path / "a")
        trainer.train(cfg, out_dir=tmp_path / "b")
        for name in ("checkpoint.tnck", "metrics.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_interval_checkpoints(self, data_dir, tmp_path):
        cfg = trainer.RunConfig.load(write_config(tmp_path / "c.json", data_dir, checkpoint_interval=3))
        trainer.train(cfg, out_dir=tmp_path / "r")
        assert sorted(p.name for p in (tmp_path / "r").glob("*.tnck")) == [
            "checkpoint.tnck", "checkpoint_000003.tnck", "checkpoint_000006.tnck"]

    def test_numerical_abort_names_term_and_keeps_checkpoint(self, data_dir, tmp_path):
        p = write_config(tmp_path / "c.json", data_dir, iterations=10, lr_stages=[[1.0, 1e3]],
                         checkpoint_interval=2)
        cfg = trainer.RunConfig.load(p)
        with pytest.raises(trainer.NumericalAbort) as ei:
            trainer.train(cfg, out_dir=tmp_path / "r")
        assert ei.value.term in {"det_cls", "det_loc", "total"} or ei.value.term.startswith("seg")
        assert (tmp_path / "r" / "checkpoint_000002.tnck").exists()
        assert not (tmp_path / "r" / "checkpoint.tnck").exists()
        meta = json.loads((tmp_path / "r" / "metrics.json").read_text())
        assert meta["final"]["aborted"]["iteration"] == ei.value.iteration

    def test_flip_augmentation_runs_and_is_deterministic(self, data_dir, tmp_path):
        cfg = trainer.RunConfig.load(write_config(tmp_path / "c.json", data_dir, flip=True))
        a = trainer.train(cfg)[1].records
        b = trainer.train(cfg)[1].records
        assert a == b


class TestEvaluate:
    def test_untrained_has_zero_map(self, data_dir):
        samples, names = load_dataset(data_dir)
        report, preds = trainer.evaluate(build_network(NetworkConfig.from_dict(NET)), samples, names)
        assert report["mAP"] == 0.0 and all(v == [] for v in preds.values())

    def test_class_count_mismatch(self, data_dir):
        samples, _ = load_dataset(data_dir)
        with pytest.raises(ConfigError, match="classes"):
            trainer.evaluate(build_network(NetworkConfig.from_dict(NET)), samples, ["a", "b", "c"])

    def test_checkpoint_round_trip_report_identical(self, data_dir, tmp_path):
        cfg = trainer.RunConfig.load(write_config(tmp_path / "c.json", data_dir))
        net, _ = trainer.train(cfg)
        samples, names = load_dataset(data_dir)
        save_checkpoint(net, tmp_path / "m.tnck")
        r1, _ = trainer.evaluate(net, samples, names)
        r2, _ = trainer.evaluate(load_checkpoint(tmp_path / "m.tnck"), samples, names)
        assert json.dumps(r1, sort_keys=True) == json.dumps(r2, sort_keys=True)


class TestAblation:
    def test_row_configs(self):
        base = NetworkConfig.from_dict(NET)
        rows = dict(trainer.ablation_configs(base))
        assert len(rows) == 8
        pair, triple = rows["(d) PairNet"], rows["(h) TripleNet"]
        assert pair == replace(triple, mfs=False, ic=False, cas=False, asf=False)
        assert triple.mfs and triple.ic and triple.cas and triple.asf

    def test_csv_structure(self, data_dir, tmp_path):
        p = write_config(tmp_path / "c.json", data_dir, iterations=2, lr_stages=[[1.0, 0.01]])
        rc = cli.main(["ablate", "--config", str(p), "--out", str(tmp_path / "abl")])
        assert rc == 0
        with open(tmp_path / "abl" / "ablation.csv") as f:
            rows = list(csv.DictReader(f))
        assert list(rows[0]) == trainer.CSV_COLUMNS
        marks = [tuple(r[c] == "x" for c in trainer.CSV_COLUMNS[1:8]) for r in rows]
        assert marks == [
            (1, 0, 0, 0, 0, 0, 0), (0, 1, 0, 0, 0, 0, 0), (0, 0, 1, 0, 0, 0, 0), (1, 0, 1, 0, 0, 0, 0),
            (1, 0, 1, 1, 0, 0, 0), (1, 0, 1, 1, 1, 0, 0), (1, 0, 1, 1, 1, 1, 0), (1, 0, 1, 1, 1, 1, 1)]
        assert rows[0]["mIoU"] == "N/A" and rows[0]["mAP"] != "N/A"
        assert rows[1]["mAP"] == rows[2]["mAP"] == "N/A"
        assert all(r["mAP"] != "N/A" and r["mIoU"] != "N/A" for r in rows[3:])

    def test_failing_row_named_and_completed_rows_kept(self, data_dir, tmp_path, monkeypatch):
        p = write_config(tmp_path / "c.json", data_dir, iterations=1, lr_stages=[[1.0, 0.01]])
        real = trainer.train

        def flaky(cfg, *a, **kw):
            if not cfg.network.detection and cfg.network.seg_levels == "all":
                raise trainer.NumericalAbort("seg_ca_0", 1, float("nan"))
            return real(cfg, *a, **kw)
        monkeypatch.setattr(trainer, "train", flaky)
        with pytest.raises(trainer.AblationError, match="only segmentation with all layers"):
            trainer.ablate(trainer.RunConfig.load(p), tmp_path / "abl")
        with open(tmp_path / "abl" / "ablation.csv") as f:
            assert len(list(csv.DictReader(f))) == 2


class TestCLI:
    def test_gen_data(self, tmp_path, capsys):
        rc = cli.main(["gen-data", "--out", str(tmp_path / "d"), "--num", "3", "--seed", "1", "--classes", "2",
                       "--size", "48"])
        assert rc == 0
        samples, names = load_dataset(tmp_path / "d")
        assert len(samples) == 3 and names == ["rectangle", "disk"]

    def test_train_then_eval(self, data_dir, tmp_path, capsys):
        p = write_config(tmp_path / "c.json", data_dir)
        assert cli.main(["train", "--config", str(p), "--seed", "5", "--out", str(tmp_path / "r")]) == 0
        ck = tmp_path / "r" / "checkpoint.tnck"
        assert ck.exists() and json.loads((tmp_path / "r" / "config.json").read_text())["seed"] == 5
        args = ["eval", "--checkpoint", str(ck), "--data", str(data_dir),
                "--predictions", str(tmp_path / "p.jsonl")]
        assert cli.main(args) == 0
        first = (tmp_path / "r" / "report.json").read_bytes()
        assert cli.main(args) == 0
        assert (tmp_path / "r" / "report.json").read_bytes() == first
        assert len((tmp_path / "p.jsonl").read_text().splitlines()) == 8
        assert "mAP@0.5=" in capsys.readouterr().out

    def test_validation_failures_exit_1(self, data_dir, tmp_path, capsys):
        assert cli.main(["train", "--config", str(tmp_path / "missing.json")]) == 1
        assert cli.main(["eval", "--checkpoint", str(tmp_path / "none.tnck"), "--data", str(data_dir)]) == 1
        gen = GenConfig(image_size=(32, 32), num_classes=3, min_size=0.25)
        save_dataset(generate_dataset(2, 0, gen), tmp_path / "k3", gen.class_names())
        save_checkpoint(build_network(NetworkConfig.from_dict(NET)), tmp_path / "m.tnck")
        assert cli.main(["eval", "--checkpoint", str(tmp_path / "m.tnck"), "--data", str(tmp_path / "k3")]) == 1
        assert "error:" in capsys.readouterr().err

    def test_numerical_abort_exit_2(self, data_dir, tmp_path, capsys):
        p = write_config(tmp_path / "c.json", data_dir, iterations=10, lr_stages=[[1.0, 1e3]])
        assert cli.main(["train", "--config", str(p), "--out", str(tmp_path / "r")]) == 2
        assert "non-finite" in capsys.readouterr().err
