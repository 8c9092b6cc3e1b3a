import csv
import subprocess
import sys

import numpy as np
import pytest

from regpool import experiment as X
from regpool.cli import main
from regpool.config import load_config, parse_lines
from regpool.data import read_pgm
from regpool.errors import ConfigError


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_parse_lines():
    values = parse_lines("# header\npool.n = 5  # trailing\n\nseeds=1,2\n")
    assert values == {"pool.n": "5", "seeds": "1,2"}
    with pytest.raises(ConfigError):
        parse_lines("no equals sign")


def test_unknown_key_named(tmp_path):
    (tmp_path / "c.cfg").write_text("pool.size = 3\n")
    with pytest.raises(ConfigError, match="pool.size"):
        load_config(tmp_path / "c.cfg")


def test_overrides_and_validation(tmp_path):
    cfg = load_config(None, ["pool.n=3", "pool.w=5", "seeds=4"])
    assert (cfg.pool.n, cfg.pool.w, cfg.pool.s, cfg.seeds) == (3, 5, 5, [4])
    with pytest.raises(ConfigError, match="pool.n"):
        load_config(None, ["pool.n=three"])
    with pytest.raises(ConfigError):
        load_config(None, ["pool.w=2"])
    with pytest.raises(ConfigError, match="seeds"):
        load_config(None, ["seeds="])
    with pytest.raises(ConfigError, match="train.epochs"):
        load_config(None, ["train.epochs=0"])


def test_defaults_are_desk_protocol():
    cfg = load_config()
    assert (cfg.train_subset, cfg.test_subset, cfg.width, cfg.epochs) == (2000, 1000, 0.125, 10)
    assert cfg.seeds == [0, 1, 2, 3, 4]
    assert (cfg.pool.n, cfg.pool.w, cfg.pool.s) == (5, 3, 5)
    assert (cfg.optimizer.kind, cfg.optimizer.lr, cfg.batch_size) == ("sgd", 0.01, 100)
    assert cfg.dropout == 0.25


def test_train_outputs(digits_config, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--config", str(digits_config), "--out", str(out),
                 "--set", "train.epochs=1"]) == 0
    for seed in (0, 1):
        rows = read_rows(out / f"metrics_seed{seed}.csv")
        assert len(rows) == 1
        assert list(rows[0]) == ["seed", "epoch", "train_loss", "test_acc"]
        assert (out / f"confusion_seed{seed}_epoch1.csv").exists()
        assert (out / f"checkpoint_seed{seed}.bin").exists()
    mean = read_rows(out / "metrics_mean.csv")
    accs = [float(read_rows(out / f"metrics_seed{s}.csv")[0]["test_acc"]) for s in (0, 1)]
    assert float(mean[0]["test_acc"]) == pytest.approx(np.mean(accs))


def test_train_deterministic(digits_config, tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--config", str(digits_config), "--out", str(tmp_path / name)]) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_confusion_consistent_with_accuracy(digits_config, tmp_path):
    cfg = load_config(digits_config, ["confusion.epochs=all", "seeds=0"])
    X.cmd_train(cfg, tmp_path)
    rows = read_rows(tmp_path / "metrics_seed0.csv")
    ds = X.load_datasets(cfg)
    for row in rows:
        cm = X.read_confusion(tmp_path / f"confusion_seed0_epoch{row['epoch']}.csv")
        assert cm.sum(axis=1).tolist() == np.bincount(ds.test.labels, minlength=10).tolist()
        assert np.trace(cm) / cm.sum() == float(row["test_acc"])


def test_max_equals_regularized_w1(digits_config, tmp_path):
    main(["train", "--config", str(digits_config), "--out", str(tmp_path / "m"), "--set", "pool.kind=max"])
    main(["train", "--config", str(digits_config), "--out", str(tmp_path / "r"), "--set", "pool.w=1"])
    for seed in (0, 1):
        a = read_rows(tmp_path / "m" / f"metrics_seed{seed}.csv")
        b = read_rows(tmp_path / "r" / f"metrics_seed{seed}.csv")
        assert [r["test_acc"] for r in a] == [r["test_acc"] for r in b]
        assert [r["train_loss"] for r in a] == [r["train_loss"] for r in b]


def test_compare_single_kind_is_train(digits_config, tmp_path):
    main(["compare", "max", "--config", str(digits_config), "--out", str(tmp_path / "c")])
    main(["train", "--config", str(digits_config), "--out", str(tmp_path / "t"), "--set", "pool.kind=max"])
    assert tree_bytes(tmp_path / "c" / "max") == tree_bytes(tmp_path / "t")


def test_compare_row_count(digits_config, tmp_path):
    assert main(["compare", "--config", str(digits_config), "--out", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "profile.csv")
    assert list(rows[0]) == ["kind", "seed", "epoch", "test_acc"]
    assert len(rows) == 3 * 2 * 2
    assert {r["kind"] for r in rows} == {"max", "avg", "regularized"}


def test_compare_shares_initial_weights(digits_config, tmp_path):
    cfg = load_config(digits_config, ["seeds=3"])
    graphs = [X.build_graph(cfg, 10, kind) for kind in ("max", "avg", "regularized")]
    for g in graphs:
        g.init_params(3)
    for p, q, r in zip(*(g.parameters() for g in graphs)):
        assert np.array_equal(p, q) and np.array_equal(p, r)


def test_sweep_nw_grid(digits_config, tmp_path):
    assert main(["sweep", "n=3,5", "w=3,5", "--config", str(digits_config), "--out", str(tmp_path),
                 "--seeds", "0", "--set", "train.epochs=1"]) == 0
    manifest = read_rows(tmp_path / "manifest.csv")
    assert [(r["n"], r["w"]) for r in manifest] == [("3", "3"), ("3", "5"), ("5", "3"), ("5", "5")]
    for r in manifest:
        assert len(read_rows(tmp_path / r["profile"])) == 2  # regularized + max, one seed, one epoch


def test_sweep_stride_grid(digits_config, tmp_path):
    cfg = load_config(digits_config, ["sweep.s=2,3,4,5", "pool.n=5", "pool.w=3"])
    cells = X.sweep_grid(cfg)
    assert [(c.n, c.w, c.s) for c in cells] == [(5, 3, 2), (5, 3, 3), (5, 3, 4), (5, 3, 5)]


def test_sweep_empty_dimension(digits_config, tmp_path, capsys):
    assert main(["sweep", "n=", "--config", str(digits_config), "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err.strip()
    assert len(err.splitlines()) == 1 and "sweep.n" in err


def test_pairs_match_confusion(digits_config, tmp_path):
    assert main(["pairs", "7:9", "2:7", "--config", str(digits_config), "--out", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "pairs.csv")
    assert len(rows) == 2 * 2 * 2
    for r in rows:
        cm = X.read_confusion(tmp_path / f"confusion_seed{r['seed']}_epoch{r['epoch']}.csv")
        a, b = int(r["class_a"]), int(r["class_b"])
        assert int(r["errors"]) == cm[a, b] + cm[b, a]


def test_pairs_absent_class(digits_config, tmp_path, capsys):
    assert main(["pairs", "7:12", "--config", str(digits_config), "--out", str(tmp_path)]) == 2
    assert "'12'" in capsys.readouterr().err


def test_pair_errors_perfect():
    labels = np.array([7, 9, 2, 7])
    assert X.pair_errors(labels, labels.copy(), 7, 9) == 0
    assert X.pair_errors(labels, np.array([9, 7, 2, 9]), 7, 9) == 3


def test_dump_maps(digits_config, tmp_path):
    run = tmp_path / "run"
    main(["train", "--config", str(digits_config), "--out", str(run), "--seeds", "0",
          "--set", "train.epochs=1"])
    out = tmp_path / "maps"
    assert main(["dump-maps", "--config", str(digits_config), "--out", str(out),
                 "--checkpoint", str(run / "checkpoint_seed0.bin"), "--samples", "3"]) == 0
    files = sorted(p.name for p in out.iterdir())
    assert files == ["sample3_ch0_avg.pgm", "sample3_ch0_max.pgm", "sample3_ch0_original.pgm",
                     "sample3_ch0_regularized.pgm"]
    assert read_pgm(out / "sample3_ch0_original.pgm").shape == (20, 20)
    assert read_pgm(out / "sample3_ch0_max.pgm").shape == (10, 10)


def test_dump_maps_reference_size_and_w1(digits_config, tmp_path):
    sets = ["dataset.image_size=60", "pool.n=5", "pool.s=5", "seeds=0"]
    cfg = load_config(digits_config, sets)
    graph = X.build_graph(cfg, 10)
    graph.init_params(0)
    graph.save(tmp_path / "ck.bin")
    for w in (1, 3):
        cfg_w = load_config(digits_config, sets + [f"pool.w={w}"])
        X.cmd_dump_maps(cfg_w, tmp_path / f"w{w}", tmp_path / "ck.bin", [0])
    assert read_pgm(tmp_path / "w1" / "sample0_ch0_regularized.pgm").shape == (12, 12)
    assert ((tmp_path / "w1" / "sample0_ch0_regularized.pgm").read_bytes()
            == (tmp_path / "w1" / "sample0_ch0_max.pgm").read_bytes())


def test_missing_dataset_paths(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path)]) == 2
    assert "dataset.train_images" in capsys.readouterr().err


def test_bad_dataset_file(tmp_path, capsys):
    (tmp_path / "x.idx").write_bytes(b"\x00\x00\x08\x02\x00\x00\x00\x00")
    args = [f"dataset.{k}=x.idx" for k in ("train_images", "train_labels", "test_images", "test_labels")]
    cmd = ["train", "--out", str(tmp_path / "o")]
    for a in args:
        cmd += ["--set", a]
    (tmp_path / "c.cfg").write_text("\n".join(a.replace("=", " = ") for a in args) + "\n")
    assert main(["train", "--config", str(tmp_path / "c.cfg"), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err.strip()
    assert len(err.splitlines()) == 1 and "bad magic" in err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "regpool", "train", "--set", "nope=1"],
                          capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 2
    assert "nope" in proc.stderr
