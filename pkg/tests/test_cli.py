"""End-to-end CLI runs on a tiny configuration."""

import os

import numpy as np
import pytest

from deepid3.cli import main
from deepid3.weights import load_weights

TINY = """
[dataset]
train_identities = 4
test_identities = 4
images_per_identity = 6
canvas = 16

[regions]
full = 0, 0, 16, 16, 1
top = 0, 0, 8, 16, 2

[net]
widths = 2, 2, 4, 4
feature_dim = 8

[train]
epochs = {epochs}
batch_pairs = 4
batches_per_epoch = 2
lr = {lr}

[recognition]
pca_dim = 6
jb_iters = 3

[eval]
folds = 4
verification_pairs = 40
open_set_gallery = 2
"""


def write_config(tmp_path, lr=0.002, epochs=2, extra=""):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY.format(lr=lr, epochs=epochs) + extra)
    return str(path)


def tree_bytes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = os.path.join(dirpath, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


def test_pipeline_lr_zero_completes(tmp_path, capsys):
    cfg = write_config(tmp_path, lr=0.0, epochs=1, extra="[ensemble]\nregions = full\n")
    out = tmp_path / "out"
    assert main(["pipeline", "--config", cfg, "--out-dir", str(out)]) == 0
    assert (out / "STATUS").read_text() == "complete\n"
    for name in ("verification.csv", "roc.csv", "identification.csv", "region_net1.csv", "region_net2.csv",
                 "summary.csv"):
        assert (out / "reports" / name).exists(), name
    lines = (out / "reports" / "verification.csv").read_text().splitlines()
    assert lines[0] == "fold,accuracy" and len(lines) == 5
    assert "verification_mean" in capsys.readouterr().out
    logs = (out / "logs" / "full.deepid3_net1.tsv").read_text().splitlines()
    assert len(logs) == 1 and logs[0].startswith("0\t")


def test_stages_match_pipeline_and_are_deterministic(tmp_path):
    cfg = write_config(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["pipeline", "--config", cfg, "--out-dir", str(a), "--seed", "3"]) == 0
    for stage in ("gen-data", "train", "extract", "fit-recognition", "eval"):
        assert main([stage, "--config", cfg, "--out-dir", str(b), "--seed", "3"]) == 0, stage
    ta, tb = tree_bytes(a), tree_bytes(b)
    ta.pop("STATUS")
    assert set(ta) == set(tb)
    for k in ta:
        assert ta[k] == tb[k], k


def test_seed_changes_outputs(tmp_path):
    cfg = write_config(tmp_path, extra="[ensemble]\nregions = full\n[comparison]\nenabled = false\n")
    a, b = tmp_path / "a", tmp_path / "b"
    main(["gen-data", "--config", cfg, "--out-dir", str(a), "--seed", "1"])
    main(["gen-data", "--config", cfg, "--out-dir", str(b), "--seed", "2"])
    assert (a / "data" / "train.did3").read_bytes() != (b / "data" / "train.did3").read_bytes()


def test_recognition_file_contents(tmp_path):
    cfg = write_config(tmp_path, extra="[ensemble]\nregions = full\n[comparison]\nenabled = false\n")
    out = tmp_path / "o"
    assert main(["pipeline", "--config", cfg, "--out-dir", str(out)]) == 0
    rec = load_weights(out / "recognition.did3")
    assert set(rec) == {"pca.mean", "pca.components", "pca.eigenvalues", "jb.s_mu", "jb.s_eps", "jb.mean"}
    assert rec["pca.components"].shape == (6, 16)
    feats = load_weights(out / "features.did3")
    assert feats["train.full.deepid3_net1"].shape == (24, 8)
    assert feats["test.full.deepid3_net2.flip"].shape == (24, 8)
    assert not (out / "reports" / "region_net1.csv").exists()


def test_missing_inputs_name_the_stage(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["extract", "--config", cfg, "--out-dir", str(tmp_path / "empty")]) == 1
    assert "stage 'extract' failed" in capsys.readouterr().err


def test_failed_pipeline_flags_partial_outputs(tmp_path, capsys):
    cfg = write_config(tmp_path)
    # more pairs than the held-out split holds: eval fails after earlier stages wrote outputs
    with open(cfg) as fh:
        text = fh.read().replace("verification_pairs = 40", "verification_pairs = 100000")
    with open(cfg, "w") as fh:
        fh.write(text)
    out = tmp_path / "out"
    assert main(["pipeline", "--config", cfg, "--out-dir", str(out)]) == 1
    assert (out / "STATUS").read_text().startswith("failed\teval\t")
    assert (out / "recognition.did3").exists()
    assert "stage 'eval' failed" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text("[train]\nlrr = 1\n")
    assert main(["train", "--config", str(path)]) == 2
    assert "unknown key 'lrr'" in capsys.readouterr().err


def test_show_config_roundtrips(tmp_path, capsys):
    assert main(["show-config", "--seed", "5"]) == 0
    text = capsys.readouterr().out
    assert "[run]\nseed = 5" in text
    path = tmp_path / "c.ini"
    path.write_text(text)
    assert main(["show-config", "--config", str(path)]) == 0
    assert capsys.readouterr().out == text


def test_help_exits_zero():
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0


def test_eval_sets_never_touch_training_features(tmp_path):
    from deepid3.config import parse_config
    from deepid3.pipeline import build_eval_sets

    cfg = parse_config(open(write_config(tmp_path)).read())
    labels = np.repeat(np.arange(4), 6)
    sets = build_eval_sets(labels, cfg)
    idx = {i for a, b, _ in sets.verification.pairs for i in (a, b)}
    assert idx <= set(range(24))
    assert sum(s for _, _, s in sets.verification.pairs) == 20
    assert len(sets.closed.gallery) == 4 and len(sets.closed.probes) == 20
    assert len(sets.open.gallery) == 2
    assert sum(p[0] == -1 for p in sets.open.probes) == 12
