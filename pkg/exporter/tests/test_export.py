import json

import numpy as np
import pytest

from adae_export import cli, wire
from adae_export.encoder import (ExportError, ExportSpec, export,
                                 load_encoder, read_corpus)

from conftest import write_corpus


def run_export(model_dir, revision, corpus, out, pooling="mean", **kw):
    return export(ExportSpec(model=model_dir, revision=revision,
                             input_path=corpus, out_path=str(out),
                             pooling=pooling, **kw))


def test_export_writes_file_and_sidecar(tiny_model_dir, tiny_revision,
                                        toy_corpus, tmp_path):
    out = tmp_path / "toy.adae"
    sidecar = run_export(tiny_model_dir, tiny_revision, toy_corpus, out)
    assert sidecar["n"] == 100 and sidecar["d"] == 32
    assert sidecar["label_vocab"] == ["mid", "neg", "pos"]  # sorted
    assert sidecar["label_arity"] == 3
    assert sidecar["revision"] == tiny_revision
    assert sidecar["skipped_rows"] == 0

    X, Y, arity = wire.read_adae(out)
    assert X.shape == (100, 32) and arity == 3
    assert X.dtype == np.float32
    # first row is labeled pos -> code 2 under the sorted vocabulary
    assert Y[0] == 2
    on_disk = json.loads((tmp_path / "toy.adae.json").read_text())
    assert on_disk == sidecar


def test_reexport_is_byte_identical_in_feature_section(
        tiny_model_dir, tiny_revision, toy_corpus, tmp_path):
    a, b = tmp_path / "a.adae", tmp_path / "b.adae"
    run_export(tiny_model_dir, tiny_revision, toy_corpus, a)
    run_export(tiny_model_dir, tiny_revision, toy_corpus, b)
    assert a.read_bytes()[24:] == b.read_bytes()[24:]
    assert a.read_bytes() == b.read_bytes()


def test_pooling_modes_differ_but_share_shape(tiny_model_dir, tiny_revision,
                                              toy_corpus, tmp_path):
    a = run_export(tiny_model_dir, tiny_revision, toy_corpus,
                   tmp_path / "cls.adae", pooling="cls")
    b = run_export(tiny_model_dir, tiny_revision, toy_corpus,
                   tmp_path / "mean.adae", pooling="mean")
    Xa, _, _ = wire.read_adae(tmp_path / "cls.adae")
    Xb, _, _ = wire.read_adae(tmp_path / "mean.adae")
    assert Xa.shape == Xb.shape == (100, 32)
    assert not np.allclose(Xa, Xb)
    assert a["pooling"] == "cls" and b["pooling"] == "mean"


def test_empty_corpus_yields_empty_adae(tiny_model_dir, tiny_revision,
                                        tmp_path):
    corpus = write_corpus(tmp_path / "empty.csv", [])
    out = tmp_path / "empty.adae"
    sidecar = run_export(tiny_model_dir, tiny_revision, corpus, out)
    assert sidecar["n"] == 0 and sidecar["label_arity"] == 0
    X, Y, arity = wire.read_adae(out)
    assert X.shape == (0, 32) and arity == 0


def test_malformed_rows_skipped_with_count(tiny_model_dir, tiny_revision,
                                           tmp_path):
    corpus = write_corpus(tmp_path / "holes.csv", [
        ["abc def", "pos"], ["", "neg"], ["ghi", ""], ["jkl mno", "neg"]])
    sidecar = run_export(tiny_model_dir, tiny_revision, corpus,
                         tmp_path / "h.adae")
    assert sidecar["n"] == 2 and sidecar["skipped_rows"] == 2
    assert sidecar["label_vocab"] == ["neg", "pos"]


def test_revision_pin_enforced(tiny_model_dir, toy_corpus, tmp_path):
    with pytest.raises(ExportError, match="revision mismatch"):
        run_export(tiny_model_dir, "0" * 64, toy_corpus, tmp_path / "x.adae")


def test_corpus_guards(tiny_model_dir, tmp_path):
    with pytest.raises(ExportError, match="image-folder"):
        read_corpus(str(tmp_path))
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    with pytest.raises(ExportError, match="text and label"):
        read_corpus(str(bad))
    with pytest.raises(ExportError, match="cannot read"):
        read_corpus(str(tmp_path / "missing.csv"))
    with pytest.raises(ExportError, match="pooling"):
        ExportSpec(model="m", revision=None, input_path="x",
                   pooling="max", out_path="y")


def test_batch_size_does_not_change_row_count(tiny_model_dir, tiny_revision,
                                              toy_corpus, tmp_path):
    s1 = run_export(tiny_model_dir, tiny_revision, toy_corpus,
                    tmp_path / "b1.adae", batch_size=7)
    s2 = run_export(tiny_model_dir, tiny_revision, toy_corpus,
                    tmp_path / "b2.adae", batch_size=100)
    assert s1["n"] == s2["n"] == 100
    Xa, Ya, _ = wire.read_adae(tmp_path / "b1.adae")
    Xb, Yb, _ = wire.read_adae(tmp_path / "b2.adae")
    np.testing.assert_array_equal(Ya, Yb)
    np.testing.assert_allclose(Xa, Xb, atol=1e-5)


def test_cli_export_and_verify(tiny_model_dir, tiny_revision, toy_corpus,
                               tmp_path, capsys):
    out = tmp_path / "c.adae"
    code = cli.main(["export", "--model", tiny_model_dir,
                     "--revision", tiny_revision, "--input", toy_corpus,
                     "--pooling", "cls", "--out", str(out)])
    assert code == 0
    stdout = json.loads(capsys.readouterr().out)
    assert stdout["n"] == 100 and stdout["revision"] == tiny_revision

    assert cli.main(["verify", "--in", str(out)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["ok"] and report["findings"] == []


def test_cli_verify_flags_problems(tmp_path, capsys):
    # truncated file
    path = tmp_path / "t.adae"
    X = np.zeros((4, 3), np.float32)
    wire.write_adae(path, X, np.zeros(4, np.uint32), 1)
    path.write_bytes(path.read_bytes()[:-3])
    assert cli.main(["verify", "--in", str(path)]) == 2
    report = json.loads(capsys.readouterr().out)
    assert "length" in report["findings"][0]["message"]

    # NaN row
    X[1, 2] = np.inf
    nan_path = tmp_path / "n.adae"
    wire.write_adae(nan_path, X, np.zeros(4, np.uint32), 1)
    assert cli.main(["verify", "--in", str(nan_path)]) == 2
    report = json.loads(capsys.readouterr().out)
    assert report["findings"] == [{"row": 1, "message": "non-finite feature"}]

    # sidecar arity disagreement
    ok_path = tmp_path / "s.adae"
    wire.write_adae(ok_path, np.zeros((2, 2), np.float32),
                    np.zeros(2, np.uint32), 1)
    (tmp_path / "s.adae.json").write_text(json.dumps({"label_arity": 5}))
    assert cli.main(["verify", "--in", str(ok_path)]) == 2
    report = json.loads(capsys.readouterr().out)
    assert "label_arity 5" in report["findings"][0]["message"]


def test_cli_error_paths(tiny_model_dir, tmp_path, capsys):
    assert cli.main(["export", "--model", tiny_model_dir]) == 1  # missing args
    assert cli.main(["verify", "--in", str(tmp_path / "ghost.adae")]) == 2
    code = cli.main(["export", "--model", str(tmp_path / "no-model"),
                     "--revision", "r", "--input", "x", "--pooling", "cls",
                     "--out", str(tmp_path / "o.adae")])
    assert code == 1
    capsys.readouterr()


def test_load_encoder_fingerprint_is_stable(tiny_model_dir):
    _, _, r1 = load_encoder(tiny_model_dir, None)
    _, _, r2 = load_encoder(tiny_model_dir, None)
    assert r1 == r2 and len(r1) == 64


def test_primary_package_loads_exported_file(tiny_model_dir, tiny_revision,
                                             toy_corpus, tmp_path):
    # interop across the wire format with the consuming package
    adapool_ts = pytest.importorskip("adapool.taskstream")
    out = tmp_path / "inter.adae"
    run_export(tiny_model_dir, tiny_revision, toy_corpus, out)
    pool = adapool_ts.load_embeddings(str(out))
    assert pool.features.shape == (100, 32)
    assert sorted(pool.labels()) == [0, 1, 2]
