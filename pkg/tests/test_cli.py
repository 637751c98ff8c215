from __future__ import annotations

import hashlib
import json

import pytest

from lightdot.cli import main


def digest(d) -> str:
    h = hashlib.sha256()
    for f in sorted(d.iterdir()):
        h.update(f.name.encode() + f.read_bytes())
    return h.hexdigest()


SMALL = ["--pairs", "60", "--concepts", "8", "--vocab", "40", "--classes", "4", "--feat-dim", "6",
         "--split", "40", "10", "10"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen", *SMALL, "--out", str(d / "corpus")]) == 0
    assert main(["finetune", "--corpus", str(d / "corpus"), "--steps", "20", "--batch-size", "16",
                 "--eval-every", "10", "--layers", "1", "--dim", "16", "--out", str(d / "ft.ldot")]) == 0
    assert main(["index", "--corpus", str(d / "corpus"), "--checkpoint", str(d / "ft.ldot"),
                 "--modality", "image", "--out", str(d / "img.ldix")]) == 0
    return d


def test_gen_is_deterministic(tmp_path):
    assert main(["gen", *SMALL, "--out", str(tmp_path / "a")]) == 0
    assert main(["gen", *SMALL, "--out", str(tmp_path / "b")]) == 0
    assert digest(tmp_path / "a") == digest(tmp_path / "b")


def test_refuses_overwrite_without_force(tmp_path, capsys):
    assert main(["gen", *SMALL, "--out", str(tmp_path / "a")]) == 0
    assert main(["gen", *SMALL, "--out", str(tmp_path / "a")]) == 1
    assert "--force" in capsys.readouterr().err
    assert main(["gen", *SMALL, "--out", str(tmp_path / "a"), "--force"]) == 0


def test_artifacts_echo_resolved_config(workspace):
    side = json.loads((workspace / "ft.ldot.json").read_text())
    assert side["config"]["steps"] == 20 and side["config"]["dim"] == 16
    assert "config_hash" in side
    run = json.loads((workspace / "corpus" / "run_config.json").read_text())
    assert run["pairs"] == 60 and "out" not in run
    assert (workspace / "ft.ldot.log").read_text().startswith("# step task loss lr")


def test_query_text_clamps_k(workspace, tmp_path, capsys):
    assert main(["gen", *SMALL, "--out", str(tmp_path / "c")]) == 0
    # a 3-item index built from the test split's first three vectors
    from lightdot.checkpoint import load_checkpoint
    from lightdot.encoders import DualEncoder, encode_images
    from lightdot.index import build_index, save_index
    from lightdot.synth import read_corpus

    params, cfg, _ = load_checkpoint(workspace / "ft.ldot")
    corpus = read_corpus(tmp_path / "c")
    ids = corpus.ids("test")[:3]
    save_index(build_index(encode_images(DualEncoder(cfg, params), corpus.regions(ids)), ids), tmp_path / "t.ldix")
    (tmp_path / "t.ldix.json").write_text(json.dumps({"config_hash": cfg.hash(), "modality": "image"}))
    capsys.readouterr()
    rc = main(["query", "--index", str(tmp_path / "t.ldix"), "--checkpoint", str(workspace / "ft.ldot"),
               "--corpus", str(tmp_path / "c"), "--text", "c0w0 c1w1 unknownword", "--k", "5",
               "--format", "json-lines"])
    assert rc == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert len(rows) == 3 and [r["rank"] for r in rows] == [1, 2, 3]
    assert set(rows[0]) == {"rank", "id", "score"}


def test_query_rerank_with_dot_matches_plain(workspace, capsys):
    base = ["query", "--index", str(workspace / "img.ldix"), "--checkpoint", str(workspace / "ft.ldot"),
            "--corpus", str(workspace / "corpus"), "--text", "c2w0 c3w1 f1", "--k", "5"]
    capsys.readouterr()
    assert main(base) == 0
    plain = capsys.readouterr().out
    assert main(base + ["--rerank", "--scorer", "dot", "--m", "20"]) == 0
    assert capsys.readouterr().out == plain


def test_config_hash_mismatch_refused(workspace, tmp_path, capsys):
    assert main(["finetune", "--corpus", str(workspace / "corpus"), "--steps", "2", "--batch-size", "8",
                 "--eval-every", "0", "--layers", "1", "--dim", "8", "--out", str(tmp_path / "other.ldot")]) == 0
    capsys.readouterr()
    rc = main(["query", "--index", str(workspace / "img.ldix"), "--checkpoint", str(tmp_path / "other.ldot"),
               "--corpus", str(workspace / "corpus"), "--text", "c0w0"])
    err = capsys.readouterr().err
    assert rc == 1 and "config-hash-mismatch" in err
    side = json.loads((workspace / "img.ldix.json").read_text())
    assert side["config_hash"] in err


def test_eval_writes_report(workspace, capsys):
    out = workspace / "eval.txt"
    assert main(["eval", "--corpus", str(workspace / "corpus"), "--checkpoint", str(workspace / "ft.ldot"),
                 "--full-pool", "--out", str(out), "--force"]) == 0
    fields = dict(line.split("=", 1) for line in out.read_text().splitlines())
    assert fields["pool_size"] == "60" and fields["queries"] == "10"
    assert (workspace / "eval.txt.tsv").exists()


def test_bench_and_scorer_commands(workspace, capsys):
    assert main(["train-scorer", "--corpus", str(workspace / "corpus"), "--steps", "5", "--batch-size", "8",
                 "--like", str(workspace / "ft.ldot"), "--out", str(workspace / "cross.ldot"), "--force"]) == 0
    assert main(["bench", "--corpus", str(workspace / "corpus"), "--checkpoint", str(workspace / "ft.ldot"),
                 "--pools", "50,100", "--queries", "2", "--reps", "1", "--m", "10",
                 "--scorer-checkpoint", str(workspace / "cross.ldot"),
                 "--out", str(workspace / "bench.txt"), "--force"]) == 0
    assert "dense+rerank.100.seconds=" in (workspace / "bench.txt").read_text()


def test_layered_config_file(workspace, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"steps": 3, "batch_size": 8, "eval_every": 0, "layers": 1, "dim": 8}))
    assert main(["finetune", "--corpus", str(workspace / "corpus"), "--config", str(cfg), "--steps", "2",
                 "--out", str(tmp_path / "m.ldot")]) == 0
    side = json.loads((tmp_path / "m.ldot.json").read_text())["config"]
    assert side["steps"] == 2 and side["batch_size"] == 8 and side["dim"] == 8
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    with pytest.raises(SystemExit):
        main(["finetune", "--corpus", str(workspace / "corpus"), "--config", str(bad), "--out", str(tmp_path / "z")])


def test_missing_corpus_is_structured_error(tmp_path, capsys):
    assert main(["eval", "--corpus", str(tmp_path / "nope"), "--checkpoint", str(tmp_path / "x")]) == 1
    assert capsys.readouterr().err.startswith("error: ")
