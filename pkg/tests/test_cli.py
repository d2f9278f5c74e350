import json

import numpy as np
import pytest

from sympac.cli import main
from sympac.encoding import encode_song, read_corpus, write_corpus
from sympac.ingest import render_annotations, serialize_annotations
from sympac.lm import load_model_file
from sympac.smf import export_smf
from synthcorpus import chord_following_song


@pytest.fixture
def workspace(tmp_path):
    rng = np.random.default_rng(202)
    songs = [chord_following_song(rng) for _ in range(6)]
    for i, song in enumerate(songs[:3]):
        annotated = render_annotations(song, 122.0)
        (tmp_path / f"song{i}.json").write_text(serialize_annotations(annotated))
    (tmp_path / "song3.mid").write_bytes(export_smf(songs[3], 122.0))
    lines = [serialize_annotations(render_annotations(s, 122.0)) for s in songs[4:]]
    (tmp_path / "more.jsonl").write_text("\n".join(lines) + "\n")
    return tmp_path


def test_ingest_mixed_inputs(workspace, capsys):
    rc = main(["ingest", str(workspace), "--out", str(workspace / "corpus.bin")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "wrote 6 sequences" in out
    assert len(read_corpus(workspace / "corpus.bin")) == 6


def test_ingest_reports_rejects_but_succeeds(workspace, capsys):
    (workspace / "broken.json").write_text("{")
    rc = main(["ingest", str(workspace), "--out", str(workspace / "corpus.bin")])
    assert rc == 0
    captured = capsys.readouterr()
    assert "reject" in captured.err
    assert "rejects 1" in captured.out


def test_ingest_all_failures_exit_data(tmp_path, capsys):
    (tmp_path / "broken.json").write_text("{")
    rc = main(["ingest", str(tmp_path / "broken.json"), "--out", str(tmp_path / "c.bin")])
    assert rc == 2


def test_ingest_parallel_matches_serial(workspace):
    rc = main(["ingest", str(workspace), "--out", str(workspace / "serial.bin")])
    assert rc == 0
    rc = main(["ingest", str(workspace), "--out", str(workspace / "parallel.bin"), "--jobs", "3"])
    assert rc == 0
    assert (workspace / "serial.bin").read_bytes() == (workspace / "parallel.bin").read_bytes()


def test_missing_corpus_is_data_error(tmp_path):
    rc = main(["train", "--corpus", str(tmp_path / "nope.bin"), "--out", str(tmp_path / "m.bin")])
    assert rc == 2


@pytest.fixture
def trained(workspace):
    main(["ingest", str(workspace), "--out", str(workspace / "corpus.bin")])
    rc = main([
        "train", "--corpus", str(workspace / "corpus.bin"),
        "--out", str(workspace / "model.bin"), "--order", "4",
    ])
    assert rc == 0
    return workspace


def test_train_writes_loadable_model(trained):
    model = load_model_file(trained / "model.bin")
    assert model.order == 4


def test_generate_with_controls_and_rerun(trained, capsys):
    args = [
        "generate", "--model", str(trained / "model.bin"),
        "--out-dir", str(trained / "gen"), "-n", "2", "--seed", "9",
        "--chords", "F,C,G,A:min", "--structure", "intro*2,verse*2",
        "--midi", "--text",
    ]
    assert main(args) == 0
    manifest = json.loads((trained / "gen" / "manifest.json").read_text())
    assert manifest["run"]["seed"] == 9
    assert manifest["run"]["control"]["chords"] == ["F:maj", "C:maj", "G:maj", "A:min"]

    assert main([
        "generate", "--from-manifest", str(trained / "gen" / "manifest.json"),
        "--out-dir", str(trained / "gen2"),
    ]) == 0
    for name in manifest["outputs"]:
        assert (trained / "gen" / name).read_bytes() == (trained / "gen2" / name).read_bytes()


def test_generate_seed_from_environment(trained, monkeypatch):
    monkeypatch.setenv("SYMPAC_SEED", "77")
    assert main([
        "generate", "--model", str(trained / "model.bin"),
        "--out-dir", str(trained / "genenv"), "-n", "1", "--bars", "2",
    ]) == 0
    manifest = json.loads((trained / "genenv" / "manifest.json").read_text())
    assert manifest["run"]["seed"] == 77


def test_generate_parallel_matches_serial(trained):
    base = [
        "generate", "--model", str(trained / "model.bin"), "-n", "3",
        "--seed", "4", "--bars", "2",
    ]
    assert main(base + ["--out-dir", str(trained / "g1")]) == 0
    assert main(base + ["--out-dir", str(trained / "g2"), "--jobs", "2"]) == 0
    for i in range(3):
        name = f"sample_{i:04d}.tokens"
        assert (trained / "g1" / name).read_bytes() == (trained / "g2" / name).read_bytes()


def test_config_file_supplies_defaults(trained):
    config = {"seed": 123, "n_samples": 2}
    (trained / "cfg.json").write_text(json.dumps(config))
    assert main([
        "--config", str(trained / "cfg.json"),
        "generate", "--model", str(trained / "model.bin"),
        "--out-dir", str(trained / "gencfg"), "--bars", "1",
    ]) == 0
    manifest = json.loads((trained / "gencfg" / "manifest.json").read_text())
    assert manifest["run"]["seed"] == 123
    assert manifest["run"]["n_samples"] == 2


def test_validate_command(trained, capsys):
    main([
        "generate", "--model", str(trained / "model.bin"),
        "--out-dir", str(trained / "genv"), "-n", "1", "--seed", "3", "--bars", "2",
    ])
    assert main(["validate", str(trained / "genv")]) == 0
    # corrupt a file: drop the end_of_song token
    from sympac.encoding import read_token_file, write_token_file

    tokens = read_token_file(trained / "genv" / "sample_0000.tokens")
    write_token_file(trained / "genv" / "sample_0000.tokens", tokens[:-1])
    assert main(["validate", str(trained / "genv")]) == 2
    assert "ends inside" in capsys.readouterr().out


def test_detect_chords_command(trained, capsys):
    main([
        "generate", "--model", str(trained / "model.bin"),
        "--out-dir", str(trained / "gend"), "-n", "1", "--seed", "6",
        "--chords", "C", "--bars", "2",
    ])
    assert main(["detect-chords", str(trained / "gend")]) == 0
    assert "sample_0000" in capsys.readouterr().out


def test_evaluate_kld_identity(trained, tmp_path, capsys):
    corpus = read_corpus(trained / "corpus.bin")
    gen_dir = trained / "asref"
    gen_dir.mkdir()
    from sympac.encoding import write_token_file

    for i, seq in enumerate(corpus):
        write_token_file(gen_dir / f"sample_{i:04d}.tokens", seq)
    rc = main([
        "evaluate", "--generated", str(gen_dir),
        "--reference", str(trained / "corpus.bin"), "--which", "kld",
    ])
    assert rc == 0
    report = json.loads((gen_dir / "reports" / "kld_report.json").read_text())
    for value in report["classes"].values():
        assert value in (0.0, None)


def test_evaluate_chords_and_structure(trained, capsys):
    rng = np.random.default_rng(7)
    gen_dir = trained / "genstruct"
    gen_dir.mkdir()
    from sympac.encoding import write_token_file

    sections = ("intro",) * 2 + ("verse",) * 4 + ("chorus",) * 4
    songs = [
        chord_following_song(rng, progression=("C:maj", "G:maj"), n_bars=10)
        for _ in range(2)
    ]
    for song, i in zip(songs, range(2)):
        for j, bar in enumerate(song.bars):
            bar.section = sections[j]
        write_token_file(gen_dir / f"s{i}.tokens", encode_song(song))
    rc = main([
        "evaluate", "--generated", str(gen_dir), "--which", "chords,structure",
        "--chords", "C,G", "--structure", "intro*2,verse*4,chorus*4",
    ])
    assert rc == 0
    chords_doc = json.loads((gen_dir / "reports" / "chord_accuracy.json").read_text())
    assert chords_doc["accuracy"] == 1.0
    structure_doc = json.loads((gen_dir / "reports" / "structure_scores.json").read_text())
    assert 0.0 <= structure_doc["means"]["Sf"] <= 1.0


def test_evaluate_empty_dir_is_data_error(tmp_path):
    (tmp_path / "empty").mkdir()
    rc = main(["evaluate", "--generated", str(tmp_path / "empty"), "--which", "kld"])
    assert rc == 2


def test_usage_errors_exit_one(tmp_path):
    assert main(["generate", "--out-dir", str(tmp_path)]) == 1
    assert main(["evaluate", "--generated", str(tmp_path), "--which", "bogus"]) == 1
    assert main(["nope"]) == 1


def test_control_error_exits_one(trained):
    rc = main([
        "generate", "--model", str(trained / "model.bin"),
        "--out-dir", str(trained / "bad"),
        "--structure", "intro*2", "--bars", "5",
    ])
    assert rc == 1


def test_generate_unconditioned(trained):
    assert main([
        "generate", "--model", str(trained / "model.bin"),
        "--out-dir", str(trained / "genfree"), "-n", "2", "--seed", "14",
    ]) == 0
    manifest = json.loads((trained / "genfree" / "manifest.json").read_text())
    assert manifest["run"]["control"] is None
    assert main(["validate", str(trained / "genfree")]) == 0


def test_train_single_sequence_corpus(tmp_path):
    rng = np.random.default_rng(3)
    write_corpus(tmp_path / "one.bin", [encode_song(chord_following_song(rng))])
    assert main([
        "train", "--corpus", str(tmp_path / "one.bin"),
        "--out", str(tmp_path / "m.bin"), "--order", "2",
    ]) == 0
    assert load_model_file(tmp_path / "m.bin").order == 2


def test_bad_chord_symbol_exits_one(trained):
    rc = main([
        "generate", "--model", str(trained / "model.bin"),
        "--out-dir", str(trained / "badchord"), "--chords", "H:maj", "--bars", "2",
    ])
    assert rc == 1


def test_bad_control_file_types_exit_one(trained, tmp_path):
    (tmp_path / "ctrl.json").write_text(json.dumps({"bpm_level": "fast"}))
    rc = main([
        "generate", "--model", str(trained / "model.bin"),
        "--out-dir", str(trained / "badctrl"), "--control", str(tmp_path / "ctrl.json"),
    ])
    assert rc == 1
    (tmp_path / "ctrl2.json").write_text(json.dumps({"structure": [["verse", "many"]]}))
    rc = main([
        "generate", "--model", str(trained / "model.bin"),
        "--out-dir", str(trained / "badctrl2"), "--control", str(tmp_path / "ctrl2.json"),
    ])
    assert rc == 1


def test_corrupt_manifest_exits_one(trained, tmp_path):
    (tmp_path / "manifest.json").write_text("{\"run\": {}}")
    rc = main([
        "generate", "--from-manifest", str(tmp_path / "manifest.json"),
        "--out-dir", str(tmp_path / "out"),
    ])
    assert rc == 1
