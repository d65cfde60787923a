import json

import numpy as np
import pytest
import torch
from PIL import Image

from reconvat import audio
from reconvat.audio import AudioClip
from reconvat.cli import evaluate_files, main, render_roll
from reconvat.datasets import read_manifest, render_notes
from reconvat.labels import NoteEvent, read_label_tsv, write_label_tsv
from reconvat.metrics import corpus_report
from reconvat.training import read_checkpoint

SMOKE = ["--toy", "--n-labelled", "1", "--n-unlabelled", "1"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_corpus")
    assert run("prepare", "--synthetic", "--clips", 6, "--labelled", 4, "--seed", 2, "--duration", 2.0,
               "--out", root) == 0
    return root


@pytest.fixture(scope="module")
def smoke_run(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    code = run("train", "--manifest", corpus / "clip_manifest.tsv", "--out", out, *SMOKE, "--iterations", 50,
               "--checkpoint-every", 2)
    return code, out


class TestPrepare:
    def test_synthetic_counts_and_determinism(self, tmp_path, capsys):
        assert run("prepare", "--synthetic", "--clips", 10, "--seed", 7, "--out", tmp_path / "d") == 0
        files = sorted(p.name for p in (tmp_path / "d").iterdir())
        assert sum(f.endswith(".wav") for f in files) == 10
        assert sum(f.endswith(".tsv") and f != "clip_manifest.tsv" for f in files) == 10
        assert read_manifest(tmp_path / "d" / "clip_manifest.tsv").sizes == (10, 0)
        first = (tmp_path / "d" / "clip_manifest.tsv").read_bytes()
        wav = (tmp_path / "d" / "clip003.wav").read_bytes()
        assert run("prepare", "--synthetic", "--clips", 10, "--seed", 7, "--out", tmp_path / "d") == 0
        assert (tmp_path / "d" / "clip_manifest.tsv").read_bytes() == first
        assert (tmp_path / "d" / "clip003.wav").read_bytes() == wav

    def test_scan(self, tmp_path, capsys):
        for name in ("a", "b"):
            (tmp_path / "root" / "train_data").mkdir(parents=True, exist_ok=True)
            audio.write_wav(tmp_path / "root" / "train_data" / f"{name}.wav", AudioClip(np.zeros(100), 16000))
        (tmp_path / "root" / "train_labels").mkdir()
        write_label_tsv(tmp_path / "root" / "train_labels" / "a.tsv", [NoteEvent(0.0, 0.001, 60)])
        assert run("prepare", "--scan", tmp_path / "root", "--layout", "musicnet_like", "--out", tmp_path / "m") == 0
        assert "1 labelled, 1 unlabelled" in capsys.readouterr().out
        assert read_manifest(tmp_path / "m" / "manifest.tsv").sizes == (1, 1)

    def test_env_root(self, tmp_path, monkeypatch):
        audio.write_wav(tmp_path / "x.wav", AudioClip(np.zeros(100), 16000))
        monkeypatch.setenv("RECONVAT_DATA_ROOT", str(tmp_path))
        assert run("prepare", "--out", tmp_path / "out.tsv") == 0
        assert (tmp_path / "out.tsv").exists()

    def test_bad_path(self, tmp_path, capsys, monkeypatch):
        monkeypatch.delenv("RECONVAT_DATA_ROOT", raising=False)
        assert run("prepare", "--scan", tmp_path / "nowhere", "--out", tmp_path / "m") == 1
        assert "nowhere" in capsys.readouterr().err
        assert run("prepare", "--out", tmp_path / "m") == 1
        assert not (tmp_path / "m").exists()


class TestTrain:
    def test_smoke(self, smoke_run):
        code, out = smoke_run
        assert code == 0
        lines = (out / "metrics.tsv").read_text().splitlines()
        assert len(lines) == 1 + 5
        for line in lines[1:]:
            values = line.split("\t")
            assert all(np.isfinite(float(v)) for v in values[2:6])
        assert (out / "checkpoint.pt").exists() and (out / "epoch00004.pt").exists()
        assert "use_vat = True" in (out / "config.txt").read_text()
        assert read_checkpoint(out / "checkpoint.pt")["iteration"] == 50

    @pytest.mark.parametrize("flags,expected", [
        (["--no-vat", "--no-recon"], {"use_vat": "False", "use_reconstruction": "False"}),
        (["--recon", "--vat", "--onset"], {"use_vat": "True", "use_reconstruction": "True", "use_onset": "True"}),
    ])
    def test_variants(self, corpus, tmp_path, flags, expected):
        assert run("train", "--manifest", corpus / "clip_manifest.tsv", "--out", tmp_path, *SMOKE, *flags,
                   "--iterations", 3) == 0
        config = dict(line.split(" = ") for line in (tmp_path / "config.txt").read_text().splitlines())
        for key, value in expected.items():
            assert config[key] == value

    def test_config_file_and_unknown_key(self, corpus, tmp_path, capsys):
        (tmp_path / "good.cfg").write_text("epsilon = 1.5\nseed = 3\n")
        assert run("train", "--manifest", corpus / "clip_manifest.tsv", "--config", tmp_path / "good.cfg",
                   "--out", tmp_path / "a", *SMOKE, "--no-vat", "--iterations", 1) == 0
        text = (tmp_path / "a" / "config.txt").read_text()
        assert "epsilon = 1.5" in text and "seed = 3" in text
        (tmp_path / "bad.cfg").write_text("epsilom = 1.5\n")
        assert run("train", "--manifest", corpus / "clip_manifest.tsv", "--config", tmp_path / "bad.cfg",
                   "--out", tmp_path / "b", *SMOKE) == 1
        assert "epsilom" in capsys.readouterr().err
        assert not (tmp_path / "b").exists()

    def test_non_finite_dumps_diagnostic(self, corpus, tmp_path):
        (tmp_path / "wild.cfg").write_text("learning_rate = 1e30\n")
        code = run("train", "--manifest", corpus / "clip_manifest.tsv", "--config", tmp_path / "wild.cfg",
                   "--out", tmp_path / "o", *SMOKE, "--no-vat", "--iterations", 20)
        assert code == 3
        snapshot = json.loads((tmp_path / "o" / "diagnostic.json").read_text())
        assert "iteration" in snapshot
        assert not (tmp_path / "o" / "checkpoint.pt").exists()

    def test_deterministic_logs(self, corpus, tmp_path):
        for name in ("a", "b"):
            assert run("train", "--manifest", corpus / "clip_manifest.tsv", "--out", tmp_path / name, *SMOKE,
                       "--iterations", 10) == 0
        assert (tmp_path / "a" / "metrics.tsv").read_text() == (tmp_path / "b" / "metrics.tsv").read_text()


class TestTranscribe:
    def test_zero_signal_and_plot(self, smoke_run, tmp_path):
        _, out = smoke_run
        audio.write_wav(tmp_path / "silence.wav", AudioClip(np.zeros(40_000), 16000))
        assert run("transcribe", tmp_path / "silence.wav", "--checkpoint", out / "checkpoint.pt",
                   "--out", tmp_path / "s.tsv", "--plot", tmp_path / "s.png", "--scale", 3) == 0
        assert read_label_tsv(tmp_path / "s.tsv") == []
        image = Image.open(tmp_path / "s.png")
        assert image.size == (audio.n_frames(40_000) * 3, 88 * 3)

    def test_default_output_path(self, smoke_run, tmp_path):
        _, out = smoke_run
        audio.write_wav(tmp_path / "tone.wav", render_notes([NoteEvent(0.2, 1.0, 69)], 1.5))
        assert run("transcribe", tmp_path / "tone.wav", "--checkpoint", out / "checkpoint.pt") == 0
        assert (tmp_path / "tone.notes.tsv").exists()

    def test_corrupt_checkpoint(self, tmp_path, capsys):
        (tmp_path / "bad.pt").write_bytes(b"\x00" * 64)
        audio.write_wav(tmp_path / "a.wav", AudioClip(np.zeros(4096), 16000))
        assert run("transcribe", tmp_path / "a.wav", "--checkpoint", tmp_path / "bad.pt",
                   "--out", tmp_path / "a.tsv") == 1
        assert not (tmp_path / "a.tsv").exists()

    def test_render_roll_colours(self, tmp_path):
        frame = np.zeros((5, 88), dtype=np.uint8)
        onset = np.zeros_like(frame)
        frame[1:4, 0] = 1
        onset[1, 0] = 1
        render_roll(frame, onset, tmp_path / "r.png", scale=1)
        pixels = np.asarray(Image.open(tmp_path / "r.png"))
        assert pixels.shape == (88, 5, 3)
        # lowest pitch is the bottom row
        assert tuple(pixels[87, 1]) != tuple(pixels[87, 2]) != (255, 255, 255)
        assert tuple(pixels[87, 0]) == (255, 255, 255) and tuple(pixels[0, 2]) == (255, 255, 255)


class TestEvaluate:
    @pytest.fixture
    def files(self, tmp_path):
        rng = np.random.default_rng(0)
        (tmp_path / "ref").mkdir()
        (tmp_path / "pred").mkdir()
        (tmp_path / "empty").mkdir()
        for i in range(3):
            notes = sorted(NoteEvent(round(t, 3), round(t + 0.5, 3), int(p))
                           for t, p in zip(rng.uniform(0, 3, 5), rng.integers(40, 80, 5)))
            write_label_tsv(tmp_path / "ref" / f"c{i}.tsv", notes)
            write_label_tsv(tmp_path / "pred" / f"c{i}.tsv", [NoteEvent(n.onset + 0.02, n.offset, n.pitch)
                                                             for n in notes[:3 + i % 2]])
            write_label_tsv(tmp_path / "empty" / f"c{i}.tsv", [])
        return tmp_path

    def test_identical(self, files, capsys):
        assert run("evaluate", "--pred", files / "ref", "--ref", files / "ref") == 0
        out = capsys.readouterr().out
        assert "Note\t100.0 ± 0.0\t100.0 ± 0.0\t100.0 ± 0.0" in out
        assert "Frame\t100.0 ± 0.0" in out

    def test_empty_predictions(self, files, capsys):
        assert run("evaluate", "--pred", files / "empty", "--ref", files / "ref", "--out", files / "r.txt") == 0
        assert "Note\t0.0 ± 0.0\t0.0 ± 0.0\t0.0 ± 0.0" in (files / "r.txt").read_text()

    def test_aggregation_equivalence(self, files, capsys):
        batch = evaluate_files(sorted((files / "pred").glob("*.tsv")), sorted((files / "ref").glob("*.tsv")))
        single = [evaluate_files([files / "pred" / f"c{i}.tsv"], [files / "ref" / f"c{i}.tsv"])[0] for i in range(3)]
        assert batch == single
        assert corpus_report(s for _, s in batch) == corpus_report(s for _, s in single)
        run("evaluate", "--pred", *sorted((files / "pred").glob("*.tsv")), "--ref", files / "ref")
        joined = capsys.readouterr().out
        for i in range(3):
            run("evaluate", "--pred", files / "pred" / f"c{i}.tsv", "--ref", files / "ref" / f"c{i}.tsv")
            rows = [l for l in capsys.readouterr().out.splitlines() if l.startswith(f"c{i}\t")]
            assert rows and all(r in joined for r in rows)

    def test_count_mismatch(self, files, capsys):
        assert run("evaluate", "--pred", files / "pred" / "c0.tsv", "--ref", files / "ref") == 1
        assert "1 prediction files but 3 reference files" in capsys.readouterr().err


class TestContinual:
    def test_zero_epochs_and_manifest_diff(self, smoke_run, corpus, tmp_path, capsys):
        _, out = smoke_run
        new = tmp_path / "new"
        new.mkdir()
        audio.write_wav(new / "fresh.wav", render_notes([NoteEvent(0.1, 0.9, 72)], 1.2))
        assert run("continual", "--checkpoint", out / "checkpoint.pt", "--unlabelled", new, "--epochs", 0,
                   "--out", tmp_path / "c.pt") == 0
        printed = capsys.readouterr().out
        assert "unlabelled pool: 2 -> 3 clips" in printed and f"+ {new / 'fresh.wav'}" in printed
        a, b = read_checkpoint(out / "checkpoint.pt"), read_checkpoint(tmp_path / "c.pt")
        assert a["iteration"] == b["iteration"] and a["config"] == b["config"] and a["metadata"] == b["metadata"]
        for key in ("transcriber", "reconstructor"):
            assert all(torch.equal(a[key][k], b[key][k]) for k in a[key])
        assert torch.equal(a["torch_rng"], b["torch_rng"])

    def test_runs_extra_epochs(self, smoke_run, tmp_path):
        _, out = smoke_run
        (tmp_path / "new").mkdir()
        audio.write_wav(tmp_path / "new" / "f.wav", render_notes([NoteEvent(0.1, 0.9, 70)], 1.2))
        assert run("continual", "--checkpoint", out / "checkpoint.pt", "--unlabelled", tmp_path / "new",
                   "--epochs", 1, "--out", tmp_path / "c.pt") == 0
        assert read_checkpoint(tmp_path / "c.pt")["iteration"] == 60
        assert (tmp_path / "c.metrics.tsv").exists()

    def test_nothing_new(self, smoke_run, tmp_path, capsys):
        _, out = smoke_run
        (tmp_path / "empty").mkdir()
        assert run("continual", "--checkpoint", out / "checkpoint.pt", "--unlabelled", tmp_path / "empty",
                   "--epochs", 1, "--out", tmp_path / "c.pt") == 1
        assert not (tmp_path / "c.pt").exists()


@pytest.mark.slow
def test_single_note_end_to_end(tmp_path):
    """prepare -> train -> transcribe recovers a held-out single note at the right pitch."""
    data = tmp_path / "mono"
    assert run("prepare", "--synthetic", "--clips", 6, "--labelled", 6, "--seed", 4, "--duration", 2.0,
               "--polyphony", 1, "--pitch-min", 64, "--pitch-max", 67, "--min-notes", 3, "--max-notes", 5,
               "--out", data) == 0
    assert run("train", "--manifest", data / "clip_manifest.tsv", "--out", tmp_path / "run", "--toy",
               "--no-vat", "--iterations", 600) == 0
    audio.write_wav(tmp_path / "note.wav", render_notes([NoteEvent(0.5, 1.5, 65)], 2.0))
    assert run("transcribe", tmp_path / "note.wav", "--checkpoint", tmp_path / "run" / "checkpoint.pt",
               "--out", tmp_path / "note.tsv") == 0
    notes = read_label_tsv(tmp_path / "note.tsv")
    assert notes
    assert 65 in {n.pitch for n in notes}
