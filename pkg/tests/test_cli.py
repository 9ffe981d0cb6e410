import hashlib

import numpy as np
import pytest

from osdkit import augment, cli, diarization, inference
from osdkit.audio import Waveform, features, read_wav, write_wav
from osdkit.model import ModelConfig, build_model, load_checkpoint, save_checkpoint

SMALL = ["--conv-channels", "4,4,4", "--se-reduction", "2", "--gru-hidden", "4",
         "--head-hidden", "8", "--batch-size", "4", "--epochs", "1",
         "--aug-overlap", "false", "--aug-resample", "false"]
SMALL_CFG = ModelConfig(conv_channels=(4, 4, 4), se_reduction=2, gru_hidden=4, head_hidden=8)


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    assert run("synth", "--seed", 3, "--n-clips", 3, "--duration-s", 3.0, "--out-dir", d) == 0
    return d


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestConfig:
    def test_file_and_override(self, tmp_path):
        (tmp_path / "run.cfg").write_text("# comment\nepochs = 7\nlr_max=0.01\naug_noise=yes\n")
        parser = cli.build_parser()
        args = parser.parse_args(["train", "--config", str(tmp_path / "run.cfg"), "--epochs", "3"])
        cfg = cli.resolve_config(args)
        assert (cfg.epochs, cfg.lr_max, cfg.aug_noise) == (3, 0.01, True)
        assert cfg.explicit == {"epochs", "lr_max", "aug_noise"}

    def test_unknown_key(self, tmp_path):
        (tmp_path / "bad.cfg").write_text("nonsense=1\n")
        assert run("synth", "--config", tmp_path / "bad.cfg", "--seed", 1, "--out-dir", tmp_path) == 1

    def test_bad_value(self, tmp_path):
        assert run("synth", "--seed", "abc", "--out-dir", tmp_path) == 1

    def test_unknown_flag(self, tmp_path):
        assert run("synth", "--no-such-flag", 1) == 1

    def test_no_command(self):
        assert run() == 1

    def test_missing_input_path(self, tmp_path):
        assert run("split", "--sad", tmp_path / "nope", "--osd", tmp_path / "nope", "--out", tmp_path / "o") == 1


class TestSynth:
    def test_deterministic(self, tmp_path, corpus):
        assert run("synth", "--seed", 3, "--n-clips", 3, "--duration-s", 3.0, "--out-dir", tmp_path) == 0
        for name in ("manifest.tsv", "clip_0001.wav", "clip_0002.lab", "reference.rttm"):
            assert digest(tmp_path / name) == digest(corpus / name)

    def test_zero_clips(self, tmp_path):
        assert run("synth", "--seed", 1, "--n-clips", 0, "--out-dir", tmp_path) == 0
        assert (tmp_path / "manifest.tsv").read_text() == ""

    def test_seed_required(self, tmp_path):
        assert run("synth", "--out-dir", tmp_path) == 1

    def test_all_classes(self, tmp_path):
        assert run("synth", "--seed", 0, "--n-clips", 4, "--out-dir", tmp_path) == 0
        labels = np.concatenate([augment.read_labels(l) for _, l in augment.read_manifest(tmp_path / "manifest.tsv")])
        assert set(np.unique(labels)) == {0, 1, 2}

    def test_unwritable(self, tmp_path):
        (tmp_path / "file").write_text("")
        assert run("synth", "--seed", 1, "--out-dir", tmp_path / "file" / "sub") == 1


class TestTrain:
    def test_checkpoints_and_log(self, tmp_path, corpus):
        out = tmp_path / "run"
        assert run("train", "--seed", 0, "--manifest", corpus / "manifest.tsv", "--out-dir", out, *SMALL,
                   "--epochs", 2) == 0
        assert (out / "epoch_001.ckpt").exists() and (out / "epoch_002.ckpt").exists()
        lines = (out / "loss.log").read_text().splitlines()
        # 3 clips of 300 frames -> 2 crops each -> 6 crops -> 2 batches of 4 per epoch
        assert len(lines) == 4
        assert [int(l.split("\t")[1]) for l in lines] == [0, 1, 2, 3]

    def test_deterministic(self, tmp_path, corpus):
        logs = []
        for k in range(2):
            out = tmp_path / f"r{k}"
            assert run("train", "--seed", 5, "--manifest", corpus / "manifest.tsv", "--out-dir", out, *SMALL) == 0
            logs.append((out / "loss.log").read_bytes())
        assert logs[0] == logs[1]

    def test_zero_lr_is_flat(self, tmp_path, corpus):
        out = tmp_path / "flat"
        assert run("train", "--seed", 2, "--manifest", corpus / "manifest.tsv", "--out-dir", out,
                   *SMALL, "--lr-max", 0) == 0
        trained, _, _ = load_checkpoint(out / "model.ckpt")
        fresh = build_model(SMALL_CFG, seed=2)
        for k, v in fresh.parameters().items():
            np.testing.assert_array_equal(trained.parameters()[k], v)
        lrs = [float(l.split("\t")[3]) for l in (out / "loss.log").read_text().splitlines()]
        assert lrs == [0.0] * len(lrs)

    def test_two_class_ablation(self, tmp_path, corpus):
        out = tmp_path / "abl"
        assert run("train", "--seed", 0, "--manifest", corpus / "manifest.tsv", "--out-dir", out,
                   *SMALL, "--num-classes", 2) == 0
        model, _, _ = load_checkpoint(out / "model.ckpt")
        assert model.cfg.num_classes == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_exit_code(self, tmp_path, corpus):
        out = tmp_path / "nan"
        code = run("train", "--seed", 0, "--manifest", corpus / "manifest.tsv", "--out-dir", out,
                   *SMALL, "--lr-max", 1e300, "--epochs", 3)
        assert code == 3

    def test_seed_required(self, tmp_path, corpus):
        assert run("train", "--manifest", corpus / "manifest.tsv", "--out-dir", tmp_path) == 1

    def test_bad_manifest_is_data_error(self, tmp_path):
        (tmp_path / "m.tsv").write_text("missing.wav\tmissing.lab\n")
        assert run("train", "--seed", 0, "--manifest", tmp_path / "m.tsv", "--out-dir", tmp_path / "o") == 2


@pytest.fixture(scope="module")
def flat_checkpoint(tmp_path_factory):
    """Debug checkpoint whose output layer is zeroed: every score is 1/3."""
    path = tmp_path_factory.mktemp("ckpt") / "flat.ckpt"
    m = build_model(SMALL_CFG, seed=0)
    m.head.layers[-1][1].params["weight"][...] = 0
    save_checkpoint(m, None, path)
    return path


class TestScore:
    def test_constant_scores(self, tmp_path, corpus, flat_checkpoint):
        assert run("score", "--checkpoint", flat_checkpoint, "--input", corpus / "manifest.tsv",
                   "--out-dir", tmp_path) == 0
        for k in range(3):
            s = inference.read_scores(tmp_path / f"clip_{k:04d}.scores")
            assert s.shape == (300,)
            np.testing.assert_allclose(s, 1 / 3, atol=1e-6)
        assert len(augment.read_manifest(tmp_path / "scores.tsv")) == 3

    def test_short_clip(self, tmp_path, flat_checkpoint):
        write_wav(Waveform(np.random.default_rng(0).uniform(-0.1, 0.1, 8037), 16000), tmp_path / "s.wav")
        assert run("score", "--checkpoint", flat_checkpoint, "--input", tmp_path / "s.wav", "--out-dir", tmp_path) == 0
        assert inference.read_scores(tmp_path / "s.scores").size == 8037 // 160

    def test_config_mismatch(self, tmp_path, corpus, flat_checkpoint):
        code = run("score", "--checkpoint", flat_checkpoint, "--input", corpus / "clip_0000.wav",
                   "--out-dir", tmp_path, "--gru-hidden", 9)
        assert code == 2

    def test_corrupt_checkpoint(self, tmp_path, corpus):
        (tmp_path / "bad.ckpt").write_bytes(b"junk")
        assert run("score", "--checkpoint", tmp_path / "bad.ckpt", "--input", corpus / "clip_0000.wav",
                   "--out-dir", tmp_path) == 2


def _scored_dev(tmp_path, tracks):
    entries = []
    for k, (scores, labels) in enumerate(tracks):
        inference.write_scores(scores, tmp_path / f"d{k}.scores")
        augment.write_labels(labels, tmp_path / f"d{k}.lab")
        entries.append((f"d{k}.scores", f"d{k}.lab"))
    augment.write_manifest(entries, tmp_path / "dev.tsv")
    return tmp_path / "dev.tsv"


class TestCalibrate:
    def test_separable(self, tmp_path):
        labels = np.array([0, 1, 2, 2, 0, 2, 1, 1])
        dev = _scored_dev(tmp_path, [(np.where(labels == 2, 0.9, 0.1), labels)])
        assert run("calibrate", "--scores", dev, "--out", tmp_path / "thr.txt") == 0
        rep = cli.read_report(tmp_path / "thr.txt")
        assert rep["precision"] == 1.0 and rep["recall"] == 1.0

    def test_matches_module(self, tmp_path, rng):
        tracks = [(np.round(rng.random(50), 6), rng.integers(0, 3, 50)) for _ in range(3)]
        dev = _scored_dev(tmp_path, tracks)
        assert run("calibrate", "--scores", dev, "--out", tmp_path / "thr.txt", "--target-precision", 0.5) == 0
        thr, p, r = inference.calibrate_threshold(tracks, 0.5)
        rep = cli.read_report(tmp_path / "thr.txt")
        assert rep["threshold"] == thr and rep["recall"] == pytest.approx(r, abs=1e-6)

    def test_zero_target(self, tmp_path, rng):
        dev = _scored_dev(tmp_path, [(np.round(rng.random(40), 6), rng.integers(0, 3, 40))])
        assert run("calibrate", "--scores", dev, "--out", tmp_path / "t.txt", "--target-precision", 0) == 0
        assert cli.read_report(tmp_path / "t.txt")["recall"] == 1.0

    def test_no_overlap_is_data_error(self, tmp_path):
        dev = _scored_dev(tmp_path, [(np.ones(5) / 2, np.zeros(5, int))])
        assert run("calibrate", "--scores", dev, "--out", tmp_path / "t.txt") == 2


class TestDiarizationCommands:
    def _case_c(self, tmp_path, osd_text):
        (tmp_path / "sad.txt").write_text("1.00 5.00\n")
        (tmp_path / "osd.txt").write_text(osd_text)
        (tmp_path / "rank.txt").write_text("1.00 5.00 A,B\n")
        assert run("split", "--sad", tmp_path / "sad.txt", "--osd", tmp_path / "osd.txt",
                   "--out", tmp_path / "pieces.txt") == 0
        assert run("assign", "--pieces", tmp_path / "pieces.txt", "--ranking", tmp_path / "rank.txt",
                   "--file-id", "rec1", "--out", tmp_path / "hyp.rttm") == 0
        return (tmp_path / "pieces.txt").read_text(), (tmp_path / "hyp.rttm").read_text()

    def test_case_c(self, tmp_path):
        pieces, rttm = self._case_c(tmp_path, "2.00 3.00\n")
        assert pieces == "1.00 2.00 single\n2.00 3.00 overlap\n3.00 5.00 single\n"
        assert "SPEAKER rec1 1 2.00 1.00 <NA> <NA> B <NA> <NA>" in rttm.splitlines()
        assert len(rttm.splitlines()) == 4

    def test_empty_osd_passthrough(self, tmp_path):
        pieces, rttm = self._case_c(tmp_path, "")
        assert pieces == "1.00 5.00 single\n"
        assert rttm == "SPEAKER rec1 1 1.00 4.00 <NA> <NA> A <NA> <NA>\n"

    def test_segment(self, tmp_path):
        inference.write_scores([0.1, 0.8, 0.9, 0.2, 0.7], tmp_path / "a.scores")
        assert run("segment", "--scores", tmp_path / "a.scores", "--threshold", 0.5,
                   "--out", tmp_path / "seg.txt") == 0
        assert (tmp_path / "seg.txt").read_text() == "0.01 0.03\n0.04 0.05\n"

    def test_segment_threshold_file(self, tmp_path):
        inference.write_scores([0.1, 0.8], tmp_path / "a.scores")
        (tmp_path / "thr.txt").write_text("threshold=0.5\n")
        assert run("segment", "--scores", tmp_path / "a.scores", "--threshold", tmp_path / "thr.txt",
                   "--out", tmp_path / "seg.txt") == 0
        assert (tmp_path / "seg.txt").read_text() == "0.01 0.02\n"


class TestEval:
    def test_identical(self, tmp_path, corpus):
        ref = corpus / "reference.rttm"
        assert run("eval", "--ref", ref, "--hyp", ref, "--out", tmp_path / "r.txt") == 0
        rep = cli.read_report(tmp_path / "r.txt")
        assert rep["der"] == 0 and rep["miss"] == 0

    def test_empty_hyp(self, tmp_path, corpus):
        (tmp_path / "empty.rttm").write_text("")
        assert run("eval", "--ref", corpus / "reference.rttm", "--hyp", tmp_path / "empty.rttm",
                   "--out", tmp_path / "r.txt") == 0
        text = (tmp_path / "r.txt").read_text()
        assert "miss=1.000000" in text and "der=1.000000" in text
        assert text.splitlines()[0].split() == ["metric", "value"]

    def test_matches_module(self, tmp_path):
        ref = [diarization.RttmRecord("f", 1, 0.0, 3.0, "A"), diarization.RttmRecord("f", 1, 2.0, 2.0, "B")]
        hyp = [diarization.RttmRecord("f", 1, 0.5, 3.5, "x")]
        diarization.write_rttm(ref, tmp_path / "ref.rttm")
        diarization.write_rttm(hyp, tmp_path / "hyp.rttm")
        assert run("eval", "--ref", tmp_path / "ref.rttm", "--hyp", tmp_path / "hyp.rttm",
                   "--out", tmp_path / "r.txt") == 0
        from osdkit.scoring import compute_der
        d = compute_der(ref, hyp)
        rep = cli.read_report(tmp_path / "r.txt")
        assert rep["der"] == pytest.approx(d.der, abs=1e-6) and rep["conf"] == pytest.approx(d.confusion, abs=1e-6)

    def test_osd_mode_na(self, tmp_path):
        augment.write_labels([0, 2, 2, 1], tmp_path / "ref.lab")
        inference.write_scores([0.1, 0.2, 0.1, 0.3], tmp_path / "h.scores")
        assert run("eval", "--mode", "osd", "--ref", tmp_path / "ref.lab", "--hyp", tmp_path / "h.scores",
                   "--threshold", 0.5, "--out", tmp_path / "r.txt") == 0
        text = (tmp_path / "r.txt").read_text()
        assert "precision=NA" in text and "recall=0.000000" in text

    def test_osd_mode_segments(self, tmp_path):
        augment.write_labels([0, 2, 2, 1], tmp_path / "ref.lab")
        (tmp_path / "seg.txt").write_text("0.01 0.03\n")
        assert run("eval", "--mode", "osd", "--ref", tmp_path / "ref.lab", "--hyp", tmp_path / "seg.txt",
                   "--out", tmp_path / "r.txt") == 0
        rep = cli.read_report(tmp_path / "r.txt")
        assert rep == {"precision": 1.0, "recall": 1.0}

    def test_bad_mode(self, tmp_path, corpus):
        ref = corpus / "reference.rttm"
        assert run("eval", "--ref", ref, "--hyp", ref, "--mode", "jer", "--out", tmp_path / "r") == 1


def test_pipeline_equals_composition(tmp_path, corpus):
    """score -> segment -> split -> assign -> eval against the same steps in-process."""
    m = build_model(SMALL_CFG, seed=4)
    m.head.layers[-1][1].params["bias"][...] = [0.0, 0.0, 0.3]
    save_checkpoint(m, None, tmp_path / "m.ckpt")
    wav = corpus / "clip_0000.wav"
    ref = [r for r in diarization.read_rttm(corpus / "reference.rttm") if r.file_id == "clip_0000"]
    diarization.write_rttm(ref, tmp_path / "ref.rttm")
    speakers = sorted({r.speaker for r in ref})
    (tmp_path / "sad.txt").write_text("0.00 3.00\n")
    ranking = [diarization.SpeakerRanking(0.0, 3.0, tuple(speakers))]
    diarization.write_rankings(ranking, tmp_path / "rank.txt")

    steps = [
        ("score", "--checkpoint", tmp_path / "m.ckpt", "--input", wav, "--out-dir", tmp_path),
        ("segment", "--scores", tmp_path / "clip_0000.scores", "--threshold", 0.35, "--out", tmp_path / "osd.txt"),
        ("split", "--sad", tmp_path / "sad.txt", "--osd", tmp_path / "osd.txt", "--out", tmp_path / "p.txt"),
        ("assign", "--pieces", tmp_path / "p.txt", "--ranking", tmp_path / "rank.txt",
         "--file-id", "clip_0000", "--out", tmp_path / "hyp.rttm"),
        ("eval", "--ref", tmp_path / "ref.rttm", "--hyp", tmp_path / "hyp.rttm", "--out", tmp_path / "rep.txt"),
    ]
    for argv in steps:
        assert run(*argv) == 0, argv

    model, _, _ = load_checkpoint(tmp_path / "m.ckpt")
    track = np.round(inference.sliding_score(model, features(read_wav(wav))), 6)
    osd = inference.scores_to_segments(track, 0.35)
    pieces = diarization.split_all([inference.TimedSegment(0.0, 3.0)], osd)
    hyp = diarization.assign_second_speaker(pieces, ranking, "clip_0000")
    from osdkit.scoring import compute_der
    want = compute_der(ref, hyp)
    got = cli.read_report(tmp_path / "rep.txt")
    assert diarization.read_rttm(tmp_path / "hyp.rttm") == hyp
    assert got["der"] == pytest.approx(want.der, abs=1e-6)
