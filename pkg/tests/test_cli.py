import re

import numpy as np
import pytest

from kpdnn.cli import main
from kpdnn.modelio import load_native, load_stack, read_kaldi_text
from kpdnn.pfile import read_pfile


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def corpus(tmp_path, capsys):
    """3-class, 10-dim train/valid pair sharing one class layout."""
    def make(name, utts, seed, dim=10, classes=3):
        path = tmp_path / name
        code, _, _ = run(capsys, "gen-synth", "--classes", classes, "--dim", dim, "--frames-per-utt", 30,
                         "--utterances", utts, "--seed", seed, "--out", path)
        assert code == 0
        return path
    return make


def epoch_lines(out):
    return [l for l in out.splitlines() if l.startswith("epoch ")]


def fer(line):
    return float(re.search(r"valid-fer ([\d.]+)%", line).group(1))


@pytest.mark.slow
def test_reference_command_block(tmp_path, capsys, corpus):
    train = corpus("train.pfile", 10, 1, dim=250, classes=1901)
    valid = corpus("valid.pfile", 4, 2, dim=250, classes=1901)
    out_file = tmp_path / "dnn.nnet"
    code, out, _ = run(capsys, "run-dnn", "--train-data", f"{train},partition=600m,random=true",
                       "--valid-data", f"{valid},partition=600m,random=true",
                       "--nnet-spec", "250:1024:1024:1024:1024:1024:1901",
                       "--lrate", "D:0.08:0.5:0.05,0.05:2", "--wdir", tmp_path / "wdir",
                       "--output-format", "kaldi", "--output-file", out_file)
    assert code == 0
    assert 1 <= len(epoch_lines(out)) <= 2
    text = out_file.read_text()
    assert text.startswith("<Nnet>\n<AffineTransform> 1024 250\n")
    assert text.count("<AffineTransform>") == 6 and text.count("<Sigmoid> 1024 1024") == 5
    assert text.rstrip().endswith("<Softmax> 1901 1901\n</Nnet>")
    assert (tmp_path / "wdir" / "train.log").exists()


def test_missing_train_data_is_usage_error(tmp_path, capsys, corpus):
    valid = corpus("valid.pfile", 2, 2)
    with pytest.raises(SystemExit) as exc:
        main(["run-dnn", "--valid-data", str(valid), "--nnet-spec", "10:3", "--output-file", "x"])
    assert exc.value.code == 1
    assert "--train-data" in capsys.readouterr().err


def test_missing_file_is_data_error(tmp_path, capsys, corpus):
    valid = corpus("valid.pfile", 2, 2)
    code, _, err = run(capsys, "run-dnn", "--train-data", tmp_path / "nope.pfile", "--valid-data", valid,
                       "--nnet-spec", "10:3", "--output-file", tmp_path / "m", "--wdir", tmp_path)
    assert code == 2 and "nope.pfile" in err


def test_constant_schedule_runs_exact_epochs(tmp_path, capsys, corpus):
    train, valid = corpus("train.pfile", 20, 1), corpus("valid.pfile", 6, 2)
    code, out, _ = run(capsys, "run-dnn", "--train-data", train, "--valid-data", valid,
                       "--nnet-spec", "10:16:3", "--lrate", "C:0.1:3", "--batch-size", 32,
                       "--wdir", tmp_path / "w", "--output-file", tmp_path / "m.ckpt")
    assert code == 0
    lines = epoch_lines(out)
    assert len(lines) == 3
    initial = float(re.search(r"initial valid-fer ([\d.]+)%", out).group(1))
    assert fer(lines[-1]) < initial
    net, state = load_native(tmp_path / "m.ckpt")
    assert net.spec.layer_sizes == (10, 16, 3) and state.epoch == 3 and state.stopped
    log_text = (tmp_path / "w" / "train.log").read_text()
    assert log_text.count("\nepoch ") == 3


def test_lrte_alias_and_wdir_env(tmp_path, capsys, corpus, monkeypatch):
    train, valid = corpus("train.pfile", 6, 1), corpus("valid.pfile", 2, 2)
    monkeypatch.setenv("KPDNN_WDIR", str(tmp_path / "envdir"))
    code, out, _ = run(capsys, "run-dnn", "--train-data", train, "--valid-data", valid,
                       "--nnet-spec", "10:3", "--lrte", "C:0.1:1", "--output-file", tmp_path / "m.ckpt")
    assert code == 0 and len(epoch_lines(out)) == 1
    assert (tmp_path / "envdir" / "nnet.ckpt").exists()


def test_resume_continues_from_checkpoint(tmp_path, capsys, corpus):
    train, valid = corpus("train.pfile", 10, 1), corpus("valid.pfile", 4, 2)
    common = ["run-dnn", "--train-data", train, "--valid-data", valid, "--nnet-spec", "10:8:3",
              "--batch-size", 32]
    run(capsys, *common, "--lrate", "C:0.1:4", "--wdir", tmp_path / "a", "--output-file", tmp_path / "a.ckpt")
    run(capsys, *common, "--lrate", "C:0.1:2", "--wdir", tmp_path / "b", "--output-file", tmp_path / "x.ckpt")
    # a 2-epoch checkpoint is finished, so widen its schedule the way a restarted job would
    from kpdnn.finetune import TrainState
    from kpdnn.modelio import load_native_full, save_native
    from kpdnn.rng import SeededRng
    net, state, rng_state, _ = load_native_full(tmp_path / "b" / "nnet.ckpt")
    save_native(net, TrainState(state.epoch, state.current_lr, "initial", state.error_history),
                tmp_path / "b" / "nnet.ckpt", rng=SeededRng.from_state(rng_state))
    code, out, _ = run(capsys, *common, "--lrate", "C:0.1:4", "--wdir", tmp_path / "b", "--resume",
                       "--output-file", tmp_path / "b.ckpt")
    assert code == 0 and len(epoch_lines(out)) == 2 and "initial" not in out
    a, _ = load_native(tmp_path / "a.ckpt")
    b, _ = load_native(tmp_path / "b.ckpt")
    assert all(np.array_equal(x, y) for x, y in zip(a.parameters(), b.parameters()))


def test_rbm_pretrain_kinds_and_finetune_pickup(tmp_path, capsys, corpus):
    train, valid = corpus("train.pfile", 6, 1), corpus("valid.pfile", 2, 2)
    code, out, _ = run(capsys, "pretrain", "--mode", "rbm", "--train-data", train,
                       "--nnet-spec", "10:12:12:3", "--epochs", 2, "--wdir", tmp_path)
    assert code == 0
    assert "kinds=gaussian-bernoulli,bernoulli-bernoulli" in out
    assert len(re.findall(r"^layer \d epoch \d recon-err", out, re.M)) == 4
    params, extra = load_stack(tmp_path / "pretrain.stack")
    assert [w.shape for w, _ in params] == [(10, 12), (12, 12)]
    code, out, _ = run(capsys, "run-dnn", "--train-data", train, "--valid-data", valid,
                       "--nnet-spec", "10:12:12:3", "--lrate", "C:0.1:1", "--wdir", tmp_path,
                       "--output-file", tmp_path / "m.ckpt")
    assert code == 0


def test_sda_pretrain_errors_decrease(tmp_path, capsys, corpus):
    train = corpus("train.pfile", 10, 1)
    code, out, _ = run(capsys, "run-sda", "--train-data", train, "--nnet-spec", "10:8:3",
                       "--epochs", 5, "--batch-size", 32, "--lr", 0.1, "--first-layer-lr", 0.01,
                       "--wdir", tmp_path)
    assert code == 0
    errs = [float(x) for x in re.findall(r"recon-err ([\d.]+)", out)]
    assert len(errs) == 5 and errs[-1] < errs[0]


def test_pretrain_without_hidden_layers_is_noop(tmp_path, capsys, corpus):
    train = corpus("train.pfile", 2, 1)
    code, out, _ = run(capsys, "pretrain", "--mode", "sda", "--train-data", train, "--nnet-spec", "10:3",
                       "--wdir", tmp_path)
    assert code == 0 and "layers=0" in out


def test_pretrain_dim_mismatch(tmp_path, capsys, corpus):
    train = corpus("train.pfile", 2, 1)
    code, _, err = run(capsys, "pretrain", "--mode", "rbm", "--train-data", train, "--nnet-spec", "12:4:3",
                       "--wdir", tmp_path)
    assert code == 2 and "10-dim" in err


def test_run_cnn(tmp_path, capsys, corpus):
    train, valid = corpus("train.pfile", 4, 1, dim=440), corpus("valid.pfile", 2, 2, dim=440)
    common = ["run-cnn", "--train-data", train, "--valid-data", valid, "--nnet-spec", "440:16:3",
              "--conv-filters", "4,4", "--lrate", "C:0.05:1", "--wdir", tmp_path]
    code, out, _ = run(capsys, *common, "--output-file", tmp_path / "cnn.ckpt")
    assert code == 0 and len(epoch_lines(out)) == 1
    net, _ = load_native(tmp_path / "cnn.ckpt")
    assert len(net.conv_layers) == 2 and len(net.dense_layers) == 2
    assert net.spec.conv[0].input_maps == 11 and net.spec.conv[0].input_band_len == 40
    code, _, err = run(capsys, *common, "--output-format", "kaldi", "--output-file", tmp_path / "cnn.nnet")
    assert code == 2 and "convolution" in err


def test_run_cnn_rejects_indivisible_input(tmp_path, capsys, corpus):
    train, valid = corpus("train.pfile", 2, 1, dim=442), corpus("valid.pfile", 2, 2, dim=442)
    code, _, err = run(capsys, "run-cnn", "--train-data", train, "--valid-data", valid,
                       "--nnet-spec", "442:16:3", "--wdir", tmp_path, "--output-file", tmp_path / "c")
    assert code == 2 and "442" in err


def test_maxout_kaldi_rejected(tmp_path, capsys, corpus):
    train, valid = corpus("train.pfile", 2, 1), corpus("valid.pfile", 2, 2)
    code, _, err = run(capsys, "run-dnn", "--train-data", train, "--valid-data", valid,
                       "--nnet-spec", "10:8:3", "--maxout-group", 2, "--output-format", "kaldi",
                       "--wdir", tmp_path, "--output-file", tmp_path / "m.nnet")
    assert code == 2 and "maxout" in err


def test_extract_bnf(tmp_path, capsys, corpus):
    train, valid = corpus("train.pfile", 6, 1), corpus("valid.pfile", 2, 2)
    code, _, _ = run(capsys, "run-dnn", "--train-data", train, "--valid-data", valid,
                     "--nnet-spec", "10:16:42:16:3", "--bottleneck-index", 2, "--lrate", "C:0.1:1",
                     "--wdir", tmp_path, "--output-file", tmp_path / "dbnf.ckpt")
    assert code == 0
    for context, dim in ((0, 42), (4, 378)):
        out_file = tmp_path / f"bnf{context}.pfile"
        code, out, _ = run(capsys, "extract-bnf", "--model", tmp_path / "dbnf.ckpt", "--data", valid,
                           "--splice", context, "--output-file", out_file)
        assert code == 0 and f"frames=60 dim={dim}" in out
        header, table = read_pfile(out_file)
        assert header.feature_dim == dim and header.num_frames == 60
    # a plain net has no bottleneck marker
    run(capsys, "run-dnn", "--train-data", train, "--valid-data", valid, "--nnet-spec", "10:16:3",
        "--lrate", "C:0.1:1", "--wdir", tmp_path, "--output-file", tmp_path / "plain.ckpt")
    code, _, err = run(capsys, "extract-bnf", "--model", tmp_path / "plain.ckpt", "--data", valid,
                       "--output-file", tmp_path / "x.pfile")
    assert code == 2 and "bottleneck" in err


def test_kaldi_output_roundtrips(tmp_path, capsys, corpus):
    train, valid = corpus("train.pfile", 4, 1), corpus("valid.pfile", 2, 2)
    code, _, _ = run(capsys, "run-dnn", "--train-data", train, "--valid-data", valid,
                     "--nnet-spec", "10:6:3", "--dropout-factor", 0.2, "--lrate", "C:0.1:1",
                     "--output-format", "kaldi", "--wdir", tmp_path, "--output-file", tmp_path / "m.nnet")
    assert code == 0
    native, _ = load_native(tmp_path / "final.ckpt")
    back = read_kaldi_text(tmp_path / "m.nnet")
    assert np.allclose(back.dense_layers[1].weights, 0.8 * native.dense_layers[1].weights, atol=1e-8)


def test_pfile_tools(tmp_path, capsys):
    text = tmp_path / "t.txt"
    text.write_text("# pfile feature_dim=2 labels=1\n"
                    "0\t0\t[0.5, 1.0]\t3\n0\t1\t[0.25, -1.0]\t4\n1\t0\t[2.0, 0.0]\t0\n")
    code, out, _ = run(capsys, "pfile", "from-text", text, "-o", tmp_path / "t.pfile")
    assert code == 0
    code, out, _ = run(capsys, "pfile", "info", tmp_path / "t.pfile")
    assert out.strip() == "utterances=2 frames=3 dim=2"
    code, out, _ = run(capsys, "pfile", "to-text", tmp_path / "t.pfile")
    assert out == text.read_text()
    code, out, _ = run(capsys, "pfile", "splice", tmp_path / "t.pfile", "-c", 1, "-o", tmp_path / "s.pfile")
    assert out.strip() == "dim=6"
    (tmp_path / "bad.pfile").write_bytes((tmp_path / "t.pfile").read_bytes()[:-3])
    code, _, err = run(capsys, "pfile", "info", tmp_path / "bad.pfile")
    assert code == 2 and "offset" in err


def test_gen_synth_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        code, out, _ = run(capsys, "gen-synth", "--classes", 4, "--dim", 5, "--frames-per-utt", 7,
                           "--utterances", 3, "--seed", 5, "--out", tmp_path / f"{name}.pfile")
        assert code == 0 and out.strip() == "utterances=3 frames=21 dim=5 classes=4"
    assert (tmp_path / "a.pfile").read_bytes() == (tmp_path / "b.pfile").read_bytes()
    _, table = read_pfile(tmp_path / "a.pfile")
    assert set(np.unique(table.labels)) <= set(range(4))


def test_unknown_command_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1
