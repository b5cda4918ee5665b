import numpy as np
import pytest

from idennet import autodiff as ad
from idennet.cli import main


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> pretrain x2 -> finetune (one fold), shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.cfg"
    cfg.write_text("# tiny run\nepochs=1\nbatch_size=30\ndropout=0.0\naugment=false\nval_fraction=0.1\n")
    assert main(["synth", "--out", str(root / "data"), "--seed", "3", "--identities", "4",
                 "--expressions", "3", "--per-cell", "5"]) == 0
    manifest = root / "data" / "manifest.tsv"
    for task in ("emotion", "identity"):
        assert main(["pretrain", "--task", task, "--manifest", str(manifest), "--depth", "16",
                     "--config", str(cfg), "--out", str(root / task)]) == 0
    assert main(["finetune", "--variant", "if", "--manifest", str(manifest), "--config", str(cfg),
                 "--emotion-ckpt", str(root / "emotion" / "pretrain_emotion_best.ckpt"),
                 "--identity-ckpt", str(root / "identity" / "pretrain_identity_best.ckpt"),
                 "--fold", "0", "--cache-features", "--out", str(root / "ft")]) == 0
    return root, manifest


def test_synth_outputs(pipeline, capsys):
    root, manifest = pipeline
    assert len(manifest.read_text().splitlines()) == 1 + 4 * 3 * 5
    assert (root / "data" / "synth.cfg").exists()


def test_pretrain_outputs(pipeline):
    root, _ = pipeline
    assert (root / "emotion" / "pretrain_emotion_history.png").exists()
    assert (root / "emotion" / "pretrain_emotion_metrics.tsv").exists()


def test_finetune_outputs(pipeline):
    root, _ = pipeline
    ft = root / "ft"
    assert (ft / "finetune_if_fold00.ckpt").exists()
    assert (ft / "finetune_if_confusion.png").exists()
    assert (ft / "finetune_if_fold00_history.png").exists()
    assert "accuracy" in (ft / "finetune_if_report.tsv").read_text()


def test_eval_prints_report(pipeline, capsys, tmp_path):
    root, manifest = pipeline
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(root / "ft" / "finetune_if_fold00.ckpt"),
                 "--manifest", str(manifest), "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("accuracy\t") and "samples\t60" in out
    assert (tmp_path / "eval_confusion.png").exists()


def test_heatmap_verb(pipeline, tmp_path, capsys):
    root, manifest = pipeline
    assert main(["heatmap", "--checkpoint", str(root / "ft" / "finetune_if_fold00.ckpt"),
                 "--manifest", str(manifest), "--limit", "3", "--out", str(tmp_path)]) == 0
    assert len(list(tmp_path.glob("*.pgm"))) == 6
    assert "files\t7" in capsys.readouterr().out


def test_gradcheck_exit_codes(capsys, monkeypatch):
    assert main(["gradcheck", "--seeds", "1"]) == 0
    out = capsys.readouterr().out
    from idennet.gradcheck import REGISTRY

    assert all(name in out for name in REGISTRY)
    monkeypatch.setattr(ad, "_relu_backward", lambda g, mask: np.where(mask, 2 * g, 0))
    assert main(["gradcheck", "--seeds", "1"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_errors_return_nonzero(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"),
                 "--manifest", str(tmp_path / "none.tsv")]) == 2
    assert "error" in capsys.readouterr().err


def test_depth_mismatch_rejected(pipeline, capsys):
    root, manifest = pipeline
    code = main(["finetune", "--variant", "original", "--manifest", str(manifest), "--depth", "40",
                 "--emotion-ckpt", str(root / "emotion" / "pretrain_emotion_best.ckpt"), "--fold", "0"])
    assert code == 2


def test_unknown_variant_rejected():
    with pytest.raises(SystemExit):
        main(["gradcheck", "--variant", "xyz"])
