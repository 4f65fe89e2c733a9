import numpy as np
import pytest

from ivct import io as ivio
from ivct.cli import main, parse_kv
from ivct.metrics import EvalReport
from ivct.sampling import lact_vector, svct_vector

GEOMETRY = "image_size = 16\nn_detectors = 32\npixel_spacing = 4.0\n"


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "geom.txt").write_text(GEOMETRY)
    (root / "train.txt").write_text(
        f"geometry = {root / 'geom.txt'}\n"
        "dataset = ellipses:4\n"
        "epochs = 2\nphase1_epochs = 1\nsteps_per_epoch = 2\nbatch_size = 2\nlr = 1e-3\n"
        "phase1_svct = 18,36\nphase1_lact = 90\n"
    )
    assert main(["train", "--config", str(root / "train.txt"), "--out", str(root / "run")]) == 0
    return root


def test_parse_kv_comments():
    assert parse_kv("a = 1 # note\n\n# skip\nb=x=y\n") == {"a": "1", "b": "x=y"}


def test_simulate_outputs(work, capsys):
    out = work / "sim"
    code = main(["simulate", "--geometry", str(work / "geom.txt"), "--scenario", "lact", "--setting", "0-90", "--out", str(out)])
    assert code == 0
    sino, v = ivio.load_sinogram(out / "shepp_logan_sino.ivct")
    assert v.popcount == 180 and sino.data.shape == (180, 32)
    assert (out / "sampling.txt").read_text().strip() == v.to_text()
    x, header = ivio.load_image(out / "shepp_logan_input.ivct")
    assert x.shape == (16, 16) and header["role"] == "incomplete"
    text = ivio.png_text(out / "shepp_logan_target.png")
    assert "geometry" in text and text["sampling"].startswith("v1;len=720")


def test_simulate_hybrid(work):
    out = work / "hyb"
    code = main(["simulate", "--geometry", str(work / "geom.txt"), "--scenario", "hybrid", "--setting", "union:lact:0-30,svct:18", "--noise", "off", "--out", str(out)])
    assert code == 0
    _, v = ivio.load_sinogram(out / "shepp_logan_sino.ivct")
    a, b = lact_vector(0, 30), svct_vector(18)
    assert v.popcount == a.popcount + b.popcount - int(np.sum(a.bits & b.bits))


@pytest.mark.parametrize(
    "argv",
    [
        ["simulate", "--scenario", "svct", "--setting", "1000", "--out", "x"],
        ["simulate", "--scenario", "lact", "--setting", "0-400", "--out", "x"],
        ["eval", "--dataset", "ellipses:1", "--settings", "", "--out", "x"],
        ["eval", "--dataset", "ellipses:1", "--settings", "svct:0", "--out", "x"],
    ],
)
def test_bad_flags_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2


@pytest.mark.parametrize("argv", [["simulate", "--bogus"], ["simulate", "--scenario", "warp", "--setting", "1", "--out", "x"], []])
def test_argparse_errors_exit_2(argv):
    with pytest.raises(SystemExit) as err:
        main(argv)
    assert err.value.code == 2


def test_missing_dataset_exit_3(tmp_path):
    assert main(["eval", "--dataset", str(tmp_path / "nowhere"), "--settings", "svct:18", "--out", str(tmp_path / "o")]) == 3
    assert main(["train", "--config", str(tmp_path / "none.txt"), "--out", str(tmp_path / "o")]) == 3


def test_train_outputs_and_resume(work, tmp_path):
    run = work / "run"
    assert (run / "last.ivck").exists()
    log = (run / "train_log.csv").read_text().splitlines()
    assert len(log) == 1 + 4
    assert "steps=4" in (run / "summary.txt").read_text()
    (tmp_path / "more.txt").write_text((work / "train.txt").read_text().replace("epochs = 2", "epochs = 3"))
    assert main(["train", "--config", str(tmp_path / "more.txt"), "--resume", str(run / "last.ivck"), "--out", str(tmp_path / "r")]) == 0
    assert "steps=6" in (tmp_path / "r" / "summary.txt").read_text()


def test_train_rejects_unknown_key(work, tmp_path):
    (tmp_path / "bad.txt").write_text("learning_rate = 1\n")
    assert main(["train", "--config", str(tmp_path / "bad.txt"), "--out", str(tmp_path / "o")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_nonfinite_exit_4(work, tmp_path):
    (tmp_path / "hot.txt").write_text((work / "train.txt").read_text().replace("lr = 1e-3", "lr = 1e30"))
    assert main(["train", "--config", str(tmp_path / "hot.txt"), "--out", str(tmp_path / "o")]) == 4
    assert (tmp_path / "o" / "diagnostic.txt").read_text().strip()


def test_reconstruct_from_sinogram(work, capsys):
    sim = work / "rec_sim"
    main(["simulate", "--geometry", str(work / "geom.txt"), "--scenario", "svct", "--setting", "36", "--out", str(sim)])
    out = work / "rec"
    code = main(
        ["reconstruct", "--ckpt", str(work / "run" / "last.ivck"), "--input", str(sim / "shepp_logan_sino.ivct"),
         "--target", str(sim / "shepp_logan_target.ivct"), "--out", str(out)]
    )
    assert code == 0
    y, header = ivio.load_image(out / "proct.ivct")
    assert y.shape == (16, 16) and header["checkpoint"]
    assert "psnr proct" in capsys.readouterr().out


def test_reconstruct_vector_mismatch_exit_5(work, tmp_path):
    sim = work / "rec_sim"
    if not sim.exists():
        main(["simulate", "--geometry", str(work / "geom.txt"), "--scenario", "svct", "--setting", "36", "--out", str(sim)])
    (tmp_path / "v.txt").write_text("v1;len=360;runs=1x36,0x324")
    code = main(
        ["reconstruct", "--ckpt", str(work / "run" / "last.ivck"), "--input", str(sim / "shepp_logan_input.ivct"),
         "--sampling", str(tmp_path / "v.txt"), "--out", str(tmp_path / "o")]
    )
    assert code == 5


def test_corrupt_checkpoint_exit_5(work, tmp_path):
    raw = bytearray((work / "run" / "last.ivck").read_bytes())
    raw[100] ^= 0xFF
    (tmp_path / "bad.ivck").write_bytes(bytes(raw))
    args = ["eval", "--ckpt", str(tmp_path / "bad.ivck"), "--geometry", str(work / "geom.txt"), "--dataset", "ellipses:1", "--settings", "svct:18", "--out", str(tmp_path / "o")]
    assert main(args) == 5


def test_eval_is_reproducible(work, tmp_path):
    args = ["eval", "--ckpt", str(work / "run" / "last.ivck"), "--geometry", str(work / "geom.txt"), "--dataset", "ellipses:2", "--settings", "svct:18,lact:90", "--panels"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "report.csv").read_bytes()
    assert a == (tmp_path / "b" / "report.csv").read_bytes()
    report = EvalReport.load(tmp_path / "a" / "report.csv")
    assert {r["method"] for r in report.rows} == {"fbp", "proct"}
    assert report.metadata["checkpoint"] != "none"
    assert len(list((tmp_path / "a" / "panels").glob("*.png"))) == 4


def test_sweep_writes_profile(work, tmp_path):
    args = ["sweep", "--geometry", str(work / "geom.txt"), "--dataset", "ellipses:1", "--scenario", "svct", "--range", "18:54:18", "--out", str(tmp_path)]
    assert main(args) == 0
    report = EvalReport.load(tmp_path / "report.csv")
    assert [r["setting"] for r in report.rows] == ["svct-18", "svct-36", "svct-54"]
    assert (tmp_path / "profile.png").stat().st_size > 0
    assert main(args[:-4] + ["--range", "54:18:18", "--out", str(tmp_path)]) == 2


def test_reconstruct_dual(work, tmp_path, capsys):
    from ivct.dual import DualConfig, dual_save, init_dual
    from ivct.training import checkpoint_load

    sim = tmp_path / "sim"
    main(["simulate", "--geometry", str(work / "geom.txt"), "--scenario", "svct", "--setting", "36", "--out", str(sim)])
    state = checkpoint_load(work / "run" / "last.ivck")
    dual_save(tmp_path / "d.ivck", init_dual(DualConfig(), (0.5, 0.5), 0), state.checksum)
    base = ["reconstruct", "--ckpt", str(work / "run" / "last.ivck"), "--input", str(sim / "shepp_logan_sino.ivct"), "--dual", "on"]
    assert main(base + ["--dual-ckpt", str(tmp_path / "d.ivck"), "--out", str(tmp_path / "o")]) == 0
    fused, _ = ivio.load_image(tmp_path / "o" / "proct-dual.ivct")
    image, _ = ivio.load_image(tmp_path / "o" / "proct.ivct")
    np.testing.assert_allclose(fused, image, atol=1e-6)
    assert main(base + ["--out", str(tmp_path / "o2")]) == 2
    dual_save(tmp_path / "other.ivck", init_dual(DualConfig(), (0.5, 0.5), 0), "0" * 64)
    assert main(base + ["--dual-ckpt", str(tmp_path / "other.ivck"), "--out", str(tmp_path / "o3")]) == 5
