import hashlib
import json

import numpy as np
import pytest

from voldit import cli, io

SMALL = """\
[data]
n = 20
geometry = 16,16,16
[codec]
levels = 3
[train]
steps = 4
eval_every = 2
lr = 1e-3
[adapter]
steps = 3
[schedule]
T = 6
[sample]
n = 4
batch = 3
[evaluate]
n_fake = 4
pairs = 10
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


def digest_dir(d):
    h = hashlib.sha256()
    for f in sorted(d.rglob("*.vol")):
        h.update(f.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.ini"
    cfg.write_text(SMALL + f"[output]\ndir = {root}\n")
    assert run("phantoms", "--config", cfg) == 0
    assert run("train-backbone", "--config", cfg) == 0
    bb = root / "backbone" / "backbone.ckpt"
    assert run("train-adapter", "--config", cfg, "--ckpt", bb) == 0
    assert run("train-adapter", "--config", cfg, "--ckpt", bb, "--pi", 0.1, "--out", root / "fixed") == 0
    ad = root / "adapter" / "adapter.ckpt"
    assert run("sample", "--config", cfg, "--ckpt", bb) == 0
    assert run("sample", "--config", cfg, "--ckpt", bb, "--ckpt", ad,
               "--masks", root / "phantoms", "--split", "test", "--out", root / "cond") == 0
    return root, cfg


def test_phantom_manifest(pipeline, tmp_path):
    root, cfg = pipeline
    m = json.loads((root / "phantoms" / "manifest.json").read_text())
    assert [len(m["splits"][k]) for k in ("train", "val", "test")] == [15, 1, 4]
    assert len(m["items"]) == 20
    assert run("phantoms", "--config", cfg, "--out", tmp_path) == 0
    assert digest_dir(tmp_path) == digest_dir(root / "phantoms")


def test_backbone_outputs(pipeline):
    root, _ = pipeline
    out = root / "backbone"
    for name in ("backbone.ckpt", "backbone_last.ckpt", "loss.tsv", "val_loss.tsv", "loss.png"):
        assert (out / name).stat().st_size > 0
    lines = (out / "loss.tsv").read_text().splitlines()
    assert lines[0] == "step\tloss" and len(lines) == 5
    header, _ = io.load_checkpoint(out / "backbone.ckpt")
    assert header["kind"] == "backbone" and header["best_step"] in (2, 4)
    assert header["schedule"]["T"] == 6 and header["codec"]["levels"] == 3


def test_adapter_header(pipeline):
    root, _ = pipeline
    sha = io.sha256_file(root / "backbone" / "backbone.ckpt")
    learned, _ = io.load_checkpoint(root / "adapter" / "adapter.ckpt")
    fixed, _ = io.load_checkpoint(root / "fixed" / "adapter.ckpt")
    assert learned["backbone_sha256"] == sha == fixed["backbone_sha256"]
    assert learned["mode"] == "learned" and learned["pi"] is None
    assert fixed["mode"] == "fixed" and fixed["pi"] == 0.1
    assert (root / "adapter" / "adapter_loss.png").exists()


def test_sampling_is_reproducible(pipeline, tmp_path):
    root, cfg = pipeline
    bb = root / "backbone" / "backbone.ckpt"
    assert run("sample", "--config", cfg, "--ckpt", bb, "--out", tmp_path) == 0
    for i in range(4):
        a = io.read_volume(root / "samples" / f"sample_{i:04d}.vol")[0]
        b = io.read_volume(tmp_path / f"sample_{i:04d}.vol")[0]
        assert np.array_equal(a, b)
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert [it["chain"] for it in m["items"]] == [[0, i] for i in range(4)]
    assert (tmp_path / "samples.png").exists()


def test_conditioned_manifest_records_masks(pipeline):
    root, _ = pipeline
    m = json.loads((root / "cond" / "manifest.json").read_text())
    assert m["adapter"]["mode"] == "learned"
    names = [it["mask"].rsplit("/", 1)[1] for it in m["items"]]
    assert names == [f"phantom_{i:04d}.vol" for i in (16, 17, 18, 19)]


def report_rows(text):
    body = text.split("----- report -----\n")[1].split("----- end -----")[0]
    rows = [line.split("\t") for line in body.strip().splitlines()[1:]]
    return {r[0]: r for r in rows}


def test_evaluate_real_vs_real(pipeline, capsys):
    root, cfg = pipeline
    ph = root / "phantoms"
    assert run("evaluate", "--config", cfg, "--real", ph, "--fake", ph / "volumes", "--n", 20,
               "--out", root / "self") == 0
    rows = report_rows(capsys.readouterr().out)
    for name in ("precision", "recall", "coverage"):
        assert float(rows[name][1]) == 1.0
    assert abs(float(rows["frechet"][1])) < 1e-6
    assert "threshold=0.95" in rows["k"][2] and rows["k"][3] == "0"
    assert (root / "self" / "report.tsv").exists() and (root / "self" / "metrics.png").exists()


def test_evaluate_destroyed_volumes_score_worse(pipeline, capsys, tmp_path):
    root, cfg = pipeline
    ph = root / "phantoms"
    rng = np.random.default_rng(0)
    for i, f in enumerate(sorted((ph / "volumes").glob("*.vol"))):
        v = io.read_volume(f)[0]
        io.write_volume(tmp_path / "shuf" / f"s_{i:04d}.vol", rng.permutation(v.ravel()).reshape(v.shape))
    assert run("evaluate", "--config", cfg, "--real", ph, "--fake", tmp_path / "shuf", "--n", 20,
               "--out", tmp_path / "rep") == 0
    rows = report_rows(capsys.readouterr().out)
    assert float(rows["precision"][1]) < 0.5
    assert float(rows["frechet"][1]) > 0.1


def test_evaluate_with_masks(pipeline, capsys):
    root, cfg = pipeline
    assert run("evaluate", "--config", cfg, "--real", root / "phantoms", "--fake", root / "cond",
               "--with-masks", "--out", root / "condeval") == 0
    rows = report_rows(capsys.readouterr().out)
    assert "dice_median" in rows and "hd95_median" in rows
    assert (root / "condeval" / "masks.png").exists()


def test_exit_codes(pipeline, tmp_path):
    root, cfg = pipeline
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nsize = XXL\n")
    assert run("phantoms", "--config", bad, "--out", tmp_path / "x") == 2
    assert run("phantoms", "--config", tmp_path / "missing.ini") == 3
    assert run("sample", "--config", cfg, "--ckpt", tmp_path / "nope.ckpt") == 3
    # more generated volumes requested than present
    assert run("evaluate", "--config", cfg, "--real", root / "phantoms", "--fake", root / "samples",
               "--n", 50, "--out", tmp_path / "e") == 4
    # adapter checkpoint passed where a backbone is needed
    ad = root / "adapter" / "adapter.ckpt"
    assert run("sample", "--config", cfg, "--ckpt", ad) == 2
