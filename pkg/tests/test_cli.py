import json
import logging
import re

import pytest

from mm3d.cli import dataset_digest, main
from mm3d.config import ExperimentConfig, save_config

TINY = {
    "model.n_proposals": 3, "model.dim": 16, "model.pool": 2, "model.backbone_width": 8, "model.s_target": 4,
    "phantom.slices": 8, "data.split_sizes": [30, 8, 10], "pretrain.enabled": False,
    "train.epochs": 1, "train.lr": 1e-3, "eval.bootstrap": 100,
}


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    save_config(ExperimentConfig().replace(**TINY), cfg)
    data = root / "data"
    assert main(["generate", "--config", str(cfg), "--out", str(data)]) == 0
    return root, cfg, data


@pytest.fixture(autouse=True)
def _cache(tmp_path, monkeypatch):
    monkeypatch.setenv("MM3D_CACHE", str(tmp_path / "cache"))


def _write(path, **changes):
    save_config(ExperimentConfig().replace(**{**TINY, **changes}), path)
    return str(path)


# -- generate --------------------------------------------------------------------

def test_generate_summary_and_refusal(tiny, capsys):
    root, cfg, data = tiny
    out = root / "again"
    assert main(["generate", "--config", str(cfg), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    rows = {ln.split()[0]: [int(x) for x in ln.split()[1:]] for ln in text.splitlines()
            if ln.split() and ln.split()[0] in ("train", "val", "test")}
    assert [r[-1] for r in rows.values()] == [30, 8, 10]
    mal, ann = rows["train"][0], rows["train"][1]
    assert mal > 0 and ann == int(round(0.4 * mal))  # default annotation fraction 0.4
    assert rows["val"][0] == rows["val"][1]  # held-out splits are fully annotated
    assert dataset_digest(out) == dataset_digest(data)
    assert main(["generate", "--config", str(cfg), "--out", str(out)]) == 1
    assert "exists" in capsys.readouterr().err
    assert main(["generate", "--config", str(cfg), "--out", str(out), "--force"]) == 0


def test_generate_seed_is_deterministic(tiny, tmp_path):
    _, cfg, _ = tiny
    digests = []
    for name, seed in (("a", 5), ("b", 5), ("c", 6)):
        assert main(["generate", "--config", str(cfg), "--seed", str(seed), "--out", str(tmp_path / name)]) == 0
        digests.append(dataset_digest(tmp_path / name))
    assert digests[0] == digests[1] != digests[2]


def test_invalid_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"bogus": 1}}))
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    assert "bogus" in capsys.readouterr().err
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--dataset", str(tmp_path)]) == 1


# -- train / eval ---------------------------------------------------------------------

def test_train_is_byte_deterministic_and_eval_identical(tiny, tmp_path, capsys):
    _, cfg, data = tiny
    paths = [tmp_path / "a.ckpt", tmp_path / "b.ckpt"]
    for p in paths:
        assert main(["train", "--config", str(cfg), "--dataset", str(data), "--seed", "3", "--out", str(p)]) == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()
    reports = []
    for p in paths:
        capsys.readouterr()
        assert main(["eval", "--config", str(cfg), "--checkpoint", str(p), "--dataset", str(data),
                     "--out", str(p.with_suffix(".json"))]) == 0
        reports.append(capsys.readouterr().out.split("\n", 1)[1])
        assert "[2D localization]" in reports[-1] and "[3D localization]" in reports[-1]
    assert reports[0] == reports[1]
    assert paths[0].with_suffix(".json").read_text() == paths[1].with_suffix(".json").read_text()
    assert main(["train", "--config", str(cfg), "--dataset", str(data), "--out", str(paths[0])]) == 1


@pytest.mark.parametrize("mode", ["slicewise", "mip", "2d"])
def test_train_and_eval_baseline_modes(tiny, tmp_path, capsys, mode):
    _, cfg, data = tiny
    ck = tmp_path / f"{mode}.ckpt"
    assert main(["train", "--config", str(cfg), "--dataset", str(data), "--mode", mode, "--out", str(ck)]) == 0
    capsys.readouterr()
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(ck), "--dataset", str(data)]) == 0
    text = capsys.readouterr().out
    assert f"({mode})" in text
    if mode == "mip":  # no slice estimate: nothing passes the 3D criterion
        block = text.split("[3D localization]")[1]
        assert re.search(r"R@0.25 0.0000", block)


def test_eval_without_findings_reports_na(tiny, tmp_path, capsys):
    _, cfg, data = tiny
    ck = tmp_path / "m.ckpt"
    assert main(["train", "--config", str(cfg), "--dataset", str(data), "--out", str(ck)]) == 0
    stripped = tmp_path / "labels_only"
    stripped.mkdir()
    (stripped / "volumes").symlink_to(data / "volumes")
    index = json.loads((data / "index.json").read_text())
    for e in index["cases"]:
        e["findings"] = {"cc": [], "mlo": []}
    (stripped / "index.json").write_text(json.dumps(index))
    capsys.readouterr()
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(ck), "--dataset", str(stripped)]) == 0
    text = capsys.readouterr().out
    assert "findings=0" in text and "R@0.25 N/A" in text
    assert re.search(r"AUC \d\.\d{4}", text)


def test_corrupt_checkpoint_exit_code(tiny, tmp_path, capsys):
    _, cfg, data = tiny
    ck = tmp_path / "junk.ckpt"
    ck.write_bytes(b"MM3DCKPT1" + b"\x00" * 7)
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(ck), "--dataset", str(data)]) == 1
    assert "offset" in capsys.readouterr().err


# -- transfer / param-check -------------------------------------------------------------

def test_param_check(tmp_path, capsys):
    a = _write(tmp_path / "a.json", **{"model.mode": "2d"})
    b = _write(tmp_path / "b.json")
    assert main(["param-check", a, b]) == 0
    out = capsys.readouterr().out
    assert "manifests identical" in out
    assert main(["param-check", a, b, "--fusion-b", "querysummary"]) == 1
    out = capsys.readouterr().out
    diff = json.loads(out[: out.rindex("}") + 1])
    assert diff["only_in_b"] and all(".fusion." in n for n in diff["only_in_b"])
    assert any(n.endswith("fusion.query") for n in diff["only_in_b"])


def test_transfer(tiny, tmp_path, capsys):
    _, cfg, data = tiny
    ck2d = tmp_path / "2d.ckpt"
    assert main(["train", "--config", str(cfg), "--dataset", str(data), "--mode", "2d", "--out", str(ck2d)]) == 0
    capsys.readouterr()
    assert main(["transfer", "--config", str(cfg), "--checkpoint", str(ck2d), "--out", str(tmp_path / "3d")]) == 0
    assert json.loads(capsys.readouterr().out) == {"missing": [], "unexpected": []}
    assert main(["transfer", "--config", str(cfg), "--checkpoint", str(ck2d), "--fusion", "timesform"]) == 1
    err = capsys.readouterr().err
    assert "manifest mismatch" in err and ".fusion." in err
    assert main(["transfer", "--config", str(cfg), "--checkpoint", str(ck2d), "--fusion", "timesform",
                 "--allow-partial"]) == 0
    other = _write(tmp_path / "wide.json", **{"model.dim": 24})
    assert main(["transfer", "--config", other, "--checkpoint", str(ck2d)]) == 1


# -- sweep ------------------------------------------------------------------------

def test_sweep_shape_and_fixed_case_count(tiny, tmp_path, capsys, caplog):
    _, cfg, _ = tiny
    out = tmp_path / "sweep"
    with caplog.at_level(logging.INFO, logger="mm3d.experiments"):
        assert main(["sweep", "--config", str(cfg), "--axis", "annotation_fraction", "--values", "0.1,0.4,1.0",
                     "--out", str(out)]) == 0
    text = capsys.readouterr().out
    for metric in ("r_at_025", "auc"):
        rows = (out / f"annotation_fraction_{metric}.csv").read_text().splitlines()
        assert rows[0] == "annotation_fraction,mm3d,timesform,querysummary,mlpregress"
        assert len(rows) == 4 and all(len(r.split(",")) == 5 for r in rows)
        assert f"# {metric}" in text
    counts = [int(m.group(1)) for m in re.finditer(r": (\d+) train cases", caplog.text)]
    assert len(counts) == 3 and len(set(counts)) == 1
    annotated = [int(m.group(1)) for m in re.finditer(r"(\d+) annotated malignant", caplog.text)]
    assert annotated == sorted(annotated) and annotated[0] < annotated[-1]
    assert main(["sweep", "--config", str(cfg), "--axis", "data_fraction", "--values", "0,1"]) == 1
