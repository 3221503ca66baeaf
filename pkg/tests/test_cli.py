import csv
import json

import numpy as np
import pytest
from PIL import Image

from conftest import tiny_config
from p2i.cli import main
from p2i.pipeline import MANIFEST, RESOLVED_CONFIG, resolve_config


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_kind(err):
    return json.loads(err.strip().splitlines()[-1])["error"]


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """bench-init -> select -> train -> attack -> eval -> interpolate -> report, all via main()."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "tiny.json"
    config.write_text(tiny_config().to_json())
    d = {name: root / name for name in ("bench", "select", "train", "attack", "eval", "interp", "report")}
    steps = [
        ["bench-init", "--config", config, "--out-dir", d["bench"]],
        ["select", "--data-manifest", d["bench"], "--out-dir", d["select"]],
        ["train", "--data-manifest", d["select"] / MANIFEST, "--out-dir", d["train"]],
        ["attack", "--data-manifest", d["select"], "--checkpoint", d["train"], "--out-dir", d["attack"],
         "--jobs", "2"],
        ["eval", "--data-manifest", d["attack"], "--out-dir", d["eval"]],
        ["interpolate", "--data-manifest", d["select"], "--checkpoint", d["train"],
         "--out-dir", d["interp"], "--ids", "0,1"],
        ["report", "--data-manifest", d["eval"], "--data-manifest", d["interp"], "--out-dir", d["report"]],
    ]
    outputs = []
    for argv in steps:
        code = main([str(a) for a in argv])
        assert code == 0, argv
        outputs.append(argv[0])
    d["config"] = config
    return d


def test_every_stage_writes_a_manifest_with_the_config_hash(chain):
    hashes = set()
    for name in ("bench", "select", "train", "attack", "eval", "interp", "report"):
        manifest = json.loads((chain[name] / MANIFEST).read_text())
        assert "incomplete" not in manifest
        assert (chain[name] / RESOLVED_CONFIG).exists()
        hashes.add(manifest["config_hash"])
        for rel, digest in manifest["files"].items():
            assert (chain[name] / rel).exists()
    assert len(hashes) == 1


def test_file_formats(chain):
    cfg = tiny_config()
    with open(chain["select"] / "selected.csv") as fh:
        rows = list(csv.DictReader(fh))
    # public and synthetic top-n lists are merged
    assert len(rows) == cfg.num_classes * cfg.top_n * (2 if cfg.use_synthetic else 1)
    assert set(rows[0]) == {"identity", "rank", "image_ref", "target_score"}
    with open(chain["train"] / "losses.csv") as fh:
        losses = list(csv.DictReader(fh))
    assert len(losses) == cfg.epochs
    assert list(losses[0]) == ["epoch", "mse", "lpips", "id", "parse", "align_reg", "recon", "total"]
    pngs = sorted((chain["attack"] / "images").glob("*.png"))
    assert len(pngs) == cfg.num_classes
    assert np.asarray(Image.open(pngs[0])).shape == (cfg.height, cfg.width)
    with open(chain["eval"] / "metrics.csv") as fh:
        metrics = list(csv.DictReader(fh))
    assert [int(r["identity"]) for r in metrics] == list(range(cfg.num_classes))
    traces = json.loads((chain["interp"] / "traces.json").read_text())
    assert len(traces["identities"]) <= 2
    for c in traces["identities"]:
        with open(chain["interp"] / f"trace_{c}.csv") as fh:
            assert len(list(csv.DictReader(fh))) == cfg.interpolation_steps


def test_report_counts_selection_queries_only(chain):
    cfg = tiny_config()
    report = json.loads((chain["report"] / "report.json").read_text())
    counts = {r["phase"]: r["count"] for r in report["rows"]}
    n_public = cfg.n_public_ids * cfg.images_per_id
    assert counts["selection"] == n_public + cfg.n_synthetic
    assert counts["training"] == 0 and counts["attack"] == 0
    assert report["violations"] == []


def test_unknown_flag_is_a_usage_error(capsys):
    assert run_cli(capsys, "select", "--bogus")[0] == 2
    assert run_cli(capsys, "nonsense")[0] == 2
    assert run_cli(capsys)[0] == 2


def test_attack_before_train(capsys, chain, tmp_path):
    code, _, err = run_cli(capsys, "attack", "--data-manifest", chain["select"],
                           "--checkpoint", tmp_path / "no-train", "--out-dir", tmp_path / "out")
    assert code == 1
    assert error_kind(err) == "MissingCheckpoint"
    assert not (tmp_path / "out").exists()


def test_refuses_to_overwrite_without_force(capsys, chain, tmp_path):
    out = tmp_path / "eval"
    assert run_cli(capsys, "eval", "--data-manifest", chain["attack"], "--out-dir", out)[0] == 0
    first = (out / "metrics.csv").read_bytes()
    code, _, err = run_cli(capsys, "eval", "--data-manifest", chain["attack"], "--out-dir", out)
    assert code == 1 and error_kind(err) == "OutputExists"
    assert run_cli(capsys, "eval", "--data-manifest", chain["attack"], "--out-dir", out, "--force")[0] == 0
    assert (out / "metrics.csv").read_bytes() == first


def test_force_never_clears_foreign_directories(capsys, chain, tmp_path):
    foreign = tmp_path / "mine"
    foreign.mkdir()
    (foreign / "notes.txt").write_text("keep")
    code, _, err = run_cli(capsys, "eval", "--data-manifest", chain["attack"], "--out-dir", foreign, "--force")
    assert code == 1 and error_kind(err) == "OutputExists"
    assert (foreign / "notes.txt").read_text() == "keep"


def test_mixing_configs_is_refused(capsys, chain, tmp_path):
    other = tmp_path / "other.json"
    other.write_text(tiny_config(top_n=3).to_json())
    code, _, err = run_cli(capsys, "train", "--config", other, "--data-manifest", chain["select"],
                           "--out-dir", tmp_path / "train")
    assert code == 1 and error_kind(err) == "ConfigMismatch"


def test_tampered_artifact_is_refused(capsys, chain, tmp_path):
    copy = tmp_path / "select"
    import shutil
    shutil.copytree(chain["select"], copy)
    with open(copy / "selected.csv", "a") as fh:
        fh.write("0,99,x,0.5\n")
    code, _, err = run_cli(capsys, "train", "--data-manifest", copy, "--out-dir", tmp_path / "train")
    assert code == 1 and error_kind(err) == "ManifestMismatch"


def test_incomplete_upstream_is_refused(capsys, tmp_path):
    (tmp_path / "half").mkdir()
    (tmp_path / "half" / MANIFEST).write_text(json.dumps({"stage": "bench", "incomplete": True}))
    (tmp_path / "half" / RESOLVED_CONFIG).write_text(tiny_config().to_json())
    code, _, err = run_cli(capsys, "select", "--data-manifest", tmp_path / "half", "--out-dir", tmp_path / "s")
    assert code == 1 and error_kind(err) == "MissingInput"


def test_seed_override_is_logged(tmp_path, caplog):
    config = tmp_path / "c.json"
    config.write_text(tiny_config(seed=3).to_json())
    with caplog.at_level("WARNING", logger="p2i"):
        cfg = resolve_config(config, None, {"P2I_SEED": "11"})
    assert cfg.seed == 11
    assert "P2I_SEED" in caplog.text
    assert resolve_config(config, None, {}).seed == 3


def test_e2e_is_deterministic(capsys, tmp_path):
    config = tmp_path / "tiny.json"
    config.write_text(tiny_config().to_json())
    assert run_cli(capsys, "e2e", "--config", config, "--out-dir", tmp_path / "a")[0] == 0
    code, out, _ = run_cli(capsys, "e2e", "--config", config, "--out-dir", tmp_path / "b", "--jobs", "2")
    assert code == 0
    summary = json.loads(out)
    assert summary["generator_unchanged"] is True
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
