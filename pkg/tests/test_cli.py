import re

import pytest

from centeratt.cli import build_parser, main, resolve_workers
from centeratt.config import dump_config
from centeratt.scene import read_manifest, write_manifest
from centeratt.weights import read_weights
from conftest import small_config


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.cfg"
    cfg.write_text(dump_config(small_config()))
    assert main(["generate", "--config", str(cfg), "--out", str(root / "scenes"),
                 "--count", "3"]) == 0
    return root, str(cfg), str(root / "scenes" / "manifest.txt")


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def _option_strings(parser):
    sub = next(a for a in parser._actions if a.choices and isinstance(a.choices, dict))
    return {name: [s for a in p._actions for s in a.option_strings]
            for name, p in sub.choices.items()}


def test_help_documents_every_flag(capsys):
    for name, flags in _option_strings(build_parser()).items():
        with pytest.raises(SystemExit) as info:
            main([name, "--help"])
        assert info.value.code == 0
        text = capsys.readouterr().out
        for flag in flags:
            assert flag in text, (name, flag)
    assert set(_option_strings(build_parser())) >= {"generate", "detect", "bench", "eval",
                                                    "fold-bn", "compare-precision"}


def test_generate_zero_scenes(tmp_path, capsys):
    code, _, _ = run(capsys, "generate", "--out", tmp_path, "--count", 0)
    assert code == 0 and read_manifest(tmp_path / "manifest.txt") == []


def test_generate_deterministic(tmp_path, workspace, capsys):
    _, cfg, _ = workspace
    for d in ("a", "b"):
        assert run(capsys, "generate", "--config", cfg, "--out", tmp_path / d, "--count", 2)[0] == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(files) == 5
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_manifest_round_trip(tmp_path, workspace):
    _, _, manifest = workspace
    entries = read_manifest(manifest)
    copy = tmp_path / "scenes_copy.txt"
    write_manifest(copy, entries)
    assert read_manifest(copy) == entries


def test_detect_oracle_first_stage_matches_gt(tmp_path, workspace, capsys):
    _, cfg, manifest = workspace
    code, out, _ = run(capsys, "detect", "--config", cfg, "--manifest", manifest, "--oracle",
                       "--no-second-stage", "--out", tmp_path / "d")
    assert code == 0
    header, row = out.splitlines()
    assert header == "variant,scenes,detections,mAP,mAPH,seconds"
    assert row.split(",")[3:5] == ["100.0", "100.0"]
    code, out, _ = run(capsys, "eval", "--config", cfg, "--manifest", manifest,
                       "--detections", tmp_path / "d", "--out", tmp_path / "m.csv")
    assert code == 0 and out.splitlines()[0] == "class,ap,aph"
    assert out.splitlines()[-1] == "100.0,100.0"
    assert (tmp_path / "m.csv").read_text() == out


def test_detect_threshold_one_gives_nothing(tmp_path, workspace, capsys):
    _, cfg, manifest = workspace
    code, out, _ = run(capsys, "detect", "--config", cfg, "--manifest", manifest, "--oracle",
                       "--score-threshold", "1.0", "--out", tmp_path)
    assert code == 0 and out.splitlines()[1].split(",")[2] == "0"
    assert all(p.read_text() == "" for p in tmp_path.glob("scene_*.txt"))


def test_default_threshold():
    args = build_parser().parse_args(["detect", "--manifest", "m", "--out", "o"])
    assert args.score_threshold == 0.1


def test_detect_all_variants(tmp_path, workspace, capsys):
    _, cfg, manifest = workspace
    code, out, _ = run(capsys, "detect", "--config", cfg, "--manifest", manifest, "--oracle",
                       "--variants", "all", "--out", tmp_path)
    assert code == 0
    rows = out.splitlines()[1:]
    assert [r.split(",")[0] for r in rows] == ["baseline", "centeratt", "fpn", "centeratt+fpn"]
    assert (tmp_path / "variants.csv").read_text() == out
    assert len(list((tmp_path / "centeratt+fpn").glob("*.txt"))) == 3


def test_detect_is_byte_deterministic(tmp_path, workspace, capsys):
    _, cfg, manifest = workspace
    for d in ("a", "b"):
        run(capsys, "detect", "--config", cfg, "--manifest", manifest, "--oracle", "--centeratt",
            "--fpn", "--out", tmp_path / d)
    for p in (tmp_path / "a").iterdir():
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_eval_empty_and_missing(tmp_path, workspace, capsys):
    _, cfg, manifest = workspace
    ids = [e.scene_id for e in read_manifest(manifest)]
    for sid in ids[:2]:
        (tmp_path / f"{sid}.txt").write_text("")
    code, _, err = run(capsys, "eval", "--config", cfg, "--manifest", manifest,
                       "--detections", tmp_path)
    assert code == 8 and ids[2] in err and ids[0] not in err
    (tmp_path / f"{ids[2]}.txt").write_text("")
    code, out, _ = run(capsys, "eval", "--config", cfg, "--manifest", manifest,
                       "--detections", tmp_path)
    assert code == 0 and out.splitlines()[-1] == "0.0,0.0"


def test_bench_runs(tmp_path, workspace, capsys):
    _, cfg, manifest = workspace
    code, out, _ = run(capsys, "bench", "--config", cfg, "--manifest", manifest, "--oracle",
                       "--runs", 3, "--warmup", 0, "--csv", "--out", tmp_path / "b.csv")
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "variant,load_data,preprocess,collate,load_to_gpu,model,overall,quality"
    cells = lines[1].split(",")
    assert round(sum(float(c) for c in cells[1:6]), 1) == float(cells[6])
    assert cells[7] == "100.0"
    assert (tmp_path / "b.csv").read_text() == out


def test_bench_three_samples(workspace, monkeypatch):
    from centeratt import cli

    captured = []
    original = cli.profile_pipeline

    def spy(*a, **k):
        rep = original(*a, **k)
        captured.append(rep)
        return rep

    monkeypatch.setattr(cli, "profile_pipeline", spy)
    _, cfg, manifest = workspace
    assert main(["bench", "--config", cfg, "--manifest", manifest, "--oracle", "--runs", "3",
                 "--warmup", "0", "--no-second-stage"]) == 0
    assert all(len(v) == 3 for v in captured[0].samples.values())


def test_weights_commands(tmp_path, workspace, capsys):
    _, cfg, manifest = workspace
    w = tmp_path / "w.catw"
    assert run(capsys, "init-weights", "--config", cfg, "--seed", 5, "--out", w)[0] == 0
    code, out, _ = run(capsys, "fold-bn", "--weights", w, "--out", tmp_path / "f.catw")
    assert code == 0
    folded = read_weights(tmp_path / "f.catw")
    assert not any(".bn." in k for k in folded)
    assert re.search(r"folded \d+ batch-norm", out)
    code, out, _ = run(capsys, "detect", "--config", cfg, "--manifest", manifest,
                       "--weights", tmp_path / "f.catw", "--centeratt", "--out", tmp_path / "d")
    assert code == 0


def test_compare_precision(tmp_path, workspace, capsys):
    _, cfg, manifest = workspace
    code, out, _ = run(capsys, "compare-precision", "--config", cfg, "--manifest", manifest,
                       "--oracle", "--out", tmp_path / "eq.csv")
    assert code == 0 and "PASS" in out
    rows = (tmp_path / "eq.csv").read_text().splitlines()
    assert rows[0] == "tensor,metric,value" and rows[-1] == "overall,pass,1"


def test_exit_codes(tmp_path, workspace, capsys):
    _, cfg, manifest = workspace
    assert run(capsys, "detect", "--config", cfg, "--manifest", manifest, "--out", tmp_path)[0] == 2
    assert run(capsys, "detect", "--manifest", tmp_path / "none.txt", "--oracle",
               "--out", tmp_path)[0] == 8
    bad = tmp_path / "bad.catw"
    bad.write_bytes(b"nonsense")
    assert run(capsys, "fold-bn", "--weights", bad, "--out", tmp_path / "o")[0] == 4
    assert run(capsys, "detect", "--config", cfg, "--manifest", manifest, "--oracle",
               "--score-threshold", 2, "--out", tmp_path)[0] == 2
    (tmp_path / "c.cfg").write_text("nonsense = 1\n")
    assert run(capsys, "generate", "--config", tmp_path / "c.cfg", "--out", tmp_path)[0] == 2
    with pytest.raises(SystemExit) as info:
        main(["detect", "--bogus"])
    assert info.value.code == 2


def test_workers_precedence(monkeypatch):
    monkeypatch.delenv("CENTERATT_WORKERS", raising=False)
    assert resolve_workers(None, 2) == 2
    monkeypatch.setenv("CENTERATT_WORKERS", "4")
    assert resolve_workers(None, 2) == 4
    assert resolve_workers(3, 2) == 3
    monkeypatch.setenv("CENTERATT_WORKERS", "x")
    with pytest.raises(Exception):
        resolve_workers(None, 1)
