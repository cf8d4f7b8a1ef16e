import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from swli.cli import RunConfig, load_image, main, parse_config_text, png_bytes
from swli.errors import ConfigError

from conftest import disc_image, stripe_image, to_uint8


@pytest.fixture
def images(tmp_path):
    src, ref = tmp_path / "s.png", tmp_path / "r.png"
    Image.fromarray(to_uint8(disc_image()), "RGB").save(src)
    Image.fromarray(to_uint8(stripe_image()), "RGB").save(ref)
    return src, ref


@pytest.fixture
def cache_dir(tmp_path, monkeypatch):
    d = tmp_path / "cache"
    monkeypatch.setenv("SWLI_CACHE_DIR", str(d))
    return d


def run(*argv):
    return main([str(a) for a in argv])


def edit_args(src, ref, out, *extra):
    return ("edit", "--source", src, "--reference", ref, "--prompt", "a red disc", "--edit-prompt", "a blue disc",
            "--backend", "toy", "--steps", 10, "--out", out, *extra)


def test_png_round_trip(tmp_path):
    img = to_uint8(disc_image())
    path = tmp_path / "x.png"
    path.write_bytes(png_bytes(img / 127.5 - 1.0))
    assert np.array_equal(to_uint8(load_image(path)), img)
    with pytest.raises(ConfigError):
        load_image(tmp_path / "missing.png")


def test_config_parsing():
    vals = parse_config_text("# comment\nsteps = 25  # trailing\nprompt = \"a cat\"\nnti = false\n\n"
                             "t-early-frac=0.3\n")
    assert vals == {"steps": 25, "prompt": "a cat", "nti": False, "t_early_frac": 0.3}
    with pytest.raises(ConfigError, match="bogus"):
        parse_config_text("bogus = 1")
    with pytest.raises(ConfigError, match="steps"):
        parse_config_text("steps = many")
    with pytest.raises(ConfigError):
        parse_config_text("just words")


def test_defaults_are_valid():
    cfg = RunConfig()
    cfg.schedule().build()
    cfg.guidance()
    cfg.nti_config()
    cfg.injection_config()


def test_edit_outputs_and_determinism(images, cache_dir, tmp_path):
    src, ref = images
    out_a, out_b = tmp_path / "a.png", tmp_path / "b.png"
    assert run(*edit_args(src, ref, out_a, "--seed", 7)) == 0
    assert run(*edit_args(src, ref, out_b, "--seed", 7)) == 0
    assert out_a.read_bytes() == out_b.read_bytes()
    manifest = json.loads(out_a.with_suffix(".manifest.json").read_text())
    assert manifest["command"] == "edit"
    assert manifest["config"]["seed"] == 7 and manifest["config"]["steps"] == 10
    assert {"schedule_fingerprint", "backend_fingerprint", "config_fingerprint", "cache"} <= set(manifest)
    assert [e["hit"] for e in manifest["cache"]] == [False, False, False]
    second = json.loads(out_b.with_suffix(".manifest.json").read_text())
    assert [e["hit"] for e in second["cache"]] == [True, True, True]
    lines = out_a.with_suffix(".stages.jsonl").read_text().splitlines()
    assert len(lines) == 10 and json.loads(lines[0])["stage"] == "shape"
    with Image.open(out_a) as im:
        assert im.mode == "RGB" and im.size == (32, 32)


def test_invert_then_edit_hits_cache(images, tmp_path):
    src, ref = images
    cache = tmp_path / "c"
    assert run("invert", "--source", src, "--prompt", "a red disc", "--steps", 10, "--cache-dir", cache,
               "--out", tmp_path / "inv.json") == 0
    out = tmp_path / "e.png"
    assert run("edit", "--source", src, "--prompt", "a red disc", "--edit-prompt", "a blue disc", "--steps", 10,
               "--cache-dir", cache, "--out", out) == 0
    manifest = json.loads(out.with_suffix(".manifest.json").read_text())
    assert all(e["hit"] for e in manifest["cache"]) and len(manifest["cache"]) == 2


def test_config_file_and_flag_precedence(images, cache_dir, tmp_path):
    src, ref = images
    conf = tmp_path / "run.conf"
    conf.write_text(f"source = {src}\nprompt = a red disc\nedit_prompt = a blue disc\nsteps = 5\n"
                    "t_early_frac = 0.6\n")
    out = tmp_path / "o.png"
    assert run("edit", "--config", conf, "--steps", 4, "--out", out) == 0
    manifest = json.loads(out.with_suffix(".manifest.json").read_text())
    assert manifest["config"]["steps"] == 4
    assert manifest["config"]["t_early_frac"] == 0.6
    stages = [json.loads(x)["stage"] for x in out.with_suffix(".stages.jsonl").read_text().splitlines()]
    assert stages == ["shape", "shape", "shape", "attribute"]


def test_reconstruct_and_eval(images, cache_dir, tmp_path, capsys):
    src, ref = images
    out = tmp_path / "rec.png"
    assert run("reconstruct", "--source", src, "--prompt", "a red disc", "--steps", 10, "--no-nti",
               "--out", out) == 0
    capsys.readouterr()
    assert run("eval", out, "--source", src, "--reference", ref) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["palette_metric"] == "palette (quantile)"
    assert report["palette_src"] < report["palette_ref"]
    assert -1 <= report["semantic_src"] <= 1
    assert run("eval", src, "--source", src, "--out", tmp_path / "m.json") == 0
    saved = json.loads((tmp_path / "m.json").read_text())
    assert saved["palette_src"] == 0 and saved["semantic_src"] == pytest.approx(1.0)


@pytest.mark.parametrize("argv, needle", [
    (("edit", "--edit-prompt", "x"), "--source"),
    (("reconstruct",), "--source"),
    (("edit", "--source", "{src}"), "--edit-prompt"),
    (("edit", "--source", "{src}", "--edit-prompt", "x", "--backend", "nope"), "backend"),
    (("edit", "--source", "{src}", "--edit-prompt", "x", "--t-early-frac", "2"), "t_early_frac"),
    (("edit", "--source", "{src}", "--edit-prompt", "x", "--steps", "0"), "num_sample_steps"),
    (("edit", "--source", "{src}", "--edit-prompt", "x", "--config", "/nonexistent.conf"), "config"),
    (("edit", "--source", "/nonexistent.png", "--edit-prompt", "x"), "nonexistent"),
])
def test_configuration_errors_exit_2(images, cache_dir, capsys, argv, needle):
    src, _ = images
    assert run(*[a.format(src=src) for a in argv]) == 2
    assert needle in capsys.readouterr().err


def test_usage_errors_exit_2(capsys):
    assert run("edit", "--frobnicate") == 2
    assert "usage" in capsys.readouterr().err
    assert run("explode") == 2
    assert run() == 2


def test_runtime_errors_exit_3(images, tmp_path, capsys):
    src, ref = images
    cache = tmp_path / "c"
    base = ("edit", "--source", src, "--reference", ref, "--edit-prompt", "x", "--cache-dir", cache)
    assert run(*base, "--steps", 10, "--out", tmp_path / "a.png") == 0
    # corrupt one byte of every cached entry
    for entry in cache.glob("*.swli"):
        data = bytearray(entry.read_bytes())
        data[len(data) // 2] ^= 0xFF
        entry.chmod(0o644)
        entry.write_bytes(bytes(data))
    capsys.readouterr()
    assert run(*base, "--steps", 10, "--out", tmp_path / "b.png") == 3
    assert "CacheFormatError" in capsys.readouterr().err
    assert not (tmp_path / "b.png").exists()


def test_eval_size_mismatch(images, tmp_path):
    src, _ = images
    small = tmp_path / "small.png"
    Image.fromarray(np.zeros((8, 8, 3), np.uint8), "RGB").save(small)
    assert run("eval", small, "--source", src) == 2


def test_entry_points(images, tmp_path):
    src, _ = images
    env_cache = tmp_path / "c"
    out = tmp_path / "o.png"
    proc = subprocess.run([sys.executable, "-m", "swli", "edit", "--source", str(src), "--edit-prompt", "x",
                           "--steps", "5", "--cache-dir", str(env_cache), "--out", str(out)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert out.exists()
    proc = subprocess.run(["swli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "swli" in proc.stdout
