import csv
import json
import subprocess

import jsonschema
import pytest


def load(schemas, name):
    schema = json.loads((schemas / name).read_text())
    jsonschema.Draft202012Validator.check_schema(schema)
    return schema


def run(cli, *args, expect=0, cwd=None):
    proc = subprocess.run([cli, *args], capture_output=True, text=True, cwd=cwd)
    assert proc.returncode == expect, proc.stderr
    return proc


def typed(value, spec):
    kind = spec.get("type")
    if kind == "integer":
        return int(value)
    if kind == "number":
        return float(value)
    if kind == "boolean":
        return {"true": True, "false": False}[value]
    return value


def check_csv(path, schema):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        assert header == schema["x-columns"]
        rows = 0
        for raw in reader:
            row = {k: typed(v, schema["properties"][k]) for k, v in zip(header, raw)}
            jsonschema.validate(row, schema)
            rows += 1
    return rows


def test_selftest_output(cli, schemas):
    out = run(cli, "selftest").stdout
    doc = json.loads(out)
    jsonschema.validate(doc, load(schemas, "selftest.schema.json"))
    assert doc["passed"]
    only = json.loads(run(cli, "selftest", "--filter", "mmfs").stdout)
    assert {c["module"] for c in only["checks"]} == {"mmfs"}
    broken = run(cli, "selftest", "--set", "alpha_init=1", expect=1).stdout
    doc = json.loads(broken)
    jsonschema.validate(doc, load(schemas, "selftest.schema.json"))
    assert [f["id"] for f in doc["failures"]] == ["llm.zero_init"]


def test_usage_and_io_errors(cli, tmp_path):
    proc = run(cli, "selftest", "--set", "d_modle=3", expect=2)
    assert "d_modle" in proc.stderr
    run(cli, "generate", "--checkpoint", str(tmp_path / "missing.mmi"), expect=3)
    run(cli, "frobnicate", expect=2)


TINY = ["--set", "d_model=16", "--set", "image_size=8", "--set", "dec_base_channels=8", "--set", "cond_dim=8",
        "--set", "cond_tokens=4", "--set", "schedule_steps=10", "--set", "visual_tokens=2", "--set", "samples=8",
        "--set", "batch_size=2"]


def test_train_resume_generate(cli, schemas, tmp_path):
    full, part = tmp_path / "full", tmp_path / "part"
    run(cli, "train", "--task", "lm", *TINY, "--set", "steps=4", "-o", str(full))
    run(cli, "train", "--task", "lm", *TINY, "--set", "steps=2", "-o", str(part))
    run(cli, "train", "--resume", str(part / "model.mmi"), "--set", "steps=4", "-o", str(part))
    log_schema = load(schemas, "train_log.schema.json")
    a = [json.loads(l) for l in (full / "log.jsonl").read_text().splitlines()]
    b = [json.loads(l) for l in (part / "log.jsonl").read_text().splitlines()]
    for line in a + b:
        jsonschema.validate(line, log_schema)
    assert [l["step"] for l in b] == [1, 2, 3, 4]
    for x, y in zip(a, b):
        assert abs(x["total"] - y["total"]) <= 1e-4

    gen_schema = load(schemas, "generation.schema.json")
    outs = []
    for name in ("g1", "g2"):
        out = tmp_path / name
        run(cli, "generate", "--checkpoint", str(full / "model.mmi"), "--prompt", "text:1 2", "--set", "max_new=5",
            "-o", str(out))
        doc = json.loads((out / "generation.json").read_text())
        jsonschema.validate(doc, gen_schema)
        images = [(out / e["image"]).read_bytes() for e in doc["elements"] if "image" in e]
        outs.append((doc["elements"], images))
    assert outs[0] == outs[1]

    traced = tmp_path / "traced"
    run(cli, "generate", "--checkpoint", str(full / "model.mmi"), "--prompt", "text:1 2", "--set", "max_new=5",
        "--set", "temperature=1", "--trace", "-o", str(traced))
    doc = json.loads((traced / "generation.json").read_text())
    n_images = sum("image" in e for e in doc["elements"])
    assert check_csv(traced / "trace.csv", load(schemas, "trace_csv.schema.json")) == 10 * n_images


def test_bench_outputs(cli, schemas, tmp_path):
    run(cli, "bench", "-o", str(tmp_path), "--runtime", "--reps", "2")
    assert check_csv(tmp_path / "flops.csv", load(schemas, "flops_csv.schema.json")) == 96
    assert check_csv(tmp_path / "runtime.csv", load(schemas, "runtime_csv.schema.json")) == 3
    svg = (tmp_path / "flops_nt32.svg").read_text()
    assert svg.startswith("<svg") and "mmfs32" in svg


def test_ablate_outputs(cli, schemas, tmp_path):
    proc = subprocess.run([cli, "ablate", "-o", str(tmp_path), "--seeds", "1", "--steps", "3"], capture_output=True,
                          text=True)
    assert proc.returncode in (0, 1)
    jsonschema.validate(json.loads(proc.stdout), load(schemas, "ablation.schema.json"))
    assert check_csv(tmp_path / "ablation.csv", load(schemas, "ablation_csv.schema.json")) == 2


def test_config_file_and_env(cli, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nbogus_key = 1\n")
    proc = subprocess.run([cli, "selftest", "--filter", "bench"], capture_output=True, text=True,
                          env={"MMI_CONFIG": str(cfg)})
    assert proc.returncode == 2
    assert "bogus_key" in proc.stderr
