import hashlib
from pathlib import Path

from surfsense.cli import main, parse_config


def run(args):
    return main([str(a) for a in args])


def write_config(path: Path, **kv):
    path.write_text("".join(f"{k}={v}\n" for k, v in kv.items()))
    return path


def tree_digest(root: Path) -> dict:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def test_unknown_key_rejected(tmp_path):
    cfg = write_config(tmp_path / "c.txt", out_dir=tmp_path / "o", bogus_key=1)
    assert run(["simulate-trigger", cfg]) == 2


def test_malformed_line_rejected(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("this is not a pair\n")
    assert run(["simulate-trigger", cfg]) == 2


def test_parse_config_defaults_and_comments(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("# comment\nseed=5\n\ntt=12.5\n")
    values = parse_config(cfg)
    assert values["seed"] == 5
    assert values["tt"] == 12.5
    assert values["debounce_n"] == 10


def test_simulate_trigger_demo_trace(tmp_path, capsys):
    out = tmp_path / "run"
    cfg = write_config(tmp_path / "c.txt", out_dir=out)
    assert run(["simulate-trigger", cfg]) == 0
    events = (out / "events.txt").read_text().splitlines()
    captures = [l for l in events if l.endswith(" capture")]
    assert len(captures) == 5
    assert (out / "config.txt").read_text() == cfg.read_text()


def test_simulate_trigger_reads_trace_file(tmp_path):
    trace = tmp_path / "trace.txt"
    lines = []
    for i in range(20):
        lines.append(f"{i * 0.02:.6f} 0 0 0 0 0 0")
    trace.write_text("\n".join(lines) + "\n")
    out = tmp_path / "run"
    cfg = write_config(tmp_path / "c.txt", out_dir=out, trace=trace)
    assert run(["simulate-trigger", cfg]) == 0
    events = (out / "events.txt").read_text().splitlines()
    assert len([l for l in events if "capture" in l]) == 1


def test_gen_corpus_roundtrips_and_is_deterministic(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    c1 = write_config(tmp_path / "c1.txt", out_dir=out1, images_per_class=4, persons=2, side=32, seed=9)
    c2 = write_config(tmp_path / "c2.txt", out_dir=out2, images_per_class=4, persons=2, side=32, seed=9)
    assert run(["gen-corpus", c1]) == 0
    assert run(["gen-corpus", c2]) == 0
    d1, d2 = tree_digest(out1), tree_digest(out2)
    del d1["config.txt"], d2["config.txt"]
    assert d1 == d2  # byte-identical corpora


def test_assess_quality(tmp_path):
    gen_out = tmp_path / "corpus_run"
    gen_cfg = write_config(
        tmp_path / "g.txt", out_dir=gen_out, images_per_class=3, persons=2, side=32, seed=1
    )
    assert run(["gen-corpus", gen_cfg]) == 0
    out = tmp_path / "quality"
    cfg = write_config(
        tmp_path / "q.txt", out_dir=out, images=gen_out / "corpus", blur_threshold=0.0
    )
    assert run(["assess-quality", cfg]) == 0
    rows = (out / "quality.csv").read_text().splitlines()
    assert rows[0] == "path,log_variance,pass"
    assert len(rows) > 1


def test_train_evaluate_and_report(tmp_path):
    gen_out = tmp_path / "gen"
    write_config(tmp_path / "g.txt", out_dir=gen_out, images_per_class=6, persons=2, side=32, seed=3)
    assert run(["gen-corpus", tmp_path / "g.txt"]) == 0
    manifest = gen_out / "corpus" / "manifest.txt"

    train_out = tmp_path / "train"
    write_config(
        tmp_path / "t.txt",
        out_dir=train_out,
        corpus_manifest=manifest,
        epochs=2,
        lr0=0.002,
        seed=3,
    )
    assert run(["train", tmp_path / "t.txt"]) == 0
    assert (train_out / "checkpoint.bin").exists()
    assert (train_out / "training.csv").read_text().startswith("epoch,loss")

    eval_out = tmp_path / "eval"
    write_config(
        tmp_path / "e.txt",
        out_dir=eval_out,
        corpus_manifest=manifest,
        split_kind="time_kfold",
        k=2,
        epochs=2,
        lr0=0.002,
        seed=3,
    )
    assert run(["evaluate", tmp_path / "e.txt"]) == 0
    for name in (
        "folds.csv",
        "summary.txt",
        "confusion_object.csv",
        "confusion_material.csv",
    ):
        assert (eval_out / name).exists(), name

    write_config(tmp_path / "r.txt", out_dir=eval_out)
    assert run(["report", tmp_path / "r.txt"]) == 0
    assert "summary.txt" in (eval_out / "report.txt").read_text()


def test_train_rerun_byte_identical_checkpoint(tmp_path):
    gen_out = tmp_path / "gen"
    write_config(tmp_path / "g.txt", out_dir=gen_out, images_per_class=4, persons=2, side=32, seed=2)
    assert run(["gen-corpus", tmp_path / "g.txt"]) == 0
    manifest = gen_out / "corpus" / "manifest.txt"
    digests = []
    for name in ("t1", "t2"):
        out = tmp_path / name
        write_config(
            tmp_path / f"{name}.txt",
            out_dir=out,
            corpus_manifest=manifest,
            epochs=1,
            seed=7,
        )
        assert run(["train", tmp_path / f"{name}.txt"]) == 0
        digests.append(hashlib.sha256((out / "checkpoint.bin").read_bytes()).hexdigest())
    assert digests[0] == digests[1]


def test_cl_run_command(tmp_path):
    # corpus + checkpoint
    gen_out = tmp_path / "gen"
    write_config(tmp_path / "g.txt", out_dir=gen_out, images_per_class=6, persons=2, side=32, seed=4)
    assert run(["gen-corpus", tmp_path / "g.txt"]) == 0
    manifest = gen_out / "corpus" / "manifest.txt"
    train_out = tmp_path / "train"
    write_config(
        tmp_path / "t.txt", out_dir=train_out, corpus_manifest=manifest, epochs=1, seed=4
    )
    assert run(["train", tmp_path / "t.txt"]) == 0

    # a one-task stream reusing the corpus manifest for train and eval
    stream = tmp_path / "stream.txt"
    rel = manifest.relative_to(tmp_path)
    stream.write_text(f"1 {rel} {rel}\n")

    cl_out = tmp_path / "cl"
    write_config(
        tmp_path / "c.txt",
        out_dir=cl_out,
        checkpoint=train_out / "checkpoint.bin",
        task_stream=stream,
        epochs=1,
        seed=4,
        buffer_capacity=16,
        tricks="all",
    )
    assert run(["cl-run", tmp_path / "c.txt"]) == 0
    metrics = (cl_out / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "task_id,eval_task_id,top1_object,top1_material"
    assert len(metrics) == 2


def test_validate_exit_codes(capsys):
    assert run(["validate", "bed", "plush"]) == 0
    assert run(["validate", "bed", "ceramic"]) == 1
    assert run(["validate", "bed", "granite"]) == 2


def test_validate_with_override_file(tmp_path):
    table = tmp_path / "pairs.txt"
    table.write_text("bed ceramic\n")
    assert run(["validate", "bed", "ceramic", "--mapping-file", table]) == 0


def test_failure_removes_partial_outputs(tmp_path):
    out = tmp_path / "run"
    cfg = write_config(
        tmp_path / "c.txt", out_dir=out, corpus_manifest=tmp_path / "missing.txt", epochs=1
    )
    assert run(["train", cfg]) == 1
    assert not (out / "config.txt").exists()
    assert not (out / "checkpoint.bin").exists()


def test_commands_do_not_mutate_inputs(tmp_path):
    gen_out = tmp_path / "gen"
    write_config(tmp_path / "g.txt", out_dir=gen_out, images_per_class=3, persons=2, side=32, seed=5)
    assert run(["gen-corpus", tmp_path / "g.txt"]) == 0
    before = tree_digest(gen_out)
    train_out = tmp_path / "train"
    write_config(
        tmp_path / "t.txt",
        out_dir=train_out,
        corpus_manifest=gen_out / "corpus" / "manifest.txt",
        epochs=1,
        seed=5,
    )
    assert run(["train", tmp_path / "t.txt"]) == 0
    assert tree_digest(gen_out) == before


def test_train_parallel_trunks_writes_two_checkpoints(tmp_path):
    gen_out = tmp_path / "gen"
    write_config(tmp_path / "g.txt", out_dir=gen_out, images_per_class=3, persons=2, side=32, seed=6)
    assert run(["gen-corpus", tmp_path / "g.txt"]) == 0
    train_out = tmp_path / "train"
    write_config(
        tmp_path / "t.txt",
        out_dir=train_out,
        corpus_manifest=gen_out / "corpus" / "manifest.txt",
        epochs=1,
        seed=6,
        parallel_trunks="true",
    )
    assert run(["train", tmp_path / "t.txt"]) == 0
    assert (train_out / "checkpoint_object.bin").exists()
    assert (train_out / "checkpoint_material.bin").exists()
