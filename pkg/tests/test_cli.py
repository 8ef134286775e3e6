import json
import re
import shutil
import subprocess

import numpy as np
import pytest

from k12bert import cli
from k12bert.corpus import read_corpus, read_manifest
from k12bert.mlm_dataset import read_header
from k12bert.tagging import load_external_embeddings, load_questions, load_taxonomy, write_embeddings

LOG_LINE = re.compile(r"^(DEBUG|INFO|WARNING|ERROR|CRITICAL)\t[a-z-]+\t[^\t]*$")

TINY_CONFIG = """\
# tiny end-to-end settings
encoder.layers = 1
encoder.hidden = 16
encoder.heads = 2
encoder.ff_dim = 32
encoder.max_len = 32
train.epochs = 1
train.batch_size = 16
train.grad_accum_steps = 2
train.lr = 1e-3
mlm.shard_size = 64
"""


@pytest.fixture
def workdir(tmp_path, fixtures_dir):
    (tmp_path / "k12.cfg").write_text(TINY_CONFIG + "\n".join([
        f"paths.corpus_in = {fixtures_dir / 'corpus'}",
        f"paths.vocab = {fixtures_dir / 'vocab.txt'}",
        f"paths.taxonomy = {fixtures_dir / 'taxonomy.jsonl'}",
        f"paths.questions = {fixtures_dir / 'questions.jsonl'}",
        f"paths.corpus_out = {tmp_path / 'out/corpus.jsonl'}",
        f"paths.manifest = {tmp_path / 'out/manifest.json'}",
        f"paths.shards_dir = {tmp_path / 'out/shards'}",
        f"paths.checkpoint = {tmp_path / 'out/model.k12c'}",
        f"paths.trace = {tmp_path / 'out/trace.csv'}",
        f"paths.embeddings = {tmp_path / 'out/emb.emb'}",
        f"paths.report = {tmp_path / 'out/report.json'}",
    ]) + "\n", encoding="utf-8")
    return tmp_path


def run(workdir, *args):
    return cli.run(["--config", str(workdir / "k12.cfg"), *args])


# -- config ------------------------------------------------------------------

def test_resolve_key_aliases():
    assert cli.resolve_key("ingest.sources") == "ingest.sources"
    assert cli.resolve_key("sources") == "ingest.sources"
    with pytest.raises(cli.ConfigError, match="valid keys"):
        cli.resolve_key("nonsense")
    with pytest.raises(cli.ConfigError, match="ambiguous"):
        cli.resolve_key("eps")


def test_overrides_take_precedence(tmp_path):
    cfgfile = tmp_path / "c.cfg"
    cfgfile.write_text("train.epochs = 3\ningest.sources = a, b\n")
    cfg = cli.load_config(cfgfile, ["--train.epochs=5", "--min_words", "6"])
    assert cfg["train.epochs"] == 5 and cfg["ingest.min_words"] == 6
    assert cfg["ingest.sources"] == ["a", "b"]


def test_config_errors(tmp_path):
    with pytest.raises(cli.ConfigError, match="needs a value"):
        cli.load_config(None, ["--train.epochs"])
    with pytest.raises(cli.ConfigError, match="overlap"):
        cli.load_config(None, ["--sources=a", "--exclude_sources=a"])
    with pytest.raises(cli.ConfigError, match="bad value"):
        cli.load_config(None, ["--train.epochs=many"])
    (tmp_path / "bad.cfg").write_text("just words\n")
    with pytest.raises(cli.ConfigError, match="bad.cfg:1"):
        cli.load_config(tmp_path / "bad.cfg", [])


def test_unknown_key_exit_code_and_log_format(workdir, capsys):
    assert run(workdir, "ingest", "--frobnicate=1") == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert err and all(LOG_LINE.match(line) for line in err)
    assert err[-1].startswith("ERROR\tingest\t") and "valid keys" in err[-1]


def test_missing_input_exit_code(workdir, tmp_path):
    assert run(workdir, "ingest", f"--corpus_in={tmp_path / 'nope'}") == 1


# -- stages ------------------------------------------------------------------

def test_ingest_paper_subset(workdir, capsys):
    assert run(workdir, "--jobs", "2", "ingest", "--sources", "siyavula,openstax,learncbse,ck12,extramarks") == 0
    records = read_corpus(workdir / "out/corpus.jsonl")
    assert {r.source for r in records} == {"siyavula", "openstax", "extramarks"}
    manifest = read_manifest(workdir / "out/manifest.json")
    assert manifest["total"] == len(records)
    err = capsys.readouterr().err.strip().splitlines()
    assert all(LOG_LINE.match(line) for line in err)
    assert any("dropped_by_script=" in line for line in err)


def test_manifest_reference(capsys):
    assert cli.run(["manifest", "--reference=true"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["per_source"]["khanacademy"] == 282000 and out["total"] == 456000


def test_manifest_recount(workdir, capsys):
    assert run(workdir, "ingest") == 0
    first = read_manifest(workdir / "out/manifest.json")
    capsys.readouterr()
    assert run(workdir, "manifest") == 0
    again = json.loads(capsys.readouterr().out)
    assert {k: v for k, v in again.items() if k != "timestamp"} == {k: v for k, v in first.items() if k != "timestamp"}


def test_tokenize_check(workdir, fixtures_dir, capsys):
    ref = fixtures_dir / "tokenizer_reference.jsonl"
    assert run(workdir, "tokenize-check", f"--tokenizer_reference={ref}") == 0
    assert "reference_match=200/200" in capsys.readouterr().out


def test_tokenize_check_mismatch(workdir, fixtures_dir, tmp_path):
    lines = (fixtures_dir / "tokenizer_reference.jsonl").read_text(encoding="utf-8").splitlines()
    bad = json.loads(lines[0])
    bad["input_ids"][1] = 7
    (tmp_path / "ref.jsonl").write_text(json.dumps(bad) + "\n", encoding="utf-8")
    assert run(workdir, "tokenize-check", f"--tokenizer_reference={tmp_path / 'ref.jsonl'}") == 1


def test_grad_check_command(capsys):
    assert cli.run(["grad-check"]) == 0
    out = capsys.readouterr().out
    value = float(re.search(r"max_rel_error=(\S+)", out).group(1))
    assert value < 1e-3


def test_tag_eval_oracle_embeddings(workdir, fixtures_dir, capsys):
    labels = load_taxonomy(fixtures_dir / "taxonomy.jsonl")
    qs = load_questions(fixtures_dir / "questions.jsonl", labels)
    rng = np.random.default_rng(0)
    lab_vecs = {lab.label_id: rng.normal(size=8) for lab in labels}
    names = [lab.flat for lab in labels] + [q.question_id for q in qs]
    mat = [lab_vecs[lab.label_id] for lab in labels] + [lab_vecs[q.gold_label_id] for q in qs]
    write_embeddings(workdir / "oracle.emb", names, np.array(mat))
    assert run(workdir, "tag-eval", f"--embeddings={workdir / 'oracle.emb'}") == 0
    out = capsys.readouterr().out
    assert "R@5=1.0" in out.splitlines()
    report = json.loads((workdir / "out/report.json").read_text())
    assert report["recall"] == {"5": 1.0, "10": 1.0, "15": 1.0, "20": 1.0}


def test_full_pipeline_and_seed_determinism(workdir, capsys):
    for stage in ("ingest", "mlm-build", "train", "embed", "tag-eval"):
        assert run(workdir, "--seed", "3", stage) == 0, stage
    header = read_header(workdir / "out/shards")
    assert header["seed"] == 3 and header["max_len"] == 32
    emb = load_external_embeddings(workdir / "out/emb.emb")
    assert len(emb) == 30 + 60 and emb.dim == 16
    report = json.loads((workdir / "out/report.json").read_text())
    assert report["n"] == 60 and len(report["ranks"]) == 60
    trace = (workdir / "out/trace.csv").read_text().splitlines()
    assert trace[0] == "step,epoch,loss,masked_acc" and len(trace) > 1

    first = {p: (workdir / "out" / p).read_bytes() for p in ("shards/shard_00000.bin", "model.k12c", "emb.emb")}
    for stage in ("mlm-build", "train", "embed"):
        assert run(workdir, "--seed", "3", stage) == 0
    assert all((workdir / "out" / p).read_bytes() == b for p, b in first.items())
    assert run(workdir, "--seed", "4", "mlm-build") == 0
    assert (workdir / "out/shards/shard_00000.bin").read_bytes() != first["shards/shard_00000.bin"]


def test_train_resume_and_continue(workdir):
    for stage in ("ingest", "mlm-build", "train"):
        assert run(workdir, stage) == 0
    ck = workdir / "out/model.k12c"
    shutil.copy(ck, workdir / "base.k12c")
    assert run(workdir, "train", f"--init_checkpoint={workdir / 'base.k12c'}", "--resume=true", "--epochs=2") == 0
    assert run(workdir, "train", f"--init_checkpoint={workdir / 'base.k12c'}", "--epochs=1") == 0


def test_train_model_dataset_mismatch(workdir):
    for stage in ("ingest", "mlm-build"):
        assert run(workdir, stage) == 0
    assert run(workdir, "train", "--encoder.max_len=16") == 1


def test_numeric_failure_exit_code(workdir, monkeypatch):
    from k12bert.encoder import NumericFailure

    def boom(*a, **k):
        raise NumericFailure("non-finite activation in layer 0")

    monkeypatch.setattr(cli, "grad_check", boom)
    assert cli.run(["grad-check"]) == 2


@pytest.mark.skipif(shutil.which("k12bert") is None, reason="console script not installed")
def test_console_script():
    proc = subprocess.run(["k12bert", "grad-check", "--gradcheck.coords=40"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.startswith("max_rel_error=")
    assert all(LOG_LINE.match(line) for line in proc.stderr.strip().splitlines())
