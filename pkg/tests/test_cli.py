import json

from click.testing import CliRunner

from labelaid.aggregation import gold_to_jsonl, matrix_to_tsv
from labelaid.cli import main
from labelaid.corpus import Corpus, Document, save_corpus
from labelaid.orchestrator import export_events
from labelaid.simharness import (
    SimAnnotatorConfig,
    generate_study_inputs,
    run_simulated_study,
    uniform_accuracy,
)

from conftest import make_matrix, small_study_config


def test_corpus_filter_and_sample(tmp_path):
    docs = [
        Document(id="a", text="die quarantäne dauert schon viel zu lange"),
        Document(id="b", text="kein treffer in diesem text weit und breit"),
        Document(id="c", text="RT @x: die quarantäne dauert schon viel zu lange"),
        Document(id="d", text="seit wochen nur noch homeoffice und videocalls"),
    ]
    raw = tmp_path / "raw.jsonl"
    save_corpus(Corpus(docs), raw)
    out = tmp_path / "filtered.jsonl"
    report = tmp_path / "report.json"
    runner = CliRunner()
    result = runner.invoke(
        main,
        [
            "corpus", "filter",
            "--input", str(raw),
            "--output", str(out),
            "--report", str(report),
        ],
    )
    assert result.exit_code == 0, result.output
    rep = json.loads(report.read_text())
    assert rep["output_size"] == 2
    assert rep["dropped_retweet"] == 1

    sampled = tmp_path / "sample.jsonl"
    result = runner.invoke(
        main,
        ["corpus", "sample", "--input", str(out), "--output", str(sampled),
         "-n", "1", "--seed", "3"],
    )
    assert result.exit_code == 0, result.output
    assert len(sampled.read_text().strip().splitlines()) == 1


def test_aggregate_majority_and_mace(tmp_path):
    matrix = make_matrix([[0, 0, 1], [1, 1, 1], [2, 2, 0]])
    matrix_path = tmp_path / "m.tsv"
    matrix_to_tsv(matrix, matrix_path)
    runner = CliRunner()
    for method in ("majority", "mace"):
        out = tmp_path / f"gold-{method}.jsonl"
        result = runner.invoke(
            main,
            ["aggregate", "--matrix", str(matrix_path), "--out", str(out),
             "--method", method, "--seed", "3"],
        )
        assert result.exit_code == 0, result.output
        lines = [json.loads(l) for l in out.read_text().splitlines()]
        assert [rec["label"] for rec in lines] == ["Unrelated", "Comment", "Support"]


def simulated_export(tmp_path):
    cfg = small_study_config()
    pool, expert_gold, oracle = generate_study_inputs(cfg, expert_size=24, seed=5)
    sim_cfg = SimAnnotatorConfig(
        per_class_accuracy=uniform_accuracy(0.8), anchoring_prob=0.5, seed=2
    )
    result = run_simulated_study(cfg, pool, expert_gold, oracle, sim_cfg, seed=2)
    events_path = tmp_path / "events.jsonl"
    with open(events_path, "w", encoding="utf-8") as fh:
        for line in export_events(result.events):
            fh.write(line + "\n")
    gold_path = tmp_path / "gold.jsonl"
    gold_to_jsonl(result.control_gold, gold_path)
    return events_path, gold_path


def test_report_command(tmp_path):
    events_path, gold_path = simulated_export(tmp_path)
    json_path = tmp_path / "reports.json"
    runner = CliRunner()
    result = runner.invoke(
        main,
        ["report", "--events", str(events_path), "--gold", str(gold_path),
         "--json", str(json_path)],
    )
    assert result.exit_code == 0, result.output
    assert "Round 1" in result.output and "Total" in result.output
    assert "Acceptance rate" in result.output
    payload = json.loads(json_path.read_text())
    assert {r["group"] for r in payload["agreement"]} == {"G1", "G2", "G3"}


def test_simulate_sweep(tmp_path):
    config = tmp_path / "sweep.toml"
    config.write_text(
        """
[sweep]
anchoring_probs = [0.7]
model_purities = [1.0]
seeds = [1]

[corpus]
expert_size = 24

[study]
annotators_per_group = 1
rounds = 2
new_per_round = 6
control_per_round = 4
retrain_batch = 3
seed = 99

[study.train]
epochs = 3

[study.features]
n_buckets = 1024

[annotator]
accuracy = 0.8
latency_mean = 6.0
latency_sd = 1.0
""",
        encoding="utf-8",
    )
    out_dir = tmp_path / "out"
    runner = CliRunner()
    result = runner.invoke(
        main, ["simulate", "--config", str(config), "--out", str(out_dir)]
    )
    assert result.exit_code == 0, result.output
    index = json.loads((out_dir / "index.json").read_text())
    assert len(index) == 1
    cell = out_dir / index[0]["name"]
    assert (cell / "events.jsonl").exists()
    assert (cell / "reports.json").exists()
    assert (cell / "gold.jsonl").exists()
    assert (cell / "correction_matrix.csv").exists()
    assert (cell / "divergence.csv").exists()
