"""Command line entry points: server, local analytics, simulation sweeps,
and a thin HTTP client for the /v1 API."""

from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path

import click
import httpx

try:
    import tomllib
except ModuleNotFoundError:  # 3.10
    import tomli as tomllib

from . import corpus as corpus_mod
from .aggregation import (
    gold_from_jsonl,
    gold_to_jsonl,
    mace_em,
    mace_gold,
    majority_vote,
    matrix_from_tsv,
)
from .labels import LabelCategory
from .metrics import (
    acceptance_rate,
    agreement_reports,
    correction_matrix,
    correction_matrix_to_csv,
    divergence_to_csv,
    render_agreement_table,
    reports_to_json,
)
from .orchestrator import event_from_json_line, study_config_from_dict
from .simharness import (
    SimAnnotatorConfig,
    generate_study_inputs,
    run_simulated_study,
    uniform_accuracy,
)


@click.group()
def main():
    """Annotation service with label suggestions and study analytics."""


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--listen", default=None, help="host:port (overrides config)")
@click.option("--data-dir", default=None, help="study data directory")
def serve(config_path, listen, data_dir):
    """Run the annotation HTTP service."""
    import uvicorn

    from .service import create_app, load_service_config

    cfg = load_service_config(config_path)
    if listen:
        cfg = dataclasses.replace(cfg, listen_addr=listen)
    if data_dir:
        cfg = dataclasses.replace(cfg, data_dir=Path(data_dir))
    uvicorn.run(create_app(cfg), host=cfg.host, port=cfg.port, log_level="info")


@main.group("corpus")
def corpus_group():
    """Load, filter and sample document pools."""


@corpus_group.command("filter")
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--output", "output_path", required=True, type=click.Path())
@click.option("--format", "fmt", default="jsonl", type=click.Choice(["jsonl", "tsv"]))
@click.option("--report", "report_path", default=None, type=click.Path())
@click.option("--keywords", default=None, help="comma-separated override terms")
@click.option("--min-length", default=30, show_default=True)
@click.option("--keep-duplicates", is_flag=True)
@click.option("--keep-retweets", is_flag=True)
def corpus_filter(
    input_path, output_path, fmt, report_path, keywords, min_length,
    keep_duplicates, keep_retweets,
):
    """Apply keyword/length/retweet/duplicate rules to a corpus file."""
    cfg = corpus_mod.FilterConfig(
        keywords=(
            tuple(k.strip() for k in keywords.split(",") if k.strip())
            if keywords
            else corpus_mod.DEFAULT_FILTER_KEYWORDS
        ),
        min_length=min_length,
        drop_duplicates=not keep_duplicates,
        drop_retweets=not keep_retweets,
    )
    loaded = corpus_mod.load_corpus(input_path, format=fmt)
    filtered, report = corpus_mod.filter_corpus(loaded, cfg)
    corpus_mod.save_corpus(filtered, output_path, format=fmt)
    if report_path:
        Path(report_path).write_text(report.to_json() + "\n", encoding="utf-8")
    click.echo(report.to_json())


@corpus_group.command("sample")
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--output", "output_path", required=True, type=click.Path())
@click.option("--format", "fmt", default="jsonl", type=click.Choice(["jsonl", "tsv"]))
@click.option("-n", "count", required=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
def corpus_sample(input_path, output_path, fmt, count, seed):
    """Sample n documents uniformly at random."""
    loaded = corpus_mod.load_corpus(input_path, format=fmt)
    sampled = corpus_mod.sample_uniform(loaded, count, seed)
    corpus_mod.save_corpus(sampled, output_path, format=fmt)
    click.echo(f"wrote {len(sampled)} documents to {output_path}")


@main.command()
@click.option("--matrix", "matrix_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--method", default="mace", type=click.Choice(["mace", "majority"]))
@click.option("--threshold", default=1.0, show_default=True, type=float)
@click.option("--iterations", default=50, show_default=True, type=int)
@click.option("--restarts", default=10, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
def aggregate(matrix_path, out_path, method, threshold, iterations, restarts, seed):
    """Derive gold labels from an item x annotator TSV matrix."""
    matrix = matrix_from_tsv(matrix_path)
    if method == "majority":
        gold = majority_vote(matrix)
    else:
        model = mace_em(matrix, iterations=iterations, restarts=restarts, seed=seed)
        gold = mace_gold(model, threshold)
    gold_to_jsonl(gold, out_path)
    click.echo(f"wrote {len(gold)} gold labels to {out_path}")


@main.command()
@click.option("--events", "events_path", required=True, type=click.Path(exists=True))
@click.option("--gold", "gold_path", required=True, type=click.Path(exists=True))
@click.option("--json", "json_path", default=None, type=click.Path())
def report(events_path, gold_path, json_path):
    """Render the per-group accuracy / agreement summary from an export."""
    gold = gold_from_jsonl(gold_path)
    control_ids = {g.document_id for g in gold}
    events = []
    with open(events_path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                events.append(event_from_json_line(line, control_ids=control_ids))
    reports = agreement_reports(events, gold)
    click.echo(render_agreement_table(reports))
    acceptance = acceptance_rate(events)
    if acceptance.per_group:
        click.echo("\nAcceptance rate (macro over annotators):")
        for group, rate in sorted(acceptance.per_group.items()):
            rounds = acceptance.per_group_round.get(group, {})
            per_round = "  ".join(
                f"round {r}: {v:.2f}" for r, v in sorted(rounds.items())
            )
            click.echo(f"  {group}: {rate:.2f}  ({per_round})")
    correction = correction_matrix(events)
    if correction.sum():
        click.echo("\nCorrections (suggested -> chosen):")
        click.echo(correction_matrix_to_csv(correction))
    if json_path:
        Path(json_path).write_text(
            reports_to_json(reports, acceptance=acceptance, correction=correction),
            encoding="utf-8",
        )


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
def simulate(config_path, out_dir):
    """Run a simulated-annotator sweep from a TOML config."""
    with open(config_path, "rb") as fh:
        raw = tomllib.load(fh)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    sweep = raw.get("sweep", {})
    anchoring_probs = sweep.get("anchoring_probs", [0.7])
    purities = sweep.get("model_purities", [1.0])
    seeds = sweep.get("seeds", [0])
    study_cfg = study_config_from_dict(raw.get("study", {}))
    annotator_cfg = raw.get("annotator", {})
    accuracy = annotator_cfg.get("accuracy", 0.7)
    latency_mean = annotator_cfg.get("latency_mean", 8.0)
    latency_sd = annotator_cfg.get("latency_sd", 2.0)
    expert_size = raw.get("corpus", {}).get("expert_size", 200)

    index = []
    for purity in purities:
        for anchoring in anchoring_probs:
            for seed in seeds:
                name = f"purity{purity}_anchor{anchoring}_seed{seed}"
                cell_dir = out / name
                cell_dir.mkdir(exist_ok=True)
                pool, expert_gold, oracle = generate_study_inputs(
                    study_cfg, expert_size, seed=seed, purity=purity
                )
                sim_cfg = SimAnnotatorConfig(
                    per_class_accuracy=uniform_accuracy(accuracy),
                    anchoring_prob=anchoring,
                    latency_mean=latency_mean,
                    latency_sd=latency_sd,
                    seed=seed,
                )
                result = run_simulated_study(
                    study_cfg, pool, expert_gold, oracle, sim_cfg, seed=seed
                )
                from .orchestrator import export_events

                with open(cell_dir / "events.jsonl", "w", encoding="utf-8") as fh:
                    for line in export_events(result.events):
                        fh.write(line + "\n")
                gold_to_jsonl(result.control_gold, cell_dir / "gold.jsonl")
                (cell_dir / "reports.json").write_text(
                    reports_to_json(
                        result.agreement,
                        acceptance=result.acceptance,
                        correction=result.correction,
                        divergence=result.divergence,
                    ),
                    encoding="utf-8",
                )
                (cell_dir / "correction_matrix.csv").write_text(
                    correction_matrix_to_csv(result.correction), encoding="utf-8"
                )
                if result.divergence:
                    (cell_dir / "divergence.csv").write_text(
                        divergence_to_csv(result.divergence), encoding="utf-8"
                    )
                summary = {
                    "name": name,
                    "anchoring_prob": anchoring,
                    "purity": purity,
                    "seed": seed,
                    "groups": result.group_summary,
                    "outliers": result.outliers,
                }
                index.append(summary)
                click.echo(f"{name}: {json.dumps(result.group_summary)}")
    (out / "index.json").write_text(json.dumps(index, indent=2), encoding="utf-8")


@main.group()
def client():
    """Thin HTTP client for the annotation service."""


def _api(server: str) -> httpx.Client:
    return httpx.Client(base_url=server.rstrip("/"), timeout=60.0)


def _auth(token: str) -> dict:
    return {"Authorization": f"Bearer {token}"}


def _echo_response(resp: httpx.Response):
    if resp.status_code >= 400:
        click.echo(f"error {resp.status_code}: {resp.text}", err=True)
        sys.exit(1)
    click.echo(json.dumps(resp.json(), indent=2))


@client.command("create-study")
@click.option("--server", required=True)
@click.option("--corpus", "corpus_path", required=True)
@click.option("--gold", "gold_path", required=True)
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
def client_create_study(server, corpus_path, gold_path, config_path):
    config = None
    if config_path:
        if config_path.endswith(".toml"):
            with open(config_path, "rb") as fh:
                config = tomllib.load(fh)
        else:
            config = json.loads(Path(config_path).read_text(encoding="utf-8"))
    with _api(server) as api:
        _echo_response(
            api.post(
                "/v1/studies",
                json={
                    "corpus_path": corpus_path,
                    "expert_gold_path": gold_path,
                    "config": config,
                },
            )
        )


@client.command("join")
@click.option("--server", required=True)
@click.option("--study", required=True)
@click.option("--group", default=None)
def client_join(server, study, group):
    with _api(server) as api:
        _echo_response(
            api.post(f"/v1/studies/{study}/annotators", json={"group": group})
        )


@client.command("next")
@click.option("--server", required=True)
@click.option("--study", required=True)
@click.option("--token", required=True)
def client_next(server, study, token):
    with _api(server) as api:
        _echo_response(api.get(f"/v1/studies/{study}/next", headers=_auth(token)))


@client.command("annotate")
@click.option("--server", required=True)
@click.option("--study", required=True)
@click.option("--token", required=True)
@click.option("--doc", "doc_id", required=True)
@click.option("--label", required=True, type=click.Choice([m.name for m in LabelCategory]))
@click.option("--started-at", required=True)
def client_annotate(server, study, token, doc_id, label, started_at):
    with _api(server) as api:
        _echo_response(
            api.post(
                f"/v1/studies/{study}/annotations",
                headers=_auth(token),
                json={"doc_id": doc_id, "chosen": label, "started_at": started_at},
            )
        )


@client.command("finish-round")
@click.option("--server", required=True)
@click.option("--study", required=True)
@click.option("--token", required=True)
def client_finish_round(server, study, token):
    with _api(server) as api:
        _echo_response(
            api.post(f"/v1/studies/{study}/finish-round", headers=_auth(token))
        )


@client.command("metrics")
@click.option("--server", required=True)
@click.option("--study", required=True)
@click.option("--admin-token", required=True)
@click.option("--report", default="agreement", type=click.Choice(["agreement", "bias", "transfer"]))
def client_metrics(server, study, admin_token, report):
    with _api(server) as api:
        _echo_response(
            api.get(
                f"/v1/studies/{study}/metrics",
                params={"report": report},
                headers=_auth(admin_token),
            )
        )


@client.command("export")
@click.option("--server", required=True)
@click.option("--study", required=True)
@click.option("--admin-token", required=True)
@click.option("--out", "out_path", default=None, type=click.Path())
def client_export(server, study, admin_token, out_path):
    with _api(server) as api:
        resp = api.get(f"/v1/studies/{study}/export", headers=_auth(admin_token))
        if resp.status_code >= 400:
            click.echo(f"error {resp.status_code}: {resp.text}", err=True)
            sys.exit(1)
        if out_path:
            Path(out_path).write_bytes(resp.content)
            click.echo(f"wrote {out_path}")
        else:
            click.echo(resp.text, nl=False)


if __name__ == "__main__":
    main()
