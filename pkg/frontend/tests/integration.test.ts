// End-to-end: spawn the real annotation service, run a scripted browser
// session through one 10-item round, and hold the resulting event log to
// the same schema and idempotency standards as simulated logs.

import { spawn, spawnSync, type ChildProcess } from "node:child_process";
import { mkdtempSync, readFileSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { correctionHeatmap } from "../src/dashboard.js";
import {
  checkEventSchema,
  checkPositionsAdvance,
  correctionTotals,
  parseExportLog,
} from "../src/exportlog.js";
import { AnnotatorSession } from "../src/session.js";
import type { Label } from "../src/types.js";

const PORT = 8743;
const BASE = `http://127.0.0.1:${PORT}`;

const SETUP_PY = `
import json
from labelaid.corpus import save_corpus, save_labeled
from labelaid.orchestrator import StudyConfig, study_config_to_dict
from labelaid.simharness import generate_study_inputs
from labelaid.suggester import FeatureConfig, TrainConfig

cfg = StudyConfig(
    annotators_per_group=2, rounds=2, new_per_round=6, control_per_round=4,
    retrain_batch=3, seed=17,
    tcfg=TrainConfig(epochs=3, seed=17), fcfg=FeatureConfig(n_buckets=2**10),
)
pool, gold, oracle = generate_study_inputs(cfg, expert_size=24, seed=17)
save_corpus(pool, "pool.jsonl")
save_labeled(gold, "gold.jsonl")
json.dump(study_config_to_dict(cfg), open("study-config.json", "w"))
json.dump({k: v.name for k, v in oracle.items()}, open("oracle.json", "w"))
`;

let server: ChildProcess | null = null;
let workDir: string;
let studyId: string;
let adminToken: string;
let oracle: Record<string, Label>;

async function waitForServer(): Promise<void> {
  for (let attempt = 0; attempt < 60; attempt++) {
    try {
      const resp = await fetch(`${BASE}/docs`);
      if (resp.status === 200) return;
    } catch {
      // not up yet
    }
    await new Promise((r) => setTimeout(r, 500));
  }
  throw new Error("annotation service did not come up on " + BASE);
}

beforeAll(async () => {
  workDir = mkdtempSync(join(tmpdir(), "labelaid-ui-"));
  const setup = spawnSync("python3", ["-c", SETUP_PY], { cwd: workDir });
  if (setup.status !== 0) {
    throw new Error(`study input setup failed: ${setup.stderr}`);
  }
  oracle = JSON.parse(readFileSync(join(workDir, "oracle.json"), "utf-8"));
  server = spawn(
    "labelaid",
    ["serve", "--listen", `127.0.0.1:${PORT}`, "--data-dir", join(workDir, "data")],
    { cwd: workDir, stdio: ["ignore", "pipe", "pipe"] },
  );
  server.stderr?.on("data", () => undefined);
  await waitForServer();

  const create = await fetch(`${BASE}/v1/studies`, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify({
      corpus_path: join(workDir, "pool.jsonl"),
      expert_gold_path: join(workDir, "gold.jsonl"),
      config: JSON.parse(readFileSync(join(workDir, "study-config.json"), "utf-8")),
    }),
  });
  expect(create.status).toBe(200);
  const created = await create.json();
  studyId = created.study_id;
  adminToken = created.admin_token;
}, 120_000);

afterAll(() => {
  server?.kill();
});

describe("browser session against the live service", () => {
  it("completes a 10-item round whose log passes the simulated-log checks", async () => {
    const api = new ApiClient(BASE);
    const g2 = await api.register(studyId, "G2");
    const session = new AnnotatorSession(api, studyId, g2.token);
    await session.loadNext();

    let corrections = 0;
    let items = 0;
    while (session.phase === "annotating") {
      const view = session.view();
      expect(view.total).toBe(10);
      items += 1;
      const truth = oracle[session.currentDocId()!]!;
      // the scripted user confirms matching suggestions and corrects the rest
      if (session.selectedLabel() !== truth) {
        session.selectLabel(truth);
        corrections += 1;
      }
      await session.submit();
    }
    expect(items).toBe(10);
    expect(session.phase).toBe("round_complete");
    await session.finishRound();
    expect(session.roundSummary?.n_items).toBe(10);
    expect(session.roundSummary?.study_complete).toBe(false);

    // the exported log passes the same schema and ordering checks as
    // simulated logs, and counts our corrections
    const log = parseExportLog(await api.exportLog(studyId, adminToken));
    const mine = log.filter((e) => e.annotator === g2.annotator_id);
    checkEventSchema(log);
    checkPositionsAdvance(log);
    expect(mine).toHaveLength(10);
    expect(correctionTotals(mine)).toBe(corrections);
    expect(mine.every((e) => e.group === "G2")).toBe(true);
  }, 60_000);

  it("repeated submits stay idempotent over real HTTP", async () => {
    const api = new ApiClient(BASE);
    const reg = await api.register(studyId, "G2");
    const item = await api.next(studyId, reg.token);
    const docId = item.doc_id!;
    const startedAt = new Date().toISOString();
    const first = await api.submit(studyId, reg.token, docId, "Comment", startedAt);
    const second = await api.submit(studyId, reg.token, docId, "Comment", startedAt);
    expect(second).toEqual(first);
    const log = parseExportLog(await api.exportLog(studyId, adminToken));
    const mine = log.filter(
      (e) => e.annotator === reg.annotator_id && e.doc_id === docId,
    );
    expect(mine).toHaveLength(1);
    // a different label for the same doc is a conflict, not a new event
    await expect(
      api.submit(studyId, reg.token, docId, "Refute", startedAt),
    ).rejects.toThrow(/409|already/);
  }, 30_000);

  it("renders no suggestion for a G1 session", async () => {
    const api = new ApiClient(BASE);
    const g1 = await api.register(studyId, "G1");
    const session = new AnnotatorSession(api, studyId, g1.token);
    await session.loadNext();
    const view = session.view();
    expect(view.highlightedLabel).toBeNull();
    expect(view.controls.every((c) => !c.suggested && !c.selected)).toBe(true);
    expect(view.suggestionConfidence).toBeNull();
  }, 30_000);

  it("dashboard heatmap totals equal the API correction-matrix sums", async () => {
    const api = new ApiClient(BASE);
    const bias = await api.biasReport(studyId, adminToken);
    const heatmap = correctionHeatmap(bias.correction_matrix);
    const apiSum = bias.correction_matrix.counts
      .flat()
      .reduce((total, c) => total + c, 0);
    expect(heatmap.total).toBe(apiSum);
    const log = parseExportLog(await api.exportLog(studyId, adminToken));
    expect(correctionTotals(log)).toBe(apiSum);
  }, 30_000);
});

