import { describe, expect, it } from "vitest";

import {
  acceptanceCurves,
  agreementTable,
  correctionHeatmap,
  divergenceSeries,
  percentile,
  quartileBand,
} from "../src/dashboard.js";
import type { AcceptancePayload } from "../src/types.js";

describe("agreement table", () => {
  it("shapes rounds as rows and groups as column pairs", () => {
    const rows = [
      { group: "G1", scope: "round1", kappa: 0.48, accuracy: 0.74, n_items: 30, n_annotators: 7 },
      { group: "G1", scope: "round2", kappa: 0.47, accuracy: 0.68, n_items: 30, n_annotators: 7 },
      { group: "G1", scope: "total", kappa: 0.48, accuracy: 0.71, n_items: 60, n_annotators: 7 },
      { group: "G2", scope: "round1", kappa: 0.76, accuracy: 0.9, n_items: 30, n_annotators: 7 },
      { group: "G2", scope: "round2", kappa: 0.81, accuracy: 0.92, n_items: 30, n_annotators: 7 },
      { group: "G2", scope: "total", kappa: 0.78, accuracy: 0.91, n_items: 60, n_annotators: 7 },
    ];
    const table = agreementTable(rows);
    expect(table.groups).toEqual(["G1", "G2"]);
    expect(table.rows.map((r) => r.label)).toEqual(["Round 1", "Round 2", "Total"]);
    expect(table.rows[2]!.cells[1]).toEqual({ acc: 0.91, kappa: 0.78 });
  });
});

describe("quartile bands", () => {
  it("computes interpolated percentiles", () => {
    const sorted = [1, 2, 3, 4];
    expect(percentile(sorted, 0)).toBe(1);
    expect(percentile(sorted, 100)).toBe(4);
    expect(percentile(sorted, 50)).toBeCloseTo(2.5);
  });

  it("band spans the 25th to 75th percentile", () => {
    const band = quartileBand([0.5, 0.6, 0.7, 0.8, 0.9]);
    expect(band.lower).toBeCloseTo(0.6);
    expect(band.median).toBeCloseTo(0.7);
    expect(band.upper).toBeCloseTo(0.8);
  });
});

describe("acceptance curves", () => {
  it("builds per-group rounds with quartile bands over members", () => {
    const acceptance: AcceptancePayload = {
      per_annotator: {},
      per_group: {},
      per_group_round: {},
      accepted_counts: {
        "G2-01": { "1": 8, "2": 6 },
        "G2-02": { "1": 6, "2": 6 },
        "G2-03": { "1": 4, "2": 6 },
      },
      shown_counts: {
        "G2-01": { "1": 10, "2": 10 },
        "G2-02": { "1": 10, "2": 10 },
        "G2-03": { "1": 10, "2": 10 },
      },
    };
    const curves = acceptanceCurves(acceptance, (a) => a.split("-")[0]!);
    const g2 = curves["G2"]!;
    expect(g2.map((p) => p.round)).toEqual([1, 2]);
    expect(g2[0]!.mean).toBeCloseTo(0.6);
    expect(g2[0]!.band.lower).toBeCloseTo(0.5);
    expect(g2[0]!.band.upper).toBeCloseTo(0.7);
    expect(g2[1]!.band.lower).toBeCloseTo(0.6);
    expect(g2[1]!.band.upper).toBeCloseTo(0.6);
  });
});

describe("correction heatmap", () => {
  it("totals equal the sum of all cells and shades by maximum", () => {
    const heatmap = correctionHeatmap({
      labels: ["Unrelated", "Comment", "Support", "Refute"],
      counts: [
        [0, 5, 0, 0],
        [99, 0, 2, 0],
        [0, 0, 0, 1],
        [10, 0, 0, 0],
      ],
    });
    expect(heatmap.total).toBe(117);
    const hot = heatmap.cells.find((c) => c.suggested === "Comment" && c.chosen === "Unrelated")!;
    expect(hot.count).toBe(99);
    expect(hot.intensity).toBe(1);
    const empty = heatmap.cells.find((c) => c.suggested === "Unrelated" && c.chosen === "Unrelated")!;
    expect(empty.intensity).toBe(0);
  });
});

describe("divergence series", () => {
  it("orders annotators and keeps training sizes", () => {
    const series = divergenceSeries({
      "G3-02": [{ model_version: 1, n_train: 210, n_diverging: 3 }],
      "G3-01": [
        { model_version: 1, n_train: 210, n_diverging: 1 },
        { model_version: 2, n_train: 220, n_diverging: 5 },
      ],
    });
    expect(series.map((s) => s.annotator)).toEqual(["G3-01", "G3-02"]);
    expect(series[0]!.points).toEqual([
      { nTrain: 210, diverging: 1 },
      { nTrain: 220, diverging: 5 },
    ]);
  });
});
