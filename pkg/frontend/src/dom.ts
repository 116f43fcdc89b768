// Minimal DOM rendering. All logic lives in the view-models; this layer
// just maps them to elements.

import type { AnnotationView } from "./session.js";
import type { AgreementTable, DivergenceSeriesView, Heatmap } from "./dashboard.js";
import type { AcceptanceCurvePoint } from "./dashboard.js";

export function renderAnnotationView(
  view: AnnotationView,
  onSelect: (label: string) => void,
  onSubmit: () => void,
): HTMLElement {
  const root = document.createElement("div");
  root.className = "annotation-view";

  const banner = document.createElement("div");
  banner.className = "round-banner";
  banner.textContent = `${view.roundBanner} — item ${view.position}/${view.total}`;
  root.appendChild(banner);

  const text = document.createElement("p");
  text.className = "doc-text";
  text.textContent = view.text;
  root.appendChild(text);

  const controls = document.createElement("div");
  controls.className = "label-controls";
  for (const control of view.controls) {
    const button = document.createElement("button");
    button.textContent = `${control.key}. ${control.label}`;
    button.className = "label-option";
    if (control.selected) button.classList.add("selected");
    // the pre-selected recommendation keeps its highlight until overridden
    if (control.suggested && view.highlightedLabel === control.label) {
      button.classList.add("suggested");
    }
    button.addEventListener("click", () => onSelect(control.label));
    controls.appendChild(button);
  }
  root.appendChild(controls);

  if (view.suggestionConfidence !== null) {
    const conf = document.createElement("div");
    conf.className = "debug-confidence";
    conf.textContent = `model confidence ${view.suggestionConfidence.toFixed(2)}`;
    root.appendChild(conf);
  }

  const submit = document.createElement("button");
  submit.className = "submit";
  submit.textContent = "Submit (Enter)";
  submit.addEventListener("click", onSubmit);
  root.appendChild(submit);
  return root;
}

export function renderLockScreen(onLock: () => void): HTMLElement {
  const root = document.createElement("div");
  root.className = "lock-screen";
  const note = document.createElement("p");
  note.textContent = "Round complete. Lock it to continue.";
  root.appendChild(note);
  const lock = document.createElement("button");
  lock.className = "lock";
  lock.textContent = "\u{1F512} Finish round (L)";
  lock.addEventListener("click", onLock);
  root.appendChild(lock);
  return root;
}

export function renderAgreementTable(table: AgreementTable): HTMLElement {
  const el = document.createElement("table");
  el.className = "agreement-table";
  const head = el.insertRow();
  head.insertCell().textContent = "";
  for (const group of table.groups) {
    const cell = head.insertCell();
    cell.colSpan = 2;
    cell.textContent = group;
  }
  const sub = el.insertRow();
  sub.insertCell().textContent = "";
  for (const _ of table.groups) {
    sub.insertCell().textContent = "Acc";
    sub.insertCell().textContent = "IAA";
  }
  for (const row of table.rows) {
    const tr = el.insertRow();
    tr.insertCell().textContent = row.label;
    for (const cell of row.cells) {
      tr.insertCell().textContent = cell ? cell.acc.toFixed(2) : "–";
      tr.insertCell().textContent = cell ? cell.kappa.toFixed(2) : "–";
    }
  }
  return el;
}

export function renderHeatmap(heatmap: Heatmap): HTMLElement {
  const el = document.createElement("table");
  el.className = "correction-heatmap";
  el.dataset["total"] = String(heatmap.total);
  const head = el.insertRow();
  head.insertCell().textContent = "suggested \\ chosen";
  for (const label of heatmap.labels) head.insertCell().textContent = label;
  for (const suggested of heatmap.labels) {
    const tr = el.insertRow();
    tr.insertCell().textContent = suggested;
    for (const chosen of heatmap.labels) {
      const cell = heatmap.cells.find(
        (c) => c.suggested === suggested && c.chosen === chosen,
      )!;
      const td = tr.insertCell();
      td.textContent = String(cell.count);
      td.style.backgroundColor = `rgba(214, 94, 14, ${cell.intensity.toFixed(3)})`;
    }
  }
  return el;
}

export function renderAcceptanceCurves(
  curves: Record<string, AcceptanceCurvePoint[]>,
): HTMLElement {
  const root = document.createElement("div");
  root.className = "acceptance-curves";
  for (const [group, points] of Object.entries(curves).sort()) {
    const block = document.createElement("div");
    const title = document.createElement("h4");
    title.textContent = group;
    block.appendChild(title);
    const list = document.createElement("ul");
    for (const p of points) {
      const li = document.createElement("li");
      li.textContent =
        `round ${p.round}: mean ${(p.mean * 100).toFixed(0)}% ` +
        `(quartiles ${(p.band.lower * 100).toFixed(0)}–${(p.band.upper * 100).toFixed(0)}%)`;
      list.appendChild(li);
    }
    block.appendChild(list);
    root.appendChild(block);
  }
  return root;
}

export function renderDivergence(series: DivergenceSeriesView[]): HTMLElement {
  const root = document.createElement("div");
  root.className = "divergence-series";
  for (const s of series) {
    const block = document.createElement("div");
    const title = document.createElement("h4");
    title.textContent = s.annotator;
    block.appendChild(title);
    const line = document.createElement("div");
    line.textContent = s.points
      .map((p) => `${p.nTrain}:${p.diverging}`)
      .join("  ");
    block.appendChild(line);
    root.appendChild(block);
  }
  return root;
}

export function renderError(message: string): HTMLElement {
  const el = document.createElement("div");
  el.className = "inline-error";
  el.textContent = message;
  return el;
}
