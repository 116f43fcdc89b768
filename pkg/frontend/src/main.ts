// Entry point: a login form, the annotator flow, and the admin dashboard
// with auto-refresh. Configuration is a single server URL.

import { ApiClient } from "./api.js";
import {
  acceptanceCurves,
  agreementTable,
  correctionHeatmap,
  divergenceSeries,
} from "./dashboard.js";
import {
  renderAcceptanceCurves,
  renderAgreementTable,
  renderAnnotationView,
  renderDivergence,
  renderError,
  renderHeatmap,
  renderLockScreen,
} from "./dom.js";
import { keyToAction } from "./keyboard.js";
import { AnnotatorSession } from "./session.js";
import type { Label } from "./types.js";

const DASHBOARD_REFRESH_MS = 10_000;

function el<T extends HTMLElement>(id: string): T {
  const found = document.getElementById(id);
  if (!found) throw new Error(`missing #${id}`);
  return found as T;
}

async function startAnnotator(
  api: ApiClient,
  studyId: string,
  token: string,
  mount: HTMLElement,
): Promise<void> {
  const session = new AnnotatorSession(api, studyId, token);
  const redraw = () => {
    mount.replaceChildren();
    switch (session.phase) {
      case "annotating":
        mount.appendChild(
          renderAnnotationView(
            session.view(),
            (label) => {
              session.selectLabel(label as Label);
              redraw();
            },
            () => void session.submit().then(redraw),
          ),
        );
        break;
      case "round_complete":
        mount.appendChild(
          renderLockScreen(() =>
            void session.finishRound().then(async () => {
              if (session.phase === "idle") await session.loadNext();
              redraw();
            }),
          ),
        );
        break;
      case "study_complete":
        mount.appendChild(renderError("Study complete. Thank you!"));
        break;
      case "login":
        mount.appendChild(renderError(session.lastError ?? "session expired"));
        el("login").hidden = false;
        break;
      case "error":
        mount.appendChild(renderError(session.lastError ?? "something failed"));
        break;
    }
  };
  document.addEventListener("keydown", (event) => {
    const action = keyToAction(event.key);
    if (action.kind === "none") return;
    event.preventDefault();
    if (action.kind === "select" && session.phase === "annotating") {
      session.selectByKey(String(action.index + 1));
      redraw();
    } else if (action.kind === "submit" && session.phase === "annotating") {
      void session.submit().then(redraw);
    } else if (action.kind === "lock" && session.phase === "round_complete") {
      void session.finishRound().then(async () => {
        if (session.phase === "idle") await session.loadNext();
        redraw();
      });
    }
  });
  await session.loadNext();
  redraw();
}

async function refreshDashboard(
  api: ApiClient,
  studyId: string,
  adminToken: string,
  mount: HTMLElement,
): Promise<void> {
  mount.replaceChildren();
  try {
    const agreement = await api.agreementReport(studyId, adminToken);
    mount.appendChild(renderAgreementTable(agreementTable(agreement.agreement)));
    const bias = await api.biasReport(studyId, adminToken);
    mount.appendChild(renderHeatmap(correctionHeatmap(bias.correction_matrix)));
    const groupOf = (annotator: string) => annotator.split("-")[0] ?? annotator;
    mount.appendChild(renderAcceptanceCurves(acceptanceCurves(bias.acceptance, groupOf)));
    mount.appendChild(renderDivergence(divergenceSeries(bias.divergence)));
  } catch (err) {
    mount.appendChild(renderError(err instanceof Error ? err.message : String(err)));
  }
}

function main(): void {
  const params = new URLSearchParams(window.location.search);
  const api = new ApiClient(params.get("server") ?? window.location.origin);
  const mount = el("app");

  el<HTMLButtonElement>("join-button").addEventListener("click", async () => {
    const studyId = el<HTMLInputElement>("study-id").value.trim();
    const group = el<HTMLInputElement>("group").value.trim() || undefined;
    const reg = await api.register(studyId, group);
    el("login").hidden = true;
    await startAnnotator(api, studyId, reg.token, mount);
  });

  el<HTMLButtonElement>("resume-button").addEventListener("click", async () => {
    const studyId = el<HTMLInputElement>("study-id").value.trim();
    const token = el<HTMLInputElement>("token").value.trim();
    el("login").hidden = true;
    await startAnnotator(api, studyId, token, mount);
  });

  el<HTMLButtonElement>("dashboard-button").addEventListener("click", async () => {
    const studyId = el<HTMLInputElement>("study-id").value.trim();
    const adminToken = el<HTMLInputElement>("admin-token").value.trim();
    const dash = el("dashboard");
    dash.hidden = false;
    await refreshDashboard(api, studyId, adminToken, dash);
    window.setInterval(
      () => void refreshDashboard(api, studyId, adminToken, dash),
      DASHBOARD_REFRESH_MS,
    );
  });
}

main();
