/**
 * DOM wiring for the single-page app. All behavior lives in the api/state/
 * render/admin modules; this file only connects events to them.
 */

import { ApiError, GradingApi } from "./api.js";
import { AdminController } from "./admin.js";
import {
  describeApiError,
  renderError,
  renderModelList,
  renderPredictionView,
} from "./render.js";
import { UiSession } from "./state.js";

const api = new GradingApi("");
const session = new UiSession();
const admin = new AdminController(api, (msg) => window.confirm(msg));

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) {
    throw new Error(`missing element #${id}`);
  }
  return node as T;
}

function redrawPrediction(): void {
  el("prediction-view").innerHTML = renderPredictionView(session.snapshot());
  const toggle = document.getElementById("overlay-toggle");
  if (toggle) {
    toggle.addEventListener("click", () => {
      session.toggleOverlay();
      redrawPrediction();
    });
  }
  document.querySelectorAll<HTMLButtonElement>(".grade-btn").forEach((btn) => {
    btn.addEventListener("click", () => {
      session.selectGrade(Number(btn.dataset.grade));
      redrawPrediction();
    });
  });
  const submit = document.getElementById("feedback-submit");
  if (submit) {
    submit.addEventListener("click", () => void submitFeedback());
  }
}

async function runPrediction(file: File): Promise<void> {
  if (!session.startPrediction()) {
    return;
  }
  session.setPreview(URL.createObjectURL(file));
  redrawPrediction();
  try {
    const response = await api.predict(file);
    session.predictionSucceeded(response);
  } catch (err) {
    session.predictionFailed(
      err instanceof ApiError ? describeApiError(err.code, err.message) : String(err),
    );
  }
  redrawPrediction();
}

async function submitFeedback(): Promise<void> {
  const snap = session.snapshot();
  if (!session.feedbackSubmitStarted() || !snap.prediction || snap.feedbackDraft === null) {
    return;
  }
  redrawPrediction();
  try {
    const ack = await api.submitFeedback(snap.prediction.request_id, snap.feedbackDraft);
    session.feedbackConfirmed(ack.record_id);
  } catch (err) {
    session.feedbackFailed(
      err instanceof ApiError ? describeApiError(err.code, err.message) : String(err),
    );
  }
  redrawPrediction();
}

function redrawAdmin(): void {
  const view = el("admin-view");
  if (admin.needsToken) {
    view.innerHTML =
      `<p>Enter the admin token to manage models.</p>` +
      `<input id="token-input" type="password" placeholder="admin token">` +
      `<button id="token-submit">Unlock</button>` +
      renderError(admin.error);
    el("token-submit").addEventListener("click", () => {
      const token = el<HTMLInputElement>("token-input").value;
      void admin.enterToken(token).then(redrawAdmin);
    });
    return;
  }
  view.innerHTML =
    renderError(admin.error) +
    renderModelList(admin.models) +
    `<h3>Upload checkpoint</h3>` +
    `<input id="ckpt-id" placeholder="model id">` +
    `<input id="ckpt-file" type="file" accept=".ckpt">` +
    `<button id="ckpt-upload">Upload</button>`;
  view.querySelectorAll<HTMLButtonElement>(".activate-btn").forEach((btn) => {
    btn.addEventListener("click", () => {
      void admin.activate(btn.dataset.model ?? "").then(redrawAdmin);
    });
  });
  el("ckpt-upload").addEventListener("click", () => {
    const fileInput = el<HTMLInputElement>("ckpt-file");
    const idInput = el<HTMLInputElement>("ckpt-id");
    const file = fileInput.files?.[0];
    if (file && idInput.value) {
      void admin.upload(idInput.value, file).then(redrawAdmin);
    }
  });
}

function init(): void {
  el<HTMLInputElement>("image-input").addEventListener("change", (event) => {
    const file = (event.target as HTMLInputElement).files?.[0];
    if (file) {
      void runPrediction(file);
    }
  });
  el("admin-open").addEventListener("click", () => {
    el("admin-panel").classList.toggle("hidden");
    redrawAdmin();
  });
  void api.health().then((health) => {
    el("health-line").textContent =
      health.status === "ok"
        ? `Service ready, active model: ${health.active_model_id}`
        : "Service degraded: no active model";
  });
}

document.addEventListener("DOMContentLoaded", init);
