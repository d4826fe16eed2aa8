/**
 * Pure HTML renderers. Every number shown comes straight out of a backend
 * response; nothing is recomputed client-side.
 */

import type { ModelInfo } from "./api.js";
import type { SessionSnapshot } from "./state.js";

export const GRADE_NAMES = [
  "No DR",
  "Mild DR",
  "Moderate DR",
  "Severe DR",
  "Proliferative DR",
];

export function gradeLabel(grade: number): string {
  return `${grade} - ${GRADE_NAMES[grade] ?? "Unknown"}`;
}

function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function renderProbabilityChart(probabilities: number[]): string {
  const top = probabilities.indexOf(Math.max(...probabilities));
  const bars = probabilities
    .map((p, grade) => {
      const pct = (p * 100).toFixed(1);
      const cls = grade === top ? "bar top" : "bar";
      return (
        `<div class="prob-row" data-grade="${grade}">` +
        `<span class="prob-label">${escapeHtml(gradeLabel(grade))}</span>` +
        `<div class="${cls}" style="width:${pct}%" data-value="${pct}"></div>` +
        `<span class="prob-value">${pct}%</span>` +
        `</div>`
      );
    })
    .join("");
  return `<div class="prob-chart">${bars}</div>`;
}

export function renderPrediction(state: SessionSnapshot): string {
  if (state.phase === "predicting") {
    return `<p class="status">Grading…</p>`;
  }
  const pred = state.prediction;
  if (!pred) {
    return "";
  }
  const image = state.showOverlay && pred.overlay_png
    ? `<img class="viewer" alt="attribution overlay" src="data:image/png;base64,${pred.overlay_png}">`
    : state.previewUrl
      ? `<img class="viewer" alt="uploaded fundus image" src="${escapeHtml(state.previewUrl)}">`
      : "";
  const toggleText = state.showOverlay ? "Show original" : "Show overlay";
  const gapRow = pred.completeness_gap === null
    ? ""
    : `<details class="model-details"><summary>Model details</summary>` +
      `<p>Model: <span id="model-id">${escapeHtml(pred.model_id)}</span></p>` +
      `<p>Attribution completeness gap: ${pred.completeness_gap.toExponential(3)}</p>` +
      `</details>`;
  return (
    `<h2 class="grade">${escapeHtml(gradeLabel(pred.grade))}</h2>` +
    renderProbabilityChart(pred.probabilities) +
    image +
    `<button id="overlay-toggle">${toggleText}</button>` +
    gapRow
  );
}

export function renderFeedbackPrompt(state: SessionSnapshot): string {
  if (state.phase !== "predicted") {
    return "";
  }
  if (state.confirmedRecordId !== null) {
    return `<p class="feedback-ack">Feedback recorded (record #${state.confirmedRecordId}). Thank you.</p>`;
  }
  const buttons = GRADE_NAMES.map((_, grade) => {
    const sel = state.feedbackDraft === grade ? "grade-btn selected" : "grade-btn";
    return `<button class="${sel}" data-grade="${grade}">${escapeHtml(gradeLabel(grade))}</button>`;
  }).join("");
  const disabled =
    state.feedbackDraft === null || state.feedbackPending ? " disabled" : "";
  return (
    `<div class="feedback"><p>Which grade do you consider correct?</p>` +
    `<div class="grade-buttons">${buttons}</div>` +
    `<button id="feedback-submit"${disabled}>Submit feedback</button></div>`
  );
}

export function renderError(message: string | null): string {
  return message ? `<p class="error">${escapeHtml(message)}</p>` : "";
}

export function renderModelList(models: ModelInfo[]): string {
  const rows = models
    .map((m) => {
      const marker = m.active ? ` <span class="active-marker">(active)</span>` : "";
      const button = m.active
        ? ""
        : `<button class="activate-btn" data-model="${escapeHtml(m.model_id)}">Activate</button>`;
      return `<li data-model="${escapeHtml(m.model_id)}">${escapeHtml(m.model_id)}${marker} ${button}</li>`;
    })
    .join("");
  return `<ul class="model-list">${rows}</ul>`;
}

export function describeApiError(code: string, message: string): string {
  switch (code) {
    case "bad_image":
      return "Unsupported image: please upload a PNG or JPEG fundus photograph.";
    case "too_large":
      return "Image too large: the limit is 20 MB.";
    case "unknown_request":
      return "This prediction has expired; please re-run it before submitting feedback.";
    case "no_active_model":
      return "The service has no active model; ask an administrator to activate one.";
    case "unauthorized":
      return "Admin token required.";
    default:
      return `${code}: ${message}`;
  }
}

export function renderPredictionView(state: SessionSnapshot): string {
  return renderError(state.error) + renderPrediction(state) + renderFeedbackPrompt(state);
}
