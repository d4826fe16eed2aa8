/**
 * Session state for one browser tab.
 *
 * Invariants enforced here rather than in the DOM layer: at most one
 * in-flight prediction, feedback only after a successful prediction,
 * submission disabled while pending or without a selected grade, and the
 * overlay toggle flips purely in memory (never re-requests).
 */

import type { PredictResponse } from "./api.js";

export type Phase = "idle" | "predicting" | "predicted";

export interface SessionSnapshot {
  phase: Phase;
  previewUrl: string | null;
  prediction: PredictResponse | null;
  showOverlay: boolean;
  feedbackDraft: number | null;
  feedbackPending: boolean;
  confirmedRecordId: number | null;
  error: string | null;
}

export class UiSession {
  private phase: Phase = "idle";
  private previewUrl: string | null = null;
  private prediction: PredictResponse | null = null;
  private showOverlay = true;
  private feedbackDraft: number | null = null;
  private feedbackPending = false;
  private confirmedRecordId: number | null = null;
  private error: string | null = null;

  snapshot(): SessionSnapshot {
    return {
      phase: this.phase,
      previewUrl: this.previewUrl,
      prediction: this.prediction,
      showOverlay: this.showOverlay,
      feedbackDraft: this.feedbackDraft,
      feedbackPending: this.feedbackPending,
      confirmedRecordId: this.confirmedRecordId,
      error: this.error,
    };
  }

  setPreview(url: string): void {
    this.previewUrl = url;
  }

  startPrediction(): boolean {
    if (this.phase === "predicting") {
      return false; // one in-flight prediction at a time
    }
    this.phase = "predicting";
    this.prediction = null;
    this.feedbackDraft = null;
    this.feedbackPending = false;
    this.confirmedRecordId = null;
    this.error = null;
    return true;
  }

  predictionSucceeded(response: PredictResponse): void {
    this.phase = "predicted";
    this.prediction = response;
    this.showOverlay = true;
  }

  predictionFailed(message: string): void {
    this.phase = "idle";
    this.prediction = null;
    this.error = message;
  }

  toggleOverlay(): void {
    if (this.prediction) {
      this.showOverlay = !this.showOverlay;
    }
  }

  /** The image the viewer should show right now (original vs overlay). */
  displayedImage(): string | null {
    if (this.phase === "predicted" && this.showOverlay && this.prediction?.overlay_png) {
      return `data:image/png;base64,${this.prediction.overlay_png}`;
    }
    return this.previewUrl;
  }

  selectGrade(grade: number): void {
    if (this.phase !== "predicted" || this.feedbackPending) {
      return;
    }
    if (grade < 0 || grade > 4 || !Number.isInteger(grade)) {
      return;
    }
    this.feedbackDraft = grade;
  }

  canSubmitFeedback(): boolean {
    return (
      this.phase === "predicted" &&
      this.feedbackDraft !== null &&
      !this.feedbackPending &&
      this.confirmedRecordId === null
    );
  }

  feedbackSubmitStarted(): boolean {
    if (!this.canSubmitFeedback()) {
      return false;
    }
    this.feedbackPending = true;
    this.error = null;
    return true;
  }

  feedbackConfirmed(recordId: number): void {
    this.feedbackPending = false;
    this.confirmedRecordId = recordId;
  }

  feedbackFailed(message: string): void {
    this.feedbackPending = false;
    this.error = message;
  }
}
