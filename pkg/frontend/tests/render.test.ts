import { describe, expect, it, vi } from "vitest";

import { GradingApi } from "../src/api.js";
import { AdminController } from "../src/admin.js";
import {
  gradeLabel,
  renderFeedbackPrompt,
  renderModelList,
  renderPrediction,
  renderProbabilityChart,
} from "../src/render.js";
import { UiSession } from "../src/state.js";

describe("probability chart", () => {
  it("renders 5 bars whose widths match the response values", () => {
    const probs = [0.1, 0.2, 0.3, 0.2, 0.2];
    const html = renderProbabilityChart(probs);
    const widths = [...html.matchAll(/data-value="([\d.]+)"/g)].map((m) => m[1]);
    expect(widths).toEqual(["10.0", "20.0", "30.0", "20.0", "20.0"]);
    expect([...html.matchAll(/class="bar/g)]).toHaveLength(5);
  });

  it("highlights the argmax bar (grade 2 for this distribution)", () => {
    const html = renderProbabilityChart([0.1, 0.2, 0.3, 0.2, 0.2]);
    const rows = html.split("prob-row").slice(1);
    expect(rows[2]).toContain('class="bar top"');
    expect(rows[0]).not.toContain("bar top");
  });
});

describe("grade labels", () => {
  it("pairs numbers with the clinical names", () => {
    expect(gradeLabel(0)).toBe("0 - No DR");
    expect(gradeLabel(2)).toBe("2 - Moderate DR");
    expect(gradeLabel(4)).toBe("4 - Proliferative DR");
  });
});

describe("prediction view", () => {
  function predictedSession() {
    const session = new UiSession();
    session.startPrediction();
    session.setPreview("blob:orig");
    session.predictionSucceeded({
      request_id: "r",
      grade: 2,
      probabilities: [0.1, 0.2, 0.3, 0.2, 0.2],
      model_id: "base",
      overlay_png: "b3Y=",
      completeness_gap: 0.002,
    });
    return session;
  }

  it("shows the backend grade verbatim, never a recomputed one", () => {
    const session = predictedSession();
    const html = renderPrediction(session.snapshot());
    expect(html).toContain("2 - Moderate DR");
    expect(html).toContain('id="model-id">base');
  });

  it("switches between overlay and original on toggle", () => {
    const session = predictedSession();
    let html = renderPrediction(session.snapshot());
    expect(html).toContain("data:image/png;base64,b3Y=");
    expect(html).toContain("Show original");
    session.toggleOverlay();
    html = renderPrediction(session.snapshot());
    expect(html).toContain("blob:orig");
    expect(html).toContain("Show overlay");
  });

  it("disables feedback submission until a grade is chosen", () => {
    const session = predictedSession();
    let html = renderFeedbackPrompt(session.snapshot());
    expect(html).toContain("disabled");
    session.selectGrade(4);
    html = renderFeedbackPrompt(session.snapshot());
    expect(html).not.toContain("disabled");
    expect(html).toContain('class="grade-btn selected" data-grade="4"');
  });

  it("confirms a recorded submission with its record id", () => {
    const session = predictedSession();
    session.selectGrade(1);
    session.feedbackSubmitStarted();
    session.feedbackConfirmed(42);
    const html = renderFeedbackPrompt(session.snapshot());
    expect(html).toContain("record #42");
  });
});

describe("admin dashboard", () => {
  function adminWith(responses: Array<() => Response>, confirmed = true) {
    const fetchStub = vi.fn(async () => {
      const next = responses.shift();
      if (!next) throw new Error("unexpected request");
      return next();
    });
    const api = new GradingApi("", fetchStub as typeof fetch);
    return new AdminController(api, () => confirmed);
  }

  const listBody = (active: string) => () =>
    new Response(
      JSON.stringify({
        request_id: "x",
        models: [
          { model_id: "base", active: active === "base" },
          { model_id: "v2", active: active === "v2" },
        ],
      }),
      { status: 200 },
    );

  it("marks the active model in the list", async () => {
    const admin = adminWith([listBody("base")]);
    await admin.enterToken("tok");
    const html = renderModelList(admin.models);
    const items = html.split("<li").slice(1);
    expect(items[0]).toContain("(active)");
    expect(items[1]).not.toContain("(active)");
    expect(items[1]).toContain("activate-btn");
  });

  it("activation updates the displayed active model", async () => {
    const admin = adminWith([
      listBody("base"),
      () => new Response(JSON.stringify({ model_id: "v2", active: true }), { status: 200 }),
      listBody("v2"),
    ]);
    await admin.enterToken("tok");
    expect(admin.activeModelId()).toBe("base");
    expect(await admin.activate("v2")).toBe(true);
    expect(admin.activeModelId()).toBe("v2");
    expect(renderModelList(admin.models).split("<li")[2]).toContain("(active)");
  });

  it("declining the confirmation dialog sends nothing", async () => {
    const admin = adminWith([listBody("base")], false);
    await admin.enterToken("tok");
    expect(await admin.activate("v2")).toBe(false);
    expect(admin.activeModelId()).toBe("base");
  });

  it("401 routes back to the token prompt", async () => {
    const admin = adminWith([
      () =>
        new Response(
          JSON.stringify({ error: { code: "unauthorized", message: "admin token required" } }),
          { status: 401 },
        ),
    ]);
    expect(await admin.enterToken("wrong")).toBe(false);
    expect(admin.needsToken).toBe(true);
  });

  it("failed checkpoint upload keeps the list unchanged and surfaces the error", async () => {
    const admin = adminWith([
      listBody("base"),
      () =>
        new Response(
          JSON.stringify({ error: { code: "invalid_checkpoint", message: "truncated" } }),
          { status: 400 },
        ),
    ]);
    await admin.enterToken("tok");
    const before = admin.models;
    expect(await admin.upload("broken", new Blob([1 as unknown as BlobPart]))).toBe(false);
    expect(admin.models).toEqual(before);
    expect(admin.error).toContain("invalid_checkpoint");
  });
});
