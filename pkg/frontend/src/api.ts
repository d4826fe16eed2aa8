/**
 * Typed client for the grading service JSON API.
 *
 * Every displayed number originates from these responses; the UI never
 * computes grades or probabilities itself.
 */

export interface PredictResponse {
  request_id: string;
  grade: number;
  probabilities: number[];
  model_id: string;
  overlay_png: string | null;
  completeness_gap: number | null;
}

export interface FeedbackAck {
  request_id: string;
  record_id: number;
}

export interface ModelInfo {
  model_id: string;
  active: boolean;
}

export interface HealthInfo {
  status: string;
  active_model_id: string | null;
  feedback_count: number;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

async function parseError(resp: Response): Promise<ApiError> {
  let code = "unknown";
  let message = `HTTP ${resp.status}`;
  try {
    const body = await resp.json();
    if (body?.error) {
      code = body.error.code ?? code;
      message = body.error.message ?? message;
    }
  } catch {
    // non-JSON error body; keep the generic message
  }
  return new ApiError(resp.status, code, message);
}

export class GradingApi {
  constructor(
    private baseUrl: string = "",
    private fetchImpl: typeof fetch = globalThis.fetch?.bind(globalThis),
  ) {}

  private async request(path: string, init?: RequestInit): Promise<Response> {
    const resp = await this.fetchImpl(this.baseUrl + path, init);
    if (!resp.ok) {
      throw await parseError(resp);
    }
    return resp;
  }

  async predict(image: Blob, opts?: { igSteps?: number }): Promise<PredictResponse> {
    const form = new FormData();
    form.append("image", image, "upload.png");
    const params = new URLSearchParams();
    if (opts?.igSteps !== undefined) {
      params.set("ig_steps", String(opts.igSteps));
    }
    const query = params.toString() ? `?${params}` : "";
    const resp = await this.request(`/api/predict${query}`, {
      method: "POST",
      body: form,
    });
    return resp.json();
  }

  async submitFeedback(requestId: string, clinicianGrade: number): Promise<FeedbackAck> {
    const resp = await this.request("/api/feedback", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ request_id: requestId, clinician_grade: clinicianGrade }),
    });
    return resp.json();
  }

  private adminHeaders(token: string): Record<string, string> {
    return { Authorization: `Bearer ${token}` };
  }

  async listModels(token: string): Promise<ModelInfo[]> {
    const resp = await this.request("/api/models", {
      headers: this.adminHeaders(token),
    });
    return (await resp.json()).models;
  }

  async uploadModel(token: string, modelId: string, checkpoint: Blob): Promise<void> {
    const form = new FormData();
    form.append("model_id", modelId);
    form.append("checkpoint", checkpoint, `${modelId}.ckpt`);
    await this.request("/api/models", {
      method: "POST",
      headers: this.adminHeaders(token),
      body: form,
    });
  }

  async activateModel(token: string, modelId: string): Promise<void> {
    await this.request(`/api/models/${encodeURIComponent(modelId)}/activate`, {
      method: "POST",
      headers: this.adminHeaders(token),
    });
  }

  async health(): Promise<HealthInfo> {
    const resp = await this.request("/api/health");
    return resp.json();
  }
}
