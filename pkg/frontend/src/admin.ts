/**
 * Admin dashboard controller: token-guarded model listing, checkpoint
 * upload, and activation behind a confirmation dialog.
 */

import { ApiError, GradingApi, type ModelInfo } from "./api.js";

export class AdminController {
  token: string | null = null;
  models: ModelInfo[] = [];
  needsToken = true;
  error: string | null = null;

  constructor(
    private api: GradingApi,
    private confirmFn: (message: string) => boolean,
  ) {}

  async enterToken(token: string): Promise<boolean> {
    this.token = token;
    return this.refresh();
  }

  async refresh(): Promise<boolean> {
    if (this.token === null) {
      this.needsToken = true;
      return false;
    }
    try {
      this.models = await this.api.listModels(this.token);
      this.needsToken = false;
      this.error = null;
      return true;
    } catch (err) {
      if (err instanceof ApiError && err.status === 401) {
        this.needsToken = true;
        this.token = null;
        this.error = null;
        return false;
      }
      this.error = err instanceof Error ? err.message : String(err);
      return false;
    }
  }

  async activate(modelId: string): Promise<boolean> {
    if (this.token === null) {
      this.needsToken = true;
      return false;
    }
    if (!this.confirmFn(`Activate model "${modelId}" for all predictions?`)) {
      return false;
    }
    try {
      await this.api.activateModel(this.token, modelId);
    } catch (err) {
      this.error = err instanceof ApiError ? `${err.code}: ${err.message}` : String(err);
      return false;
    }
    return this.refresh();
  }

  async upload(modelId: string, checkpoint: Blob): Promise<boolean> {
    if (this.token === null) {
      this.needsToken = true;
      return false;
    }
    try {
      await this.api.uploadModel(this.token, modelId, checkpoint);
    } catch (err) {
      this.error = err instanceof ApiError ? `${err.code}: ${err.message}` : String(err);
      return false;
    }
    return this.refresh();
  }

  activeModelId(): string | null {
    return this.models.find((m) => m.active)?.model_id ?? null;
  }
}
