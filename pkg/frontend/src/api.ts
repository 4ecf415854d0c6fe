/** Thin fetch client for the experiment service. */

import { BackendEntry, ExperimentDoc, SysCfgDoc, SystemEntry } from "./model.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    detail: string,
  ) {
    super(detail);
  }
}

export class ApiClient {
  constructor(
    private baseUrl: string = "",
    private token: string | null = null,
  ) {}

  private headers(extra: Record<string, string> = {}): Record<string, string> {
    return this.token ? { Authorization: `Bearer ${this.token}`, ...extra } : extra;
  }

  private async request<T>(method: string, path: string, init: RequestInit = {}): Promise<T> {
    const response = await fetch(`${this.baseUrl}${path}`, {
      method,
      ...init,
      headers: this.headers((init.headers as Record<string, string>) ?? {}),
    });
    if (!response.ok) {
      let code = "error";
      let detail = response.statusText;
      try {
        const body = await response.json();
        code = body.error ?? code;
        detail = body.detail ?? detail;
      } catch {
        /* non-JSON error body */
      }
      throw new ApiError(response.status, code, detail);
    }
    return (await response.json()) as T;
  }

  systems(): Promise<SystemEntry[]> {
    return this.request("GET", "/v1/systems");
  }

  backends(): Promise<BackendEntry[]> {
    return this.request("GET", "/v1/backends");
  }

  createExperiment(name: string, version: string, backend?: string): Promise<ExperimentDoc> {
    return this.request("POST", "/v1/experiments", {
      body: JSON.stringify({ system_name: name, system_version: version, backend }),
      headers: { "Content-Type": "application/json" },
    });
  }

  listExperiments(): Promise<{ experiments: ExperimentDoc[]; total: number }> {
    return this.request("GET", "/v1/experiments?limit=200");
  }

  experiment(id: string): Promise<ExperimentDoc> {
    return this.request("GET", `/v1/experiments/${id}`);
  }

  configure(id: string, body: SysCfgDoc): Promise<ExperimentDoc> {
    return this.request("PUT", `/v1/experiments/${id}/config`, {
      body: JSON.stringify(body),
      headers: { "Content-Type": "application/json" },
    });
  }

  async uploadInput(id: string, param: string, file: File): Promise<void> {
    await this.request("POST", `/v1/experiments/${id}/inputs/${param}`, {
      body: file,
      headers: { "X-Filename": file.name, "Content-Type": "application/octet-stream" },
    });
  }

  build(id: string): Promise<{ state: string }> {
    return this.request("POST", `/v1/experiments/${id}/build`);
  }

  run(id: string): Promise<{ state: string }> {
    return this.request("POST", `/v1/experiments/${id}/run`);
  }

  state(id: string, known?: string, waitS?: number): Promise<{ state: string; state_reason: string | null }> {
    const params = new URLSearchParams();
    if (known) params.set("known", known);
    if (waitS) params.set("wait_s", String(waitS));
    const query = params.toString();
    return this.request("GET", `/v1/experiments/${id}/state${query ? "?" + query : ""}`);
  }

  async log(id: string, action: "build" | "run"): Promise<string> {
    const response = await fetch(`${this.baseUrl}/v1/experiments/${id}/log/${action}`, {
      headers: this.headers(),
    });
    if (!response.ok) return "(no log captured)";
    return response.text();
  }

  resultUrl(id: string, key: string): string {
    return `${this.baseUrl}/v1/experiments/${id}/results/${key}`;
  }
}
