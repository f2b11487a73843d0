/** Typed client for the session service JSON API. */

import type { RleMask } from "./rle.js";

export type Polarity = "positive" | "negative";

export interface SessionInfo {
  session_id: string;
  width: number;
  height: number;
}

export interface Region {
  top: number;
  left: number;
  height: number;
  width: number;
  target_h: number;
  target_w: number;
}

export interface ClickResponse {
  mask: RleMask;
  prob_png_url: string;
  step: number;
  region: Region | null;
  iou: number | null;
}

export interface SessionDetails extends SessionInfo {
  step: number;
  clicks: { row: number; col: number; polarity: Polarity; step: number }[];
  has_ground_truth: boolean;
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

type FetchLike = typeof fetch;

async function parse<T>(resp: Response): Promise<T> {
  if (!resp.ok) {
    let detail = resp.statusText;
    try {
      const body = (await resp.json()) as { error?: string };
      if (body.error) detail = body.error;
    } catch {
      /* body was not JSON */
    }
    throw new ApiError(resp.status, detail);
  }
  return (await resp.json()) as T;
}

export class SessionApi {
  constructor(
    private base: string = "",
    private fetchFn: FetchLike = fetch,
  ) {}

  private url(path: string): string {
    return `${this.base}${path}`;
  }

  async createGenerated(kind: string, seed: number): Promise<SessionInfo> {
    const resp = await this.fetchFn(this.url("/sessions"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ generate: { kind, seed } }),
    });
    return parse<SessionInfo>(resp);
  }

  async createFromImage(pngBase64: string): Promise<SessionInfo> {
    const resp = await this.fetchFn(this.url("/sessions"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ image_png_base64: pngBase64 }),
    });
    return parse<SessionInfo>(resp);
  }

  async details(id: string): Promise<SessionDetails> {
    return parse<SessionDetails>(await this.fetchFn(this.url(`/sessions/${id}`)));
  }

  async click(id: string, row: number, col: number, polarity: Polarity): Promise<ClickResponse> {
    const resp = await this.fetchFn(this.url(`/sessions/${id}/clicks`), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ row, col, polarity }),
    });
    return parse<ClickResponse>(resp);
  }

  async undo(id: string): Promise<ClickResponse> {
    const resp = await this.fetchFn(this.url(`/sessions/${id}/undo`), {
      method: "POST",
    });
    return parse<ClickResponse>(resp);
  }

  async remove(id: string): Promise<void> {
    const resp = await this.fetchFn(this.url(`/sessions/${id}`), { method: "DELETE" });
    if (!resp.ok && resp.status !== 404) {
      throw new ApiError(resp.status, resp.statusText);
    }
  }

  imageUrl(id: string): string {
    return this.url(`/sessions/${id}/image.png`);
  }
}
