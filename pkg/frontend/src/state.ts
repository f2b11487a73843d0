/**
 * Server-authoritative session store.
 *
 * Clicks draw an optimistic marker immediately; the confirmed click list,
 * mask, step counter, zoom region and IoU are always reconciled from the
 * server response (a failed click rolls the marker back).  Only one
 * mutation is in flight at a time; further actions queue behind it.
 */

import { ApiError, ClickResponse, Polarity, Region, SessionApi, SessionInfo } from "./api.js";
import { RleMask, decodeRle } from "./rle.js";

export interface UiClick {
  row: number;
  col: number;
  polarity: Polarity;
  step: number;
}

export interface UiState {
  session: SessionInfo | null;
  clicks: UiClick[];
  pending: UiClick | null;
  mask: Uint8Array | null;
  maskRle: RleMask | null;
  region: Region | null;
  iou: number | null;
  step: number;
  overlayOpacity: number;
  showRegion: boolean;
  busy: boolean;
  error: string | null;
}

type Listener = (state: UiState) => void;

export class SessionStore {
  state: UiState = {
    session: null,
    clicks: [],
    pending: null,
    mask: null,
    maskRle: null,
    region: null,
    iou: null,
    step: 0,
    overlayOpacity: 0.45,
    showRegion: true,
    busy: false,
    error: null,
  };

  private listeners: Listener[] = [];
  private chain: Promise<unknown> = Promise.resolve();

  constructor(private api: SessionApi) {}

  subscribe(fn: Listener): () => void {
    this.listeners.push(fn);
    fn(this.state);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== fn);
    };
  }

  private emit(patch: Partial<UiState>): void {
    this.state = { ...this.state, ...patch };
    for (const fn of this.listeners) fn(this.state);
  }

  /** Serialize mutations: each runs only after the previous settles. */
  private enqueue<T>(work: () => Promise<T>): Promise<T> {
    const next = this.chain.then(work, work);
    this.chain = next.catch(() => undefined);
    return next;
  }

  async newGenerated(kind: string, seed: number): Promise<void> {
    return this.enqueue(async () => {
      this.emit({ busy: true, error: null });
      try {
        const session = await this.api.createGenerated(kind, seed);
        this.emit({
          session, clicks: [], pending: null, mask: null, maskRle: null,
          region: null, iou: null, step: 0, busy: false,
        });
      } catch (err) {
        this.emit({ busy: false, error: describe(err) });
        throw err;
      }
    });
  }

  async newFromImage(pngBase64: string): Promise<void> {
    return this.enqueue(async () => {
      this.emit({ busy: true, error: null });
      try {
        const session = await this.api.createFromImage(pngBase64);
        this.emit({
          session, clicks: [], pending: null, mask: null, maskRle: null,
          region: null, iou: null, step: 0, busy: false,
        });
      } catch (err) {
        this.emit({ busy: false, error: describe(err) });
        throw err;
      }
    });
  }

  async placeClick(row: number, col: number, polarity: Polarity): Promise<ClickResponse | null> {
    return this.enqueue(async () => {
      const session = this.state.session;
      if (!session) return null;
      const optimistic: UiClick = { row, col, polarity, step: this.state.step + 1 };
      this.emit({ pending: optimistic, busy: true, error: null });
      try {
        const resp = await this.api.click(session.session_id, row, col, polarity);
        this.applyResponse(resp, [...this.state.clicks, { ...optimistic, step: resp.step }]);
        return resp;
      } catch (err) {
        // roll the optimistic marker back, surface the failure
        this.emit({ pending: null, busy: false, error: describe(err) });
        if (err instanceof ApiError) return null;
        throw err;
      }
    });
  }

  async undo(): Promise<ClickResponse | null> {
    return this.enqueue(async () => {
      const session = this.state.session;
      if (!session) return null;
      this.emit({ busy: true, error: null });
      try {
        const resp = await this.api.undo(session.session_id);
        this.applyResponse(resp, this.state.clicks.slice(0, -1));
        return resp;
      } catch (err) {
        this.emit({ busy: false, error: describe(err) });
        if (err instanceof ApiError) return null;
        throw err;
      }
    });
  }

  /** Undo everything, returning the session to step zero. */
  async reset(): Promise<void> {
    return this.enqueue(async () => {
      const session = this.state.session;
      if (!session) return;
      this.emit({ busy: true, error: null });
      try {
        while (this.state.step > 0) {
          const resp = await this.api.undo(session.session_id);
          this.applyResponse(resp, this.state.clicks.slice(0, -1));
        }
        this.emit({ busy: false });
      } catch (err) {
        this.emit({ busy: false, error: describe(err) });
      }
    });
  }

  /** Purely cosmetic: no network request. */
  setOverlayOpacity(value: number): void {
    this.emit({ overlayOpacity: Math.min(1, Math.max(0, value)) });
  }

  toggleRegion(show: boolean): void {
    this.emit({ showRegion: show });
  }

  private applyResponse(resp: ClickResponse, clicks: UiClick[]): void {
    this.emit({
      clicks: clicks.slice(0, resp.step),
      pending: null,
      mask: decodeRle(resp.mask),
      maskRle: resp.mask,
      region: resp.region,
      iou: resp.iou,
      step: resp.step,
      busy: false,
    });
  }
}

function describe(err: unknown): string {
  if (err instanceof ApiError) return `${err.status}: ${err.message}`;
  return err instanceof Error ? err.message : String(err);
}
