/**
 * End-to-end equivalence against the live Python service.
 *
 * Drives the exact client code the browser uses (SessionApi + SessionStore)
 * through a scripted 3-click session and asserts the resulting mask RLE is
 * identical to replaying the same clicks directly through the library.
 * Also checks that undo restores bit-identical state over the wire.
 */

import { spawn, spawnSync, type ChildProcess } from "node:child_process";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { SessionApi } from "../src/api.js";
import { masksEqual, type RleMask } from "../src/rle.js";
import { SessionStore } from "../src/state.js";

const PORT = 8931;
const BASE = `http://127.0.0.1:${PORT}`;
const SCENE = { seed: 5, kind: "blob" };
const SCRIPT: Array<[number, number, "positive" | "negative"]> = [
  [30, 40, "positive"],
  [50, 100, "negative"],
  [60, 70, "positive"],
];

let server: ChildProcess | null = null;

async function waitForServer(): Promise<void> {
  for (let i = 0; i < 120; i++) {
    try {
      const resp = await fetch(`${BASE}/sessions/nope`);
      if (resp.status === 404) return;
    } catch {
      /* not up yet */
    }
    await new Promise((r) => setTimeout(r, 500));
  }
  throw new Error("service did not come up");
}

beforeAll(async () => {
  server = spawn(
    "python3",
    ["-c",
      "import uvicorn; from clickseg.service import create_app; " +
      `uvicorn.run(create_app(seed=0), host='127.0.0.1', port=${PORT}, log_level='warning')`],
    { stdio: ["ignore", "inherit", "inherit"] },
  );
  await waitForServer();
}, 90_000);

afterAll(() => {
  server?.kill();
});

function libraryReplay(): RleMask[] {
  const payload = JSON.stringify({
    scene: SCENE,
    model_seed: 0,
    clicks: SCRIPT.map(([row, col, polarity]) => ({ row, col, polarity })),
  });
  const proc = spawnSync("python3", [new URL("./replay_clicks.py", import.meta.url).pathname], {
    input: payload,
    encoding: "utf-8",
    maxBuffer: 64 * 1024 * 1024,
  });
  if (proc.status !== 0) throw new Error(`replay failed: ${proc.stderr}`);
  return (JSON.parse(proc.stdout) as { masks: RleMask[] }).masks;
}

describe("browser client against the live service", () => {
  it("3-click session produces RLE identical to a direct library replay", async () => {
    const api = new SessionApi(BASE);
    const store = new SessionStore(api);
    await store.newGenerated(SCENE.kind, SCENE.seed);
    expect(store.state.session).not.toBeNull();

    const uiMasks: RleMask[] = [];
    for (const [row, col, polarity] of SCRIPT) {
      const resp = await store.placeClick(row, col, polarity);
      expect(resp).not.toBeNull();
      uiMasks.push(resp!.mask);
    }
    expect(store.state.step).toBe(3);
    expect(store.state.clicks).toHaveLength(3);

    const libMasks = libraryReplay();
    expect(libMasks).toHaveLength(uiMasks.length);
    for (let i = 0; i < uiMasks.length; i++) {
      expect(masksEqual(uiMasks[i], libMasks[i]), `mask after click ${i + 1}`).toBe(true);
    }
  }, 120_000);

  it("undo restores bit-identical state and replays identically", async () => {
    const api = new SessionApi(BASE);
    const store = new SessionStore(api);
    await store.newGenerated(SCENE.kind, SCENE.seed);
    const first = await store.placeClick(...SCRIPT[0]);
    const second = await store.placeClick(...SCRIPT[1]);
    const undone = await store.undo();
    expect(undone!.step).toBe(1);
    expect(masksEqual(undone!.mask, first!.mask)).toBe(true);

    const replayed = await store.placeClick(...SCRIPT[1]);
    expect(masksEqual(replayed!.mask, second!.mask)).toBe(true);

    // server remains the source of truth for the click list
    const details = await api.details(store.state.session!.session_id);
    expect(details.clicks.map((c) => [c.row, c.col])).toEqual(
      store.state.clicks.map((c) => [c.row, c.col]),
    );
  }, 120_000);

  it("server-side duplicate rejection rolls back the optimistic click", async () => {
    const api = new SessionApi(BASE);
    const store = new SessionStore(api);
    await store.newGenerated(SCENE.kind, SCENE.seed);
    await store.placeClick(10, 10, "positive");
    await store.placeClick(10, 10, "negative");   // duplicate pixel -> 409
    expect(store.state.step).toBe(1);
    expect(store.state.clicks).toHaveLength(1);
    expect(store.state.error).toMatch(/409/);
  }, 120_000);
});
